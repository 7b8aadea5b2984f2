"""Counter-based random streams.

Every simulated path owns a stream derived from (master seed, purpose, path index)
through a SeedSequence feeding a Philox bit generator, so a path's draws never depend
on which worker runs it or in what order.
"""

import numpy as np

# Stream families. Paths of different families never share draws for the same index.
PATHS = 0
CONDITIONAL_ORACLE = 1
PILOT = 2
CHECKS = 3

MAX_SEED = 2**64 - 1


def path_stream(seed: int, index: int, purpose: int = PATHS) -> np.random.Generator:
    """Return the random stream of path `index` for the given master seed."""
    if not 0 <= seed <= MAX_SEED:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    sequence = np.random.SeedSequence([seed, purpose, index])
    return np.random.Generator(np.random.Philox(sequence))


def check_stream(seed: int, label: int = 0) -> np.random.Generator:
    """Stream for one-off checks (Lyapunov states, limit-law references)."""
    return path_stream(seed, label, purpose=CHECKS)
