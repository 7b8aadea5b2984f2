"""Piecewise-linear envelopes and the closed-form power-law integrals taken over them.

Both the value function and the kappa tail integrals reduce, atom by atom, to
integrating a power of a convex (or concave) piecewise-linear function of one
variable. The envelope is computed once, then each affine piece is integrated in
closed form.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Envelope:
    """Pieces [lo_i, hi_i) on which line index_i attains the envelope."""
    lo: np.ndarray
    hi: np.ndarray
    index: np.ndarray
    intercepts: np.ndarray
    slopes: np.ndarray

    @property
    def piece_intercepts(self) -> np.ndarray:
        return self.intercepts[self.index]

    @property
    def piece_slopes(self) -> np.ndarray:
        return self.slopes[self.index]


def upper_envelope(intercepts, slopes, start: float) -> Envelope:
    """Upper envelope of the lines c_j + d_j r over [start, inf)."""
    c = np.asarray(intercepts, dtype=float)
    d = np.asarray(slopes, dtype=float)
    if c.size == 0:
        raise ValueError("upper_envelope needs at least one line")

    values = c + d * start
    top = values.max()
    # Ties at the start go to the steepest line, it stays on top longest.
    candidates = np.flatnonzero(values >= top - 1e-12 * max(1.0, abs(top)))
    current = candidates[np.argmax(d[candidates])]

    lo, hi, idx = [], [], []
    left = float(start)
    while True:
        steeper = np.flatnonzero(d > d[current])
        if steeper.size == 0:
            lo.append(left)
            hi.append(np.inf)
            idx.append(current)
            break
        cross = (c[current] - c[steeper]) / (d[steeper] - d[current])
        cross = np.maximum(cross, left)
        first = cross.min()
        ties = steeper[cross <= first]
        nxt = ties[np.argmax(d[ties])]
        if first > left:
            lo.append(left)
            hi.append(float(first))
            idx.append(current)
        left = float(first)
        current = nxt

    return Envelope(np.array(lo), np.array(hi), np.array(idx, dtype=int), c, d)


def lower_envelope(intercepts, slopes, start: float) -> Envelope:
    """Lower envelope of the lines c_j + d_j u over [start, inf)."""
    c = np.asarray(intercepts, dtype=float)
    d = np.asarray(slopes, dtype=float)
    flipped = upper_envelope(-c, -d, start)
    return Envelope(flipped.lo, flipped.hi, flipped.index, c, d)


def pareto_partial_mean(intercept, slope, lo, hi, alpha: float, xm: float):
    """Integral of (intercept + slope*r) against the Pareto(alpha, xm) density over [lo, hi).

    Requires xm <= lo. hi may be infinite.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    scale = xm**alpha
    with np.errstate(divide="ignore", over="ignore"):
        mass = lo**-alpha - np.where(np.isinf(hi), 0.0, hi**-alpha)
        first_moment = lo ** (1.0 - alpha) - np.where(np.isinf(hi), 0.0, hi ** (1.0 - alpha))
    return scale * (intercept * mass + slope * alpha / (alpha - 1.0) * first_moment)


def power_piece_integral(intercept, slope, lo, hi, alpha: float):
    """Integral of (intercept + slope*u)^(-alpha) over [lo, hi), slope > 0, alpha > 1."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    left = (intercept + slope * lo) ** (1.0 - alpha)
    with np.errstate(over="ignore"):
        right = np.where(np.isinf(hi), 0.0, (intercept + slope * np.where(np.isinf(hi), 0.0, hi)) ** (1.0 - alpha))
    return (left - right) / (slope * (alpha - 1.0))


def power_tail_integral(envelope: Envelope, alpha: float, t) -> np.ndarray:
    """Integral over [t, inf) of the envelope raised to -alpha, vectorized in t.

    Each t must lie at or beyond the envelope start.
    """
    t = np.atleast_1d(np.asarray(t, dtype=float))
    c = envelope.piece_intercepts
    d = envelope.piece_slopes
    full = power_piece_integral(c, d, envelope.lo, envelope.hi, alpha)
    suffix = np.concatenate([np.cumsum(full[::-1])[::-1], [0.0]])

    piece = np.searchsorted(envelope.lo, t, side="right") - 1
    piece = np.clip(piece, 0, len(full) - 1)
    head = power_piece_integral(c[piece], d[piece], t, envelope.hi[piece], alpha)
    return head + suffix[piece + 1]
