import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from app.errors import DegenerateDirection, ValidationError
from app.services.geometry_service import (
    check_feasible, enlarge, gamma_exit, jump_region, membership, normalize_target, r_eval,
)
from app.services.increments_service import IncrementModel, SpectralMeasure

coordinate = st.floats(-50, 50)
state = st.tuples(coordinate, coordinate).map(np.array)


def test_normalization_rescales_direction_and_offset():
    spec = normalize_target([[2.0, 0.0]], [3.0])
    assert np.allclose(spec.vstar, [[1.0, 0.0]])
    assert np.allclose(spec.astar, [1.5])
    assert spec.beta == pytest.approx(15.0)
    assert np.allclose(spec.vstar.sum(axis=1), 1.0)


@pytest.mark.parametrize("direction", [[1.0, -1.0], [-1.0, 0.0], [0.0, -2.0]])
def test_directions_without_negative_drift_are_rejected(direction):
    with pytest.raises(DegenerateDirection):
        normalize_target([direction], [1.0])


def test_target_parameter_validation():
    with pytest.raises(ValidationError):
        normalize_target([[1.0, 0.0]], [0.0])
    with pytest.raises(ValidationError):
        normalize_target([[1.0, 0.0]], [1.0, 2.0])
    with pytest.raises(ValidationError):
        normalize_target([[1.0, 0.0]], [1.0], delta=1.0)


def test_enlarged_system_layout(two_direction_target):
    system = enlarge(two_direction_target, 2)
    assert system.size == 2 * 2 + 2
    assert system.m == 2
    assert np.allclose(system.offs, [1.0, 2.0, 1.0, 2.0, 20.0, 20.0])
    eta = -np.ones(2)
    # tilted copies keep the normalization
    assert np.allclose(system.vs[2:4] @ eta, -1.0)
    assert np.allclose(system.vs[4:], np.eye(2))


def test_ruin_membership_is_strict(canonical_target):
    star = canonical_target.star_system()
    assert r_eval(star, 3.0, [3.0, 0.0]) == 0.0
    assert not r_eval(star, 3.0, [3.0, 0.0]) > 0
    assert r_eval(star, 3.0, [3.0 + 1e-9, 0.0]) > 0


def test_r_eval_batches(canonical_system):
    states = np.array([[0.0, 0.0], [5.0, 0.0], [-1.0, 50.0]])
    batch = canonical_system.r(2.0, states)
    single = [canonical_system.r(2.0, s) for s in states]
    assert np.allclose(batch, single)


def test_jump_region_thresholds_and_strictness(canonical_system, canonical_target):
    s0 = np.array([0.5, -1.0])
    region = jump_region(canonical_system, 4.0, 0.9, s0)
    expected = 0.9 * (canonical_system.offs * 4.0 - canonical_system.vs @ s0)
    assert np.allclose(region.thresholds, expected)

    star_region = jump_region(canonical_target.star_system(), 4.0, 0.9, s0)
    on_boundary = np.array([star_region.thresholds[0], 0.0])
    assert not membership(star_region, on_boundary)
    assert membership(star_region, on_boundary + [1e-9, 0.0])


def test_gamma_exit_is_closed(canonical_target):
    b = 2.0
    boundary = np.array([-canonical_target.gamma * b, 0.0])
    assert gamma_exit(canonical_target, b, boundary)
    assert not gamma_exit(canonical_target, b, boundary + [1e-9, 0.0])


def test_feasibility_checks(canonical_target, canonical_model):
    check_feasible(canonical_target, canonical_model)
    sideways = IncrementModel.build(2.5, 1.0, SpectralMeasure.from_atoms([[0.0, 1.0]], [1.0]))
    with pytest.raises(ValidationError):
        check_feasible(canonical_target, sideways)
    three_d = IncrementModel.build(2.5, 1.0, SpectralMeasure.from_atoms([[1.0, 0.0, 0.0]], [1.0]))
    with pytest.raises(ValidationError):
        check_feasible(canonical_target, three_d)


@settings(deadline=None, max_examples=80)
@given(state, state, st.floats(0, 1))
def test_r_is_convex(first, second, weight):
    system = enlarge(normalize_target([[1.0, 0.0], [0.0, 1.0]], [1.0, 2.0]), 2)
    mixed = r_eval(system, 1.0, weight * first + (1 - weight) * second)
    bound = weight * r_eval(system, 1.0, first) + (1 - weight) * r_eval(system, 1.0, second)
    assert mixed <= bound + 1e-9


@settings(deadline=None, max_examples=50)
@given(state, st.floats(0.1, 100))
def test_r_scales_with_b(s, scale):
    system = enlarge(normalize_target([[1.0, 0.0]], [1.0]), 2)
    assert r_eval(system, 2.0 * scale, s * scale) == pytest.approx(scale * r_eval(system, 2.0, s), rel=1e-9, abs=1e-9)
