import math

import numpy as np
import pytest
from scipy import stats
from scipy.optimize import minimize_scalar

from app.errors import DomainViolation, InsufficientSample
from app.models.schemas import StopCause
from app.services.estimator_service import estimate_with_paths, resample_by_weight
from app.services.geometry_service import r_eval
from app.services.increments_service import IncrementModel, SpectralMeasure
from app.services.kernel_service import PathRecord
from app.services.limits_service import (
    OvershootLaw, build_hazard, get_limit_law_service, hazard_quadrature_gap, homogeneity_gap, kappa_gap,
    limit_law_tests, sample_ystar, sample_z_a_theta, sample_zstar, survival_rows, survival_tail_slope,
)
from app.utils.rng import check_stream


@pytest.fixture
def zstar_table(canonical_model, canonical_target):
    return build_hazard(canonical_model, canonical_target.star_system())


def test_single_direction_survival_is_pareto(zstar_table):
    # kappa(t) = (1+t)^-alpha, so P(Z* > t) = (1+t)^-(alpha-1)
    assert float(zstar_table.survival_at(1.0)) == pytest.approx(2.0 ** -1.5, abs=1e-6)
    assert np.max(np.abs(zstar_table.survival - (1.0 + zstar_table.t) ** -1.5)) < 1e-6
    assert zstar_table.survival[0] == 1.0
    assert np.all(np.diff(zstar_table.survival) <= 0)


def test_two_directions_are_not_pareto(two_atom_model, two_direction_target):
    table = build_hazard(two_atom_model, two_direction_target.star_system())

    def worst(log_scale):
        return np.max(np.abs(table.survival - (1.0 + table.t / math.exp(log_scale)) ** -1.5))

    best = minimize_scalar(worst, bounds=(-3.0, 3.0), method="bounded")
    assert best.fun > 1e-3


def test_tail_slope(zstar_table, two_atom_model, two_direction_target):
    assert survival_tail_slope(zstar_table) == pytest.approx(-1.5, abs=0.1)
    mixed = build_hazard(two_atom_model, two_direction_target.star_system())
    assert survival_tail_slope(mixed) == pytest.approx(-1.5, abs=0.1)


def test_hazard_integrates_to_survival(zstar_table, two_atom_model, two_direction_target):
    assert hazard_quadrature_gap(zstar_table, [0.1, 1.0, 10.0, 200.0]) < 1e-6
    mixed = build_hazard(two_atom_model, two_direction_target.star_system(), 0.99, 0.99)
    assert hazard_quadrature_gap(mixed, [0.5, 5.0, 50.0]) < 1e-6


def test_zstar_samples_follow_survival(zstar_table, rng):
    draws = sample_zstar(zstar_table, rng, 5_000)
    assert np.all(draws >= 0)
    assert stats.kstest(draws, zstar_table.cdf).pvalue > 1e-3
    assert isinstance(sample_zstar(zstar_table, rng), float)


def test_jump_time_survival_is_a_power(canonical_model, canonical_system, zstar_table, rng):
    table = build_hazard(canonical_model, canonical_system, 0.99, 0.99)
    assert table.exponent == pytest.approx(0.99 * 0.99 ** -2.5)
    assert np.allclose(table.survival, zstar_table.survival ** table.exponent, rtol=1e-9, atol=1e-14)
    draws = sample_z_a_theta(table, rng, 5_000)
    assert stats.kstest(draws, table.cdf).pvalue > 1e-3


def test_jump_time_gap_shrinks(canonical_model, canonical_system, zstar_table):
    gaps = []
    for level in (0.9, 0.99, 0.999):
        table = build_hazard(canonical_model, canonical_system, level, level)
        gaps.append(float(np.max(np.abs(table.survival - zstar_table.survival))))
    assert gaps[0] > gaps[1] > gaps[2]
    assert gaps[2] < 1e-2


def test_homogeneity_of_limit_measure(two_atom_model, canonical_system):
    assert homogeneity_gap(two_atom_model, canonical_system, 0.9, [0.0, 0.5, 3.0, 40.0]) < 1e-12


def test_enlargement_keeps_canonical_ruin_time(canonical_model, canonical_system, canonical_target):
    assert kappa_gap(canonical_model, canonical_system, canonical_target.star_system()) < 1e-12


def test_overshoot_support_and_atoms(two_atom_model, two_direction_target, rng):
    star = two_direction_target.star_system()
    law = OvershootLaw.build(two_atom_model, star, 0.0)
    assert np.allclose(law.radii, [1.0, 2.0])
    expected = np.array([1.0, 2.0 ** -2.5]) / (1.0 + 2.0 ** -2.5)
    assert np.allclose(law.weights, expected)

    draws = sample_ystar(two_atom_model, star, 0.5, rng, 20_000)
    assert np.all(r_eval(star, 1.0, draws) > 0.5)
    law = OvershootLaw.build(two_atom_model, star, 0.5)
    counts = np.array([np.sum(draws[:, 0] > 0), np.sum(draws[:, 1] > 0)])
    assert stats.chisquare(counts, law.weights * counts.sum()).pvalue > 1e-3


def test_overshoot_radius_law(canonical_model, canonical_target, rng):
    draws = sample_ystar(canonical_model, canonical_target.star_system(), 0.0, rng, 100_000)
    radius = np.linalg.norm(draws, axis=1)
    assert stats.kstest(radius, stats.pareto(2.5).cdf).statistic < 0.01


def test_overshoot_law_errors(canonical_model, canonical_target):
    with pytest.raises(DomainViolation):
        OvershootLaw.build(canonical_model, canonical_target.star_system(), -1.0)
    sideways = IncrementModel.build(2.5, 1.0, SpectralMeasure.from_atoms([[0.0, 1.0]], [1.0]))
    with pytest.raises(DomainViolation):
        OvershootLaw.build(sideways, canonical_target.star_system(), 0.0)


def test_survival_rows(zstar_table, canonical_model, canonical_system):
    jump_time = build_hazard(canonical_model, canonical_system, 0.99, 0.99)
    rows = survival_rows(zstar_table, jump_time)
    assert len(rows) == len(zstar_table.t)
    assert set(rows[0]) == {"t", "survival_zstar", "hazard_zstar", "survival_za_theta", "hazard_za_theta"}


def test_limit_tests_need_enough_paths(make_kernel):
    with pytest.raises(InsufficientSample):
        limit_law_tests([], make_kernel(5.0))


def synthetic_paths(kernel, n, rng, with_states=False):
    """Paths whose ruin time, jump and overshoot are drawn from the limit laws themselves."""
    model, b = kernel.model, kernel.b
    table = build_hazard(model, kernel.star)
    times = sample_zstar(table, rng, n)
    records = []
    for z in times:
        steps = max(1, int(round(z * b)))
        jump = sample_ystar(model, kernel.star, steps / b, rng) * b
        states = None
        if with_states:
            half = steps // 2
            states = np.zeros((steps + 1, model.dim))
            noise = rng.normal(scale=np.sqrt(np.diag(model.covariance())) * math.sqrt(0.5 * steps))
            states[half] = half * model.eta + noise
        records.append(PathRecord(
            stop_cause=StopCause.HIT_A, steps=steps, n_jump=steps, log_weight=0.0, hit_astar=True,
            terminal=np.zeros(model.dim), last_increment=jump + model.shift, states=states,
        ))
    return records


def test_limit_report_on_paths_drawn_from_the_limit(make_kernel):
    kernel = make_kernel(1e4)
    paths = synthetic_paths(kernel, 1_500, check_stream(77))
    report = limit_law_tests(paths, kernel)
    assert report.n_paths == 1_500
    assert report.ks_T_zstar < 0.05
    assert report.p_values["T_zstar"] > 1e-4
    assert report.p_values["overshoot_radius"] > 1e-4
    assert report.coupling_fraction == 1.0
    assert report.kappa_gap < 1e-12
    assert report.ks_clt == []
    assert "clt_0" not in report.passed


def test_limit_law_service_tables(make_kernel, zstar_table):
    service = get_limit_law_service()
    assert service is get_limit_law_service()
    kernel = make_kernel(5.0)
    zstar, jump_time = service.tables(kernel)
    assert np.allclose(zstar.survival, zstar_table.survival)
    assert jump_time.exponent == pytest.approx(0.99 * 0.99 ** -2.5)
    rows = service.survival_table(kernel)
    assert len(rows) == len(zstar.t)
    report = service.report(synthetic_paths(kernel, 1_000, check_stream(79)), kernel)
    assert report.n_paths == 1_000


def test_limit_report_runs_clt_with_states(make_kernel):
    kernel = make_kernel(100.0)
    paths = synthetic_paths(kernel, 1_000, check_stream(78), with_states=True)
    report = limit_law_tests(paths, kernel)
    assert len(report.ks_clt) == 2
    # the second coordinate of the canonical walk moves deterministically
    assert report.ks_clt[1] == 0.0
    assert report.p_values["clt_0"] > 1e-4


def test_lln_check_for_infinite_variance(canonical_target, make_kernel):
    model = IncrementModel.build(1.8, 1.0, SpectralMeasure.from_atoms([[1.0, 0.0]], [1.0]))
    kernel = make_kernel(1e3, model=model, target=canonical_target)
    records = []
    for steps in np.linspace(100, 3_000, 1_000).astype(int):
        states = np.arange(steps + 1)[:, None] * model.eta
        records.append(PathRecord(
            stop_cause=StopCause.HIT_A, steps=int(steps), n_jump=int(steps), log_weight=0.0,
            hit_astar=True, terminal=states[-1], last_increment=np.array([1e3, -1.0]), states=states,
        ))
    report = limit_law_tests(records, kernel)
    assert report.lln_fraction == 0.0
    assert report.passed["lln"]
    assert report.ks_clt == []


@pytest.mark.slow
def test_jump_time_matches_limit_at_large_b(make_kernel):
    kernel = make_kernel(200.0)
    _, batch = estimate_with_paths(kernel, 16_000, seed=201, workers=4, keep_records=True, record_states=True)
    paths = resample_by_weight(batch.records, check_stream(201))
    report = limit_law_tests(paths, kernel)
    critical = 1.628 / math.sqrt(len(paths))
    assert report.ks_N < critical
    assert report.ks_clt[0] < critical


@pytest.mark.slow
def test_ruin_coincides_with_first_jump_at_large_b(make_kernel):
    _, batch = estimate_with_paths(make_kernel(200.0), 1_000, seed=202, workers=4, keep_records=True)
    hits = [r for r in batch.records if r.hit]
    assert hits
    assert np.mean([r.n_jump == r.steps for r in hits]) > 0.9


@pytest.mark.slow
def test_ruin_time_distance_shrinks_with_b(make_kernel):
    distances, sizes = [], []
    for index, b in enumerate((50.0, 100.0, 200.0)):
        kernel = make_kernel(b)
        _, batch = estimate_with_paths(kernel, 6_000, seed=203 + index, workers=4, keep_records=True)
        paths = resample_by_weight(batch.records, check_stream(203 + index))
        zstar = build_hazard(kernel.model, kernel.star)
        distances.append(stats.kstest([r.steps / b for r in paths], zstar.cdf).statistic)
        sizes.append(len(paths))
    # sd of sqrt(n) D_n is about 0.26; resampling at most doubles the variance
    spread = [0.26 * math.sqrt(2.0 / n) for n in sizes]
    for i in range(2):
        assert distances[i + 1] <= distances[i] + 2.0 * math.hypot(spread[i], spread[i + 1])


@pytest.mark.slow
def test_lln_misses_shrink_for_infinite_variance(canonical_target, make_kernel):
    model = IncrementModel.build(1.5, 1.0, SpectralMeasure.from_atoms([[1.0, 0.0]], [1.0]))
    fractions = []
    for index, b in enumerate((25.0, 200.0)):
        kernel = make_kernel(b, model=model, target=canonical_target)
        _, batch = estimate_with_paths(kernel, 6_000, seed=210 + index, workers=4, keep_records=True,
                                       record_states=True)
        paths = resample_by_weight(batch.records, check_stream(210 + index))
        report = limit_law_tests(paths, kernel)
        assert report.ks_clt == []
        fractions.append((report.lln_fraction, len(paths)))
    (coarse, n_coarse), (fine, n_fine) = fractions
    slack = 2.0 * math.hypot(math.sqrt(coarse * (1 - coarse) / n_coarse), math.sqrt(fine * (1 - fine) / n_fine))
    assert fine <= coarse + slack
