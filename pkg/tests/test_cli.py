import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from app.models.schemas import RuinEstimate, StopCause
from app.services import estimator_service, run_service
from app.services.limits_service import MIN_PATHS
from app.services.results_service import dumps, format_float, get_results_service
from main import build_parser, main


@pytest.fixture
def write_config(tmp_path, raw_config):
    def factory(**sections):
        raw = json.loads(json.dumps(raw_config))
        for name, values in sections.items():
            raw.setdefault(name, {}).update(values)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(raw), encoding="utf-8")
        return str(path)
    return factory


def read(path):
    return get_results_service().read_json(path)


def test_parser_knows_every_subcommand():
    parser = build_parser()
    args = parser.parse_args(["tv-curve", "--config", "c.json", "--paths", "10"])
    assert args.command == "tv-curve" and args.paths == 10
    assert parser.parse_args(["serve", "--port", "9000"]).port == 9000


def test_estimate_is_reproducible(write_config, tmp_path):
    config = write_config()
    assert main(["estimate", "--config", config, "--out", str(tmp_path / "a"), "--paths", "300"]) == 0
    assert main(["estimate", "--config", config, "--out", str(tmp_path / "b"), "--paths", "300"]) == 0
    first, second = read(tmp_path / "a" / "estimate.json"), read(tmp_path / "b" / "estimate.json")
    for payload in (first, second):
        payload.pop("runtime_s")
    assert first == second
    assert first["n_paths"] == 300 and first["seed"] == 7

    effective = read(tmp_path / "a" / "effective_config.json")
    assert effective["kernel"]["delta2"] == pytest.approx(0.1)
    assert effective["sim"]["n_paths"] == 300


def test_seed_override_changes_estimate(write_config, tmp_path):
    config = write_config()
    main(["estimate", "--config", config, "--out", str(tmp_path / "a"), "--paths", "300"])
    main(["estimate", "--config", config, "--out", str(tmp_path / "b"), "--paths", "300", "--seed", "8"])
    assert read(tmp_path / "a" / "estimate.json")["p_hat"] != read(tmp_path / "b" / "estimate.json")["p_hat"]


def test_estimate_writes_path_table(write_config, tmp_path):
    config = write_config(sim={"record_paths": True, "n_paths": 120})
    assert main(["estimate", "--config", config, "--out", str(tmp_path)]) == 0
    rows = get_results_service().read_csv(tmp_path / "paths.csv")
    assert len(rows) == 120
    assert [int(r["index"]) for r in rows] == list(range(120))
    assert {r["stop_cause"] for r in rows} <= {c.value for c in StopCause}
    assert all(float(r["W"]) == 0.0 for r in rows if r["stop_cause"] != "HitA")


def test_tv_curve_rows(write_config, tmp_path):
    config = write_config(sim={"b_list": [2.0, 3.0], "n_paths": 200})
    assert main(["tv-curve", "--config", config, "--out", str(tmp_path)]) == 0
    rows = get_results_service().read_csv(tmp_path / "tv_curve.csv")
    assert [float(r["b"]) for r in rows] == [2.0, 3.0]
    assert set(rows[0]) >= {"b", "m2_ratio", "tv_bound", "m2_std_error"}


def test_lyapunov_outside_region_is_an_error(write_config, tmp_path):
    config = write_config(sim={"grid_states": [[0.95, 0.0]], "n_mc": 1_000})
    assert main(["verify-lyapunov", "--config", config, "--out", str(tmp_path)]) == 1


def test_lyapunov_table(write_config, tmp_path):
    config = write_config(sim={"b": 10.0, "grid_states": [[-0.5, 0.0], [-1.0, -0.5]], "n_mc": 1_000})
    status = main(["verify-lyapunov", "--config", config, "--out", str(tmp_path)])
    assert status in (0, 2)
    rows = get_results_service().read_csv(tmp_path / "lyapunov.csv")
    assert list(rows[0]) == ["s0", "s1", "J1", "J2", "sum", "std_error", "pass"]
    assert float(rows[0]["s0"]) == -5.0
    summary = read(tmp_path / "lyapunov.json")
    assert summary["states"] == 2
    assert (summary["failed"] > 0) == (status == 2)


def test_invalid_config_exits_with_error(write_config, tmp_path):
    config = write_config(model={"alpha": 0.5})
    assert main(["estimate", "--config", config, "--out", str(tmp_path)]) == 1
    assert main(["estimate", "--config", str(tmp_path / "missing.json")]) == 1


def test_simulate_paths_step_table(write_config, tmp_path):
    config = write_config(sim={"n_paths": 15})
    assert main(["simulate-paths", "--config", config, "--out", str(tmp_path)]) == 0
    rows = get_results_service().read_csv(tmp_path / "steps.csv")
    by_path = {}
    for row in rows:
        by_path.setdefault(int(row["path"]), []).append(row)
    assert sorted(by_path) == list(range(15))
    for steps in by_path.values():
        assert [int(r["step"]) for r in steps] == list(range(len(steps)))
        assert float(steps[0]["s0"]) == 0.0 and float(steps[0]["s1"]) == 0.0
        assert all(r["stop_cause"] == "" for r in steps[:-1])
        assert steps[-1]["stop_cause"] in {c.value for c in StopCause}


def test_crude_oracle_report(write_config, tmp_path):
    config = write_config(sim={"n_paths": 400, "n_hits": 30})
    status = main(["crude-oracle", "--config", config, "--out", str(tmp_path)])
    assert status in (0, 2)
    report = read(tmp_path / "crude.json")
    assert set(report["passed"]) == {"ci99_overlap", "ks T/b", "ks overshoot/b"}
    assert report["crude"]["n_paths"] == 400
    assert (status == 0) == all(report["passed"].values())


def test_crude_oracle_conditions_on_target_hits(write_config, tmp_path, monkeypatch):
    calls = []
    original = estimator_service.crude_conditional_sample

    def recording(*args, **kwargs):
        calls.append(kwargs.get("stop_on_star"))
        return original(*args, **kwargs)

    monkeypatch.setattr(estimator_service, "crude_conditional_sample", recording)
    config = write_config(sim={"n_paths": 400, "n_hits": 30})
    assert main(["crude-oracle", "--config", config, "--out", str(tmp_path)]) in (0, 2)
    assert calls == [True]
    critical = read(tmp_path / "crude.json")["ks_critical_1pct"]
    assert set(critical) == {"T/b", "overshoot/b"}
    # sqrt(1/n + 1/m) > sqrt(1/m) for every resampled IS size n
    assert all(value > run_service.KS_CRITICAL_1PCT / math.sqrt(30) for value in critical.values())


def test_limit_laws_report(write_config, tmp_path):
    config = write_config(sim={"n_paths": 10_000})
    status = main(["limit-laws", "--config", config, "--out", str(tmp_path)])
    assert status in (0, 2)
    report = read(tmp_path / "limit_laws.json")
    # the weighted paths are resampled down to their effective size
    assert MIN_PATHS <= report["n_paths"] < 10_000
    assert len(report["ks_clt"]) == 2
    assert (status == 0) == report["all_passed"]
    rows = get_results_service().read_csv(tmp_path / "survival_tables.csv")
    assert float(rows[0]["t"]) == 0.0 and float(rows[0]["survival_zstar"]) == 1.0


def test_json_encoding_of_floats_and_models():
    assert format_float(0.1) == "0.1"
    assert format_float(math.inf) is None
    estimate = RuinEstimate(b=2.0, n_paths=2, p_hat=0.0, p_hat_star=0.0, var_hat=0.0, rel_err=math.inf,
                            m2_ratio=math.inf, tv_bound=math.inf, overflow_frac=0.0, ess=0.0, ci99=(0.0, 0.0))
    decoded = json.loads(dumps({"estimate": estimate, "flags": np.array([True, False]), "cause": StopCause.HIT_A}))
    assert decoded["estimate"]["rel_err"] is None
    assert decoded["estimate"]["ci99"] == [0.0, 0.0]
    assert decoded["flags"] == [True, False]
    assert decoded["cause"] == "HitA"


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_json_floats_use_shortest_round_trip(value):
    text = dumps({"x": value, "nested": [np.float64(value)]})
    assert repr(value) in text
    decoded = json.loads(text)
    assert decoded["x"] == value and decoded["nested"] == [value]


def test_json_non_finite_values_become_null():
    payload = {"a": [math.nan, np.float64(-math.inf)], "b": (np.int64(3), np.bool_(True))}
    assert json.loads(dumps(payload)) == {"a": [None, None], "b": [3, True]}


def test_csv_cells(tmp_path):
    service = get_results_service()
    path = service.write_csv(tmp_path, "t.csv", [{"x": 0.5, "ok": True, "n": None}, {"x": math.inf, "ok": False, "n": 3}])
    assert path.read_bytes().count(b"\r\n") == 3
    rows = service.read_csv(path)
    assert rows[0] == {"x": "0.5", "ok": "true", "n": ""}
    assert rows[1] == {"x": "inf", "ok": "false", "n": "3"}


def _without_timing(payload):
    if isinstance(payload, dict):
        return {k: _without_timing(v) for k, v in payload.items() if k not in ("runtime_s", "workers")}
    if isinstance(payload, list):
        return [_without_timing(v) for v in payload]
    return payload


@pytest.mark.slow
@pytest.mark.parametrize("command,sim", [
    ("estimate", {"n_paths": 3_000, "record_paths": True}),
    ("tv-curve", {"b_list": [2.0, 3.0], "n_paths": 3_000}),
    ("verify-lyapunov", {"b": 10.0, "grid_states": [[-0.5, 0.0], [-1.0, -0.5], [-2.0, 0.0]], "n_mc": 2_000}),
    ("limit-laws", {"n_paths": 10_000}),
    ("crude-oracle", {"n_paths": 3_000, "n_hits": 100}),
    ("simulate-paths", {"n_paths": 300}),
])
def test_outputs_do_not_depend_on_worker_count(write_config, tmp_path, command, sim):
    config = write_config(sim=sim)
    statuses = [main([command, "--config", config, "--out", str(tmp_path / str(w)), "--workers", str(w)])
                for w in (1, 8)]
    assert statuses[0] == statuses[1] != 1
    names = sorted(p.name for p in (tmp_path / "1").iterdir())
    assert names == sorted(p.name for p in (tmp_path / "8").iterdir())
    for name in names:
        single, pooled = tmp_path / "1" / name, tmp_path / "8" / name
        if name.endswith(".json"):
            assert _without_timing(read(single)) == _without_timing(read(pooled))
        else:
            assert single.read_bytes() == pooled.read_bytes()
