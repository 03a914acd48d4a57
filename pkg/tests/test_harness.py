import json
import shutil

import numpy as np
import pytest

from voltreg.harness import (
    Scenario,
    ScenarioError,
    count_tap_operations,
    load_result,
    load_scenario,
    make_forecast,
    metrics,
    run_scenario,
    save_result,
    scenario_from_dict,
    sweep_alpha,
    unbalance,
)
from voltreg.harness.bundle import write_bundle
from voltreg.harness.cli import main
from voltreg.netmodel import TimeSeriesProfile, feeder_from_dict, write_profile
from voltreg.powerflow import build_injections, solve_powerflow, tap_ratios

from conftest import DATA, random_feeder_dict, two_bus_dict

NOON_HOUR = 11 * 120


def const_profile(pid, n, value, dt=30.0):
    return TimeSeriesProfile(pid, np.arange(n) * dt, np.full(n, float(value)))


@pytest.fixture(scope="module")
def bundled(tmp_path_factory):
    d = tmp_path_factory.mktemp("bundle")
    for f in ("ieee37.json", "scenario_ieee37.json"):
        shutil.copy(DATA / f, d / f)
    shutil.copytree(DATA / "profiles", d / "profiles")
    return d


# ---------------------------------------------------------------- forecasts

def test_forecast_zero_alpha_bit_exact(ieee37_profiles):
    p = ieee37_profiles["pv01"]
    f = make_forecast(p, 0.0, 3)
    assert np.array_equal(f.values, p.values) and f.values is not p.values


def test_forecast_bounds_and_determinism():
    p = const_profile("x", 5000, 100.0)
    f = make_forecast(p, 0.3, 11)
    assert f.values.min() >= 70.0 and f.values.max() <= 130.0
    assert f.values.min() < 72 and f.values.max() > 128
    assert np.array_equal(make_forecast(p, 0.1, 5).values, make_forecast(p, 0.1, 5).values)
    assert not np.array_equal(make_forecast(p, 0.1, 5).values, make_forecast(p, 0.1, 6).values)
    other = TimeSeriesProfile("y", p.timestamps, p.values)
    assert not np.array_equal(make_forecast(p, 0.1, 5).values, make_forecast(other, 0.1, 5).values)


def test_forecast_clips_negative():
    p = TimeSeriesProfile("x", np.arange(3) * 30.0, np.array([-1.0, 0.0, 1.0]))
    assert np.all(make_forecast(p, 0.2, 1).values >= 0)
    with pytest.raises(ValueError):
        make_forecast(p, -0.1, 1)


# ---------------------------------------------------------------- metrics

def test_tap_counting_examples():
    assert count_tap_operations([9, 9, 8, 8, 9]) == 2
    assert count_tap_operations([0, 3]) == 3
    assert count_tap_operations([4]) == 0


def test_unbalance_example():
    v = np.array([[1.02, 1.00, 0.99, 1.0]])
    ub = unbalance(v, ["b", "b", "b", "single"])
    assert ub.shape == (1, 1)
    assert ub[0, 0] == pytest.approx(0.03)


def _result(vmag, buses, taps, tap_init=(0,)):
    from voltreg.harness import SimulationResult

    S = vmag.shape[0]
    return SimulationResult(
        method="avr", dt=30.0, timestamps=np.arange(S) * 30.0, node_labels=[f"n{i}" for i in range(vmag.shape[1])],
        node_buses=buses, vmag=vmag, taps=np.asarray(taps).reshape(S, -1), tap_init=np.array(tap_init),
        oltc_ids=["t"], si_q=np.zeros((S, 0)), pv_ids=[], mismatch=np.zeros(S),
    )


def test_metrics_flat_profile():
    m = metrics(_result(np.ones((4, 3)), ["a", "a", "b"], [0, 0, 0, 0]))
    assert m["mean_abs_deviation"] == 0 and m["max_abs_deviation"] == 0
    assert m["mean_unbalance"] == 0 and m["max_unbalance"] == 0
    assert m["tap_operations"] == 0 and m["overvoltage_node_minutes"] == 0


def test_metrics_counts_violations_and_taps():
    v = np.ones((4, 2))
    v[1, 0] = 1.06
    v[2, :] = 0.94
    m = metrics(_result(v, ["a", "a"], [9, 8, 8, 9], tap_init=(9,)))
    assert m["tap_operations"] == 2
    assert m["overvoltage_node_minutes"] == 0.5
    assert m["undervoltage_node_minutes"] == 1.0
    assert m["max_abs_deviation"] == pytest.approx(0.06)
    with pytest.raises(ValueError):
        metrics(_result(np.ones((0, 1)), ["a"], np.zeros((0, 1))))


# ---------------------------------------------------------------- scenarios

def test_scenario_validation(tmp_path):
    base = {"feeder": "f.json", "profiles": "p"}
    assert scenario_from_dict(base).method == "ovr"
    for bad in ({"method": "pid"}, {"dt": 0}, {"forecast_alpha": -0.1}, {"weights": [1, -1]},
                {"horizon_steps": 2, "replan_steps": 3}):
        with pytest.raises(ScenarioError):
            scenario_from_dict({**base, **bad})
    with pytest.raises(ScenarioError, match="feeder"):
        scenario_from_dict({"profiles": "p"})
    (tmp_path / "s.json").write_text("{not json")
    with pytest.raises(ScenarioError, match="JSON"):
        load_scenario(tmp_path / "s.json")


def test_missing_profile_reported():
    m = feeder_from_dict(two_bus_dict())
    with pytest.raises(ScenarioError, match="load"):
        run_scenario(Scenario(m, {}, method="avr"))


def test_single_step_frozen_equals_power_flow():
    d = random_feeder_dict(3, n_buses=4, n_pv=0, ramp=0)
    m = feeder_from_dict(d)
    prof = {"load": const_profile("load", 1, 1.3)}
    inj = build_injections(m, {"load": 1.3}, {})
    op = solve_powerflow(m, tap_ratios(m), inj)
    for method in ("avr", "ovr"):
        res = run_scenario(Scenario(m, prof, method=method, horizon_steps=1, replan_steps=1))
        assert res.n_steps == 1 and not res.is_degraded
        assert np.allclose(res.vmag[0], op.vmag[m.nonslack_nodes], atol=1e-9)
        assert res.taps[0, 0] == 0


def test_ovr_run_on_small_feeder_consistent():
    m = feeder_from_dict(random_feeder_dict(8, n_buses=5, n_pv=3, load_kw=(50, 120)))
    n = 12
    prof = {"load": const_profile("load", n, 1.0)}
    for u in m.pv_units:
        prof[u.profile_id] = TimeSeriesProfile(u.profile_id, np.arange(n) * 30.0, np.linspace(0.2, 0.9, n) * u.dc_kw)
    res = run_scenario(Scenario(m, prof, method="ovr", horizon_steps=4, replan_steps=2))
    mt = metrics(res)
    assert np.isfinite(res.predicted).all()
    assert mt["max_abs_prediction_error"] < 0.01
    assert mt["max_mismatch"] <= 1e-8
    traj = np.concatenate([res.tap_init[None, :], res.taps])
    assert mt["tap_operations"] == int(np.abs(np.diff(traj, axis=0)).sum())
    for s in range(n):
        for i, u in enumerate(m.pv_units):
            p = u.available_p_kw(prof[u.profile_id].values[s])
            assert np.hypot(p, res.si_q[s, i]) <= 1.0001 * u.s_kva


def test_degraded_run_holds_controls():
    m = feeder_from_dict(two_bus_dict())
    prof = {"load": TimeSeriesProfile("load", np.arange(3) * 30.0, np.array([1.0, 300.0, 1.0]))}
    res = run_scenario(Scenario(m, prof, method="avr"))
    assert res.is_degraded and res.degraded[0][0] == 1
    assert np.isnan(res.vmag[1]).all() and np.isfinite(res.vmag[[0, 2]]).all()
    assert metrics(res)["degraded_steps"] == 1


def test_save_load_round_trip(tmp_path):
    m = feeder_from_dict(random_feeder_dict(9, n_buses=4, n_pv=2))
    n = 6
    prof = {"load": const_profile("load", n, 1.5)}
    for u in m.pv_units:
        prof[u.profile_id] = const_profile(u.profile_id, n, 0.8 * u.dc_kw)
    res = run_scenario(Scenario(m, prof, method="ovr", horizon_steps=3, replan_steps=3))
    m1 = save_result(res, tmp_path / "r")
    back = load_result(tmp_path / "r")
    assert np.array_equal(back.vmag, res.vmag)
    assert np.array_equal(back.predicted, res.predicted)
    assert np.array_equal(back.taps, res.taps) and np.array_equal(back.si_q, res.si_q)
    assert metrics(back) == m1
    assert json.loads((tmp_path / "r" / "metrics.json").read_text()) == json.loads(json.dumps(m1))
    assert (tmp_path / "r" / "summary.txt").read_text().startswith("method")
    assert (tmp_path / "r" / "voltages.csv").read_text().splitlines()[0] == "step,node,vmag"


def test_bundle_regenerates_bit_identical(tmp_path):
    write_bundle(tmp_path)
    for f in ("ieee37.json", "scenario_ieee37.json", "profiles/load.csv", "profiles/pv01.csv",
              "profiles/pv02.csv", "profiles/pv03.csv"):
        assert (tmp_path / f).read_bytes() == (DATA / f).read_bytes(), f


# ---------------------------------------------------------------- ieee37 windows

def test_run_deterministic_byte_for_byte(bundled, tmp_path):
    sc = load_scenario(bundled / "scenario_ieee37.json").with_(start_step=NOON_HOUR, n_steps=20, forecast_alpha=0.2)
    for name in ("a", "b"):
        save_result(run_scenario(sc), tmp_path / name)
    for f in ("voltages.csv", "predicted.csv", "taps.csv", "si_q.csv", "metrics.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_sweep_single_zero_row(bundled):
    sc = load_scenario(bundled / "scenario_ieee37.json").with_(start_step=NOON_HOUR, n_steps=10)
    rows = sweep_alpha(sc, [0.0])
    m = metrics(run_scenario(sc))
    assert len(rows) == 1
    assert rows[0]["max_deviation"] == m["max_abs_deviation"]
    assert rows[0]["mean_deviation"] == m["mean_abs_deviation"]
    with pytest.raises(ValueError):
        sweep_alpha(sc, [-0.1])


# ---------------------------------------------------------------- CLI

def test_cli_run_and_compare(bundled, tmp_path, capsys):
    s = str(bundled / "scenario_ieee37.json")
    window = ["--start-step", str(NOON_HOUR), "--n-steps", "10"]
    assert main(["run", "--scenario", s, "--method", "avr", "--out", str(tmp_path / "avr")] + window) == 0
    assert main(["run", "--scenario", s, "--method", "ovr", "--out", str(tmp_path / "ovr")] + window) == 0
    for f in ("voltages.csv", "taps.csv", "si_q.csv", "metrics.json", "summary.txt"):
        assert (tmp_path / "ovr" / f).exists()
    capsys.readouterr()
    assert main(["compare", "--a", str(tmp_path / "avr"), "--b", str(tmp_path / "ovr")]) == 0
    assert "tap_operations" in capsys.readouterr().out


def test_cli_sweep_and_validate(bundled, tmp_path):
    s = str(bundled / "scenario_ieee37.json")
    window = ["--start-step", str(NOON_HOUR), "--n-steps", "4"]
    assert main(["sweep-alpha", "--scenario", s, "--alphas", "0,0.3", "--out", str(tmp_path / "sw.csv")] + window) == 0
    lines = (tmp_path / "sw.csv").read_text().splitlines()
    assert lines[0].startswith("alpha,max_deviation,mean_deviation") and len(lines) == 3
    assert main(["validate-lin", "--scenario", s, "--out", str(tmp_path / "v")] + window) == 0
    rep = json.loads((tmp_path / "v" / "lin_error.json").read_text())
    assert rep["cases"] == 4 and rep["max_abs_E"] <= 0.012
    assert (tmp_path / "v" / "lin_error.csv").read_text().startswith("case_id,node,E\n")


def test_cli_error_and_degraded_codes(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == 1
    assert "error" in capsys.readouterr().err
    from voltreg.netmodel import dump_feeder

    dump_feeder(feeder_from_dict(two_bus_dict()), tmp_path / "f.json")
    (tmp_path / "p").mkdir()
    write_profile(TimeSeriesProfile("load", np.arange(3) * 30.0, np.array([1.0, 300.0, 1.0])), tmp_path / "p" / "load.csv")
    (tmp_path / "s.json").write_text(json.dumps({"feeder": "f.json", "profiles": "p", "method": "avr"}))
    assert main(["run", "--scenario", str(tmp_path / "s.json"), "--out", str(tmp_path / "o")]) == 2
    assert json.loads((tmp_path / "o" / "metrics.json").read_text())["degraded_steps"] == 1


def test_cli_make_data(tmp_path):
    assert main(["make-data", "--out", str(tmp_path / "d")]) == 0
    assert (tmp_path / "d" / "ieee37.json").read_bytes() == (DATA / "ieee37.json").read_bytes()
