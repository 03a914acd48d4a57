import copy
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voltreg.netmodel import (
    FeederSchemaError,
    TimeSeriesProfile,
    dump_feeder,
    feeder_from_dict,
    feeder_to_dict,
    load_feeder,
    load_profile,
    node_ordering,
    write_profile,
)

from conftest import DATA, random_feeder_dict, two_bus_dict


def test_bundled_feeder_structure(ieee37):
    # 36 IEEE 37 line segments less the regulator position, plus the substation bus
    assert len(ieee37.buses) == 38
    assert len(ieee37.branches) == 35
    assert ieee37.n_nodes == 114
    assert len(ieee37.oltcs) == 1
    dev = ieee37.oltcs[0]
    assert (dev.tau_min, dev.tau_max, dev.a_max, dev.ganged) == (-16, 16, 1.1, True)
    assert len(ieee37.pv_units) == 30
    total_dc = sum(pv.dc_kw for pv in ieee37.pv_units)
    assert 3900 <= total_dc <= 4300
    assert min(pv.dc_kw for pv in ieee37.pv_units) >= 23 and max(pv.dc_kw for pv in ieee37.pv_units) <= 206


def test_minimal_two_bus():
    m = feeder_from_dict(two_bus_dict())
    assert m.n_nodes == 2
    assert [n.label for n in m.nodes] == ["s.A", "b.A"]


def test_tau_max_zero_rejected():
    d = random_feeder_dict(1)
    d["transformers"][0]["oltc"]["tau_max"] = 0
    with pytest.raises(FeederSchemaError, match="tau_max"):
        feeder_from_dict(d)


def test_duplicate_bus_rejected():
    d = two_bus_dict()
    d["buses"].append({"id": "b", "phases": ["A"]})
    with pytest.raises(FeederSchemaError, match="duplicate node id"):
        feeder_from_dict(d)


def test_disconnected_rejected():
    d = two_bus_dict()
    d["buses"].append({"id": "island", "phases": ["A"]})
    d["bases"]["v_base_kv"]["island"] = 2.77
    with pytest.raises(FeederSchemaError, match="disconnected"):
        feeder_from_dict(d)


def test_missing_key_names_field():
    d = two_bus_dict()
    del d["branches"][0]["series_impedance"]
    with pytest.raises(FeederSchemaError, match="series_impedance"):
        feeder_from_dict(d)


def test_asymmetric_impedance_rejected():
    d = random_feeder_dict(2)
    z = d["branches"][0]["series_impedance"]
    z[0][1] = [z[0][1][0] + 0.1, z[0][1][1]]
    with pytest.raises(FeederSchemaError, match="symmetric"):
        feeder_from_dict(d)


def test_curtailment_rejected():
    d = random_feeder_dict(3)
    d["pv"][0]["allow_curtailment"] = True
    with pytest.raises(FeederSchemaError, match="curtailment"):
        feeder_from_dict(d)


def test_ordering_groups_phases(tmp_path):
    d = random_feeder_dict(4, n_buses=1, n_pv=0)
    m = feeder_from_dict(d)
    refs = node_ordering(m)
    assert [r.index for r in refs] == list(range(6))
    assert [(r.bus_id, r.phase) for r in refs] == [("src", "A"), ("src", "B"), ("src", "C"),
                                                   ("b0", "A"), ("b0", "B"), ("b0", "C")]


def test_ordering_deterministic_and_slack_first(ieee37):
    again = load_feeder(DATA / "ieee37.json")
    assert node_ordering(again) == node_ordering(ieee37)
    assert list(ieee37.slack_nodes) == [0, 1, 2]


def test_round_trip(ieee37, tmp_path):
    dump_feeder(ieee37, tmp_path / "f.json")
    back = load_feeder(tmp_path / "f.json")
    assert back.nodes == ieee37.nodes
    assert back.oltcs == ieee37.oltcs
    assert back.loads == ieee37.loads
    assert back.pv_units == ieee37.pv_units
    assert back.source == ieee37.source
    for a, b in zip(back.branches, ieee37.branches):
        assert (a.id, a.from_bus, a.to_bus, a.phases) == (b.id, b.from_bus, b.to_bus, b.phases)
        assert np.array_equal(a.series_impedance, b.series_impedance)
        assert np.array_equal(a.shunt_admittance, b.shunt_admittance)
    assert feeder_to_dict(back) == feeder_to_dict(ieee37)


def test_ungang_expands_per_phase():
    d = random_feeder_dict(5)
    d["transformers"][0]["oltc"]["ganged"] = False
    m = feeder_from_dict(d)
    assert [o.id for o in m.oltcs] == ["t0.A", "t0.B", "t0.C"]
    assert all(len(o.primary_nodes) == 1 for o in m.oltcs)


@given(st.floats(min_value=1e-3, max_value=1e5, allow_nan=False))
def test_per_unit_round_trip(kw):
    m = feeder_from_dict(two_bus_dict())
    assert m.pu_to_kw(m.kw_to_pu(kw)) == pytest.approx(kw, rel=1e-12)
    assert m.kw_to_pu(kw) == pytest.approx(kw / m.s_base_kva, rel=1e-12)


def test_load_and_pv_nodes_exist(ieee37):
    labels = {n.label for n in ieee37.nodes}
    for ld in ieee37.loads:
        assert ld.node.label in labels
        assert ieee37.nodes[ld.node.index] == ld.node
    for pv in ieee37.pv_units:
        assert ieee37.nodes[pv.node.index] == pv.node


def test_pv_capability_and_clip(caplog):
    m = feeder_from_dict(random_feeder_dict(6))
    pv = m.pv_units[0]
    assert pv.q_max_kvar(0.0) == pytest.approx(pv.s_kva)
    p = 0.6 * pv.s_kva
    assert pv.q_max_kvar(p) == pytest.approx(0.8 * pv.s_kva)
    assert pv.available_p_kw(2 * pv.s_kva) == pytest.approx(pv.s_kva)
    assert pv.q_max_kvar(2 * pv.s_kva) == 0.0


def test_profile_io(tmp_path):
    prof = TimeSeriesProfile("x", np.arange(5) * 30.0, np.array([0.0, 1.5, 2.25, 3.0, 1e-7]))
    write_profile(prof, tmp_path / "x.csv")
    text = (tmp_path / "x.csv").read_bytes()
    assert text.startswith(b"timestamp,value\n") and b"\r" not in text
    back = load_profile(tmp_path / "x.csv")
    assert back.id == "x" and back.dt == 30.0
    assert np.array_equal(back.values, prof.values)


@pytest.mark.parametrize("stamps,values", [
    ([0, 30, 30], [1, 2, 3]),
    ([0, 30, 90], [1, 2, 3]),
    ([0, 30, 60], [1, float("nan"), 3]),
])
def test_profile_validation(stamps, values):
    with pytest.raises(ValueError):
        TimeSeriesProfile("bad", np.array(stamps, float), np.array(values, float))
