import json
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derphase.errors import ParseError, ValidationError
from derphase.netmodel import (
    DerUnit,
    Edge,
    FeederSpec,
    NetworkGraph,
    PhaseLoadSeries,
    check_assignment,
    customer_phases,
    four_wire_impedance,
    gen_feeder,
    kron_reduce,
    load_ders,
    load_network,
    load_series,
    save_ders,
    save_network,
    save_series,
    CableSpec,
)

from _fixtures import Z_DIAG, series_from, two_node


def _network_doc(edges, nodes=("n0", "n1"), root="n0", v=230.0):
    z = np.diag([0.1, 0.1, 0.1]).tolist()
    zi = np.diag([0.05, 0.05, 0.05]).tolist()
    return {
        "nominal_voltage_v": v,
        "root": root,
        "nodes": list(nodes),
        "edges": [{"from": a, "to": b, "z_re": z, "z_im": zi} for a, b in edges],
    }


def test_load_minimal_network(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(_network_doc([("n0", "n1")])))
    g = load_network(path)
    assert g.n_nodes == 2 and len(g.edges) == 1
    np.testing.assert_array_equal(g.edges[0].z, Z_DIAG)


def test_cycle_is_rejected(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(_network_doc([("n0", "n1"), ("n1", "n2"), ("n2", "n0")], nodes=("n0", "n1", "n2"))))
    with pytest.raises(ValidationError, match="cycle"):
        load_network(path)


def test_disconnected_node_is_named():
    with pytest.raises(ValidationError, match="n2"):
        NetworkGraph(("n0", "n1", "n2"), (Edge("n0", "n1", Z_DIAG),), "n0", 230.0).topology


def test_asymmetric_impedance_names_edge():
    z = Z_DIAG.copy()
    z[0, 1] = 0.01
    with pytest.raises(ValidationError, match="n0->n1|n0.*n1"):
        two_node(z)


@pytest.mark.parametrize("bad", [
    lambda: NetworkGraph(("n0", "n0"), (), "n0", 230.0),
    lambda: NetworkGraph(("n0", "n1"), (Edge("n0", "nx", Z_DIAG),), "n0", 230.0),
    lambda: two_node(v_nominal=0.0),
    lambda: two_node(np.diag([0.0, 0.1, 0.1]).astype(complex)),
])
def test_structural_errors(bad):
    with pytest.raises(ValidationError):
        bad().topology


def test_malformed_network_file(tmp_path):
    path = tmp_path / "net.json"
    path.write_text("{not json")
    with pytest.raises(ParseError):
        load_network(path)


def test_empty_series_body_is_zero(tmp_path):
    g = two_node()
    path = tmp_path / "loads.csv"
    path.write_text("#horizon=4,dt_hours=0.25\nt,node,phase,p_w,q_var\n")
    s = load_series(path, g)
    assert s.horizon == 4 and s.dt_hours == 0.25
    assert not s.dense(g).any()


def test_unknown_node_in_series(tmp_path):
    path = tmp_path / "loads.csv"
    path.write_text("#horizon=2,dt_hours=0.25\nt,node,phase,p_w,q_var\n0,n999,a,1.0,0.0\n")
    with pytest.raises(ValidationError, match="n999"):
        load_series(path, two_node())


@pytest.mark.parametrize("body,err", [
    ("#horizon=2,dt_hours=-0.25\nt,node,phase,p_w,q_var\n", ValidationError),
    ("#horizon=2,dt_hours=0.25\nt,node,phase,p_w,q_var\n5,n1,a,1.0,0.0\n", ValidationError),
    ("#horizon=2,dt_hours=0.25\nt,node,phase,p_w,q_var\n0,n1,a,1.0,0.0\n0,n1,a,2.0,0.0\n", ValidationError),
    ("#horizon=2,dt_hours=0.25\nt,node,phase,p_w,q_var\n0,n1,d,1.0,0.0\n", ValidationError),
    ("t,node,phase,p_w,q_var\n0,n1,a,1.0,0.0\n", ParseError),
    ("#horizon=2,dt_hours=0.25\nt,node,p_w\n0,n1,1.0\n", ParseError),
])
def test_series_errors(tmp_path, body, err):
    path = tmp_path / "loads.csv"
    path.write_text(body)
    with pytest.raises(err):
        load_series(path, two_node())


def test_gen_feeder_smallest():
    g, loads = gen_feeder(1, 0)
    assert g.n_nodes == 2 and len(g.edges) == 1
    assert len(loads.entries) == 1


def test_gen_feeder_reference_shape():
    g, loads = gen_feeder(128, 42, FeederSpec(horizon=96))
    assert g.n_nodes == 256 and len(g.edges) == 255
    assert len(customer_phases(loads)) == 128
    visited = g.dfs()
    assert sorted(visited) == sorted(g.nodes) and len(visited) == len(set(visited))


def test_gen_feeder_deterministic(tmp_path):
    spec = FeederSpec(horizon=96)
    paths = []
    for k in range(2):
        g, loads = gen_feeder(32, 7, spec)
        save_network(g, tmp_path / f"n{k}.json")
        save_series(loads, tmp_path / f"l{k}.csv")
        paths.append((tmp_path / f"n{k}.json", tmp_path / f"l{k}.csv"))
    for a, b in zip(*paths):
        assert a.read_bytes() == b.read_bytes()


def test_gen_feeder_phase_mix():
    _, loads = gen_feeder(128, 42, FeederSpec(horizon=4))
    counts = {p: list(customer_phases(loads).values()).count(p) for p in "abc"}
    assert all(30 <= c <= 56 for c in counts.values())


def test_network_round_trip_256_nodes(tmp_path):
    g, _ = gen_feeder(128, 42, FeederSpec(horizon=1))
    save_network(g, tmp_path / "n.json")
    assert load_network(tmp_path / "n.json") == g


def test_series_round_trip(tmp_path):
    g, loads = gen_feeder(16, 3, FeederSpec(horizon=96))
    save_series(loads, tmp_path / "l.csv")
    assert load_series(tmp_path / "l.csv", g) == loads


def test_ders_round_trip(tmp_path):
    g, _ = gen_feeder(4, 3, FeederSpec(horizon=8))
    prod = np.linspace(0, 3770, 8)
    units = [DerUnit("pv1", "c001", "b", prod, 3770.0), DerUnit("pv2", "c003", "a", prod / 3, 3770.0)]
    save_ders(units, tmp_path / "u.csv", tmp_path / "p.csv")
    assert load_ders(tmp_path / "u.csv", tmp_path / "p.csv", g) == units


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0, 1e5, allow_nan=False), min_size=1, max_size=6),
       st.lists(st.floats(-1e5, 1e5, allow_nan=False), min_size=1, max_size=6))
def test_series_round_trip_property(tmp_path_factory, ps, qs):
    n = min(len(ps), len(qs))
    s = np.array(ps[:n]) + 1j * np.array(qs[:n])
    series = series_from([("n1", "c")], s)
    path = tmp_path_factory.mktemp("rt") / "l.csv"
    save_series(series, path)
    assert load_series(path, two_node()) == series


def test_der_cap_violation_names_unit():
    with pytest.raises(ValidationError, match="pv7.*t=1"):
        DerUnit("pv7", "n1", "a", [0.0, 4000.0], 3770.0)


def test_der_unknown_node():
    from derphase.netmodel import check_ders

    with pytest.raises(ValidationError, match="nx"):
        check_ders([DerUnit("u", "nx", "a", [0.0], 1.0)], two_node())


def test_assignment_must_cover_units_exactly():
    check_assignment({"u1": "a", "u2": "c"}, ["u1", "u2"])
    with pytest.raises(ValidationError):
        check_assignment({"u1": "a"}, ["u1", "u2"])
    with pytest.raises(ValidationError):
        check_assignment({"u1": "a", "u2": "b", "u3": "c"}, ["u1", "u2"])
    with pytest.raises(ValidationError):
        check_assignment({"u1": "x", "u2": "b"}, ["u1", "u2"])


def test_kron_reduction_matches_closed_form():
    z4 = four_wire_impedance(CableSpec(0.443, 0.0054, 0.02), 0.1)
    z3 = kron_reduce(z4)
    expected = z4[:3, :3] - np.outer(z4[:3, 3], z4[3, :3]) / z4[3, 3]
    np.testing.assert_allclose(z3, expected, rtol=1e-14)
    np.testing.assert_allclose(z3, z3.T, rtol=1e-14)
    assert np.all(z3.diagonal().real > z4.diagonal()[:3].real)


def test_year_long_series_loads_quickly(tmp_path):
    g, loads = gen_feeder(128, 42, FeederSpec(horizon=35040))
    path = tmp_path / "year.csv"
    save_series(loads, path)
    t0 = time.perf_counter()
    back = load_series(path, g)
    elapsed = time.perf_counter() - t0
    assert back.horizon == 35040
    assert elapsed < 10.0, f"load took {elapsed:.1f} s"
