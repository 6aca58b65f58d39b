"""Acceptance criteria 1-10, one PASS/FAIL line each.

The scenario-level criteria (6-9) share one seeded run of the synthetic
128-customer feeder over a month: 45 initial PV units, 5 additions, noise on.
"""

import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derphase.cli import main
from derphase.costs import Tariff, read_cost_csv
from derphase.curtail import VoltageLimits
from derphase.netmodel import (
    PHASE_INDEX,
    DerUnit,
    current_assignment,
    customer_phases,
    save_ders,
    save_network,
    save_series,
)
from derphase.optim import GaConfig, exhaustive_minimize, ga_minimize
from derphase.pflow import Injection, SolverOptions, solve, solve_summary
from derphase.scenario import ScenarioConfig, SyntheticInputs, run_scenario
from derphase.selection import GOResult, HorizonSimulator, ISResult, decide, global_select, individual_select

from _fixtures import ORACLE_V_N1A, ROT, balanced_feeder, node_injection, small_case, two_node
from _tables import PairwiseTable

LIMITS = VoltageLimits.from_nominal(230.0)
TARIFF = Tariff()

PUBLISHED_ROWS = [
    (46, {"a": 22874, "b": 23286, "c": 19064}, 283, 27, "GO"),
    (47, {"a": 277, "b": 275, "c": 276}, 273, 37, "IS(b)"),
    (48, {"a": 282, "b": 282, "c": 280}, 279, 25, "IS(c)"),
    (49, {"a": 289, "b": 291, "c": 290}, 286, 32, "IS(a)"),
    (50, {"a": 293, "b": 295, "c": 292}, 287, 38, "IS(c)"),
]


@pytest.fixture(scope="module")
def scenario(tmp_path_factory):
    out = tmp_path_factory.mktemp("scenario")
    inputs = SyntheticInputs()
    graph, loads, pv = inputs.build()
    cfg = ScenarioConfig(initial_der_count=45, n_additions=5, seed=0, with_noise=True)
    start = time.perf_counter()
    result = run_scenario(cfg, graph, loads, pv, out_dir=out, inputs={"synthetic": inputs.to_dict()})
    elapsed = time.perf_counter() - start
    return {"result": result, "graph": graph, "loads": loads, "elapsed": elapsed, "out": out}


def test_criterion_01_power_flow(acceptance_line):
    # warm the compiled kernel so the timing covers the solves only
    solve(two_node(), Injection(node_injection(two_node(), {("n1", "a"): 1.0})))
    start = time.perf_counter()
    g = two_node()
    sol = solve(g, Injection(node_injection(g, {("n1", "a"): 1000.0})))
    expected = np.array([ORACLE_V_N1A, 230 * ROT, 230 * ROT**2])
    v_err = float(np.max(np.abs(sol.voltages[1] - expected)))

    b = balanced_feeder()
    s = {("x", p): 2000 + 500j for p in "abc"} | {("y", p): 1200 + 300j for p in "abc"}
    bal = solve(b, Injection(node_injection(b, s)), SolverOptions(tolerance=1e-12))
    v = {"r": 230.0 + 0j, "m": 230.0 + 0j, "x": 230.0 + 0j, "y": 230.0 + 0j}
    for _ in range(200):
        ix, iy = np.conj((2000 + 500j) / v["x"]), np.conj((1200 + 300j) / v["y"])
        v["m"] = v["r"] - (0.05 + 0.02j) * (ix + iy)
        v["x"] = v["m"] - (0.08 + 0.03j) * ix
        v["y"] = v["m"] - 1.5 * (0.08 + 0.03j) * iy
    rel = max(abs(bal.voltages[b.node_index(n), p] - v[n] * ROT**p) / abs(v[n])
              for n in "mxy" for p in range(3))
    elapsed = time.perf_counter() - start

    ok = v_err <= 1e-6 and rel <= 1e-9 and elapsed < 1.0
    acceptance_line(1, ok, f"2-node |dV| {v_err:.2e} V, balanced rel {rel:.2e}, {elapsed:.3f} s")
    assert ok


def test_criterion_02_conservation_year(acceptance_line, tmp_path):
    graph, loads, pv = SyntheticInputs(start_day=0, days=365).build()
    phases = customer_phases(loads)
    nodes = list(phases)
    hosts = np.random.default_rng(2).choice(len(nodes), size=45, replace=False)
    units = [DerUnit(f"pv{k:03d}", nodes[h], phases[nodes[h]], 3770.0 * pv, 3770.0)
             for k, h in enumerate(sorted(hosts))]
    res = HorizonSimulator(graph, loads, units, LIMITS, TARIFF).evaluate(current_assignment(units))
    steps = res.steps
    delivered = res.delivered.sum(axis=0)
    eq_losses = steps.p_root + delivered - steps.p_load
    scale = np.maximum.reduce([np.abs(steps.p_root), steps.p_load, delivered, np.ones_like(delivered)])
    rel = np.abs(eq_losses - steps.losses_direct) / scale
    worst = float(rel.max())
    min_loss = float(eq_losses.min())

    # the per-step CSV re-sums to the reported total
    res.breakdown.to_csv(tmp_path / "costs.csv")
    resum = read_cost_csv(tmp_path / "costs.csv").total
    csv_err = abs(resum - res.breakdown.total)

    ok = worst <= 1e-6 and min_loss >= -1.0 and csv_err <= 1e-9 and bool(steps.converged.all())
    acceptance_line(2, ok, f"{loads.horizon} steps, worst rel {worst:.2e}, min loss {min_loss:.3f} W, "
                           f"CSV re-sum err {csv_err:.1e}")
    assert ok


def test_criterion_03_table_replay(acceptance_line):
    start = time.perf_counter()
    got = []
    for _, is_costs, go_cost, moves, _expected in PUBLISHED_ROWS:
        current = {f"u{i}": "a" for i in range(60)}
        go = {u: ("b" if i < moves else "a") for i, u in enumerate(current)} | {"new": "c"}
        best = min("abc", key=lambda p: (is_costs[p], "abc".index(p)))
        r = decide(ISResult(best, dict(is_costs)), GOResult(go, go_cost, None), current, 100.0).report
        got.append("GO" if r.verdict == "GO" else f"IS({r.is_best[0]})")
    elapsed = time.perf_counter() - start
    expected = [row[-1] for row in PUBLISHED_ROWS]
    ok = got == expected and elapsed < 1.0
    acceptance_line(3, ok, f"{' '.join(got)} in {elapsed * 1e3:.1f} ms")
    assert ok


def test_criterion_04_optimizer(acceptance_line):
    within = 0
    gaps = []
    for instance in range(10):
        table = PairwiseTable(8, 100 + instance)
        _, exact = exhaustive_minimize(8, table)
        _, got = ga_minimize(8, table, GaConfig(population=50, generations=100, seed=7), ("a",) * 8)
        gaps.append((got - exact) / exact)
        within += got <= exact * 1.01

    small_exact = True
    for n in range(1, 7):
        for seed in range(5):
            table = PairwiseTable(n, seed)
            small_exact &= ga_minimize(n, table, GaConfig(), ("a",) * n)[1] == exhaustive_minimize(n, table)[1]
    for n, seed in [(4, 0), (6, 1)]:
        g, loads, units = small_case(20, n, seed, scale=4.0)
        sim = HorizonSimulator(g, loads, units, LIMITS, TARIFF)
        ga = global_select(g, loads, units, LIMITS, TARIFF, simulator=sim)
        ex = global_select(g, loads, units, LIMITS, TARIFF, simulator=sim, exhaustive=True)
        small_exact &= ga.cost == ex.cost

    # timed exhaustive sweep over 3^8 assignments (plus the final breakdown), one-week horizon
    g, loads, units = small_case(32, 8, 0, days=7, scale=3.0)
    sim = HorizonSimulator(g, loads, units, LIMITS, TARIFF)
    start = time.perf_counter()
    global_select(g, loads, units, LIMITS, TARIFF, simulator=sim, exhaustive=True)
    sweep = time.perf_counter() - start

    ok = within >= 9 and small_exact and sweep < 60.0 and sim.evaluations == 3**8 + 1
    acceptance_line(4, ok, f"8-DER within 1%: {within}/10 (max gap {max(gaps):.2%}), "
                           f"<=6-DER exact: {small_exact}, 3^8 week sweep {sweep:.1f} s")
    assert ok


@settings(max_examples=25, deadline=None, derandomize=True)
@given(st.integers(0, 10_000), st.integers(1, 4), st.floats(1.0, 8.0))
def _dominance_case(seed, n_existing, scale):
    g, loads, units = small_case(16, n_existing + 1, seed, scale=scale)
    existing, new = units[:-1], units[-1]
    sim = HorizonSimulator(g, loads, units, LIMITS, TARIFF)
    is_res = individual_select(g, loads, existing, new, LIMITS, TARIFF, simulator=sim)
    ex = global_select(g, loads, units, LIMITS, TARIFF, simulator=sim, exhaustive=True)
    seeded = existing + [new.with_phase(is_res.phase)]
    go = global_select(g, loads, seeded, LIMITS, TARIFF, ga_config=GaConfig(population=8, generations=5),
                       simulator=sim)
    status_quo = sim.cost(current_assignment(units))
    assert ex.cost <= min(is_res.costs.values())
    assert go.cost <= status_quo


def test_criterion_05_dominance(acceptance_line, scenario):
    failure = None
    try:
        _dominance_case()
    except AssertionError as exc:
        failure = exc
    # the same relations on every addition of the seeded scenario
    bad = [rec.index for rec in scenario["result"].additions
           if rec.report.go_cost > min(rec.report.is_costs.values())
           or rec.report.go_cost > rec.status_quo_cost]
    ok = failure is None and not bad
    acceptance_line(5, ok, f"property suite {'held' if failure is None else 'FAILED'}, "
                           f"scenario additions violating: {bad or 'none'}")
    assert ok, failure


def test_criterion_06_cost_reproduction(acceptance_line, scenario):
    adds = scenario["result"].additions
    per_addition = [(rec.method_cost, rec.status_quo_cost) for rec in adds]
    every = len(adds) == 5 and all(m <= s for m, s in per_addition)
    first_go = next((i for i, rec in enumerate(adds) if rec.report.verdict == "GO"), None)
    if first_go is None:
        drop = float("nan")
    else:
        m = math.fsum(rec.method.breakdown.curtail_total for rec in adds[first_go:])
        s = math.fsum(rec.status_quo.breakdown.curtail_total for rec in adds[first_go:])
        drop = 1 - m / s if s > 0 else float("nan")
    elapsed = scenario["elapsed"]
    ok = every and drop >= 0.9 and elapsed < 600
    costs = ", ".join(f"{m:.0f}/{s:.0f}" for m, s in per_addition)
    acceptance_line(6, ok, f"method/status-quo EUR per addition: {costs}; curtailment drop {drop:.1%}; "
                           f"run {elapsed:.0f} s")
    assert ok


def _runs(result):
    yield "baseline", result.baseline
    for rec in result.additions:
        yield f"method {rec.index}", rec.method
        yield f"status quo {rec.index}", rec.status_quo
        if rec.noisy_realized is not None:
            yield f"noisy {rec.index}", rec.noisy_realized


def test_criterion_07_policy_contract(acceptance_line, scenario):
    result, graph, loads = scenario["result"], scenario["graph"], scenario["loads"]
    checked = runs = 0
    problems = []
    for name, res in _runs(result):
        runs += 1
        d, a = res.delivered, res.available
        full = np.all(d == a, axis=0)
        zero = np.all(d == 0, axis=0)
        if not np.all(full | zero):
            problems.append(f"{name}: partial delivery")
        producing = d.sum(axis=0) > 0
        if np.any(res.steps.vmax[producing] > LIMITS.v_over):
            problems.append(f"{name}: over-voltage while producing")
        checked += res.available.shape[1]

    # independent re-solve of the final states from their delivered vectors
    for name, units in [("method", result.method_units), ("status_quo", result.status_quo_units)]:
        res = result.final(name)
        net = np.moveaxis(loads.dense(graph), -1, 0).copy()
        for k, u in enumerate(units):
            net[:, graph.node_index(u.node), PHASE_INDEX[u.phase]] -= res.delivered[k]
        vmax = solve_summary(graph, net).vmax
        producing = res.delivered.sum(axis=0) > 0
        if np.any(vmax[producing] > LIMITS.v_over):
            problems.append(f"{name}: re-solve finds over-voltage")
    ok = not problems
    acceptance_line(7, ok, f"{checked} steps over {runs} runs checked; {problems or 'no violations'}")
    assert ok


def test_criterion_08_aggregated_demand(acceptance_line, scenario):
    result = scenario["result"]
    m, s = result.demand("method"), result.demand("status_quo")
    spread_m, spread_s = m.phase_spread(), s.phase_spread()
    export_m, export_s = max(0.0, -m.window_total()), max(0.0, -s.window_total())
    midday = (m.hours >= 10) & (m.hours < 14)
    lower_somewhere = bool(np.any(np.all(m.per_slot[midday] < s.per_slot[midday], axis=0)))
    ok = spread_m < spread_s and export_m > export_s and lower_somewhere
    acceptance_line(8, ok, f"spread {spread_m:.0f} W vs {spread_s:.0f} W; "
                           f"midday export {export_m:.0f} W vs {export_s:.0f} W")
    assert ok


def test_criterion_09_noise(acceptance_line, scenario):
    adds = scenario["result"].additions
    accurate = math.fsum(rec.method_cost for rec in adds)
    noisy = math.fsum(rec.noisy_cost for rec in adds)
    status_quo = math.fsum(rec.status_quo_cost for rec in adds)
    rel = abs(noisy - accurate) / accurate
    below = all(rec.noisy_cost < rec.status_quo_cost and rec.method_cost < rec.status_quo_cost for rec in adds)
    ok = rel <= 0.25 and below
    acceptance_line(9, ok, f"realized {noisy:.0f} EUR vs accurate {accurate:.0f} EUR ({rel:+.1%}), "
                           f"status quo {status_quo:.0f} EUR")
    assert ok


def _csvs(directory):
    return {p.name: p.read_bytes() for p in sorted(directory.glob("*.csv"))}


def test_criterion_10_determinism(acceptance_line, tmp_path):
    gen = tmp_path / "gen"
    assert main(["gen", "--out-dir", str(gen), "--n-customers", "24", "--days", "1", "--start-day", "172"]) == 0
    g, loads, units = small_case(24, 4, 3, scale=3.0)
    inputs = tmp_path / "inputs"
    inputs.mkdir()
    save_ders(units, inputs / "ders.csv", inputs / "pv_series.csv", 0.25)
    save_network(g, inputs / "network.json")
    save_series(loads, inputs / "loads.csv")
    files = ["--network", str(inputs / "network.json"), "--loads", str(inputs / "loads.csv"),
             "--ders", str(inputs / "ders.csv"), "--pv-series", str(inputs / "pv_series.csv")]
    commands = {
        "gen": None,
        "simulate": ["simulate", *files],
        "select": ["select", *files, "--ga-pop", "10", "--ga-gens", "5"],
        "perturb": ["perturb", *files, "--seed", "5"],
        "scenario": ["scenario", "--n-customers", "24", "--days", "1", "--start-day", "172",
                     "--initial-count", "6", "--additions", "2", "--ga-pop", "8", "--ga-gens", "4"],
    }
    differing = []
    for name, argv in commands.items():
        first = gen if argv is None else tmp_path / name
        if argv is not None:
            assert main([argv[0], "--out-dir", str(first), *argv[1:]]) == 0
        again = tmp_path / f"{name}-replay"
        assert main(["replay", "--manifest", str(first / "run_manifest.json"), "--out-dir", str(again)]) == 0
        a, b = _csvs(first), _csvs(again)
        if not a or a != b:
            differing.append(name)
    manifest = json.loads((tmp_path / "scenario" / "run_manifest.json").read_text())
    ok = not differing and manifest["status"] == "ok"
    acceptance_line(10, ok, f"replayed {', '.join(commands)}; differing: {differing or 'none'}")
    assert ok
