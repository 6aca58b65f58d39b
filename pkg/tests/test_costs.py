import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derphase.costs import (
    CostBreakdown,
    Tariff,
    curtail_cost,
    curtail_costs,
    horizon_total,
    loss_cost,
    loss_costs,
    read_cost_csv,
)
from derphase.errors import InconsistentSolveError, ValidationError
from derphase.pflow import Injection, solve

from _fixtures import ORACLE_LOSS_W, node_injection, two_node

TARIFF = Tariff(0.2702, 0.25)


def test_lossless_bookkeeping():
    assert loss_cost(1500.0, [], 1500.0, TARIFF, 0) == 0.0


def test_loss_cost_direct_evaluation():
    assert loss_cost(2000.0, [], 0.0, TARIFF, 0) == pytest.approx(2 * 0.25 * 0.2702, abs=1e-15)
    # DER output adds to the power fed into the network
    assert loss_cost(-1000.0, [2500.0, 500.0], 0.0, TARIFF, 0) == pytest.approx(0.1351, abs=1e-15)


def test_loss_cost_chained_from_two_node_solve():
    g = two_node()
    sol = solve(g, Injection(node_injection(g, {("n1", "a"): 1000.0})))
    got = loss_cost(sol.p_root, [], 1000.0, TARIFF, 0)
    assert got == pytest.approx(ORACLE_LOSS_W / 1000 * 0.25 * 0.2702, abs=1e-9)


def test_negative_loss_guard():
    assert loss_cost(999.5, [], 1000.0, TARIFF, 0) == 0.0  # within epsilon: clamped
    with pytest.raises(InconsistentSolveError, match="t=3"):
        loss_cost(990.0, [], 1000.0, TARIFF, 3)
    with pytest.raises(InconsistentSolveError, match="t=7"):
        loss_costs(np.array([5.0, -3.0]), np.zeros(2), np.zeros(2), TARIFF, np.array([6, 7]))


def test_curtail_cost_examples():
    assert curtail_cost([3770.0, 100.0], [3770.0, 100.0], TARIFF, 0) == 0.0
    assert curtail_cost([3770.0], [0.0], TARIFF, 0) == pytest.approx(3.77 * 0.25 * 0.2702, abs=1e-15)
    with pytest.raises(ValidationError, match="pv9"):
        curtail_cost([100.0, 100.0], [50.0, 150.0], TARIFF, 0, unit_ids=["pv8", "pv9"])
    with pytest.raises(ValidationError):
        curtail_cost([100.0], [-1.0], TARIFF, 0)


def test_horizon_total():
    empty = horizon_total([])
    assert empty.total == 0.0
    bd = horizon_total([(1.0, 2.0), (3.0, 4.0)])
    assert bd.total == 10.0
    assert bd.per_step_loss_cost.tolist() == [1.0, 3.0]
    assert bd.per_step_curtail_cost.tolist() == [2.0, 4.0]


def test_per_step_price_series():
    tariff = Tariff(np.array([0.1, 0.2, 0.3]), 0.5)
    got = loss_costs(np.array([1000.0] * 3), np.zeros(3), np.zeros(3), tariff)
    np.testing.assert_allclose(got, [0.05, 0.1, 0.15], rtol=1e-15)
    assert loss_cost(1000.0, [], 0.0, tariff, 2) == pytest.approx(0.15)


@pytest.mark.parametrize("kwargs", [{"e_price": -0.1}, {"gamma": 0.0}, {"e_price": np.array([0.1, np.nan])}])
def test_tariff_invariants(kwargs):
    with pytest.raises(ValidationError):
        Tariff(**kwargs)


def test_csv_resums_to_total(tmp_path):
    rng = np.random.default_rng(4)
    bd = CostBreakdown.from_series(rng.random(500) * 1e-3, rng.random(500) * 0.3)
    bd.to_csv(tmp_path / "c.csv")
    back = read_cost_csv(tmp_path / "c.csv")
    assert abs(back.total - bd.total) <= 1e-9
    np.testing.assert_array_equal(back.per_step_loss_cost, bd.per_step_loss_cost)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.one_of(st.just(0.0), st.floats(1e-3, 1e5)), min_size=1, max_size=20), st.floats(0.01, 100))
def test_price_scaling_is_linear(p_nl, factor):
    p_nl = np.array(p_nl)
    base = loss_costs(p_nl, np.zeros_like(p_nl), np.zeros_like(p_nl), TARIFF)
    scaled = loss_costs(p_nl, np.zeros_like(p_nl), np.zeros_like(p_nl), TARIFF.scaled(factor))
    np.testing.assert_allclose(scaled, factor * base, rtol=1e-12, atol=0)
    doubled = loss_costs(2 * p_nl, np.zeros_like(p_nl), np.zeros_like(p_nl), TARIFF)
    np.testing.assert_allclose(doubled, 2 * base, rtol=1e-12, atol=0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.one_of(st.just(0.0), st.floats(1e-3, 4000)),
                          st.one_of(st.just(1.0), st.floats(0, 0.999))), min_size=1, max_size=10))
def test_curtail_cost_zero_iff_nothing_withheld(pairs):
    available = np.array([a for a, _ in pairs])
    delivered = np.array([a * f for a, f in pairs])
    cost = curtail_cost(available, delivered, TARIFF, 0)
    assert cost >= 0
    assert (cost == 0) == bool(np.all(delivered == available))
    vec = curtail_costs(np.array([available.sum()]), np.array([delivered.sum()]), TARIFF)[0]
    assert vec == pytest.approx(cost, rel=1e-9, abs=1e-15)
    assert math.isfinite(cost)
