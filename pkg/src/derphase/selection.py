"""Connection-phase decisions: individual selection, global re-optimization and
the labour-cost comparison between them."""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from derphase import costs
from derphase.costs import CostBreakdown, Tariff
from derphase.curtail import VoltageLimits, curtail_mask
from derphase.errors import NumericFailure, ValidationError
from derphase.netmodel import (
    PHASE_INDEX,
    PHASES,
    DerUnit,
    NetworkGraph,
    PhaseAssignment,
    PhaseLoadSeries,
    check_assignment,
    check_ders,
    current_assignment,
)
from derphase.optim import GaConfig, exhaustive_minimize, ga_minimize
from derphase.pflow import SolverOptions, StepSummary, solve_summary

logger = logging.getLogger(__name__)

DEFAULT_SWITCH_COST_EUR = 100.0
DEFAULT_CHUNK_STEPS = 2976  # 31 days of 15-minute steps
IS_TIE_RTOL = 1e-9


@dataclass(frozen=True, eq=False)
class StepRecord:
    """Per-timestep quantities of a simulated horizon (arrays of length T)."""

    p_root: np.ndarray
    p_load: np.ndarray
    root_power: np.ndarray  # (3, T) active power per phase at the root
    vmax: np.ndarray
    vmin: np.ndarray
    losses_direct: np.ndarray  # sum over edges of Re(I^H Z I)
    converged: np.ndarray


@dataclass(frozen=True, eq=False)
class HorizonResult:
    breakdown: CostBreakdown
    steps: StepRecord
    curtailed: np.ndarray  # (T,) bool
    available: np.ndarray  # (U, T)
    unit_ids: tuple[str, ...]

    @property
    def delivered(self) -> np.ndarray:
        return np.where(self.curtailed[None, :], 0.0, self.available)


class HorizonSimulator:
    """Evaluates the horizon cost of phase assignments for a fixed set of units.

    Steps without any available DER output, and the loads-only re-solve used
    after curtailment, do not depend on the assignment; both are solved once
    and reused across evaluations.
    """

    def __init__(self, graph: NetworkGraph, loads: PhaseLoadSeries, units: Sequence[DerUnit],
                 limits: VoltageLimits, tariff: Tariff, opts: SolverOptions | None = None,
                 chunk_steps: int = DEFAULT_CHUNK_STEPS) -> None:
        loads.check_against(graph)
        check_ders(units, graph, loads.horizon)
        self.graph = graph
        self.loads = loads
        self.units = tuple(units)
        self.unit_ids = tuple(u.id for u in units)
        self.limits = limits
        self.tariff = tariff
        self.opts = opts or SolverOptions()
        self.horizon = loads.horizon
        self.chunks = [slice(a, min(a + chunk_steps, self.horizon))
                       for a in range(0, self.horizon, chunk_steps)]
        self.available = (np.array([u.production for u in units]) if units
                          else np.zeros((0, self.horizon)))
        self.available_total = self.available.sum(axis=0)
        self.active = self.available_total > 0
        self.p_load = loads.total_active()
        self._host = np.array([graph.node_index(u.node) for u in units], dtype=np.int64)
        self._baseline: StepRecord | None = None
        self._dense_cache: dict[tuple[int, bool], np.ndarray] = {}
        self.evaluations = 0

    def _dense(self, k: int, active_only: bool = False) -> np.ndarray:
        """Time-major ``(T, N, 3)`` load of chunk ``k``; cached when one chunk covers the horizon."""
        key = (k, active_only)
        if key in self._dense_cache:
            return self._dense_cache[key]
        sl = self.chunks[k]
        steps = sl.start + np.flatnonzero(self.active[sl]) if active_only else sl
        dense = np.ascontiguousarray(np.moveaxis(self.loads.dense(self.graph, steps), -1, 0))
        if len(self.chunks) == 1:
            self._dense_cache[key] = dense
        return dense

    def _solve(self, net: np.ndarray, first_step: int, steps: np.ndarray) -> StepSummary:
        try:
            return solve_summary(self.graph, net, self.opts)
        except NumericFailure as exc:
            t = None if exc.step is None else first_step + int(steps[exc.step])
            raise NumericFailure(f"{exc} at t={t}", node=exc.node, step=t) from exc

    @property
    def baseline(self) -> StepRecord:
        """Loads-only solution for every step (all DER output at zero)."""
        if self._baseline is None:
            t_total = self.horizon
            rec = _empty_record(t_total)
            for k, sl in enumerate(self.chunks):
                idx = np.arange(sl.stop - sl.start)
                out = self._solve(self._dense(k), sl.start, idx)
                rec.p_root[sl], rec.root_power[:, sl] = out.p_root, out.root_power
                rec.vmax[sl], rec.vmin[sl], rec.losses_direct[sl] = out.vmax, out.vmin, out.losses
                rec.converged[sl] = out.converged
            rec.p_load[:] = self.p_load
            self._baseline = rec
        return self._baseline

    def evaluate(self, assignment: Mapping[str, str] | Sequence[str]) -> HorizonResult:
        if isinstance(assignment, Mapping):
            check_assignment(assignment, self.unit_ids)
            phases = np.array([PHASE_INDEX[assignment[i]] for i in self.unit_ids], dtype=np.int64)
        else:
            phases = np.array([PHASE_INDEX[p] for p in assignment], dtype=np.int64)
            if phases.size != len(self.units):
                raise ValidationError("assignment length differs from number of units")
        self.evaluations += 1
        base = self.baseline
        rec = _copy_record(base)
        curtailed = np.zeros(self.horizon, dtype=bool)
        for k, sl in enumerate(self.chunks):
            local = np.flatnonzero(self.active[sl])
            if not local.size:
                continue
            glob = sl.start + local
            net = self._dense(k, active_only=True).copy()
            for u in range(len(self.units)):
                net[:, self._host[u], phases[u]] -= self.available[u, glob]
            out = self._solve(net, sl.start, local)
            cut = curtail_mask(out.vmax, self.available_total[glob], self.limits)
            keep = ~cut
            g = glob[keep]
            rec.p_root[g], rec.root_power[:, g] = out.p_root[keep], out.root_power[:, keep]
            rec.vmax[g], rec.vmin[g] = out.vmax[keep], out.vmin[keep]
            rec.losses_direct[g] = out.losses[keep]
            rec.converged[g] = out.converged[keep]
            curtailed[glob[cut]] = True
        if not rec.converged.all():
            logger.warning("%d steps did not converge", int((~rec.converged).sum()))
        delivered_total = np.where(curtailed, 0.0, self.available_total)
        loss_cost = costs.loss_costs(rec.p_root, delivered_total, self.p_load, self.tariff)
        curtail_cost = costs.curtail_costs(self.available_total, delivered_total, self.tariff)
        breakdown = CostBreakdown.from_series(
            np.broadcast_to(loss_cost, (self.horizon,)), np.broadcast_to(curtail_cost, (self.horizon,))
        )
        return HorizonResult(breakdown, rec, curtailed, self.available, self.unit_ids)

    def cost(self, assignment: Mapping[str, str] | Sequence[str]) -> float:
        return self.evaluate(assignment).breakdown.total


def _empty_record(t: int) -> StepRecord:
    return StepRecord(np.zeros(t), np.zeros(t), np.zeros((3, t)), np.zeros(t), np.zeros(t),
                      np.zeros(t), np.ones(t, dtype=bool))


def _copy_record(r: StepRecord) -> StepRecord:
    return StepRecord(r.p_root.copy(), r.p_load.copy(), r.root_power.copy(), r.vmax.copy(),
                      r.vmin.copy(), r.losses_direct.copy(), r.converged.copy())


def simulate_horizon(graph: NetworkGraph, loads: PhaseLoadSeries, ders: Sequence[DerUnit],
                     assignment: Mapping[str, str], limits: VoltageLimits, tariff: Tariff,
                     opts: SolverOptions | None = None) -> CostBreakdown:
    """Per-step loss plus curtailment cost over the whole horizon."""
    return HorizonSimulator(graph, loads, ders, limits, tariff, opts).evaluate(assignment).breakdown


class ISResult(NamedTuple):
    phase: str
    costs: dict[str, float]
    breakdowns: dict[str, CostBreakdown] | None = None


class GOResult(NamedTuple):
    assignment: PhaseAssignment
    cost: float
    breakdown: CostBreakdown | None = None


def individual_select(graph: NetworkGraph, loads: PhaseLoadSeries, existing_ders: Sequence[DerUnit],
                      new_der: DerUnit, limits: VoltageLimits, tariff: Tariff,
                      opts: SolverOptions | None = None,
                      simulator: HorizonSimulator | None = None) -> ISResult:
    """Try the new unit on each phase with all other units fixed; lowest cost wins,
    ties going to the earlier phase in a, b, c order."""
    units = list(existing_ders) + [new_der]
    sim = simulator or HorizonSimulator(graph, loads, units, limits, tariff, opts)
    base = current_assignment(existing_ders)
    found: dict[str, float] = {}
    breakdowns: dict[str, CostBreakdown] = {}
    for phase in PHASES:
        bd = sim.evaluate({**base, new_der.id: phase}).breakdown
        found[phase], breakdowns[phase] = bd.total, bd
    return ISResult(_first_minimum(found), found, breakdowns)


def _first_minimum(found: Mapping[str, float]) -> str:
    # Costs within IS_TIE_RTOL of the minimum count as ties: rotating a symmetric
    # case across phases changes the result only by rounding.
    low = min(found.values())
    return next(p for p in PHASES if found[p] <= low + IS_TIE_RTOL * abs(low))


def global_select(graph: NetworkGraph, loads: PhaseLoadSeries, all_ders: Sequence[DerUnit],
                  limits: VoltageLimits, tariff: Tariff, opts: SolverOptions | None = None,
                  ga_config: GaConfig | None = None,
                  simulator: HorizonSimulator | None = None,
                  exhaustive: bool = False,
                  trace: list | None = None) -> GOResult:
    """Jointly re-optimize every unit's phase, seeded with the units' current phases."""
    sim = simulator or HorizonSimulator(graph, loads, all_ders, limits, tariff, opts)
    ids = [u.id for u in all_ders]
    if not ids:
        bd = sim.evaluate({}).breakdown
        return GOResult({}, bd.total, bd)
    seed = tuple(u.phase for u in all_ders)
    if exhaustive:
        best, _ = exhaustive_minimize(len(ids), sim.cost)
    else:
        best, _ = ga_minimize(len(ids), sim.cost, ga_config or GaConfig(), seed, trace=trace)
    assignment = dict(zip(ids, best))
    bd = sim.evaluate(assignment).breakdown
    return GOResult(assignment, bd.total, bd)


@dataclass(frozen=True)
class SelectionReport:
    is_costs: dict[str, float]
    is_best: tuple[str, float]
    go_cost: float
    rephase_count: int
    switch_unit_cost: float
    go_total: float
    verdict: str  # "IS" or "GO"
    assignment_diff: dict[str, tuple[str | None, str]] = field(default_factory=dict)

    @property
    def selected_cost(self) -> float:
        return self.go_total if self.verdict == "GO" else self.is_best[1]

    def to_json(self) -> str:
        doc = {
            "is_costs": self.is_costs,
            "go_cost": self.go_cost,
            "rephase_count": self.rephase_count,
            "go_total": self.go_total,
            "verdict": self.verdict if self.verdict == "GO" else f"IS({self.is_best[0]})",
            "assignment_diff": {k: list(v) for k, v in self.assignment_diff.items()},
        }
        return json.dumps(doc, indent=2, sort_keys=False) + "\n"


@dataclass(frozen=True)
class DecisionOutcome:
    report: SelectionReport
    final_assignment: PhaseAssignment
    cost_series: CostBreakdown | None


def decide(is_result: ISResult, go_result: GOResult, current_assignment: Mapping[str, str],
           switch_unit_cost: float = DEFAULT_SWITCH_COST_EUR) -> DecisionOutcome:
    """Apply the global assignment only when it beats the best individual choice
    after paying for every existing unit it moves. Ties keep the individual choice."""
    new_ids = [i for i in go_result.assignment if i not in current_assignment]
    moved = [i for i in current_assignment if go_result.assignment.get(i, current_assignment[i])
             != current_assignment[i]]
    rephase_count = len(moved)
    go_total = go_result.cost + rephase_count * switch_unit_cost
    is_best = (is_result.phase, is_result.costs[is_result.phase])
    if go_total < min(is_result.costs.values()):
        verdict = "GO"
        final = dict(go_result.assignment)
        diff = {i: (current_assignment[i], final[i]) for i in moved}
        series = go_result.breakdown
    else:
        verdict = "IS"
        final = dict(current_assignment)
        final.update({i: is_result.phase for i in new_ids})
        diff = {}
        series = is_result.breakdowns[is_result.phase] if is_result.breakdowns else None
    for i in new_ids:
        diff[i] = (None, final[i])
    report = SelectionReport(dict(is_result.costs), is_best, go_result.cost, rephase_count,
                             switch_unit_cost, go_total, verdict, diff)
    return DecisionOutcome(report, final, series)
