"""Sequential-installation experiment: an initial PV population, a run of new
units decided one at a time, a status-quo comparison and a noisy-input rerun.

Outputs (all CSV floats written with ``repr`` so reruns are byte-identical):

- ``decision_table.csv``: per addition, the three individual costs, the global
  cost, the rephasing count, the global total including labour and the verdict.
- ``costs_per_addition.csv``: method vs status-quo cost per addition.
- ``curtailment.csv``: available and delivered power per unit and daylight step
  in the final state of each run.
- ``aggregated_demand.csv``: mean root demand per time-of-day slot and phase.
- ``run_manifest.json``: configuration echo and run status.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from derphase import __version__, profiles
from derphase.costs import DEFAULT_PRICE_EUR_KWH, Tariff
from derphase.curtail import VoltageLimits
from derphase.errors import DerphaseError, ValidationError
from derphase.netmodel import (
    PHASES,
    DerUnit,
    NetworkGraph,
    PhaseLoadSeries,
    FeederSpec,
    current_assignment,
    customer_phases,
    gen_feeder,
)
from derphase.optim import GaConfig
from derphase.pflow import PowerFlowSolution, SolverOptions
from derphase.selection import (
    DEFAULT_SWITCH_COST_EUR,
    HorizonResult,
    HorizonSimulator,
    SelectionReport,
    decide,
    global_select,
    individual_select,
)

logger = logging.getLogger(__name__)

UNIT_P_MAX_W = 13 * 290.0
HOURS_PER_DAY = 24.0
MIDDAY_HOURS = (10.0, 14.0)

# Full-horizon evaluations cost tens of milliseconds each, so the scenario runs
# a smaller GA than the library default.
SCENARIO_GA = GaConfig(population=24, generations=30, stall_generations=8)


@dataclass(frozen=True)
class ScenarioConfig:
    initial_der_fraction: float = 0.35
    initial_der_count: int | None = None  # pins the count instead of floor(fraction * customers)
    n_additions: int = 5
    unit_p_max: float = UNIT_P_MAX_W
    horizon: int | None = None  # leading steps of the inputs to use; None keeps all
    seed: int = 0
    noise_load_sigma: float = 0.30
    noise_pv_sigma: float = 0.05
    with_noise: bool = True
    price_eur_kwh: float = DEFAULT_PRICE_EUR_KWH
    over_pct: float = 5.0
    under_pct: float = 10.0
    switch_unit_cost: float = DEFAULT_SWITCH_COST_EUR
    ga_config: GaConfig = SCENARIO_GA
    solver: SolverOptions = field(default_factory=SolverOptions)

    def __post_init__(self) -> None:
        if not 0 <= self.initial_der_fraction <= 1:
            raise ValidationError("initial_der_fraction must lie in [0, 1]")
        if self.initial_der_count is not None and self.initial_der_count < 0:
            raise ValidationError("initial_der_count must be >= 0")
        if self.n_additions < 0:
            raise ValidationError("n_additions must be >= 0")
        if self.noise_load_sigma < 0 or self.noise_pv_sigma < 0:
            raise ValidationError("noise sigmas must be >= 0")
        if not self.unit_p_max > 0:
            raise ValidationError("unit_p_max must be positive")
        if self.horizon is not None and self.horizon < 1:
            raise ValidationError("horizon must be >= 1")

    def tariff(self, dt_hours: float) -> Tariff:
        return Tariff(self.price_eur_kwh, dt_hours)

    def limits(self, v_nominal: float) -> VoltageLimits:
        return VoltageLimits.from_nominal(v_nominal, self.over_pct, self.under_pct)

    def to_dict(self) -> dict:
        return {
            "initial_der_fraction": self.initial_der_fraction,
            "initial_der_count": self.initial_der_count,
            "n_additions": self.n_additions,
            "unit_p_max": self.unit_p_max,
            "horizon": self.horizon,
            "seed": self.seed,
            "noise_load_sigma": self.noise_load_sigma,
            "noise_pv_sigma": self.noise_pv_sigma,
            "with_noise": self.with_noise,
            "price_eur_kwh": self.price_eur_kwh,
            "over_pct": self.over_pct,
            "under_pct": self.under_pct,
            "switch_unit_cost": self.switch_unit_cost,
            "ga_config": {k: getattr(self.ga_config, k) for k in self.ga_config.__dataclass_fields__},
            "solver": {"tolerance": self.solver.tolerance, "max_iterations": self.solver.max_iterations},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> ScenarioConfig:
        doc = dict(doc)
        ga = GaConfig(**doc.pop("ga_config", {}))
        solver = SolverOptions(**doc.pop("solver", {}))
        try:
            return cls(ga_config=ga, solver=solver, **doc)
        except TypeError as exc:
            raise ValidationError(f"bad scenario config: {exc}") from exc


# ---------------------------------------------------------------------------
# Forecast noise
# ---------------------------------------------------------------------------


def noise_factors(shape: tuple[int, ...], sigma: float, seed: int | Sequence[int] | np.random.Generator) -> np.ndarray:
    """Multiplicative factors drawn from N(1, sigma) and clipped to [0, 2]."""
    if sigma < 0:
        raise ValidationError(f"sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return np.ones(shape)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return np.clip(rng.normal(1.0, sigma, size=shape), 0.0, 2.0)


def perturb_series(series, sigma: float, seed, cap: float | None = None):
    """Scale every value by its own noise factor; deterministic per seed.

    Accepts an array, a :class:`PhaseLoadSeries` (active and reactive parts
    share the factor) or a :class:`DerUnit` (result re-capped at ``p_max``).
    ``cap`` bounds an array result from above.
    """
    if isinstance(series, PhaseLoadSeries):
        f = noise_factors(series.s.shape, sigma, seed)
        return PhaseLoadSeries(series.horizon, series.dt_hours, series.entries, series.s * f)
    if isinstance(series, DerUnit):
        return series.with_production(perturb_series(series.production, sigma, seed, cap=series.p_max))
    values = np.asarray(series)
    out = values * noise_factors(values.shape, sigma, seed)
    if cap is not None:
        out = np.minimum(out, cap)
    return out


def perturb_ders(units: Sequence[DerUnit], sigma: float, seed) -> list[DerUnit]:
    """Independent noise per unit and step, each unit drawing from its own stream."""
    base = seed if isinstance(seed, (list, tuple)) else [seed]
    return [perturb_series(u, sigma, [*base, k]) for k, u in enumerate(units)]


# ---------------------------------------------------------------------------
# Aggregated demand
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class AggregatedDemand:
    """Mean root demand per time-of-day slot, shape ``(slots, 3)``, in watts.

    Negative values are reverse flow towards the upstream grid.
    """

    per_slot: np.ndarray
    dt_hours: float

    @property
    def hours(self) -> np.ndarray:
        return np.arange(self.per_slot.shape[0]) * self.dt_hours

    def phase_spread(self) -> float:
        """Mean over slots of (largest phase - smallest phase)."""
        return float(np.mean(self.per_slot.max(axis=1) - self.per_slot.min(axis=1)))

    def window_total(self, start_hour: float = MIDDAY_HOURS[0], end_hour: float = MIDDAY_HOURS[1]) -> float:
        """Mean three-phase demand over slots starting in ``[start_hour, end_hour)``."""
        sel = (self.hours >= start_hour) & (self.hours < end_hour)
        return float(self.per_slot[sel].sum(axis=1).mean())


def aggregated_demand(source, dt_hours: float, graph: NetworkGraph | None = None) -> AggregatedDemand:
    """Average the per-phase root demand of each time-of-day slot over the days.

    ``source`` is a ``(3, T)`` array of root active power per phase or a batched
    :class:`PowerFlowSolution` (which needs ``graph``).
    """
    if isinstance(source, PowerFlowSolution):
        if graph is None:
            raise ValidationError("a graph is needed to read root power from a solution")
        power = np.asarray(source.root_phase_power(graph), dtype=float)
        if power.ndim == 1:
            power = power[:, None]
    else:
        power = np.asarray(source, dtype=float)
    if power.ndim != 2 or power.shape[0] != 3:
        raise ValidationError(f"root power must have shape (3, T), got {power.shape}")
    slots_f = HOURS_PER_DAY / dt_hours
    slots = int(round(slots_f))
    if not math.isclose(slots, slots_f, rel_tol=0, abs_tol=1e-9) or slots < 1:
        raise ValidationError(f"dt_hours={dt_hours} does not divide a day")
    t = power.shape[1]
    if t == 0 or t % slots:
        raise ValidationError(f"horizon of {t} steps is not a whole number of days ({slots} steps per day)")
    per_slot = power.reshape(3, t // slots, slots).mean(axis=1).T
    return AggregatedDemand(np.ascontiguousarray(per_slot), dt_hours)


# ---------------------------------------------------------------------------
# Synthetic inputs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticInputs:
    """Recipe for the generated feeder, loads and PV profile of a scenario."""

    n_customers: int = 128
    seed: int = 42
    start_day: int = 152  # June 1st, zero-based day of year
    days: int = 30
    dt_hours: float = 0.25
    pv_seed: int = 1

    def build(self) -> tuple[NetworkGraph, PhaseLoadSeries, np.ndarray]:
        steps_f = self.days * HOURS_PER_DAY / self.dt_hours
        if self.days < 1 or not float(steps_f).is_integer():
            raise ValidationError("days must be >= 1 and a whole number of steps")
        spec = FeederSpec(horizon=int(steps_f), dt_hours=self.dt_hours, start_day=self.start_day)
        graph, loads = gen_feeder(self.n_customers, self.seed, spec)
        pv = profiles.pv_profile(spec.horizon, self.dt_hours, self.start_day, np.random.default_rng(self.pv_seed))
        return graph, loads, pv

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


# ---------------------------------------------------------------------------
# Scenario run
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class AdditionRecord:
    index: int
    unit: str
    node: str
    customer_phase: str
    report: SelectionReport
    method: HorizonResult  # final state after applying the verdict
    method_cost: float  # selected cost, labour included
    status_quo: HorizonResult
    noisy_report: SelectionReport | None = None
    noisy_realized: HorizonResult | None = None
    noisy_cost: float | None = None  # realized on the true series, labour included

    @property
    def status_quo_cost(self) -> float:
        return self.status_quo.breakdown.total


@dataclass(eq=False)
class ScenarioResult:
    config: ScenarioConfig
    dt_hours: float
    initial_units: list[DerUnit]
    baseline: HorizonResult | None = None
    additions: list[AdditionRecord] = field(default_factory=list)
    method_units: list[DerUnit] = field(default_factory=list)
    status_quo_units: list[DerUnit] = field(default_factory=list)
    noisy_units: list[DerUnit] = field(default_factory=list)
    status: str = "running"

    @property
    def reports(self) -> list[SelectionReport]:
        return [a.report for a in self.additions]

    def final(self, run: str) -> HorizonResult | None:
        if self.additions:
            a = self.additions[-1]
            return {"method": a.method, "status_quo": a.status_quo, "noisy": a.noisy_realized}[run]
        return self.baseline

    def demand(self, run: str) -> AggregatedDemand | None:
        res = self.final(run)
        return None if res is None else aggregated_demand(res.steps.root_power, self.dt_hours)

    def write(self, out_dir: str | Path, inputs: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self._write_decisions(out / "decision_table.csv")
        self._write_costs(out / "costs_per_addition.csv")
        self._write_curtailment(out / "curtailment.csv")
        self._write_demand(out / "aggregated_demand.csv")
        manifest = {
            "command": "scenario",
            "version": __version__,
            "status": self.status,
            "config": self.config.to_dict(),
            "inputs": inputs or {},
            "initial_units": [[u.id, u.node, u.phase] for u in self.initial_units],
            "final_assignment": {
                "method": current_assignment(self.method_units),
                "status_quo": current_assignment(self.status_quo_units),
            },
        }
        with open(out / "run_manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")

    def _write_decisions(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["addition", "unit", "node", "customer_phase", "is_a_eur", "is_b_eur", "is_c_eur",
                        "go_eur", "rephase_count", "go_total_eur", "verdict", "selected_eur"])
            for a in self.additions:
                r = a.report
                verdict = "GO" if r.verdict == "GO" else f"IS({r.is_best[0]})"
                w.writerow([a.index, a.unit, a.node, a.customer_phase,
                            *(repr(r.is_costs[p]) for p in PHASES), repr(r.go_cost),
                            r.rephase_count, repr(r.go_total), verdict, repr(r.selected_cost)])

    def _write_costs(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["addition", "unit", "method_eur", "method_loss_eur", "method_curtail_eur",
                        "method_labour_eur", "status_quo_eur", "status_quo_loss_eur",
                        "status_quo_curtail_eur", "noisy_method_eur"])
            for a in self.additions:
                m, s = a.method.breakdown, a.status_quo.breakdown
                labour = a.method_cost - m.total
                w.writerow([a.index, a.unit, repr(a.method_cost), repr(m.loss_total), repr(m.curtail_total),
                            repr(labour), repr(s.total), repr(s.loss_total), repr(s.curtail_total),
                            "" if a.noisy_cost is None else repr(a.noisy_cost)])

    def _write_curtailment(self, path: Path) -> None:
        # One row per unit and step with output available; night rows are all zero.
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "t", "unit", "available_w", "delivered_w"])
            for run in ("method", "status_quo"):
                res = self.final(run)
                if res is None:
                    continue
                delivered = res.delivered
                for t in np.flatnonzero(res.available.sum(axis=0) > 0):
                    for k, uid in enumerate(res.unit_ids):
                        w.writerow([run, int(t), uid, repr(float(res.available[k, t])),
                                    repr(float(delivered[k, t]))])

    def _write_demand(self, path: Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["run", "slot", "hour", "p_a_w", "p_b_w", "p_c_w"])
            for run in ("method", "status_quo"):
                agg = self.demand(run)
                if agg is None:
                    continue
                for s, hour in enumerate(agg.hours):
                    w.writerow([run, s, repr(float(hour)), *(repr(float(x)) for x in agg.per_slot[s])])


def _truncate(loads: PhaseLoadSeries, pv: np.ndarray, horizon: int | None) -> tuple[PhaseLoadSeries, np.ndarray]:
    if pv.shape != (loads.horizon,):
        raise ValidationError(f"PV profile has {pv.shape[0]} steps, loads have {loads.horizon}")
    if horizon is None or horizon == loads.horizon:
        return loads, pv
    if horizon > loads.horizon:
        raise ValidationError(f"horizon {horizon} exceeds the {loads.horizon} steps of the inputs")
    return PhaseLoadSeries(horizon, loads.dt_hours, loads.entries, loads.s[:, :horizon]), pv[:horizon]


def _choose(cfg: ScenarioConfig, customers: list[str]) -> tuple[list[str], list[str]]:
    n_init = (cfg.initial_der_count if cfg.initial_der_count is not None
              else math.floor(cfg.initial_der_fraction * len(customers)))
    if n_init + cfg.n_additions > len(customers):
        raise ValidationError(
            f"{n_init} initial plus {cfg.n_additions} new units exceed {len(customers)} customers"
        )
    rng = np.random.default_rng([cfg.seed, 0])
    picked = rng.choice(len(customers), size=n_init + cfg.n_additions, replace=False)
    hosts = [customers[i] for i in picked]
    return sorted(hosts[:n_init], key=customers.index), hosts[n_init:]


class _Trajectory:
    """One sequence of decisions made on possibly perturbed inputs."""

    def __init__(self, graph, loads, units, cfg: ScenarioConfig, limits, tariff):
        self.graph, self.loads, self.units = graph, loads, list(units)
        self.cfg, self.limits, self.tariff = cfg, limits, tariff

    def add(self, new: DerUnit, k: int) -> tuple[SelectionReport, dict[str, str]]:
        cfg = self.cfg
        sim = HorizonSimulator(self.graph, self.loads, self.units + [new], self.limits, self.tariff, cfg.solver)
        is_res = individual_select(self.graph, self.loads, self.units, new, self.limits, self.tariff,
                                   cfg.solver, simulator=sim)
        # The new unit enters the global search on its individually best phase.
        seeded = self.units + [new.with_phase(is_res.phase)]
        go_res = global_select(self.graph, self.loads, seeded, self.limits, self.tariff, cfg.solver,
                               replace(cfg.ga_config, seed=cfg.ga_config.seed + k), simulator=sim)
        outcome = decide(is_res, go_res, current_assignment(self.units), cfg.switch_unit_cost)
        self.units = [u.with_phase(outcome.final_assignment[u.id]) for u in seeded]
        logger.info("addition %d: %s (IS %s, GO total %.2f)", k, outcome.report.verdict,
                    outcome.report.is_best, outcome.report.go_total)
        return outcome.report, outcome.final_assignment


def run_scenario(config: ScenarioConfig, graph: NetworkGraph, loads: PhaseLoadSeries, pv_per_unit: np.ndarray,
                 out_dir: str | Path | None = None, inputs: dict | None = None) -> ScenarioResult:
    """Install the initial units on their customers' phases, then decide each new
    unit in turn by individual selection, global re-optimization and the labour
    comparison. The status-quo run connects every new unit to its customer's
    phase. With noise enabled, a third run makes its decisions on perturbed loads
    and PV and is costed on the true series.

    ``pv_per_unit`` is the available output of one unit per unit of capacity,
    shape ``(T,)``. If ``out_dir`` is given the outputs are written there, also
    when the run fails part way (the manifest then carries the failure).
    """
    cfg = config
    loads.check_against(graph)
    pv = np.asarray(pv_per_unit, dtype=float)
    loads, pv = _truncate(loads, pv, cfg.horizon)
    if np.any(pv < 0) or np.any(pv > 1) or not np.all(np.isfinite(pv)):
        raise ValidationError("PV profile must lie in [0, 1] per unit of capacity")
    production = cfg.unit_p_max * pv
    tariff = cfg.tariff(loads.dt_hours)
    limits = cfg.limits(graph.v_nominal)
    phases = customer_phases(loads)
    customers = list(phases)
    initial_hosts, new_hosts = _choose(cfg, customers)
    initial = [DerUnit(f"pv{i:03d}", n, phases[n], production, cfg.unit_p_max)
               for i, n in enumerate(initial_hosts)]
    result = ScenarioResult(cfg, loads.dt_hours, initial, method_units=list(initial),
                            status_quo_units=list(initial), noisy_units=list(initial))
    try:
        _run(result, graph, loads, production, new_hosts, phases, limits, tariff)
        result.status = "ok"
    except DerphaseError as exc:
        result.status = f"failed: {exc}"
        raise
    finally:
        if out_dir is not None:
            result.write(out_dir, inputs)
    return result


def _run(result: ScenarioResult, graph, loads, production, new_hosts, phases, limits, tariff) -> None:
    cfg = result.config
    initial = result.initial_units
    base_sim = HorizonSimulator(graph, loads, initial, limits, tariff, cfg.solver)
    result.baseline = base_sim.evaluate(current_assignment(initial))

    method = _Trajectory(graph, loads, initial, cfg, limits, tariff)
    noisy = None
    if cfg.with_noise:
        noisy_loads = perturb_series(loads, cfg.noise_load_sigma, [cfg.seed, 1])
        noisy = _Trajectory(graph, noisy_loads, perturb_ders(initial, cfg.noise_pv_sigma, [cfg.seed, 2]),
                            cfg, limits, tariff)
    sq_units = list(initial)
    true_noisy_units = list(initial)

    for k, node in enumerate(new_hosts, start=1):
        uid = f"pv{len(initial) + k - 1:03d}"
        new = DerUnit(uid, node, phases[node], production, cfg.unit_p_max)
        report, final = method.add(new, k)
        sim = HorizonSimulator(graph, loads, method.units, limits, tariff, cfg.solver)
        method_state = sim.evaluate(final)
        labour = report.rephase_count * cfg.switch_unit_cost if report.verdict == "GO" else 0.0
        sq_units = sq_units + [new]
        sq_state = HorizonSimulator(graph, loads, sq_units, limits, tariff, cfg.solver).evaluate(
            current_assignment(sq_units))
        record = AdditionRecord(k, uid, node, phases[node], report, method_state,
                                method_state.breakdown.total + labour, sq_state)
        if noisy is not None:
            noisy_new = perturb_series(new, cfg.noise_pv_sigma, [cfg.seed, 2, len(initial) + k - 1])
            n_report, n_final = noisy.add(noisy_new, k)
            true_noisy_units = [u.with_phase(n_final[u.id]) for u in true_noisy_units + [new]]
            realized = HorizonSimulator(graph, loads, true_noisy_units, limits, tariff, cfg.solver).evaluate(n_final)
            n_labour = n_report.rephase_count * cfg.switch_unit_cost if n_report.verdict == "GO" else 0.0
            record.noisy_report = n_report
            record.noisy_realized = realized
            record.noisy_cost = realized.breakdown.total + n_labour
        result.additions.append(record)
        result.method_units = list(method.units)
        result.status_quo_units = list(sq_units)
        result.noisy_units = list(true_noisy_units)
