"""Voltage limits and the curtail-everything-on-over-voltage policy."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from derphase.errors import ValidationError
from derphase.netmodel import PHASE_INDEX, PHASES, DerUnit, NetworkGraph
from derphase.pflow import Injection, PowerFlowSolution, SolverOptions, solve


@dataclass(frozen=True)
class VoltageLimits:
    v_over: float
    v_under: float

    def __post_init__(self) -> None:
        if not 0 < self.v_under < self.v_over:
            raise ValidationError(
                f"voltage limits need 0 < v_under < v_over, got {self.v_under}, {self.v_over}"
            )

    @classmethod
    def from_nominal(cls, v_nominal: float, over_pct: float = 5.0, under_pct: float = 10.0) -> VoltageLimits:
        return cls(v_nominal * (1 + over_pct / 100.0), v_nominal * (1 - under_pct / 100.0))


@dataclass(frozen=True, eq=False)
class CurtailResult:
    """Outcome of the policy. For a batch, ``delivered`` is ``(U, T)`` and the
    violation lists carry ``(t, node, phase, ...)`` tuples."""

    delivered: np.ndarray
    solution: PowerFlowSolution
    violations_remaining: list[tuple]
    under_voltage_flags: list[tuple]
    curtailed: np.ndarray | bool


def check_overvoltage(solution: PowerFlowSolution, limits: VoltageLimits,
                      graph: NetworkGraph | None = None) -> list[tuple[str, str]]:
    """(node, phase) pairs whose voltage magnitude exceeds ``limits.v_over``.

    Nodes are reported by index unless ``graph`` is given.
    """
    mag = np.abs(solution.voltages)
    if mag.ndim != 2:
        raise ValueError("check_overvoltage expects a single-timestep solution")
    rows, cols = np.nonzero(mag > limits.v_over)
    name = (lambda i: graph.nodes[i]) if graph is not None else (lambda i: int(i))
    return [(name(i), PHASES[j]) for i, j in zip(rows, cols)]


def overvoltage_steps(voltages: np.ndarray, limits: VoltageLimits) -> np.ndarray:
    """Boolean per timestep: any node/phase above ``v_over``."""
    return np.abs(voltages).max(axis=(0, 1)) > limits.v_over


def curtail_mask(vmax: np.ndarray, available_total: np.ndarray, limits: VoltageLimits) -> np.ndarray:
    """Steps at which every active unit is switched off: over-voltage with some
    production available. Steps without available production have nothing to curtail."""
    return (np.asarray(vmax) > limits.v_over) & (np.asarray(available_total) > 0)


def der_injection(graph: NetworkGraph, units: Sequence[DerUnit], power: np.ndarray,
                  assignment: Mapping[str, str]) -> np.ndarray:
    """Scatter per-unit real power onto (node, assigned phase)."""
    power = np.asarray(power, dtype=float)
    shape = (graph.n_nodes, 3) + power.shape[1:]
    out = np.zeros(shape)
    for k, u in enumerate(units):
        out[graph.node_index(u.node), PHASE_INDEX[assignment[u.id]]] += power[k]
    return out


def apply_policy(graph: NetworkGraph, loads: np.ndarray, units: Sequence[DerUnit], available: np.ndarray,
                 assignment: Mapping[str, str], limits: VoltageLimits,
                 opts: SolverOptions | None = None) -> CurtailResult:
    """Solve, and where a step over-voltages switch off every unit producing at it.

    ``loads`` is the ``(N, 3)`` or ``(N, 3, T)`` complex demand; ``available`` is
    ``(U,)`` or ``(U, T)`` in watts, aligned with ``units``. Under-voltage is only
    flagged.
    """
    available = np.asarray(available, dtype=float)
    single = available.ndim == 1
    loads = np.asarray(loads, dtype=complex)
    if single:
        available = available[:, None]
        loads = loads[:, :, None]
    for k, u in enumerate(units):
        if np.any(available[k] < 0) or np.any(available[k] > u.p_max):
            raise ValidationError(f"unit {u.id}: available power outside [0, {u.p_max}]")

    first = solve(graph, Injection(loads, der_injection(graph, units, available, assignment)), opts)
    vmax = np.abs(first.voltages).max(axis=(0, 1))
    mask = curtail_mask(vmax, available.sum(axis=0), limits)
    delivered = np.where(mask[None, :], 0.0, available)
    solution = first
    if mask.any():
        steps = np.flatnonzero(mask)
        second = solve(graph, Injection(loads[:, :, steps]), opts)
        solution = _merge(first, second, steps)

    mag = np.abs(solution.voltages)
    over = [(int(t), graph.nodes[n], PHASES[p], float(mag[n, p, t]))
            for n, p, t in zip(*np.nonzero(mag > limits.v_over))]
    under = [(int(t), graph.nodes[n], PHASES[p]) for n, p, t in zip(*np.nonzero(mag < limits.v_under))]
    over.sort()
    under.sort()
    if single:
        solution = _squeeze(solution)
        delivered = delivered[:, 0]
        over = [o[1:] for o in over]
        under = [u[1:] for u in under]
        return CurtailResult(delivered, solution, over, under, bool(mask[0]))
    return CurtailResult(delivered, solution, over, under, mask)


def _merge(first: PowerFlowSolution, second: PowerFlowSolution, steps: np.ndarray) -> PowerFlowSolution:
    v = first.voltages.copy()
    i = first.currents.copy()
    inj = first.injection_currents.copy()
    p_root = np.array(first.p_root, dtype=float).copy()
    v[..., steps] = second.voltages
    i[..., steps] = second.currents
    inj[..., steps] = second.injection_currents
    p_root[steps] = second.p_root
    return PowerFlowSolution(
        v, i, p_root, first.converged and second.converged,
        max(first.iterations, second.iterations), inj,
    )


def _squeeze(sol: PowerFlowSolution) -> PowerFlowSolution:
    return PowerFlowSolution(
        sol.voltages[..., 0], sol.currents[..., 0], float(np.asarray(sol.p_root)[0]),
        sol.converged, sol.iterations, sol.injection_currents[..., 0],
    )
