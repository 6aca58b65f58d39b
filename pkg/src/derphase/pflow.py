"""Unbalanced three-phase backward/forward sweep for radial feeders.

All arrays are node-major: voltages ``(N, 3)`` for one timestep or ``(N, 3, T)``
for a batch of independent timesteps solved together.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from derphase.errors import NumericFailure
from derphase.netmodel import NetworkGraph


@dataclass(frozen=True)
class SolverOptions:
    tolerance: float = 1e-6  # max |dV| between sweeps, relative to v_nominal
    max_iterations: int = 100

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True, eq=False)
class Injection:
    """Per-node, per-phase demand split into its load and DER parts.

    ``load`` is complex consumption (W + jvar); ``der`` is real production in W.
    The solver sees ``load - der``.
    """

    load: np.ndarray
    der: np.ndarray | None = None

    @property
    def net(self) -> np.ndarray:
        if self.der is None:
            return self.load
        return self.load - self.der

    @classmethod
    def zeros(cls, graph: NetworkGraph, horizon: int | None = None) -> Injection:
        shape = (graph.n_nodes, 3) if horizon is None else (graph.n_nodes, 3, horizon)
        return cls(np.zeros(shape, dtype=complex))


@dataclass(frozen=True, eq=False)
class PowerFlowSolution:
    """Result of one sweep solve.

    ``currents`` are indexed like ``graph.edges`` and flow away from the root.
    ``p_root`` is the active power entering the feeder at the root node.
    """

    voltages: np.ndarray
    currents: np.ndarray
    p_root: float | np.ndarray
    converged: bool
    iterations: int
    injection_currents: np.ndarray

    def root_phase_power(self, graph: NetworkGraph) -> np.ndarray:
        """Active power per phase drawn at the root, shape ``(3,)`` or ``(3, T)``."""
        r = graph.topology.index[graph.root]
        return _root_phase_power(self.voltages[r], self._root_current(graph))

    def _root_current(self, graph: NetworkGraph) -> np.ndarray:
        topo = graph.topology
        r = topo.index[graph.root]
        total = self.injection_currents[r].copy()
        for v in np.flatnonzero(topo.parent == r):
            total += self.currents[topo.edge_of[v]]
        return total


def _root_phase_power(v_root: np.ndarray, i_root: np.ndarray) -> np.ndarray:
    return (v_root * np.conj(i_root)).real




@njit(cache=True, error_model="numpy")
def _sweep_kernel(order, parent, z_in, s, v_slack, tol_v, floor_v, max_iter, full,
                  v_out, cur_out, inj_out, root_power, vmax, vmin, losses, iterations, status, bad_node):
    n_steps, n_nodes, _ = s.shape
    root = order[0]
    v = np.empty((n_nodes, 3), dtype=np.complex128)
    cur = np.empty((n_nodes, 3), dtype=np.complex128)
    inj = np.empty((n_nodes, 3), dtype=np.complex128)
    tol2 = tol_v * tol_v
    floor2 = floor_v * floor_v
    for t in range(n_steps):
        for n in range(n_nodes):
            for p in range(3):
                v[n, p] = v_slack[p]
        status[t] = 1
        it = 0
        while it < max_iter:
            it += 1
            for n in range(n_nodes):
                for p in range(3):
                    sp = s[t, n, p]
                    if sp != 0:
                        vp = v[n, p]
                        m2 = vp.real * vp.real + vp.imag * vp.imag
                        if m2 < floor2:
                            status[t] = 2
                            bad_node[t] = n
                            inj[n, p] = 0
                        else:
                            # conj(s / v) with a single real division
                            inj[n, p] = np.conj(sp) * vp / m2
                    else:
                        inj[n, p] = 0
                    cur[n, p] = inj[n, p]
            if status[t] == 2:
                break
            # backward sweep: accumulate branch currents towards the root
            for k in range(n_nodes - 1, 0, -1):
                node = order[k]
                par = parent[node]
                for p in range(3):
                    cur[par, p] += cur[node, p]
            # forward sweep: V_child = V_parent - Z_e I_e
            delta2 = 0.0
            for k in range(1, n_nodes):
                node = order[k]
                par = parent[node]
                for p in range(3):
                    drop = (z_in[node, p, 0] * cur[node, 0] + z_in[node, p, 1] * cur[node, 1]
                            + z_in[node, p, 2] * cur[node, 2])
                    vn = v[par, p] - drop
                    d = vn - v[node, p]
                    d2 = d.real * d.real + d.imag * d.imag
                    if d2 > delta2:
                        delta2 = d2
                    v[node, p] = vn
            if not np.isfinite(delta2):
                status[t] = 3
                break
            if delta2 < tol2:
                status[t] = 0
                break
        iterations[t] = it
        hi = 0.0
        lo = np.inf
        loss = 0.0
        for n in range(n_nodes):
            for p in range(3):
                m = np.abs(v[n, p])
                if m > hi:
                    hi = m
                if m < lo:
                    lo = m
            if n != root:
                for p in range(3):
                    zi = (z_in[n, p, 0] * cur[n, 0] + z_in[n, p, 1] * cur[n, 1]
                          + z_in[n, p, 2] * cur[n, 2])
                    loss += (np.conj(cur[n, p]) * zi).real
        vmax[t] = hi
        vmin[t] = lo
        losses[t] = loss
        for p in range(3):
            root_power[t, p] = (v[root, p] * np.conj(cur[root, p])).real
        if full:
            for n in range(n_nodes):
                for p in range(3):
                    v_out[t, n, p] = v[n, p]
                    cur_out[t, n, p] = cur[n, p]
                    inj_out[t, n, p] = inj[n, p]


@dataclass(frozen=True, eq=False)
class StepSummary:
    """Per-timestep scalars of a batch solve, without the full state."""

    root_power: np.ndarray  # (3, T)
    vmax: np.ndarray
    vmin: np.ndarray
    losses: np.ndarray  # sum over edges of Re(I^H Z I)
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def p_root(self) -> np.ndarray:
        return self.root_power.sum(axis=0)


def _run(graph: NetworkGraph, s: np.ndarray, opts: SolverOptions, full: bool):
    topo = graph.topology
    s = np.ascontiguousarray(s, dtype=complex)
    n_steps, n_nodes = s.shape[0], s.shape[1]
    if n_nodes != graph.n_nodes:
        raise ValueError(f"injection has {n_nodes} nodes, graph has {graph.n_nodes}")
    shape = (n_steps, n_nodes, 3) if full else (0, 0, 3)
    v_out = np.empty(shape, dtype=complex)
    cur_out = np.empty(shape, dtype=complex)
    inj_out = np.empty(shape, dtype=complex)
    root_power = np.empty((n_steps, 3))
    vmax, vmin, losses = np.empty(n_steps), np.empty(n_steps), np.empty(n_steps)
    iterations = np.zeros(n_steps, dtype=np.int64)
    status = np.zeros(n_steps, dtype=np.int64)
    bad_node = np.full(n_steps, -1, dtype=np.int64)
    _sweep_kernel(
        np.asarray(topo.order, dtype=np.int64), topo.parent, topo.z_in, s, graph.slack_voltage(),
        opts.tolerance * graph.v_nominal, 1e-9 * graph.v_nominal, opts.max_iterations, full,
        v_out, cur_out, inj_out, root_power, vmax, vmin, losses, iterations, status, bad_node,
    )
    if np.any(status >= 2):
        t = int(np.flatnonzero(status >= 2)[0])
        if status[t] == 2:
            node = graph.nodes[bad_node[t]]
            raise NumericFailure(f"voltage collapsed to zero at node {node!r}", node=node, step=t)
        raise NumericFailure("sweep diverged to non-finite voltages", step=t)
    summary = StepSummary(root_power.T.copy(), vmax, vmin, losses, iterations, status == 0)
    return summary, v_out, cur_out, inj_out


def solve(graph: NetworkGraph, injection: Injection, opts: SolverOptions | None = None) -> PowerFlowSolution:
    """Backward/forward sweep from a flat start.

    Every timestep of a batch is iterated independently until the largest
    voltage change between two sweeps drops below ``opts.tolerance * v_nominal``
    or ``opts.max_iterations`` is reached. Non-convergence is reported through
    ``converged`` rather than raised.
    """
    opts = opts or SolverOptions()
    net = np.asarray(injection.net, dtype=complex)
    single = net.ndim == 2
    if single:
        net = net[:, :, None]
    summary, v, cur, inj = _run(graph, np.moveaxis(net, -1, 0), opts, full=True)
    topo = graph.topology
    v = np.moveaxis(v, 0, -1)
    cur = np.moveaxis(cur, 0, -1)
    inj = np.moveaxis(inj, 0, -1)
    children = np.array(topo.order[1:], dtype=np.int64)
    currents = np.zeros((len(graph.edges),) + cur.shape[1:], dtype=complex)
    currents[topo.edge_of[children]] = cur[children]
    p_root = summary.p_root
    converged = bool(summary.converged.all())
    iterations = int(summary.iterations.max(initial=0))
    if single:
        v, currents, inj = v[..., 0], currents[..., 0], inj[..., 0]
        p_root = float(p_root[0])
    return PowerFlowSolution(v, currents, p_root, converged, iterations, inj)


def solve_summary(graph: NetworkGraph, net: np.ndarray, opts: SolverOptions | None = None) -> StepSummary:
    """Same iteration as :func:`solve`, keeping only per-step scalars.

    ``net`` is the net demand (load minus DER) laid out time-major, ``(T, N, 3)``.
    """
    return _run(graph, net, opts or SolverOptions(), full=False)[0]


def total_load(injection: Injection) -> float | np.ndarray:
    """Sum of active load, ignoring DER; per timestep when batched."""
    total = np.asarray(injection.load).real.sum(axis=(0, 1))
    return float(total) if np.ndim(total) == 0 else total


def branch_losses(graph: NetworkGraph, solution: PowerFlowSolution) -> float | np.ndarray:
    """Active losses summed over edges as Re(I^H Z I), per timestep when batched."""
    z = np.stack([e.z for e in graph.edges]) if graph.edges else np.zeros((0, 3, 3), complex)
    i = solution.currents
    if i.ndim == 2:
        return float(np.einsum("ep,epq,eq->", np.conj(i), z, i).real)
    return np.einsum("ept,epq,eqt->t", np.conj(i), z, i).real


def power_mismatch(solution: PowerFlowSolution, injection: Injection) -> np.ndarray:
    """|S_set - V conj(I_inj)| per node and phase (and timestep)."""
    return np.abs(injection.net - solution.voltages * np.conj(solution.injection_currents))
