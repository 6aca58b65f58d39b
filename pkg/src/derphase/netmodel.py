"""Network, load and DER data model with file I/O and a synthetic feeder generator.

File formats
------------
Network (JSON)::

    {"nominal_voltage_v": 230.0, "root": "j000", "nodes": [...],
     "edges": [{"from": "j000", "to": "c000", "z_re": [[...]*3]*3, "z_im": ...}]}

Impedances are the 3x3 phase-frame matrices in ohms after Kron reduction of the
neutral conductor (neutral assumed perfectly grounded).

Load series (CSV)::

    #horizon=<N>,dt_hours=<x>
    t,node,phase,p_w,q_var

DER units (CSV) ``unit,node,phase,p_max_w`` with a companion production CSV
``t,unit,p_w`` that carries the same ``#horizon=...`` prolog.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import pandas as pd
import pyarrow as pa
import pyarrow.csv as pacsv

from derphase import profiles
from derphase.errors import ParseError, ValidationError

logger = logging.getLogger(__name__)

PHASES: tuple[str, str, str] = ("a", "b", "c")
PHASE_INDEX = {p: i for i, p in enumerate(PHASES)}
DEFAULT_DT_HOURS = 0.25

PhaseAssignment = dict[str, str]


@dataclass(frozen=True, eq=False)
class Edge:
    """One feeder segment. ``z`` is the 3x3 complex phase-frame impedance in ohms."""

    source: str
    target: str
    z: np.ndarray

    def __post_init__(self) -> None:
        z = np.array(self.z, dtype=complex)
        if z.shape != (3, 3):
            raise ValidationError(f"edge {self.source}->{self.target}: impedance must be 3x3, got {z.shape}")
        z.setflags(write=False)
        object.__setattr__(self, "z", z)

    @property
    def name(self) -> str:
        return f"{self.source}->{self.target}"

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Edge):
            return NotImplemented
        return (
            self.source == other.source
            and self.target == other.target
            and np.array_equal(self.z, other.z)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True)
class Topology:
    """Index arrays derived from a validated tree, oriented away from the root."""

    index: dict[str, int]
    order: tuple[int, ...]  # breadth-first, root first
    parent: np.ndarray  # parent node index, -1 at the root
    edge_of: np.ndarray  # index of the edge joining a node to its parent, -1 at root
    z_in: np.ndarray  # (N, 3, 3) impedance of the edge into each node, zero at root
    depth: np.ndarray


@dataclass(frozen=True, eq=False)
class NetworkGraph:
    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    root: str
    v_nominal: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "v_nominal", float(self.v_nominal))
        self.validate()

    def validate(self) -> None:
        if not self.v_nominal > 0:
            raise ValidationError(f"nominal voltage must be positive, got {self.v_nominal}")
        seen: set[str] = set()
        for n in self.nodes:
            if n in seen:
                raise ValidationError(f"duplicate node identifier {n!r}")
            seen.add(n)
        if self.root not in seen:
            raise ValidationError(f"root {self.root!r} is not a node")
        for e in self.edges:
            for end in (e.source, e.target):
                if end not in seen:
                    raise ValidationError(f"edge {e.name} references unknown node {end!r}")
            if e.source == e.target:
                raise ValidationError(f"edge {e.name} forms a cycle (self-loop)")
            if not np.allclose(e.z, e.z.T, rtol=1e-12, atol=1e-12):
                raise ValidationError(f"edge {e.name} has an asymmetric impedance matrix")
            if np.any(np.diag(e.z).real <= 0):
                raise ValidationError(f"edge {e.name} has a non-positive diagonal resistance")
        # the traversal itself detects cycles and disconnected nodes
        self.topology

    @cached_property
    def topology(self) -> Topology:
        index = {n: i for i, n in enumerate(self.nodes)}
        adjacency: list[list[tuple[int, int]]] = [[] for _ in self.nodes]
        for k, e in enumerate(self.edges):
            a, b = index[e.source], index[e.target]
            adjacency[a].append((b, k))
            adjacency[b].append((a, k))
        n = len(self.nodes)
        parent = np.full(n, -1, dtype=np.int64)
        edge_of = np.full(n, -1, dtype=np.int64)
        depth = np.zeros(n, dtype=np.int64)
        visited = np.zeros(n, dtype=bool)
        used_edge = np.zeros(len(self.edges), dtype=bool)
        r = index[self.root]
        visited[r] = True
        order = [r]
        queue = deque([r])
        while queue:
            u = queue.popleft()
            for v, k in adjacency[u]:
                if used_edge[k]:
                    continue
                used_edge[k] = True
                if visited[v]:
                    raise ValidationError(f"cycle detected at edge {self.edges[k].name}")
                visited[v] = True
                parent[v] = u
                edge_of[v] = k
                depth[v] = depth[u] + 1
                order.append(v)
                queue.append(v)
        if not visited.all():
            missing = self.nodes[int(np.flatnonzero(~visited)[0])]
            raise ValidationError(f"node {missing!r} is disconnected from root {self.root!r}")
        z_in = np.zeros((n, 3, 3), dtype=complex)
        for v in range(n):
            if edge_of[v] >= 0:
                z_in[v] = self.edges[edge_of[v]].z
        return Topology(index, tuple(order), parent, edge_of, z_in, depth)

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def node_index(self, node: str) -> int:
        try:
            return self.topology.index[node]
        except KeyError:
            raise ValidationError(f"unknown node {node!r}") from None

    def dfs(self) -> list[str]:
        """Depth-first pre-order from the root."""
        topo = self.topology
        children: list[list[int]] = [[] for _ in self.nodes]
        for v in topo.order[1:]:
            children[topo.parent[v]].append(v)
        out: list[str] = []
        stack = [topo.index[self.root]]
        while stack:
            u = stack.pop()
            out.append(self.nodes[u])
            stack.extend(reversed(children[u]))
        return out

    def slack_voltage(self) -> np.ndarray:
        """Phase-to-neutral slack reference: angles 0, -120 and +120 degrees."""
        return self.v_nominal * np.exp(1j * np.deg2rad([0.0, -120.0, 120.0]))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, NetworkGraph):
            return NotImplemented
        return (
            self.nodes == other.nodes
            and self.root == other.root
            and self.v_nominal == other.v_nominal
            and self.edges == other.edges
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class PhaseLoadSeries:
    """Complex power demand per (node, phase) entry; positive means consumption.

    ``s`` has shape ``(len(entries), horizon)``. Cells not listed in ``entries``
    are zero.
    """

    horizon: int
    dt_hours: float
    entries: tuple[tuple[str, str], ...]
    s: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple((str(n), str(p)) for n, p in self.entries))
        s = np.asarray(self.s, dtype=complex).reshape(len(self.entries), self.horizon)
        s.setflags(write=False)
        object.__setattr__(self, "s", s)
        if not self.dt_hours > 0:
            raise ValidationError(f"dt_hours must be positive, got {self.dt_hours}")
        if self.horizon < 0:
            raise ValidationError(f"horizon must be non-negative, got {self.horizon}")
        if len(set(self.entries)) != len(self.entries):
            raise ValidationError("duplicate (node, phase) entries in load series")
        for _, p in self.entries:
            if p not in PHASE_INDEX:
                raise ValidationError(f"unknown phase {p!r} in load series")

    def check_against(self, graph: NetworkGraph) -> None:
        index = graph.topology.index
        for n, _ in self.entries:
            if n not in index:
                raise ValidationError(f"load series references unknown node {n!r}")

    def dense(self, graph: NetworkGraph, steps: slice | np.ndarray | None = None) -> np.ndarray:
        """Node-major array ``(N, 3, T)`` of complex power for the selected steps."""
        cols = self.s if steps is None else self.s[:, steps]
        out = np.zeros((graph.n_nodes, 3, cols.shape[1]), dtype=complex)
        for k, (n, p) in enumerate(self.entries):
            out[graph.node_index(n), PHASE_INDEX[p]] += cols[k]
        return out

    def total_active(self) -> np.ndarray:
        return self.s.real.sum(axis=0)

    def value(self, node: str, phase: str, t: int) -> complex:
        try:
            k = self.entries.index((node, phase))
        except ValueError:
            return 0j
        return complex(self.s[k, t])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, PhaseLoadSeries):
            return NotImplemented
        return (
            self.horizon == other.horizon
            and self.dt_hours == other.dt_hours
            and self.entries == other.entries
            and np.array_equal(self.s, other.s)
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class DerUnit:
    """A PV unit: host node, connection phase, available production and its cap."""

    id: str
    node: str
    phase: str
    production: np.ndarray
    p_max: float

    def __post_init__(self) -> None:
        prod = np.array(self.production, dtype=float)
        prod.setflags(write=False)
        object.__setattr__(self, "production", prod)
        object.__setattr__(self, "p_max", float(self.p_max))
        if self.phase not in PHASE_INDEX:
            raise ValidationError(f"unit {self.id}: unknown phase {self.phase!r}")
        if not self.p_max >= 0:
            raise ValidationError(f"unit {self.id}: negative cap {self.p_max}")
        bad = np.flatnonzero((prod < 0) | (prod > self.p_max) | ~np.isfinite(prod))
        if bad.size:
            t = int(bad[0])
            raise ValidationError(
                f"unit {self.id}: production {prod[t]} at t={t} outside [0, {self.p_max}]"
            )

    def with_phase(self, phase: str) -> DerUnit:
        return DerUnit(self.id, self.node, phase, self.production, self.p_max)

    def with_production(self, production: np.ndarray) -> DerUnit:
        return DerUnit(self.id, self.node, self.phase, production, self.p_max)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, DerUnit):
            return NotImplemented
        return (
            self.id == other.id
            and self.node == other.node
            and self.phase == other.phase
            and self.p_max == other.p_max
            and np.array_equal(self.production, other.production)
        )

    __hash__ = None  # type: ignore[assignment]


def check_ders(units: Sequence[DerUnit], graph: NetworkGraph, horizon: int | None = None) -> None:
    seen: set[str] = set()
    for u in units:
        if u.id in seen:
            raise ValidationError(f"duplicate DER unit id {u.id!r}")
        seen.add(u.id)
        if u.node not in graph.topology.index:
            raise ValidationError(f"unit {u.id} references unknown node {u.node!r}")
        if horizon is not None and u.production.shape != (horizon,):
            raise ValidationError(
                f"unit {u.id}: production length {u.production.shape[0]} != horizon {horizon}"
            )


def check_assignment(assignment: Mapping[str, str], unit_ids: Iterable[str]) -> None:
    ids = list(unit_ids)
    missing = [i for i in ids if i not in assignment]
    extra = sorted(set(assignment) - set(ids))
    if missing:
        raise ValidationError(f"assignment misses unit {missing[0]!r}")
    if extra:
        raise ValidationError(f"assignment names unknown unit {extra[0]!r}")
    for i, p in assignment.items():
        if p not in PHASE_INDEX:
            raise ValidationError(f"unit {i}: unknown phase {p!r}")


def current_assignment(units: Iterable[DerUnit]) -> PhaseAssignment:
    return {u.id: u.phase for u in units}


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------


def save_network(graph: NetworkGraph, path: str | Path) -> None:
    doc = {
        "nominal_voltage_v": graph.v_nominal,
        "root": graph.root,
        "nodes": list(graph.nodes),
        "edges": [
            {
                "from": e.source,
                "to": e.target,
                "z_re": e.z.real.tolist(),
                "z_im": e.z.imag.tolist(),
            }
            for e in graph.edges
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_network(path: str | Path) -> NetworkGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc
    try:
        edges = [
            Edge(
                str(e["from"]),
                str(e["to"]),
                np.asarray(e["z_re"], dtype=float) + 1j * np.asarray(e["z_im"], dtype=float),
            )
            for e in doc["edges"]
        ]
        return NetworkGraph(
            nodes=tuple(str(n) for n in doc["nodes"]),
            edges=tuple(edges),
            root=str(doc["root"]),
            v_nominal=float(doc["nominal_voltage_v"]),
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: missing or malformed field ({exc})") from exc


def _prolog_line(horizon: int, dt_hours: float) -> str:
    return f"#horizon={horizon},dt_hours={dt_hours!r}\n"


def _read_prolog(path: Path) -> tuple[int, float] | None:
    with open(path) as fh:
        first = fh.readline().strip()
    if not first.startswith("#"):
        return None
    try:
        fields = dict(item.split("=", 1) for item in first[1:].split(","))
        return int(fields["horizon"]), float(fields["dt_hours"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: bad prolog line {first!r}") from exc


_ARROW_TYPES = {"int": pa.int64(), "str": pa.string(), "float": pa.float64()}


def _read_body(path: Path, has_prolog: bool, columns: dict[str, str]) -> pd.DataFrame:
    """Parse the CSV body with the exact (round-trip) float conversion of Arrow."""
    try:
        table = pacsv.read_csv(
            path,
            read_options=pacsv.ReadOptions(skip_rows=1 if has_prolog else 0),
            convert_options=pacsv.ConvertOptions(
                column_types={k: _ARROW_TYPES[v] for k, v in columns.items()},
                strings_can_be_null=False,
            ),
        )
    except (pa.ArrowInvalid, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"{path}: {exc}") from exc
    if table.column_names != list(columns):
        raise ParseError(
            f"{path}: expected header {','.join(columns)}, got {','.join(table.column_names)}"
        )
    return table.to_pandas()


def _write_body(path: str | Path, columns: dict[str, np.ndarray], prolog: str = "") -> None:
    """Header plus rows; floats use the shortest representation that round-trips."""
    for name, col in columns.items():
        if col.dtype == object and any(any(c in str(v) for c in ',"\n\r') for v in set(col)):
            raise ValidationError(f"column {name!r} holds an identifier that needs CSV quoting")
    table = pa.table({k: pa.array(v) for k, v in columns.items()})
    with open(path, "wb") as fh:
        fh.write((prolog + ",".join(columns) + "\n").encode())
        pacsv.write_csv(table, fh, pacsv.WriteOptions(include_header=False, quoting_style="none"))


def save_series(series: PhaseLoadSeries, path: str | Path) -> None:
    k, horizon = series.s.shape
    t = np.repeat(np.arange(horizon), k)
    nodes = np.array([n for n, _ in series.entries], dtype=object)
    phases = np.array([p for _, p in series.entries], dtype=object)
    flat = series.s.T.reshape(-1)
    _write_body(
        path,
        {
            "t": t,
            "node": np.tile(nodes, horizon),
            "phase": np.tile(phases, horizon),
            "p_w": np.ascontiguousarray(flat.real),
            "q_var": np.ascontiguousarray(flat.imag),
        },
        _prolog_line(series.horizon, series.dt_hours),
    )


def load_series(path: str | Path, graph: NetworkGraph) -> PhaseLoadSeries:
    path = Path(path)
    prolog = _read_prolog(path)
    if prolog is None:
        raise ParseError(f"{path}: missing '#horizon=<N>,dt_hours=<x>' prolog")
    horizon, dt_hours = prolog
    if not dt_hours > 0:
        raise ValidationError(f"{path}: dt_hours must be positive, got {dt_hours}")
    df = _read_body(path, True, {"t": "int", "node": "str", "phase": "str", "p_w": "float", "q_var": "float"})
    index = graph.topology.index
    unknown = set(df["node"].unique()) - set(index)
    if unknown:
        raise ValidationError(f"{path}: unknown node {sorted(unknown)[0]!r}")
    bad_phase = set(df["phase"].unique()) - set(PHASES)
    if bad_phase:
        raise ValidationError(f"{path}: unknown phase {sorted(bad_phase)[0]!r}")
    t = df["t"].to_numpy()
    if t.size and (t.min() < 0 or t.max() >= horizon):
        raise ValidationError(f"{path}: timestep outside declared horizon {horizon}")
    node_codes, node_names = pd.factorize(df["node"], sort=False)
    keys = node_codes.astype(np.int64) * 3 + df["phase"].map(PHASE_INDEX).to_numpy(dtype=np.int64)
    codes, uniques = pd.factorize(keys, sort=False)
    entries = tuple((str(node_names[k // 3]), PHASES[k % 3]) for k in uniques)
    s = np.zeros((len(entries), horizon), dtype=complex)
    if np.unique(codes.astype(np.int64) * max(horizon, 1) + t).size != t.size:
        raise ValidationError(f"{path}: duplicate (t, node, phase) rows")
    s[codes, t] = df["p_w"].to_numpy() + 1j * df["q_var"].to_numpy()
    return PhaseLoadSeries(horizon, dt_hours, entries, s)


def save_ders(units: Sequence[DerUnit], units_path: str | Path, production_path: str | Path,
              dt_hours: float = DEFAULT_DT_HOURS) -> None:
    _write_body(
        units_path,
        {
            "unit": np.array([u.id for u in units], dtype=object),
            "node": np.array([u.node for u in units], dtype=object),
            "phase": np.array([u.phase for u in units], dtype=object),
            "p_max_w": np.array([u.p_max for u in units], dtype=float),
        },
    )
    horizon = units[0].production.shape[0] if units else 0
    ids = np.array([u.id for u in units], dtype=object)
    prod = np.array([u.production for u in units]).reshape(len(units), horizon)
    _write_body(
        production_path,
        {
            "t": np.repeat(np.arange(horizon), len(units)),
            "unit": np.tile(ids, horizon),
            "p_w": np.ascontiguousarray(prod.T.reshape(-1), dtype=float),
        },
        _prolog_line(horizon, dt_hours),
    )


def load_ders(units_path: str | Path, production_path: str | Path,
              graph: NetworkGraph) -> list[DerUnit]:
    units_path, production_path = Path(units_path), Path(production_path)
    meta = _read_body(units_path, False, {"unit": "str", "node": "str", "phase": "str", "p_max_w": "float"})
    prolog = _read_prolog(production_path)
    prod = _read_body(production_path, prolog is not None, {"t": "int", "unit": "str", "p_w": "float"})
    if prolog is not None:
        horizon = prolog[0]
    else:
        horizon = int(prod["t"].max()) + 1 if len(prod) else 0
    ids = list(meta["unit"])
    pos = {u: i for i, u in enumerate(ids)}
    unknown = set(prod["unit"].unique()) - set(pos)
    if unknown:
        raise ValidationError(f"{production_path}: unknown unit {sorted(unknown)[0]!r}")
    t = prod["t"].to_numpy()
    if t.size and (t.min() < 0 or t.max() >= horizon):
        raise ValidationError(f"{production_path}: timestep outside horizon {horizon}")
    series = np.zeros((len(ids), horizon))
    series[prod["unit"].map(pos).to_numpy(dtype=np.int64), t] = prod["p_w"].to_numpy()
    units = [
        DerUnit(row.unit, row.node, row.phase, series[i], row.p_max_w)
        for i, row in enumerate(meta.itertuples(index=False))
    ]
    check_ders(units, graph, horizon)
    return units


# ---------------------------------------------------------------------------
# Line impedances and the synthetic feeder
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CableSpec:
    """Four-core cable geometry: three phases and a neutral of equal size."""

    r_ohm_per_km: float
    gmr_m: float
    spacing_m: float
    r_neutral_ohm_per_km: float | None = None


def four_wire_impedance(cable: CableSpec, length_km: float, freq_hz: float = 50.0,
                        earth_resistivity: float = 100.0) -> np.ndarray:
    """Primitive 4x4 series impedance (phases a, b, c then neutral) from the
    simplified Carson equations, in ohms for the given length."""
    r_n = cable.r_ohm_per_km if cable.r_neutral_ohm_per_km is None else cable.r_neutral_ohm_per_km
    omega = 2 * np.pi * freq_hz
    r_earth = np.pi ** 2 * freq_hz * 1e-4
    d_earth = 658.5 * np.sqrt(earth_resistivity / freq_hz)
    k = omega * 2e-4  # ohm/km per neper
    z = np.empty((4, 4), dtype=complex)
    z[:] = r_earth + 1j * k * np.log(d_earth / cable.spacing_m)
    self_z = r_earth + 1j * k * np.log(d_earth / cable.gmr_m)
    for i in range(4):
        z[i, i] = (r_n if i == 3 else cable.r_ohm_per_km) + self_z
    return z * length_km


def kron_reduce(z4: np.ndarray) -> np.ndarray:
    """Eliminate the neutral (last row/column) assuming it is grounded at both ends."""
    z4 = np.asarray(z4, dtype=complex)
    zpp, zpn, znp, znn = z4[:3, :3], z4[:3, 3:], z4[3:, :3], z4[3:, 3:]
    return zpp - zpn @ np.linalg.solve(znn, znp)


@dataclass(frozen=True)
class FeederSpec:
    """Parameters of the synthetic radial LV feeder.

    Each customer owns a junction on one of ``n_branches`` laterals leaving the
    root plus a service node hanging off that junction.
    """

    n_branches: int = 4
    segment_length_m: tuple[float, float] = (20.0, 35.0)
    service_length_m: tuple[float, float] = (8.0, 25.0)
    backbone: CableSpec = field(default_factory=lambda: CableSpec(0.443, 0.0054, 0.02))  # 70 mm2 Al
    service: CableSpec = field(default_factory=lambda: CableSpec(1.15, 0.0018, 0.008))
    v_nominal: float = 230.0
    phase_jitter: float = 0.15
    horizon: int = 96 * 7
    dt_hours: float = DEFAULT_DT_HOURS
    start_day: int = 0
    annual_kwh: tuple[float, float] = (3500.0, 0.35)  # lognormal median and sigma
    power_factor: float = 0.95


def gen_feeder(n_customers: int, seed: int, spec: FeederSpec | None = None) -> tuple[NetworkGraph, PhaseLoadSeries]:
    """Deterministic synthetic feeder with ``2 * n_customers`` nodes and its loads."""
    if n_customers < 1:
        raise ValidationError(f"n_customers must be >= 1, got {n_customers}")
    spec = spec or FeederSpec()
    if spec.n_branches < 1:
        raise ValidationError("n_branches must be >= 1")
    rng = np.random.default_rng(seed)
    width = max(3, len(str(n_customers - 1)))
    junctions = [f"j{i:0{width}d}" for i in range(n_customers)]
    services = [f"c{i:0{width}d}" for i in range(n_customers)]

    edges: list[Edge] = []
    tail = {b: junctions[0] for b in range(spec.n_branches)}
    for i in range(1, n_customers):
        b = (i - 1) % spec.n_branches
        length = rng.uniform(*spec.segment_length_m) / 1000.0
        edges.append(Edge(tail[b], junctions[i], kron_reduce(four_wire_impedance(spec.backbone, length))))
        tail[b] = junctions[i]
    for i in range(n_customers):
        length = rng.uniform(*spec.service_length_m) / 1000.0
        edges.append(Edge(junctions[i], services[i], kron_reduce(four_wire_impedance(spec.service, length))))
    nodes = tuple(junctions + services)
    graph = NetworkGraph(nodes, tuple(edges), junctions[0], spec.v_nominal)

    jitter = rng.random(n_customers) < spec.phase_jitter
    shift = rng.choice([1, 2], size=n_customers)
    phase_idx = (np.arange(n_customers) + np.where(jitter, shift, 0)) % 3
    median, sigma = spec.annual_kwh
    energy = median * rng.lognormal(0.0, sigma, size=n_customers)
    tan_phi = np.tan(np.arccos(spec.power_factor))
    s = np.empty((n_customers, spec.horizon), dtype=complex)
    for i in range(n_customers):
        p = profiles.residential_load(spec.horizon, spec.dt_hours, spec.start_day, rng, energy[i])
        s[i] = p + 1j * p * tan_phi
    entries = tuple((services[i], PHASES[phase_idx[i]]) for i in range(n_customers))
    return graph, PhaseLoadSeries(spec.horizon, spec.dt_hours, entries, s)


def customer_phases(loads: PhaseLoadSeries) -> dict[str, str]:
    """Connection phase per customer node: the phase carrying most energy there."""
    best: dict[str, tuple[float, str]] = {}
    energy = np.abs(loads.s.real).sum(axis=1) if loads.horizon else np.zeros(len(loads.entries))
    for (node, phase), e in zip(loads.entries, energy):
        if node not in best or e > best[node][0]:
            best[node] = (float(e), phase)
    return {n: p for n, (_, p) in best.items()}
