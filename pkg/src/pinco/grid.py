"""Per-unit grid model, generator node-splitting, and loading datasets.

Converts a parsed :class:`~pinco.cases.GridCase` into the per-unit arrays the
physics and the network operate on, builds the split graph in which each
generator occupies its own node, and generates/splits loading-condition
datasets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cases import BranchRecord, BusRecord, GridCase, case_hash


class SingularBranch(ValueError):
    """An in-service branch has zero series impedance."""


class DimensionMismatch(ValueError):
    """Vector length does not match the expected bus/node count."""


# node-type categories, fixed one-hot order
NODE_TYPES = ("load-no-gen", "neither", "original-gen", "artificial-gen")
NT_LOAD, NT_NEITHER, NT_GEN, NT_ARTIFICIAL = range(4)

FEATURE_DIM = 2 + len(NODE_TYPES)  # P_d, Q_d, one-hot type
OUTPUT_DIM = 4  # P_g, Q_g, V, theta

SPLIT_POLICIES = ("per-gen", "per-extra-gen")


@dataclass
class NormalizedCase:
    """A GridCase converted to per-unit arrays, keeping all records.

    Status-0 elements are retained (for lossless round-trips) and exposed
    through the ``active_*`` index arrays that the physics works with.
    Demands, shunts, and ratings are divided by the MVA base; phase shifts
    are in radians; series impedance is converted to admittance
    g = r / (r^2 + x^2), b = -x / (r^2 + x^2).
    """

    case: GridCase
    base_mva: float
    n_bus: int
    bus_ids: np.ndarray  # original file ids, file order
    ref_bus: int | None  # index into 0..n_bus-1, or None
    # per bus
    p_demand: np.ndarray
    q_demand: np.ndarray
    g_shunt: np.ndarray
    b_shunt: np.ndarray
    v_min: np.ndarray
    v_max: np.ndarray
    # per generator
    gen_bus: np.ndarray  # bus index
    p_min: np.ndarray
    p_max: np.ndarray
    q_min: np.ndarray
    q_max: np.ndarray
    gen_status: np.ndarray
    cost_coeffs: list[list[float]]  # per generator, MW polynomial, highest first
    # per branch
    br_from: np.ndarray  # bus index
    br_to: np.ndarray
    g_series: np.ndarray
    b_series: np.ndarray
    charging: np.ndarray
    tap: np.ndarray
    shift_rad: np.ndarray
    s_max: np.ndarray  # pu; 0 = unconstrained
    br_status: np.ndarray
    is_transformer: np.ndarray

    @property
    def active_gens(self) -> np.ndarray:
        return np.flatnonzero(self.gen_status)

    @property
    def active_branches(self) -> np.ndarray:
        return np.flatnonzero(self.br_status)

    @property
    def n_active_gens(self) -> int:
        return int(self.gen_status.sum())

    def reference_loading(self) -> "LoadingCondition":
        return LoadingCondition(self.p_demand.copy(), self.q_demand.copy())


@dataclass
class LoadingCondition:
    """Per-unit active/reactive demand for every physical bus."""

    p_d: np.ndarray
    q_d: np.ndarray

    def __post_init__(self):
        self.p_d = np.asarray(self.p_d, dtype=np.float64)
        self.q_d = np.asarray(self.q_d, dtype=np.float64)
        if self.p_d.shape != self.q_d.shape:
            raise DimensionMismatch(f"p_d {self.p_d.shape} vs q_d {self.q_d.shape}")


@dataclass
class SplitGraph:
    """Message-passing graph after generator node-splitting.

    Physical buses keep indices ``0..n_bus-1``; artificial generator nodes
    are appended after them.  Artificial edges connect each artificial node
    to its physical parent and carry no electrical parameters; the physics
    is always evaluated on the underlying :class:`NormalizedCase`.
    """

    ncase: NormalizedCase
    policy: str
    n_nodes: int
    edges: np.ndarray  # (n_edges, 2) undirected topology incl. artificial links
    edge_artificial: np.ndarray  # bool per edge
    node_type: np.ndarray  # int codes per node, see NODE_TYPES
    parent_of: np.ndarray  # physical parent index per artificial node
    gen_of: np.ndarray  # node index per active generator

    feature_dim: int = FEATURE_DIM
    output_dim: int = OUTPUT_DIM

    @property
    def n_bus(self) -> int:
        return self.ncase.n_bus

    @property
    def n_artificial(self) -> int:
        return self.n_nodes - self.n_bus

    def parent_index(self) -> np.ndarray:
        """Physical parent per node (identity for physical nodes)."""
        out = np.arange(self.n_nodes)
        out[self.n_bus:] = self.parent_of
        return out


def to_per_unit(case: GridCase) -> NormalizedCase:
    """Convert a GridCase to per-unit arrays (see NormalizedCase)."""
    base = case.base_mva
    index = {b.bus_id: i for i, b in enumerate(case.buses)}
    buses = case.buses

    ref = None
    for i, b in enumerate(buses):
        if b.bus_type == 3:
            ref = i
            break

    g_series = np.empty(case.n_branches)
    b_series = np.empty(case.n_branches)
    for i, br in enumerate(case.branches):
        z2 = br.resistance**2 + br.reactance**2
        if z2 == 0.0:
            if br.in_service:
                raise SingularBranch(
                    f"branch {i} ({br.from_bus}-{br.to_bus}) has zero series impedance"
                )
            g_series[i] = 0.0
            b_series[i] = 0.0
            continue
        g_series[i] = br.resistance / z2
        b_series[i] = -br.reactance / z2

    return NormalizedCase(
        case=case,
        base_mva=base,
        n_bus=case.n_buses,
        bus_ids=np.array([b.bus_id for b in buses]),
        ref_bus=ref,
        p_demand=np.array([b.p_demand_mw for b in buses]) / base,
        q_demand=np.array([b.q_demand_mvar for b in buses]) / base,
        g_shunt=np.array([b.g_shunt_mw for b in buses]) / base,
        b_shunt=np.array([b.b_shunt_mvar for b in buses]) / base,
        v_min=np.array([b.v_min for b in buses]),
        v_max=np.array([b.v_max for b in buses]),
        gen_bus=np.array([index[g.bus_id] for g in case.generators], dtype=np.intp),
        p_min=np.array([g.p_min_mw for g in case.generators]) / base,
        p_max=np.array([g.p_max_mw for g in case.generators]) / base,
        q_min=np.array([g.q_min_mvar for g in case.generators]) / base,
        q_max=np.array([g.q_max_mvar for g in case.generators]) / base,
        gen_status=np.array([g.in_service for g in case.generators], dtype=bool),
        cost_coeffs=[list(c.coefficients) for c in case.costs],
        br_from=np.array([index[b.from_bus] for b in case.branches], dtype=np.intp),
        br_to=np.array([index[b.to_bus] for b in case.branches], dtype=np.intp),
        g_series=g_series,
        b_series=b_series,
        charging=np.array([b.charging for b in case.branches]),
        tap=np.array([b.tap_ratio for b in case.branches]),
        shift_rad=np.radians([b.phase_shift_deg for b in case.branches]),
        s_max=np.array([b.rating_mva for b in case.branches]) / base,
        br_status=np.array([b.in_service for b in case.branches], dtype=bool),
        is_transformer=np.array([b.is_transformer for b in case.branches], dtype=bool),
    )


def from_per_unit(ncase: NormalizedCase) -> GridCase:
    """Inverse of :func:`to_per_unit`; reconstructs an equivalent GridCase."""
    base = ncase.base_mva
    orig = ncase.case
    buses = [
        BusRecord(
            bus_id=int(ncase.bus_ids[i]),
            bus_type=orig.buses[i].bus_type,
            p_demand_mw=ncase.p_demand[i] * base,
            q_demand_mvar=ncase.q_demand[i] * base,
            g_shunt_mw=ncase.g_shunt[i] * base,
            b_shunt_mvar=ncase.b_shunt[i] * base,
            v_min=ncase.v_min[i],
            v_max=ncase.v_max[i],
        )
        for i in range(ncase.n_bus)
    ]
    branches = []
    for i in range(len(ncase.br_from)):
        g, b = ncase.g_series[i], ncase.b_series[i]
        y2 = g * g + b * b
        branches.append(
            BranchRecord(
                from_bus=int(ncase.bus_ids[ncase.br_from[i]]),
                to_bus=int(ncase.bus_ids[ncase.br_to[i]]),
                resistance=g / y2 if y2 else orig.branches[i].resistance,
                reactance=-b / y2 if y2 else orig.branches[i].reactance,
                charging=ncase.charging[i],
                tap_ratio=ncase.tap[i],
                phase_shift_deg=math.degrees(ncase.shift_rad[i]),
                rating_mva=ncase.s_max[i] * base,
                in_service=bool(ncase.br_status[i]),
                is_transformer=bool(ncase.is_transformer[i]),
            )
        )
    import copy

    out = copy.deepcopy(orig)
    out.buses = buses
    out.branches = branches
    return out


def split_generators(ncase: NormalizedCase, policy: str = "per-gen") -> SplitGraph:
    """Build the split graph in which generators occupy their own nodes.

    ``per-gen``: every active generator gets a new artificial node and the
    original bus keeps none, so n_nodes = n_bus + n_active_gens.
    ``per-extra-gen``: the first generator at a bus stays on the bus node
    and only additional ones get artificial nodes, so
    n_nodes = n_bus + sum(max(0, gens_at_bus - 1)).
    """
    if policy not in SPLIT_POLICIES:
        raise ValueError(f"unknown split policy {policy!r}; choose from {SPLIT_POLICIES}")

    n_bus = ncase.n_bus
    active = ncase.active_gens
    gens_at_bus = np.zeros(n_bus, dtype=int)
    for g in active:
        gens_at_bus[ncase.gen_bus[g]] += 1

    node_type = np.full(n_bus, NT_NEITHER, dtype=int)
    has_load = (ncase.p_demand != 0) | (ncase.q_demand != 0)
    node_type[has_load] = NT_LOAD
    node_type[gens_at_bus > 0] = NT_GEN

    gen_of = np.empty(len(active), dtype=np.intp)
    parent_of: list[int] = []
    art_edges: list[tuple[int, int]] = []
    seen_at_bus = np.zeros(n_bus, dtype=int)
    next_node = n_bus
    for k, g in enumerate(active):
        bus = int(ncase.gen_bus[g])
        first = seen_at_bus[bus] == 0
        seen_at_bus[bus] += 1
        if policy == "per-extra-gen" and first:
            gen_of[k] = bus
            continue
        gen_of[k] = next_node
        parent_of.append(bus)
        art_edges.append((bus, next_node))
        next_node += 1

    n_nodes = next_node
    art_type = np.full(n_nodes - n_bus, NT_ARTIFICIAL, dtype=int)
    node_type = np.concatenate([node_type, art_type])

    # deduplicated undirected physical topology over in-service branches
    phys = set()
    for i in ncase.active_branches:
        f, t = int(ncase.br_from[i]), int(ncase.br_to[i])
        phys.add((min(f, t), max(f, t)))
    phys_edges = sorted(phys)

    edges = np.array(phys_edges + art_edges, dtype=np.intp).reshape(-1, 2)
    edge_artificial = np.zeros(len(edges), dtype=bool)
    edge_artificial[len(phys_edges):] = True

    return SplitGraph(
        ncase=ncase,
        policy=policy,
        n_nodes=n_nodes,
        edges=edges,
        edge_artificial=edge_artificial,
        node_type=node_type,
        parent_of=np.array(parent_of, dtype=np.intp),
        gen_of=gen_of,
    )


def apply_loading(ncase: NormalizedCase, loading: LoadingCondition) -> NormalizedCase:
    """Copy of a case with its demand vectors replaced."""
    if len(loading.p_d) != ncase.n_bus:
        raise DimensionMismatch(
            f"loading has {len(loading.p_d)} buses, case has {ncase.n_bus}"
        )
    import dataclasses

    return dataclasses.replace(
        ncase, p_demand=np.asarray(loading.p_d), q_demand=np.asarray(loading.q_d)
    )


def build_features(graph: SplitGraph, loading: LoadingCondition) -> np.ndarray:
    """Node feature matrix: demand columns then one-hot node type.

    Demands are placed on physical nodes; artificial nodes carry zeros.
    """
    if len(loading.p_d) != graph.n_bus:
        raise DimensionMismatch(
            f"loading has {len(loading.p_d)} buses, graph expects {graph.n_bus}"
        )
    x = np.zeros((graph.n_nodes, FEATURE_DIM))
    x[: graph.n_bus, 0] = loading.p_d
    x[: graph.n_bus, 1] = loading.q_d
    x[np.arange(graph.n_nodes), 2 + graph.node_type] = 1.0
    return x


def output_mask(graph: SplitGraph) -> np.ndarray:
    """Boolean (n_nodes, 4) mask of which outputs are predicted per node.

    P_g/Q_g only at nodes holding a generator; V/theta only at physical
    nodes (artificial nodes inherit their parent's voltage).
    """
    mask = np.zeros((graph.n_nodes, OUTPUT_DIM), dtype=bool)
    mask[graph.gen_of, 0] = True
    mask[graph.gen_of, 1] = True
    mask[: graph.n_bus, 2] = True
    mask[: graph.n_bus, 3] = True
    return mask


def sample_loadings(
    ncase: NormalizedCase, n: int, lo: float, hi: float, seed: int
) -> list[LoadingCondition]:
    """Draw n loadings with each bus demand uniform in [lo*ref, hi*ref].

    Each bus's P_d and Q_d are drawn independently.  Deterministic for a
    given seed.
    """
    if not (0 < lo <= hi):
        raise ValueError(f"need 0 < lo <= hi, got lo={lo}, hi={hi}")
    if n < 1:
        raise ValueError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(seed)
    p_ref, q_ref = ncase.p_demand, ncase.q_demand
    out = []
    for _ in range(n):
        up = rng.uniform(lo, hi, size=p_ref.shape)
        uq = rng.uniform(lo, hi, size=q_ref.shape)
        out.append(LoadingCondition(p_ref * up, q_ref * uq))
    return out


def split_dataset(samples: list, ratios: tuple[float, float, float], seed: int):
    """Shuffle and split into train/val/test; remainder goes to train."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    n = len(samples)
    n_val = int(n * ratios[1])
    n_test = int(n * ratios[2])
    n_train = n - n_val - n_test
    order = np.random.default_rng(seed).permutation(n)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train : n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val :]]
    return train, val, test


# ---------------------------------------------------------------------------
# dataset files: JSON lines with a header record


def save_dataset(
    path: str | Path,
    loadings: list[LoadingCondition],
    case: GridCase,
    seed: int,
    lo: float,
    hi: float,
) -> None:
    with open(path, "w", encoding="utf-8") as f:
        header = {
            "kind": "loading-dataset",
            "case_sha256": case_hash(case),
            "n": len(loadings),
            "seed": seed,
            "lo": lo,
            "hi": hi,
        }
        f.write(json.dumps(header) + "\n")
        for ld in loadings:
            f.write(json.dumps({"p_d": ld.p_d.tolist(), "q_d": ld.q_d.tolist()}) + "\n")


def load_dataset(path: str | Path, case: GridCase | None = None):
    """Read a dataset file; returns (header dict, list of LoadingCondition).

    If ``case`` is given, the stored case hash must match.
    """
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("kind") != "loading-dataset":
            raise ValueError(f"{path}: not a loading dataset file")
        if case is not None and header["case_sha256"] != case_hash(case):
            raise ValueError(f"{path}: dataset was generated from a different case")
        loadings = []
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            loadings.append(LoadingCondition(rec["p_d"], rec["q_d"]))
    if len(loadings) != header["n"]:
        raise ValueError(f"{path}: header says {header['n']} samples, found {len(loadings)}")
    return header, loadings


# ---------------------------------------------------------------------------
# batching: disconnected copies of one graph evaluated in a single pass


def replicate_case(ncase: NormalizedCase, copies: int) -> NormalizedCase:
    """Disconnected union of ``copies`` instances of a case.

    Used to evaluate a whole mini-batch of loading conditions in one
    forward/backward pass; copy k occupies buses [k*n_bus, (k+1)*n_bus).
    Only electrical arrays are replicated; the demand vectors come from the
    stacked loading.  The reference bus of every copy is pinned (see
    ``replica_ref_buses``).
    """
    if copies == 1:
        return ncase
    n = ncase.n_bus
    off = np.repeat(np.arange(copies) * n, len(ncase.br_from))
    goff = np.repeat(np.arange(copies) * n, len(ncase.gen_bus))

    def tile(a):
        return np.tile(a, copies)

    return NormalizedCase(
        case=ncase.case,
        base_mva=ncase.base_mva,
        n_bus=n * copies,
        bus_ids=tile(ncase.bus_ids),
        ref_bus=ncase.ref_bus,
        p_demand=tile(ncase.p_demand),
        q_demand=tile(ncase.q_demand),
        g_shunt=tile(ncase.g_shunt),
        b_shunt=tile(ncase.b_shunt),
        v_min=tile(ncase.v_min),
        v_max=tile(ncase.v_max),
        gen_bus=tile(ncase.gen_bus) + goff,
        p_min=tile(ncase.p_min),
        p_max=tile(ncase.p_max),
        q_min=tile(ncase.q_min),
        q_max=tile(ncase.q_max),
        gen_status=tile(ncase.gen_status),
        cost_coeffs=ncase.cost_coeffs * copies,
        br_from=tile(ncase.br_from) + off,
        br_to=tile(ncase.br_to) + off,
        g_series=tile(ncase.g_series),
        b_series=tile(ncase.b_series),
        charging=tile(ncase.charging),
        tap=tile(ncase.tap),
        shift_rad=tile(ncase.shift_rad),
        s_max=tile(ncase.s_max),
        br_status=tile(ncase.br_status),
        is_transformer=tile(ncase.is_transformer),
    )


def replica_ref_buses(ncase: NormalizedCase, copies: int) -> np.ndarray:
    """Reference-bus index of every copy in a replicated case."""
    if ncase.ref_bus is None:
        return np.empty(0, dtype=np.intp)
    return ncase.ref_bus + np.arange(copies) * ncase.n_bus


def replicate_graph(graph: SplitGraph, copies: int) -> SplitGraph:
    """Disconnected union of ``copies`` instances of a split graph."""
    if copies == 1:
        return graph
    n = graph.n_nodes
    nb = graph.n_bus
    rcase = replicate_case(graph.ncase, copies)
    # nodes per copy stay contiguous: physical buses of copy k map to
    # [k*nb, (k+1)*nb) in the replicated case, artificial nodes follow all
    # physical buses, grouped by copy.
    n_art = graph.n_artificial
    total_bus = nb * copies

    def node_map(k):
        m = np.empty(n, dtype=np.intp)
        m[:nb] = np.arange(nb) + k * nb
        m[nb:] = total_bus + k * n_art + np.arange(n_art)
        return m

    maps = [node_map(k) for k in range(copies)]
    edges = np.concatenate([m[graph.edges] for m in maps], axis=0)
    gen_of = np.concatenate([m[graph.gen_of] for m in maps])
    parent_of = np.concatenate([m[graph.parent_of] for m in maps]) if n_art else graph.parent_of
    node_type = np.concatenate(
        [np.tile(graph.node_type[:nb], copies), np.tile(graph.node_type[nb:], copies)]
    )
    return SplitGraph(
        ncase=rcase,
        policy=graph.policy,
        n_nodes=n * copies,
        edges=edges,
        edge_artificial=np.tile(graph.edge_artificial, copies),
        node_type=node_type,
        parent_of=parent_of,
        gen_of=gen_of,
    )


def stack_loadings(loadings: list[LoadingCondition]) -> LoadingCondition:
    return LoadingCondition(
        np.concatenate([ld.p_d for ld in loadings]),
        np.concatenate([ld.q_d for ld in loadings]),
    )
