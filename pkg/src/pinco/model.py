"""The PINCO network: attention message passing over the split grid graph.

Stacked multi-head attention layers (queries from the receiving node, keys
and values from the sending node plus a binary artificial-edge flag),
followed by a two-layer head with a tanhshrink hidden activation and a
linear output.  Raw node outputs are turned into a feasible decision state
by sigmoid bound squashing and artificial-node tying.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import FEATURE_DIM, OUTPUT_DIM, SplitGraph
from .physics import DecisionState

BOUNDING_MODES = ("squash", "penalty")

CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    depth: int = 5
    hidden: int = 24
    heads: int = 4
    bounding: str = "squash"
    theta_scale: float = 1.0
    feature_dim: int = FEATURE_DIM
    output_dim: int = OUTPUT_DIM

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.bounding not in BOUNDING_MODES:
            raise ValueError(f"bounding must be one of {BOUNDING_MODES}")

    def to_dict(self) -> dict:
        return {
            "depth": self.depth,
            "hidden": self.hidden,
            "heads": self.heads,
            "bounding": self.bounding,
            "theta_scale": self.theta_scale,
            "feature_dim": self.feature_dim,
            "output_dim": self.output_dim,
        }


class ModelParams:
    """Named parameter tensors; creation order is the optimizer order."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        self.config = config
        self._tensors = tensors

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "ModelParams":
        """Uniform +-1/sqrt(fan_in) weights, zero biases."""
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}

        def weight(name, fan_in, fan_out):
            bound = 1.0 / np.sqrt(fan_in)
            tensors[name] = Tensor(
                rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True
            )

        def bias(name, size):
            tensors[name] = Tensor(np.zeros(size), requires_grad=True)

        d_in = config.feature_dim
        d_head = config.hidden // config.heads
        for layer in range(config.depth):
            for h in range(config.heads):
                p = f"layer{layer}.head{h}"
                weight(f"{p}.w_q", d_in, d_head)
                bias(f"{p}.b_q", d_head)
                weight(f"{p}.w_k", d_in + 1, d_head)  # +1: artificial-edge flag
                bias(f"{p}.b_k", d_head)
                weight(f"{p}.w_v", d_in + 1, d_head)
                bias(f"{p}.b_v", d_head)
            weight(f"layer{layer}.w_skip", d_in, config.hidden)
            bias(f"layer{layer}.b_skip", config.hidden)
            d_in = config.hidden
        weight("head.w1", config.hidden, config.hidden)
        bias("head.b1", config.hidden)
        weight("head.w2", config.hidden, config.output_dim)
        bias("head.b2", config.output_dim)
        return cls(config, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def tensors(self) -> list[Tensor]:
        return list(self._tensors.values())

    def named(self) -> dict[str, Tensor]:
        return dict(self._tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.config,
            {k: Tensor(v.values.copy(), requires_grad=v.requires_grad)
             for k, v in self._tensors.items()},
        )

    def n_parameters(self) -> int:
        return sum(t.size for t in self._tensors.values())


# ---------------------------------------------------------------------------
# message-passing topology


def message_edges(graph: SplitGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Directed edge arrays (src, dst, flag) with both directions per branch
    plus a self-loop on every node; flag 1 marks artificial links."""
    cached = getattr(graph, "_mp_edges", None)
    if cached is not None:
        return cached
    a, b = graph.edges[:, 0], graph.edges[:, 1]
    flags = graph.edge_artificial.astype(float)
    loops = np.arange(graph.n_nodes)
    src = np.concatenate([a, b, loops])
    dst = np.concatenate([b, a, loops])
    flag = np.concatenate([flags, flags, np.zeros(graph.n_nodes)])
    result = (src.astype(np.intp), dst.astype(np.intp), flag)
    graph._mp_edges = result
    return result


def attention_layer_forward(
    x: Tensor,
    src: np.ndarray,
    dst: np.ndarray,
    edge_flag: np.ndarray,
    params: ModelParams,
    layer: int,
) -> Tensor:
    """One multi-head attention layer over the directed edge set.

    Per head: scores (W_q x_i) . (W_k [x_j, flag]) / sqrt(d_head), softmax
    over the incoming edges of each node (self-loops guarantee at least
    one), message sum of attention-weighted values, heads concatenated and
    added to a linear skip of the node's own features.
    """
    cfg = params.config
    n = x.shape[0]
    d_head = cfg.hidden // cfg.heads
    scale = 1.0 / np.sqrt(d_head)

    x_src = ad.gather(x, src)
    kv_in = ad.concat([x_src, Tensor(edge_flag.reshape(-1, 1))], axis=1)

    head_outputs = []
    for h in range(cfg.heads):
        p = f"layer{layer}.head{h}"
        q = ad.add(ad.matmul(x, params[f"{p}.w_q"]), params[f"{p}.b_q"])
        k = ad.add(ad.matmul(kv_in, params[f"{p}.w_k"]), params[f"{p}.b_k"])
        v = ad.add(ad.matmul(kv_in, params[f"{p}.w_v"]), params[f"{p}.b_v"])
        q_dst = ad.gather(q, dst)
        score = ad.mul(ad.tsum(ad.mul(q_dst, k), axis=1), scale)
        alpha = ad.segment_softmax(score, dst, n)
        msg = ad.mul(v, ad.reshape(alpha, (-1, 1)))
        head_outputs.append(ad.scatter_add(msg, dst, n))

    attended = ad.concat(head_outputs, axis=1)
    skip = ad.add(ad.matmul(x, params[f"layer{layer}.w_skip"]), params[f"layer{layer}.b_skip"])
    return ad.add(skip, attended)


def pinco_forward(features, graph: SplitGraph, params: ModelParams) -> Tensor:
    """Full network: attention stack then the two-layer output head."""
    cfg = params.config
    src, dst, flag = message_edges(graph)
    x = ad.as_tensor(features)
    if x.shape[1] != cfg.feature_dim:
        raise ad.ShapeMismatch(
            f"features have {x.shape[1]} columns, model expects {cfg.feature_dim}"
        )
    for layer in range(cfg.depth):
        x = attention_layer_forward(x, src, dst, flag, params, layer)
    hidden = ad.tanhshrink(ad.add(ad.matmul(x, params["head.w1"]), params["head.b1"]))
    return ad.add(ad.matmul(hidden, params["head.w2"]), params["head.b2"])


# ---------------------------------------------------------------------------
# output bounding and artificial-node tying


@dataclass
class NodeOutputs:
    """Per-node decision columns before tying (artificial rows still present)."""

    p: Tensor
    q: Tensor
    v: Tensor
    theta: Tensor


def _node_bounds(graph: SplitGraph) -> tuple[np.ndarray, ...]:
    cached = getattr(graph, "_node_bounds", None)
    if cached is not None:
        return cached
    ncase = graph.ncase
    act = ncase.active_gens
    n = graph.n_nodes
    p_lo = np.zeros(n)
    p_hi = np.zeros(n)
    q_lo = np.zeros(n)
    q_hi = np.zeros(n)
    p_lo[graph.gen_of] = ncase.p_min[act]
    p_hi[graph.gen_of] = ncase.p_max[act]
    q_lo[graph.gen_of] = ncase.q_min[act]
    q_hi[graph.gen_of] = ncase.q_max[act]
    parent = graph.parent_index()
    v_lo = ncase.v_min[parent]
    v_hi = ncase.v_max[parent]
    result = (p_lo, p_hi, q_lo, q_hi, v_lo, v_hi)
    graph._node_bounds = result
    return result


def _squash(raw: Tensor, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    return ad.add(Tensor(lo), ad.mul(ad.sigmoid(raw), Tensor(hi - lo)))


def _column(raw: Tensor, j: int) -> Tensor:
    n, width = raw.shape
    flat = ad.reshape(raw, (n * width,))
    return ad.gather(flat, np.arange(n) * width + j)


def apply_output_bounds(raw: Tensor, graph: SplitGraph, config: ModelConfig) -> NodeOutputs:
    """Map raw network outputs to per-node decision values.

    In squash mode the box-bounded quantities (P_g, Q_g, V) pass through a
    sigmoid scaled to their limits, so any finite raw value lands inside its
    box.  In penalty mode raw values pass through untouched.  The angle
    column is scaled by ``theta_scale``, never squashed.
    """
    raw = ad.as_tensor(raw)
    p_raw, q_raw, v_raw, t_raw = (_column(raw, j) for j in range(4))
    theta = ad.mul(t_raw, config.theta_scale)
    if config.bounding == "penalty":
        return NodeOutputs(p_raw, q_raw, v_raw, theta)
    p_lo, p_hi, q_lo, q_hi, v_lo, v_hi = _node_bounds(graph)
    return NodeOutputs(
        _squash(p_raw, p_lo, p_hi),
        _squash(q_raw, q_lo, q_hi),
        _squash(v_raw, v_lo, v_hi),
        theta,
    )


def tie_artificial_nodes(
    node_out: NodeOutputs, graph: SplitGraph, ref_nodes: np.ndarray | None = None
) -> DecisionState:
    """Collapse node-space outputs into a physical decision state.

    V and theta are read from physical nodes only (artificial predictions
    are discarded; artificial nodes share their parent's voltage by
    construction), P_g/Q_g are read from each generator's assigned node.
    The angle of the designated reference bus (every copy's, for replicated
    graphs) is pinned to zero.
    """
    phys = np.arange(graph.n_bus)
    v = ad.gather(node_out.v, phys)
    theta = ad.gather(node_out.theta, phys)
    if ref_nodes is None:
        ref_nodes = (
            np.array([graph.ncase.ref_bus], dtype=np.intp)
            if graph.ncase.ref_bus is not None
            else np.empty(0, dtype=np.intp)
        )
    if len(ref_nodes):
        keep = np.ones(graph.n_bus)
        keep[ref_nodes] = 0.0
        theta = ad.mul(theta, Tensor(keep))
    return DecisionState(
        ad.gather(node_out.p, graph.gen_of),
        ad.gather(node_out.q, graph.gen_of),
        v,
        theta,
    )


def network_state(
    features,
    graph: SplitGraph,
    params: ModelParams,
    ref_nodes: np.ndarray | None = None,
) -> DecisionState:
    """Forward pass straight to a physical DecisionState."""
    raw = pinco_forward(features, graph, params)
    bounded = apply_output_bounds(raw, graph, params.config)
    return tie_artificial_nodes(bounded, graph, ref_nodes)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: ModelParams, extra: dict | None = None) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "extra": extra or {},
        "tensors": {
            name: {"shape": list(t.shape), "values": t.values.reshape(-1).tolist()}
            for name, t in params.named().items()
        },
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_checkpoint(path: str | Path) -> tuple[ModelParams, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"{path}: unsupported checkpoint version {payload.get('format_version')}"
        )
    config = ModelConfig(**payload["config"])
    tensors = {
        name: Tensor(np.array(rec["values"]).reshape(rec["shape"]), requires_grad=True)
        for name, rec in payload["tensors"].items()
    }
    return ModelParams(config, tensors), payload.get("extra", {})
