"""Hard-constraint physics-informed training.

The training objective combines the generation cost with quadratic
penalties and Lagrange-multiplier terms over all equality and inequality
residuals.  Penalty coefficients grow geometrically each epoch; multipliers
are raised from the current residual magnitudes (classical augmented
Lagrangian ascent applied to |h| and max(0, g)).

Residuals enter the loss in physical units (MW / MVAr, voltage slacks in
per-unit, thermal slacks in MVA^2) so that the documented penalty
hyperparameters are on the same scale as the dollar-valued cost term;
``residual_units="per-unit"`` switches to raw per-unit residuals.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import (
    LoadingCondition,
    SplitGraph,
    apply_loading,
    build_features,
    replica_ref_buses,
    replicate_graph,
    stack_loadings,
)
from .model import ModelConfig, ModelParams, apply_output_bounds, pinco_forward, tie_artificial_nodes
from .physics import (
    ConstraintResiduals,
    DecisionState,
    constraint_residuals,
    equality_loss_mw,
    generation_cost,
    violation_report,
)

RESIDUAL_UNITS = ("physical", "per-unit")


class Diverged(RuntimeError):
    """Loss became non-finite; carries the history up to the last finite epoch."""

    def __init__(self, epoch: int, history: "History"):
        super().__init__(f"training diverged at epoch {epoch}")
        self.epoch = epoch
        self.history = history


@dataclass
class ALState:
    """Penalty coefficients and multipliers of the augmented objective."""

    mu_h: float = 0.1
    mu_g: float = 0.001
    beta_h: float = 1.00003
    beta_g: float = 1.00002
    lambda_h: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lambda_g: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.mu_h <= 0 or self.mu_g <= 0:
            raise ValueError("penalty coefficients must be positive")
        if self.beta_h < 1 or self.beta_g < 1:
            raise ValueError("growth factors must be >= 1")

    @classmethod
    def for_case(cls, ncase, mu_h=0.1, mu_g=0.001, beta_h=1.00003, beta_g=1.00002):
        n_eq = 2 * ncase.n_bus
        n_gen = len(ncase.active_gens)
        n_rated = int((ncase.s_max[ncase.active_branches] > 0).sum())
        n_ineq = 4 * n_gen + 2 * ncase.n_bus + 2 * n_rated
        return cls(
            mu_h=mu_h,
            mu_g=mu_g,
            beta_h=beta_h,
            beta_g=beta_g,
            lambda_h=np.zeros(n_eq),
            lambda_g=np.zeros(n_ineq),
        )


def residual_scales(ncase, units: str = "physical") -> tuple[np.ndarray, np.ndarray]:
    """Scale factors turning per-unit residual vectors into loss units."""
    if units not in RESIDUAL_UNITS:
        raise ValueError(f"unknown residual units {units!r}")
    n_gen = len(ncase.active_gens)
    n_rated = int((ncase.s_max[ncase.active_branches] > 0).sum())
    if units == "per-unit":
        return np.ones(2 * ncase.n_bus), np.ones(4 * n_gen + 2 * ncase.n_bus + 2 * n_rated)
    base = ncase.base_mva
    h_scale = np.full(2 * ncase.n_bus, base)
    g_scale = np.concatenate(
        [
            np.full(4 * n_gen, base),  # P and Q box slacks, MW / MVAr
            np.ones(2 * ncase.n_bus),  # voltage slacks stay per-unit
            np.full(2 * n_rated, base * base),  # squared apparent power, MVA^2
        ]
    )
    return h_scale, g_scale


def al_loss(
    state: DecisionState,
    ncase,
    al: ALState,
    copies: int = 1,
    units: str = "physical",
    convention: str = "standard",
) -> tuple[Tensor, dict, ConstraintResiduals]:
    """Augmented objective for one (possibly batch-stacked) state.

    loss = cost + mu_h * mean(h^2) + mu_g * mean(max(0,g)^2)
         + mean(lambda_h * |h|) + mean(lambda_g * max(0,g))

    For a stacked batch (``copies`` disconnected replicas) the cost is
    averaged over replicas and the means run over all stacked constraint
    entries, which equals the per-sample average; multipliers are shared
    across replicas.
    """
    res = constraint_residuals(state, ncase, convention)
    base_scale, ineq_scale = residual_scales(ncase, units)
    if copies > 1:
        seg_h, seg_g = _constraint_segments(ncase, res, copies)
        lam_h = _tile_segments(al.lambda_h, seg_h, copies)
        lam_g = _tile_segments(al.lambda_g, seg_g, copies)
        if len(lam_h) != len(base_scale):
            raise ValueError(
                f"multiplier length {len(al.lambda_h)} does not match the "
                f"per-replica constraint count {len(base_scale) // copies}"
            )
    else:
        lam_h, lam_g = al.lambda_h, al.lambda_g

    h = ad.mul(res.equalities(), Tensor(base_scale))
    g = ad.mul(res.inequalities(), Tensor(ineq_scale))
    g_pos = ad.maximum(g, 0.0)

    cost = ad.mul(
        generation_cost(state.p_g, ncase.cost_coeffs, ncase.base_mva), 1.0 / copies
    )
    eq_penalty = ad.mul(ad.tmean(ad.square(h)), al.mu_h)
    ineq_penalty = ad.mul(ad.tmean(ad.square(g_pos)), al.mu_g)
    lam_eq = ad.tmean(ad.mul(Tensor(lam_h), ad.absolute(h)))
    lam_ineq = ad.tmean(ad.mul(Tensor(lam_g), g_pos))

    loss = ad.add(ad.add(ad.add(ad.add(cost, eq_penalty), ineq_penalty), lam_eq), lam_ineq)
    breakdown = {
        "cost": cost.item(),
        "eq_penalty": eq_penalty.item(),
        "ineq_penalty": ineq_penalty.item(),
        "lambda_eq": lam_eq.item(),
        "lambda_ineq": lam_ineq.item(),
    }
    return loss, breakdown, res


def feasibility_loss(
    state: DecisionState,
    ncase,
    units: str = "physical",
    convention: str = "standard",
) -> tuple[Tensor, dict, ConstraintResiduals]:
    """Pure residual least squares: mean(h^2) + mean(max(0, g)^2).

    The polish-phase objective; smooth everywhere, zero exactly at
    feasible points, and free of the cost term so descent stays close to
    the dispatch the main phase found.
    """
    res = constraint_residuals(state, ncase, convention)
    h_scale, g_scale = residual_scales(ncase, units)
    h = ad.mul(res.equalities(), Tensor(h_scale))
    g_pos = ad.maximum(ad.mul(res.inequalities(), Tensor(g_scale)), 0.0)
    eq_term = ad.tmean(ad.square(h))
    ineq_term = ad.tmean(ad.square(g_pos))
    loss = ad.add(eq_term, ineq_term)
    breakdown = {"eq_penalty": eq_term.item(), "ineq_penalty": ineq_term.item()}
    return loss, breakdown, res


def _constraint_segments(ncase, res: ConstraintResiduals, copies: int):
    """Per-replica lengths of the family-major constraint vector segments.

    Equalities are laid out [dp | dq], inequalities
    [p_lo | p_hi | q_lo | q_hi | v_lo | v_hi | s_ft | s_tf]; within each
    segment the entries of all replicas are contiguous (copy-major).
    """
    n = ncase.n_bus // copies
    g = len(ncase.active_gens) // copies
    r = len(res.rated_branches) // copies
    return [n, n], [g, g, g, g, n, n, r, r]


def _tile_segments(v: np.ndarray, segments: list[int], copies: int) -> np.ndarray:
    parts = []
    off = 0
    for s in segments:
        parts.append(np.tile(v[off : off + s], copies))
        off += s
    return np.concatenate(parts)


def _segment_means(v: np.ndarray, segments: list[int], copies: int) -> np.ndarray:
    parts = []
    off = 0
    for s in segments:
        chunk = v[off : off + s * copies]
        parts.append(chunk.reshape(copies, s).mean(axis=0) if s else chunk[:0])
        off += s * copies
    return np.concatenate(parts)


def residual_magnitudes(
    res: ConstraintResiduals, ncase, copies: int = 1, units: str = "physical"
) -> tuple[np.ndarray, np.ndarray]:
    """Per-constraint |h| and max(0, g) in loss units, averaged over replicas."""
    h_scale, g_scale = residual_scales(ncase, units)
    h = np.abs(res.equalities().values) * h_scale
    g = np.maximum(res.inequalities().values, 0.0) * g_scale
    if copies > 1:
        seg_h, seg_g = _constraint_segments(ncase, res, copies)
        h = _segment_means(h, seg_h, copies)
        g = _segment_means(g, seg_g, copies)
    return h, g


def update_multipliers(
    al: ALState, h_abs: np.ndarray, g_pos: np.ndarray, update_lambda: bool = True
) -> ALState:
    """One schedule step: grow penalties by beta; optionally raise multipliers.

    Penalty coefficients grow every call (every epoch).  Multiplier ascent
    (lambda_h += 2 mu_h |h|; lambda_g = max(0, lambda_g + 2 mu_g max(0, g)))
    runs only when ``update_lambda`` is set, i.e. at the configured
    multiplier-update interval: raising multipliers from every transient
    iterate overshoots their equilibrium scale by orders of magnitude,
    which turns the loss into a pure L1 canyon and stalls convergence.
    """
    lam_h = al.lambda_h + 2.0 * al.mu_h * h_abs if update_lambda else al.lambda_h
    lam_g = (
        np.maximum(0.0, al.lambda_g + 2.0 * al.mu_g * g_pos)
        if update_lambda
        else al.lambda_g
    )
    return replace(
        al,
        mu_h=al.mu_h * al.beta_h,
        mu_g=al.mu_g * al.beta_g,
        lambda_h=lam_h,
        lambda_g=lam_g,
    )


def update_multipliers_from_residuals(
    al: ALState, res: ConstraintResiduals, ncase, units: str = "physical"
) -> ALState:
    h_abs, g_pos = residual_magnitudes(res, ncase, units=units)
    return update_multipliers(al, h_abs, g_pos)


# ---------------------------------------------------------------------------
# optimizer and schedule


class Adam:
    """Standard Adam on a list of parameter tensors."""

    def __init__(self, params: list[Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.values -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


@dataclass
class TrainConfig:
    epochs: int = 20000
    lr: float = 0.0005
    gamma: float = 0.9995
    decay_interval: int = 10
    batch_size: int = 20
    seed: int = 0
    mu_h: float = 0.1
    mu_g: float = 0.001
    beta_h: float = 1.00003
    beta_g: float = 1.00002
    depth: int = 5
    width: int = 24
    heads: int = 4
    bounding: str = "squash"
    theta_scale: float = 1.0
    residual_units: str = "physical"
    convention: str = "standard"
    lambda_interval: int = 1
    polish_epochs: int = 0
    val_interval: int = 200
    grad_clip: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            depth=self.depth,
            hidden=self.width,
            heads=self.heads,
            bounding=self.bounding,
            theta_scale=self.theta_scale,
        )

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {k: v for k, v in raw.items() if k in cls.__dataclass_fields__}
        unknown = set(raw) - set(known)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**known)

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1), encoding="utf-8")


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Exponential schedule: lr * gamma^(epoch // decay_interval)."""
    return config.lr * config.gamma ** (epoch // config.decay_interval)


# ---------------------------------------------------------------------------
# history


HISTORY_COLUMNS = [
    "epoch",
    "loss",
    "cost",
    "eq_penalty",
    "ineq_penalty",
    "lambda_eq",
    "lambda_ineq",
    "equality_loss_mw",
    "violations",
    "val_equality_loss_mw",
    "lr",
]


class History:
    """Per-epoch training record, serializable to CSV."""

    def __init__(self, rows: list[dict] | None = None):
        self.rows = rows or []

    def append(self, **row):
        self.rows.append(row)

    def column(self, name: str) -> np.ndarray:
        return np.array([r.get(name, np.nan) for r in self.rows], dtype=float)

    def __len__(self):
        return len(self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=HISTORY_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        return buf.getvalue()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "History":
        rows = []
        for rec in csv.DictReader(io.StringIO(text)):
            rows.append(
                {
                    k: (int(v) if k == "epoch" else float(v))
                    for k, v in rec.items()
                    if v not in ("", None)
                }
            )
        return cls(rows)


@dataclass
class TrainResult:
    params: ModelParams
    best_params: ModelParams
    history: History
    al: ALState


# ---------------------------------------------------------------------------
# training loop


def _clip_gradients(params: list[Tensor], limit: float) -> None:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad**2).sum())
    norm = np.sqrt(total)
    if norm > limit:
        scale = limit / norm
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def _mean_eq_loss(params, graph_cache, ncase, loadings, config) -> float:
    """Mean equality loss (MW) over a list of loadings, no gradients."""
    if not loadings:
        return float("nan")
    with ad.no_grad():
        total = 0.0
        for ld in loadings:
            graph, ref_nodes = graph_cache[1]
            x = build_features(graph, ld)
            raw = pinco_forward(x, graph, params)
            state = tie_artificial_nodes(
                apply_output_bounds(raw, graph, params.config), graph, ref_nodes
            )
            lcase = apply_loading(ncase, ld)
            res = constraint_residuals(state, lcase, config.convention)
            total += equality_loss_mw(res, ncase.base_mva)
    return total / len(loadings)


def train(
    config: TrainConfig,
    graph: SplitGraph,
    dataset: list[LoadingCondition],
    val_set: list[LoadingCondition] | None = None,
    params: ModelParams | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run the hard-constraint training loop.

    Each epoch sweeps the dataset in mini-batches (stacked as disconnected
    graph replicas), takes one Adam step per batch, then grows the penalty
    coefficients and raises the multipliers from the epoch's mean residual
    magnitudes.  The learning rate decays by ``gamma`` every
    ``decay_interval`` epochs.

    When ``polish_epochs`` is set, a second phase continues from the last
    iterate minimizing the quadratic residual terms alone (no cost, no
    multipliers) at the annealed learning rate.  The multiplier phase gets
    within a few MW of balance but circles the non-smooth multiplier
    canyon at a radius set by the step size; the smooth least-squares
    phase descends the remaining distance while barely moving the
    (cost-determining) dispatch.

    ``best_params`` holds the iterate with the lowest validation equality
    loss (training equality loss when no validation set is given) among
    iterates free of inequality violations.
    """
    if not dataset:
        raise ValueError("dataset must contain at least one loading condition")
    ncase = graph.ncase
    if params is None:
        params = ModelParams.init(config.model_config(), seed=config.seed)
    al = ALState.for_case(
        ncase, mu_h=config.mu_h, mu_g=config.mu_g, beta_h=config.beta_h, beta_g=config.beta_g
    )
    adam = Adam(params.tensors())
    rng = np.random.default_rng(config.seed)
    history = History()

    graph_cache: dict[int, tuple[SplitGraph, np.ndarray]] = {}

    def replicated(b: int):
        if b not in graph_cache:
            g = replicate_graph(graph, b)
            graph_cache[b] = (g, replica_ref_buses(ncase, b))
        return graph_cache[b]

    replicated(1)
    n = len(dataset)
    batch = max(1, min(config.batch_size, n))

    best_params = params.copy()
    best_score = float("inf")

    def run_epoch(epoch: int, lr: float, polish: bool):
        nonlocal al
        order = rng.permutation(n) if n > 1 else np.zeros(1, dtype=int)
        epoch_loss = 0.0
        epoch_terms = {"cost": 0.0, "eq_penalty": 0.0, "ineq_penalty": 0.0,
                       "lambda_eq": 0.0, "lambda_ineq": 0.0}
        epoch_eq_mw = 0.0
        epoch_viol = 0
        h_acc = np.zeros_like(al.lambda_h)
        g_acc = np.zeros_like(al.lambda_g)
        n_batches = 0

        for start in range(0, n, batch):
            idx = order[start : start + batch]
            copies = len(idx)
            rep_graph, ref_nodes = replicated(copies)
            stacked = (
                stack_loadings([dataset[i] for i in idx]) if copies > 1 else dataset[idx[0]]
            )
            x = build_features(rep_graph, stacked)
            bcase = apply_loading(rep_graph.ncase, stacked)

            adam.zero_grad()
            raw = pinco_forward(x, rep_graph, params)
            state = tie_artificial_nodes(
                apply_output_bounds(raw, rep_graph, params.config), rep_graph, ref_nodes
            )
            if polish:
                loss, terms, res = feasibility_loss(
                    state, bcase, units=config.residual_units, convention=config.convention
                )
            else:
                loss, terms, res = al_loss(
                    state, bcase, al, copies=copies,
                    units=config.residual_units, convention=config.convention,
                )
            loss_val = loss.item()
            if not np.isfinite(loss_val):
                raise Diverged(epoch, history)
            ad.backward(loss)
            if config.grad_clip is not None:
                _clip_gradients(adam.params, config.grad_clip)
            adam.step(lr)

            h_abs, g_pos = residual_magnitudes(
                res, bcase, copies=copies, units=config.residual_units
            )
            h_acc += h_abs
            g_acc += g_pos
            epoch_loss += loss_val
            for k in epoch_terms:
                epoch_terms[k] += terms.get(k, 0.0)
            epoch_eq_mw += equality_loss_mw(res, ncase.base_mva) / copies
            epoch_viol += violation_report(res).total
            n_batches += 1

        if not polish:
            al = update_multipliers(
                al,
                h_acc / n_batches,
                g_acc / n_batches,
                update_lambda=(epoch + 1) % config.lambda_interval == 0,
            )
        return epoch_loss, epoch_terms, epoch_eq_mw, epoch_viol, n_batches

    def consider_checkpoint(epoch: int, train_eq: float, violations: int):
        nonlocal best_score, best_params
        if val_set:
            if epoch % config.val_interval and epoch != total_epochs - 1:
                return float("nan")
            score = _mean_eq_loss(params, graph_cache, ncase, val_set, config)
            reported = score
        else:
            score = train_eq if violations == 0 else float("inf")
            reported = float("nan")
        if score < best_score:
            best_score = score
            best_params = params.copy()
        return reported

    total_epochs = config.epochs + config.polish_epochs
    for epoch in range(total_epochs):
        polish = epoch >= config.epochs
        lr = lr_at(epoch, config)
        loss_sum, terms, eq_mw, viol, n_b = run_epoch(epoch, lr, polish)
        val_eq = consider_checkpoint(epoch, eq_mw / n_b, viol)
        history.append(
            epoch=epoch,
            loss=loss_sum / n_b,
            cost=terms["cost"] / n_b,
            eq_penalty=terms["eq_penalty"] / n_b,
            ineq_penalty=terms["ineq_penalty"] / n_b,
            lambda_eq=terms["lambda_eq"] / n_b,
            lambda_ineq=terms["lambda_ineq"] / n_b,
            equality_loss_mw=eq_mw / n_b,
            violations=viol,
            val_equality_loss_mw=val_eq,
            lr=lr,
        )
        if log_every and epoch % log_every == 0:
            row = history.rows[-1]
            print(
                f"epoch {epoch:6d}{' P' if polish else '  '}  loss {row['loss']:.4f}  "
                f"eq {row['equality_loss_mw']:.5f} MW  viol {row['violations']}  lr {lr:.2e}"
            )

    return TrainResult(params=params, best_params=best_params, history=history, al=al)
