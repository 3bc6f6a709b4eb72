"""Neural-network-free baseline solver.

Minimizes generation cost directly over the decision variables with a
classical augmented-Lagrangian outer loop (signed multipliers on the
balance equations, hinge multipliers on the thermal limits) and an Adam
inner minimizer, reusing the shared physics residuals and the autodiff
engine.  Box constraints on P_g, Q_g and V hold throughout because the
variables are parameterized with the same sigmoid squash the network uses;
the reference-bus angle is pinned at zero.

The balance residuals enter the inner objective in MW so the penalty scale
is commensurate with the dollar-valued cost term.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
import json

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import LoadingCondition, NormalizedCase, apply_loading
from .physics import (
    DecisionState,
    constraint_residuals,
    equality_loss_mw,
    generation_cost,
    violation_report,
)
from .training import Adam


class Disconnected(ValueError):
    """The in-service grid does not form a single connected component."""


@dataclass
class SolveOptions:
    outer_iters: int = 16
    inner_steps: int = 1200
    inner_lr: float = 0.05
    inner_lr_floor: float = 1e-5
    inner_lr_shrink: float = 0.6  # applied to the inner start rate per outer round
    raw_clamp: float = 10.0  # keeps the sigmoid parameterization out of dead saturation
    mu_h: float = 0.5  # on MW-scaled balance residuals
    mu_g: float = 0.5
    beta: float = 5.0
    grow_threshold: float = 0.7  # grow mu only when max|h| shrank less than this
    mu_max: float = 1e9
    tol_eq: float = 1e-6  # pu
    tol_ineq: float = 1e-6  # pu (squared-magnitude slack for thermal limits)
    tol_cost: float = 1e-3  # relative objective change between outer iterations
    flat_start: bool = False  # plain flat start instead of the demand-share warm start
    seed: int = 0

    def __post_init__(self):
        if min(self.tol_eq, self.tol_ineq, self.tol_cost) <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class SolveDiagnostics:
    converged: bool
    outer_iterations: int
    inner_steps_total: int
    max_eq_residual_pu: float
    max_ineq_slack_pu: float
    equality_loss_mw: float
    objective: float
    merit_history: list[float] = field(default_factory=list)
    eq_history: list[float] = field(default_factory=list)
    cost_history: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "converged": self.converged,
            "outer_iterations": self.outer_iterations,
            "inner_steps_total": self.inner_steps_total,
            "max_eq_residual_pu": self.max_eq_residual_pu,
            "max_ineq_slack_pu": self.max_ineq_slack_pu,
            "equality_loss_mw": self.equality_loss_mw,
            "objective": self.objective,
            "merit_history": self.merit_history,
            "eq_history": self.eq_history,
            "cost_history": self.cost_history,
        }


def check_connected(ncase: NormalizedCase) -> None:
    n = ncase.n_bus
    if n == 0:
        raise Disconnected("empty grid")
    adj: list[list[int]] = [[] for _ in range(n)]
    for i in ncase.active_branches:
        f, t = int(ncase.br_from[i]), int(ncase.br_to[i])
        adj[f].append(t)
        adj[t].append(f)
    seen = np.zeros(n, dtype=bool)
    stack = [0]
    seen[0] = True
    while stack:
        u = stack.pop()
        for v in adj[u]:
            if not seen[v]:
                seen[v] = True
                stack.append(v)
    if not seen.all():
        missing = np.flatnonzero(~seen)[:5]
        raise Disconnected(f"buses {missing.tolist()} unreachable from bus 0")


def warm_start(ncase: NormalizedCase, loading: LoadingCondition) -> DecisionState:
    """Flat voltages, active power split by demand share, reactive midpoints."""
    act = ncase.active_gens
    p_min, p_max = ncase.p_min[act], ncase.p_max[act]
    q_min, q_max = ncase.q_min[act], ncase.q_max[act]
    total = float(np.sum(loading.p_d))
    cap = float(p_max.sum())
    share = p_max / cap if cap > 0 else np.full(len(act), 1.0 / max(len(act), 1))
    p0 = np.clip(total * share, p_min, p_max)
    q0 = (q_min + q_max) / 2.0
    v0 = np.clip(np.ones(ncase.n_bus), ncase.v_min, ncase.v_max)
    return DecisionState(p0, q0, v0, np.zeros(ncase.n_bus))


def _logit(fraction: np.ndarray) -> np.ndarray:
    f = np.clip(fraction, 1e-6, 1.0 - 1e-6)
    return np.log(f / (1.0 - f))


def _raw_from_value(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    span = hi - lo
    frac = np.where(span > 0, (x - lo) / np.where(span > 0, span, 1.0), 0.5)
    return _logit(frac)


def _squash(raw: Tensor, lo: np.ndarray, hi: np.ndarray) -> Tensor:
    return ad.add(Tensor(lo), ad.mul(ad.sigmoid(raw), Tensor(hi - lo)))


def solve_reference(
    ncase: NormalizedCase,
    loading: LoadingCondition | None = None,
    opts: SolveOptions | None = None,
) -> tuple[DecisionState, float, SolveDiagnostics]:
    """Solve the dispatch problem for one loading condition.

    Returns the best iterate found, its generation cost, and diagnostics.
    When the tolerances are not met the best iterate is still returned with
    ``diagnostics.converged`` False.
    """
    opts = opts or SolveOptions()
    check_connected(ncase)
    if loading is None:
        loading = ncase.reference_loading()
    case = apply_loading(ncase, loading)
    base = case.base_mva

    act = case.active_gens
    p_min, p_max = case.p_min[act], case.p_max[act]
    q_min, q_max = case.q_min[act], case.q_max[act]
    v_min, v_max = case.v_min, case.v_max

    start = (
        DecisionState(
            np.clip(np.zeros(len(act)), p_min, p_max),
            (q_min + q_max) / 2.0,
            np.clip(np.ones(case.n_bus), v_min, v_max),
            np.zeros(case.n_bus),
        )
        if opts.flat_start
        else warm_start(case, loading)
    )

    raw_p = Tensor(_raw_from_value(start.p_g.values, p_min, p_max), requires_grad=True)
    raw_q = Tensor(_raw_from_value(start.q_g.values, q_min, q_max), requires_grad=True)
    raw_v = Tensor(_raw_from_value(start.v.values, v_min, v_max), requires_grad=True)
    theta = Tensor(start.theta.values.copy(), requires_grad=True)
    theta_keep = np.ones(case.n_bus)
    if case.ref_bus is not None:
        theta_keep[case.ref_bus] = 0.0

    def current_state() -> DecisionState:
        return DecisionState(
            _squash(raw_p, p_min, p_max),
            _squash(raw_q, q_min, q_max),
            _squash(raw_v, v_min, v_max),
            ad.mul(theta, Tensor(theta_keep)),
        )

    n_eq = 2 * case.n_bus
    n_rated = int((case.s_max[case.active_branches] > 0).sum())
    lam_h = np.zeros(n_eq)
    lam_g = np.zeros(2 * n_rated)
    mu_h, mu_g = opts.mu_h, opts.mu_g

    params = [raw_p, raw_q, raw_v, theta]

    def inner_objective():
        state = current_state()
        res = constraint_residuals(state, case)
        h = ad.mul(res.equalities(), base)
        cost = generation_cost(state.p_g, case.cost_coeffs, base)
        obj = ad.add(cost, ad.add(ad.tsum(ad.mul(Tensor(lam_h), h)), ad.mul(ad.tsum(ad.square(h)), mu_h)))
        if res.g_s.size:
            gs = ad.mul(res.g_s, base * base)
            gs_pos = ad.maximum(gs, 0.0)
            obj = ad.add(obj, ad.add(ad.tsum(ad.mul(Tensor(lam_g), gs_pos)), ad.mul(ad.tsum(ad.square(gs_pos)), mu_g)))
        return obj, state, res, cost

    # merit used to accept iterates: feasibility-weighted cost, so the
    # accepted-objective sequence is non-increasing by construction
    def merit(cost_val, eq_mw, ineq_viol):
        return cost_val + 1e6 * eq_mw + 1e6 * ineq_viol

    best_state = None
    best_cost = np.inf
    best_merit = np.inf
    best_res = None
    diag = SolveDiagnostics(
        converged=False,
        outer_iterations=0,
        inner_steps_total=0,
        max_eq_residual_pu=np.inf,
        max_ineq_slack_pu=np.inf,
        equality_loss_mw=np.inf,
        objective=np.inf,
    )

    prev_cost = None
    prev_max_eq = np.inf
    lr_start = opts.inner_lr
    for outer in range(opts.outer_iters):
        adam = Adam(params)
        decay = (opts.inner_lr_floor / lr_start) ** (1.0 / max(opts.inner_steps - 1, 1))
        lr = lr_start
        for step in range(opts.inner_steps):
            adam.zero_grad()
            obj, _, _, _ = inner_objective()
            ad.backward(obj)
            adam.step(lr)
            lr *= decay
            for raw in (raw_p, raw_q, raw_v):
                np.clip(raw.values, -opts.raw_clamp, opts.raw_clamp, out=raw.values)
        diag.inner_steps_total += opts.inner_steps

        with ad.no_grad():
            _, state, res, cost = inner_objective()
        cost_val = cost.item()
        h_pu = res.equalities().values
        max_eq = float(np.abs(h_pu).max())
        ineq = res.inequalities().values
        max_ineq = float(ineq.max()) if ineq.size else 0.0
        eq_mw = equality_loss_mw(res, base)
        ineq_viol = float(np.maximum(ineq, 0.0).sum()) if ineq.size else 0.0

        m = merit(cost_val, eq_mw, ineq_viol)
        diag.eq_history.append(max_eq)
        diag.cost_history.append(cost_val)
        if m < best_merit - 1e-12:
            best_merit = m
            best_state = state.numpy()
            best_cost = cost_val
            best_res = res
            diag.merit_history.append(m)
        diag.outer_iterations = outer + 1

        converged = (
            max_eq <= opts.tol_eq
            and max_ineq <= opts.tol_ineq
            and prev_cost is not None
            and abs(cost_val - prev_cost) <= opts.tol_cost * max(1.0, abs(cost_val))
        )
        if converged:
            diag.converged = True
            break
        prev_cost = cost_val

        # progress: trust the iterate, ascend multipliers, refine the step size;
        # stall: the subproblem needs a stiffer penalty, re-solve at the same rate
        if max_eq <= opts.grow_threshold * prev_max_eq:
            lam_h = lam_h + 2.0 * mu_h * (h_pu * base)
            if res.g_s.size:
                gs = res.g_s.values * base * base
                lam_g = np.maximum(0.0, lam_g + 2.0 * mu_g * np.maximum(gs, 0.0))
            lr_start = max(lr_start * opts.inner_lr_shrink, 10.0 * opts.inner_lr_floor)
            prev_max_eq = max_eq
        else:
            mu_h = min(mu_h * opts.beta, opts.mu_max)
            mu_g = min(mu_g * opts.beta, opts.mu_max)

    if best_state is None:  # every iterate was non-finite; return the start
        best_state = start
        best_res = constraint_residuals(start, case)
        best_cost = generation_cost(start.p_g, case.cost_coeffs, base).item()

    diag.max_eq_residual_pu = float(np.abs(best_res.equalities().values).max())
    ineq = best_res.inequalities().values
    diag.max_ineq_slack_pu = float(ineq.max()) if ineq.size else 0.0
    diag.equality_loss_mw = equality_loss_mw(best_res, base)
    diag.objective = best_cost
    return best_state, best_cost, diag


def save_solution(
    path: str | Path, state: DecisionState, cost: float, diag: SolveDiagnostics
) -> None:
    payload = {
        "kind": "reference-solution",
        "state": state.to_dict(),
        "cost": cost,
        "diagnostics": diag.to_dict(),
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_solution(path: str | Path) -> tuple[DecisionState, float, dict]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("kind") != "reference-solution":
        raise ValueError(f"{path}: not a reference solution file")
    return DecisionState.from_dict(payload["state"]), payload["cost"], payload["diagnostics"]
