"""AC power-flow physics: objective, residuals, and feasibility metrics.

Single source of truth shared by the trainer, the reference solver, and the
evaluator.  All functions accept either plain numpy arrays or autodiff
tensors from :mod:`pinco.autodiff`; when any input requires gradients the
whole computation is recorded on the tape.

Quantities are per-unit on the system MVA base; angles in radians.  The
equality-loss metric converts back to MW.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .grid import NormalizedCase

FLOW_CONVENTIONS = ("standard", "paper-literal")

VIOLATION_TOL = 1e-8  # pu


class DegreeUnsupported(ValueError):
    """Cost polynomial degree above cubic."""


@dataclass
class DecisionState:
    """Decision variables: per active generator P_g/Q_g, per bus V/theta."""

    p_g: Tensor
    q_g: Tensor
    v: Tensor
    theta: Tensor

    def __post_init__(self):
        self.p_g = ad.as_tensor(self.p_g)
        self.q_g = ad.as_tensor(self.q_g)
        self.v = ad.as_tensor(self.v)
        self.theta = ad.as_tensor(self.theta)

    def numpy(self) -> "DecisionState":
        return DecisionState(
            Tensor(self.p_g.values.copy()),
            Tensor(self.q_g.values.copy()),
            Tensor(self.v.values.copy()),
            Tensor(self.theta.values.copy()),
        )

    def to_dict(self) -> dict:
        return {
            "p_g": self.p_g.values.tolist(),
            "q_g": self.q_g.values.tolist(),
            "v": self.v.values.tolist(),
            "theta": self.theta.values.tolist(),
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "DecisionState":
        return cls(raw["p_g"], raw["q_g"], raw["v"], raw["theta"])


@dataclass
class BranchFlows:
    """Directed flows per in-service branch (from->to and to->from)."""

    p_ft: Tensor
    q_ft: Tensor
    p_tf: Tensor
    q_tf: Tensor


@dataclass
class ConstraintResiduals:
    """Equality mismatches and signed inequality slacks (positive = violated).

    ``dp``/``dq``: per-bus balance mismatch, pu.
    ``g_p``/``g_q``: per active generator, lower then upper bound slack.
    ``g_v``: per bus, lower then upper voltage slack.
    ``g_s``: squared-magnitude thermal slack per rated in-service branch and
    direction (branches with zero rating are unconstrained and excluded;
    ``rated_branches`` holds their indices into the active branch list).
    """

    dp: Tensor
    dq: Tensor
    g_p: Tensor
    g_q: Tensor
    g_v: Tensor
    g_s: Tensor
    rated_branches: np.ndarray

    def equalities(self) -> Tensor:
        return ad.concat([self.dp, self.dq])

    def inequalities(self) -> Tensor:
        return ad.concat([self.g_p, self.g_q, self.g_v, self.g_s])


def _check_state(state: DecisionState, case: NormalizedCase) -> None:
    n_gen = len(case.active_gens)
    if state.p_g.size != n_gen or state.q_g.size != n_gen:
        raise ValueError(
            f"state has {state.p_g.size} generators, case has {n_gen} active"
        )
    if state.v.size != case.n_bus or state.theta.size != case.n_bus:
        raise ValueError(f"state has {state.v.size} buses, case has {case.n_bus}")


def branch_flows(
    state: DecisionState, case: NormalizedCase, convention: str = "standard"
) -> BranchFlows:
    """Active/reactive flow on each in-service branch, both directions.

    ``standard`` uses the pi-model with the off-nominal tap on the from
    side.  ``paper-literal`` evaluates the alternative printed form in which
    the from-bus voltage term is multiplied (not divided) by the tap and the
    reactive shunt coefficient uses the series conductance; it is provided
    for auditing and ignores phase shift.
    """
    if convention not in FLOW_CONVENTIONS:
        raise ValueError(f"unknown convention {convention!r}; choose from {FLOW_CONVENTIONS}")
    _check_state(state, case)
    act = case.active_branches
    f, t = case.br_from[act], case.br_to[act]
    g = Tensor(case.g_series[act])
    b = Tensor(case.b_series[act])
    bc2 = Tensor(case.charging[act] / 2.0)
    tap = case.tap[act]
    shift = case.shift_rad[act]

    v_f = ad.gather(state.v, f)
    v_t = ad.gather(state.v, t)
    th_f = ad.gather(state.theta, f)
    th_t = ad.gather(state.theta, t)
    d_ft = ad.sub(th_f, th_t)

    if convention == "standard":
        inv_tap = Tensor(1.0 / tap)
        vf2 = ad.mul(ad.square(v_f), ad.square(inv_tap))
        vt2 = ad.square(v_t)
        vv = ad.mul(ad.mul(v_f, v_t), inv_tap)
        ang_ft = ad.sub(d_ft, Tensor(shift))
        ang_tf = ad.add(ad.neg(d_ft), Tensor(shift))
    else:
        vf2 = ad.mul(ad.square(v_f), Tensor(tap))
        vt2 = ad.mul(ad.square(v_t), Tensor(tap))
        vv = ad.mul(v_f, v_t)
        ang_ft = d_ft
        ang_tf = ad.neg(d_ft)

    def directed(v2, vv_, ang):
        cos_, sin_ = ad.cos(ang), ad.sin(ang)
        p = ad.sub(ad.mul(g, v2), ad.mul(vv_, ad.add(ad.mul(g, cos_), ad.mul(b, sin_))))
        if convention == "standard":
            shunt_coeff = ad.add(b, bc2)
        else:
            shunt_coeff = ad.add(g, bc2)
        q = ad.sub(
            ad.neg(ad.mul(shunt_coeff, v2)),
            ad.mul(vv_, ad.sub(ad.mul(g, sin_), ad.mul(b, cos_))),
        )
        return p, q

    p_ft, q_ft = directed(vf2, vv, ang_ft)
    p_tf, q_tf = directed(vt2, vv, ang_tf)
    return BranchFlows(p_ft, q_ft, p_tf, q_tf)


def nodal_residuals(
    state: DecisionState, case: NormalizedCase, flows: BranchFlows
) -> tuple[Tensor, Tensor]:
    """Per-bus balance mismatches (dP, dQ).

    dP_i = sum of generation at i - demand - shunt consumption - outgoing
    flows; generation at split nodes is summed back onto the physical bus.
    """
    act = case.active_branches
    f, t = case.br_from[act], case.br_to[act]
    n = case.n_bus
    gen_bus = case.gen_bus[case.active_gens]

    p_inj = ad.scatter_add(state.p_g, gen_bus, n)
    q_inj = ad.scatter_add(state.q_g, gen_bus, n)
    v2 = ad.square(state.v)

    p_out = ad.add(ad.scatter_add(flows.p_ft, f, n), ad.scatter_add(flows.p_tf, t, n))
    q_out = ad.add(ad.scatter_add(flows.q_ft, f, n), ad.scatter_add(flows.q_tf, t, n))

    dp = ad.sub(ad.sub(ad.sub(p_inj, Tensor(case.p_demand)), ad.mul(Tensor(case.g_shunt), v2)), p_out)
    dq = ad.sub(ad.add(ad.sub(q_inj, Tensor(case.q_demand)), ad.mul(Tensor(case.b_shunt), v2)), q_out)
    return dp, dq


def inequality_residuals(
    state: DecisionState, case: NormalizedCase, flows: BranchFlows
) -> tuple[Tensor, Tensor, Tensor, Tensor, np.ndarray]:
    """Signed slack per bound (positive = violated).

    Box bounds produce two entries per quantity (lower-side slack
    ``min - x`` then upper-side ``x - max``).  The thermal slack is on
    squared apparent power, p^2 + q^2 - s_max^2 per direction, only for
    branches with a nonzero rating.
    """
    act = case.active_gens
    g_p = ad.concat(
        [ad.sub(Tensor(case.p_min[act]), state.p_g), ad.sub(state.p_g, Tensor(case.p_max[act]))]
    )
    g_q = ad.concat(
        [ad.sub(Tensor(case.q_min[act]), state.q_g), ad.sub(state.q_g, Tensor(case.q_max[act]))]
    )
    g_v = ad.concat(
        [ad.sub(Tensor(case.v_min), state.v), ad.sub(state.v, Tensor(case.v_max))]
    )

    act_br = case.active_branches
    s_max = case.s_max[act_br]
    rated = np.flatnonzero(s_max > 0)
    if len(rated):
        lim = Tensor(s_max[rated] ** 2)
        s_ft = ad.add(ad.square(ad.gather(flows.p_ft, rated)), ad.square(ad.gather(flows.q_ft, rated)))
        s_tf = ad.add(ad.square(ad.gather(flows.p_tf, rated)), ad.square(ad.gather(flows.q_tf, rated)))
        g_s = ad.concat([ad.sub(s_ft, lim), ad.sub(s_tf, lim)])
    else:
        g_s = Tensor(np.empty(0))
    return g_p, g_q, g_v, g_s, rated


def constraint_residuals(
    state: DecisionState, case: NormalizedCase, convention: str = "standard"
) -> ConstraintResiduals:
    """Evaluate all equality and inequality residuals for one state."""
    flows = branch_flows(state, case, convention)
    dp, dq = nodal_residuals(state, case, flows)
    g_p, g_q, g_v, g_s, rated = inequality_residuals(state, case, flows)
    return ConstraintResiduals(dp, dq, g_p, g_q, g_v, g_s, rated)


def generation_cost(p_g, cost_coeffs: list[list[float]], base_mva: float) -> Tensor:
    """Total generation cost; polynomials are in MW, P_g is per-unit.

    Supports polynomial degree up to 3 (raises DegreeUnsupported beyond).
    """
    p_g = ad.as_tensor(p_g)
    if p_g.size != len(cost_coeffs):
        raise ValueError(f"{p_g.size} outputs vs {len(cost_coeffs)} cost records")
    degrees = {len(c) - 1 for c in cost_coeffs}
    if any(d > 3 for d in degrees):
        raise DegreeUnsupported(f"cost degree {max(degrees)} > 3")
    width = max(len(c) for c in cost_coeffs) if cost_coeffs else 1
    table = np.zeros((len(cost_coeffs), width))
    for i, c in enumerate(cost_coeffs):
        table[i, width - len(c):] = c

    p_mw = ad.mul(p_g, base_mva)
    # Horner evaluation across the padded coefficient table
    total = Tensor(table[:, 0].copy())
    for k in range(1, width):
        total = ad.add(ad.mul(total, p_mw), Tensor(table[:, k].copy()))
    return ad.tsum(total)


def equality_loss_mw(residuals: ConstraintResiduals, base_mva: float) -> float:
    """Total absolute power mismatch, in MW: base * sum(|dP| + |dQ|)."""
    dp = residuals.dp.values
    dq = residuals.dq.values
    return float(base_mva * (np.abs(dp).sum() + np.abs(dq).sum()))


@dataclass
class ViolationReport:
    """Per-family count of violated inequalities and worst violation."""

    counts: dict[str, int]
    max_violation: dict[str, float]
    tolerance: float = VIOLATION_TOL

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {
            "counts": dict(self.counts),
            "max_violation": dict(self.max_violation),
            "tolerance": self.tolerance,
        }


def violation_report(
    residuals: ConstraintResiduals, tolerance: float = VIOLATION_TOL
) -> ViolationReport:
    counts = {}
    worst = {}
    for name, slack in (
        ("G_P", residuals.g_p),
        ("G_Q", residuals.g_q),
        ("G_V", residuals.g_v),
        ("G_S", residuals.g_s),
    ):
        vals = slack.values
        counts[name] = int((vals > tolerance).sum())
        worst[name] = float(vals.max()) if vals.size else 0.0
    return ViolationReport(counts, worst, tolerance)


def flat_start(case: NormalizedCase) -> DecisionState:
    """V = 1, theta = 0, zero generation."""
    n_gen = len(case.active_gens)
    return DecisionState(
        np.zeros(n_gen), np.zeros(n_gen), np.ones(case.n_bus), np.zeros(case.n_bus)
    )
