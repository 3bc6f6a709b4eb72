import copy

import mpmath
import numpy as np
import pytest

from pinco import autodiff as ad
from pinco.cases import parse_case
from pinco.grid import to_per_unit
from pinco.physics import (
    DecisionState,
    DegreeUnsupported,
    branch_flows,
    constraint_residuals,
    equality_loss_mw,
    flat_start,
    generation_cost,
    nodal_residuals,
    violation_report,
)
from tests.conftest import FIXTURE_NAMES, random_state
from tests.test_cases import MINI_CASE

TWO_BUS = """\
function mpc = twobus
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t40\t0\t100\t-100\t1\t100\t1\t200\t0;
];
mpc.branch = [
\t1\t2\t0\t0.1\t0\t0\t0\t0\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.1\t5\t0;
];
"""


def zeroed_taps(ncase):
    """Copy of a case with taps at 1, shifts at 0, and no line charging."""
    out = copy.copy(ncase)
    out.tap = np.ones_like(ncase.tap)
    out.shift_rad = np.zeros_like(ncase.shift_rad)
    out.charging = np.zeros_like(ncase.charging)
    return out


def lossless(ncase):
    out = copy.copy(ncase)
    out.g_series = np.zeros_like(ncase.g_series)
    return out


class TestBranchFlows:
    def test_flat_start_zero_flows_on_every_fixture(self, ncases):
        """With taps 1 / no shift / no charging, flat start carries no flow."""
        for name, ncase in ncases.items():
            f = branch_flows(flat_start(ncase), zeroed_taps(ncase))
            for arr in (f.p_ft, f.q_ft, f.p_tf, f.q_tf):
                assert np.abs(arr.values).max() <= 1e-12, name

    def test_two_bus_against_scalar_oracle(self):
        """High-precision scalar evaluation of the from-side flow."""
        ncase = to_per_unit(parse_case(TWO_BUS))
        v1, v2, th = 1.0, 0.95, 0.1
        state = DecisionState([0.5], [0.1], [v1, v2], [0.0, -th])
        f = branch_flows(state, ncase)

        with mpmath.workdps(50):
            b = mpmath.mpf("-10")  # 1/j0.1
            p12 = -v1 * v2 * b * mpmath.sin(th)
            q12 = -b * v1 * v1 - v1 * v2 * (-b * mpmath.cos(th))
        assert abs(f.p_ft.values[0] - float(p12)) < 1e-14
        assert abs(f.q_ft.values[0] - float(q12)) < 1e-14

    def test_full_pi_model_scalar_oracle(self):
        """Random single branch with tap, shift, charging vs mpmath complex model."""
        rng = np.random.default_rng(5)
        r, x, bc, tap, shift = 0.02, 0.12, 0.2, 0.97, 0.05
        case = parse_case(TWO_BUS)
        case.branches[0].resistance = r
        case.branches[0].reactance = x
        case.branches[0].charging = bc
        case.branches[0].tap_ratio = tap
        case.branches[0].phase_shift_deg = np.degrees(shift)
        ncase = to_per_unit(case)

        v1, v2, t1, t2 = 1.03, 0.97, 0.07, -0.12
        state = DecisionState([0.5], [0.1], [v1, v2], [t1, t2])
        f = branch_flows(state, ncase)

        with mpmath.workdps(60):
            ys = 1 / mpmath.mpc(r, x)
            ysh = mpmath.mpc(0, bc / 2)
            tapc = tap * mpmath.exp(mpmath.mpc(0, shift))
            vf = v1 * mpmath.exp(mpmath.mpc(0, t1))
            vt = v2 * mpmath.exp(mpmath.mpc(0, t2))
            yff = (ys + ysh) / (tapc * mpmath.conj(tapc))
            yft = -ys / mpmath.conj(tapc)
            ytf = -ys / tapc
            ytt = ys + ysh
            s_f = vf * mpmath.conj(yff * vf + yft * vt)
            s_t = vt * mpmath.conj(ytf * vf + ytt * vt)
        assert abs(f.p_ft.values[0] - float(s_f.real)) < 1e-12
        assert abs(f.q_ft.values[0] - float(s_f.imag)) < 1e-12
        assert abs(f.p_tf.values[0] - float(s_t.real)) < 1e-12
        assert abs(f.q_tf.values[0] - float(s_t.imag)) < 1e-12

    def test_lossless_antisymmetry_random_states(self, ncases, rng):
        """g = 0 implies p_ft = -p_tf on every branch."""
        for name in FIXTURE_NAMES:
            ncase = lossless(zeroed_taps(ncases[name]))
            for _ in range(5):
                state = random_state(ncase, rng)
                f = branch_flows(state, ncase)
                assert np.abs(f.p_ft.values + f.p_tf.values).max() <= 1e-12, name

    def test_conventions_agree_when_tap_one_and_g_equals_b(self):
        case = parse_case(TWO_BUS)
        # r == -x gives g == b, making the reactive shunt coefficients of the
        # two conventions coincide; with tap 1 the rest is already identical
        case.branches[0].resistance = 0.1
        case.branches[0].reactance = -0.1
        case.branches[0].charging = 0.3
        ncase = to_per_unit(case)
        state = DecisionState([0.5], [0.1], [1.02, 0.97], [0.1, -0.05])
        fs = branch_flows(state, ncase, "standard")
        fp = branch_flows(state, ncase, "paper-literal")
        assert np.allclose(fs.p_ft.values, fp.p_ft.values, atol=1e-14)
        assert np.allclose(fs.q_ft.values, fp.q_ft.values, atol=1e-14)
        assert np.allclose(fs.q_tf.values, fp.q_tf.values, atol=1e-14)

    def test_unknown_convention(self, ieee9):
        with pytest.raises(ValueError, match="convention"):
            branch_flows(flat_start(ieee9), ieee9, "bogus")


class TestNodalResiduals:
    def test_isolated_bus_island_balance(self):
        ncase = to_per_unit(parse_case(ONE_BUS := ONE_BUS_CASE))
        state = DecisionState([0.5], [0.1], [1.0], [0.0])
        dp, dq = nodal_residuals(state, ncase, branch_flows(state, ncase))
        assert abs(dp.values[0]) < 1e-15
        assert abs(dq.values[0]) < 1e-15

    def test_flat_zero_everything(self, ncases):
        for name, ncase in ncases.items():
            nc = zeroed_taps(ncase)
            nc.p_demand = np.zeros_like(nc.p_demand)
            nc.q_demand = np.zeros_like(nc.q_demand)
            nc.g_shunt = np.zeros_like(nc.g_shunt)
            nc.b_shunt = np.zeros_like(nc.b_shunt)
            state = flat_start(nc)
            dp, dq = nodal_residuals(state, nc, branch_flows(state, nc))
            assert np.abs(dp.values).max() <= 1e-12, name
            assert np.abs(dq.values).max() <= 1e-12, name

    def test_total_balance_identity_random_states(self, ncases, rng):
        """Sum of nodal mismatches equals the global balance rearrangement."""
        for name in FIXTURE_NAMES:
            ncase = ncases[name]
            for _ in range(3):
                state = random_state(ncase, rng)
                flows = branch_flows(state, ncase)
                dp, dq = nodal_residuals(state, ncase, flows)
                v2 = state.v.values**2
                lhs = dp.values.sum()
                rhs = (
                    state.p_g.values.sum()
                    - ncase.p_demand.sum()
                    - (ncase.g_shunt * v2).sum()
                    - (flows.p_ft.values + flows.p_tf.values).sum()
                )
                assert abs(lhs - rhs) < 1e-9, name


class TestInequalities:
    def test_boundary_value_has_zero_slack(self, ieee9):
        state = flat_start(ieee9)
        state.v.values[0] = ieee9.v_max[0]
        res = constraint_residuals(state, ieee9)
        assert np.isclose(res.g_v.values.max(), 0.0)
        assert (res.g_v.values <= 1e-15).all()

    def test_p_above_max_by_0p1(self, ieee9):
        state = flat_start(ieee9)
        state.p_g.values[:] = ieee9.p_max[ieee9.active_gens]
        state.p_g.values[0] += 0.1
        res = constraint_residuals(state, ieee9)
        upper = res.g_p.values[len(ieee9.active_gens) :]
        assert np.isclose(upper[0], 0.1)

    def test_thermal_slack_squared_form(self):
        ncase = to_per_unit(parse_case(MINI_CASE))
        state = DecisionState([0.4], [0.0], [1.0, 1.0], [0.0, -0.3])
        res = constraint_residuals(state, ncase)
        f = branch_flows(state, ncase)
        expected = f.p_ft.values[0] ** 2 + f.q_ft.values[0] ** 2 - 2.5**2
        assert np.isclose(res.g_s.values[0], expected)

    def test_unrated_branches_excluded(self, ncases):
        res = constraint_residuals(flat_start(ncases["ieee118"]), ncases["ieee118"])
        assert res.g_s.values.size == 0  # that fixture carries no ratings


class TestCost:
    def test_zero_output_zero_constant(self):
        assert generation_cost(np.zeros(2), [[0.1, 5, 0], [0.2, 1, 0]], 100).item() == 0.0

    def test_single_quadratic(self):
        cost = generation_cost([1.0], [[0.1, 5, 10]], 100)
        assert np.isclose(cost.item(), 0.1 * 100**2 + 5 * 100 + 10)

    def test_cubic_supported_quartic_rejected(self):
        assert np.isclose(generation_cost([0.5], [[2, 0, 0, 0]], 100).item(), 2 * 50**3)
        with pytest.raises(DegreeUnsupported):
            generation_cost([0.5], [[1, 2, 0, 0, 0]], 100)

    def test_gradient_through_cost(self, rng):
        p = ad.Tensor(rng.uniform(0.2, 1.0, 3), requires_grad=True)
        coeffs = [[0.11, 5, 150], [0.085, 1.2, 600], [0.1225, 1, 335]]
        err = ad.check_grad(lambda: generation_cost(p, coeffs, 100.0), [p])
        assert err < 1e-6


class TestMetrics:
    def test_zero_residuals_zero_mw(self, ieee9):
        nc = zeroed_taps(ieee9)
        nc.p_demand = np.zeros_like(nc.p_demand)
        nc.q_demand = np.zeros_like(nc.q_demand)
        nc.g_shunt = np.zeros_like(nc.g_shunt)
        nc.b_shunt = np.zeros_like(nc.b_shunt)
        res = constraint_residuals(flat_start(nc), nc)
        assert equality_loss_mw(res, nc.base_mva) == 0.0

    def test_one_bus_scaling(self):
        ncase = to_per_unit(parse_case(ONE_BUS_CASE))
        state = DecisionState([0.51], [0.1], [1.0], [0.0])  # 0.01 pu excess
        res = constraint_residuals(state, ncase)
        assert np.isclose(equality_loss_mw(res, 100), 1.0)

    def test_nonnegative_and_zero_iff_balanced(self, ncases, rng):
        for name in FIXTURE_NAMES:
            ncase = ncases[name]
            for _ in range(3):
                res = constraint_residuals(random_state(ncase, rng), ncase)
                mw = equality_loss_mw(res, ncase.base_mva)
                assert mw >= 0
                balanced = (
                    np.abs(res.dp.values).max() == 0 and np.abs(res.dq.values).max() == 0
                )
                assert (mw == 0) == balanced

    def test_violation_report_families(self, ieee9):
        state = flat_start(ieee9)
        state.p_g.values[:] = (ieee9.p_min + ieee9.p_max)[ieee9.active_gens] / 2
        state.q_g.values[:] = 0.0
        rep = violation_report(constraint_residuals(state, ieee9))
        assert rep.counts["G_P"] == 0 and rep.counts["G_Q"] == 0 and rep.counts["G_V"] == 0
        assert rep.total == rep.counts["G_S"]

    def test_single_thermal_overload_counted(self):
        ncase = to_per_unit(parse_case(MINI_CASE))
        state = DecisionState([0.4], [0.0], [1.1, 0.9], [0.0, -1.2])
        rep = violation_report(constraint_residuals(state, ncase))
        assert rep.counts["G_S"] >= 1
        assert rep.max_violation["G_S"] > 0


ONE_BUS_CASE = """\
function mpc = onebus
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t50\t10\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t50\t0\t100\t-100\t1\t100\t1\t200\t0;
];
mpc.branch = [
];
mpc.gencost = [
\t2\t0\t0\t3\t0.1\t5\t0;
];
"""
