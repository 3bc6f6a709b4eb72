import pytest

from pinco.cases import (
    DanglingReference,
    MalformedRow,
    MissingTable,
    case_from_json,
    case_hash,
    case_to_json,
    parse_case,
    validate_case,
)

MINI_CASE = """\
function mpc = mini
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
\t1\t3\t0\t0\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
\t2\t1\t50\t10\t0\t0\t1\t1\t0\t345\t1\t1.1\t0.9;
];
mpc.gen = [
\t1\t40\t0\t30\t-30\t1\t100\t1\t100\t0;
];
mpc.branch = [
\t1\t2\t0.01\t0.1\t0.02\t250\t250\t250\t0\t0\t1\t-360\t360;
];
mpc.gencost = [
\t2\t0\t0\t3\t0.1\t5\t0;
];
"""


class TestParsing:
    def test_mini_case(self):
        case = parse_case(MINI_CASE)
        assert case.name == "mini"
        assert case.base_mva == 100
        assert case.n_buses == 2
        assert case.n_generators == 1
        assert case.branches[0].tap_ratio == 1.0  # 0 in the file normalizes to 1
        assert not case.branches[0].is_transformer
        assert validate_case(case) == []

    def test_ieee9_counts(self, cases):
        c = cases["ieee9"]
        assert c.n_buses == 9
        assert c.n_generators == 3
        assert sum(1 for b in c.buses if b.p_demand_mw > 0) == 3

    def test_ieee30_counts(self, cases):
        c = cases["ieee30"]
        assert c.n_generators == 6
        assert c.n_branches == 41
        assert sum(b.is_transformer for b in c.branches) == 4

    def test_dangling_generator_reference(self):
        bad = MINI_CASE.replace("mpc.gen = [\n\t1\t", "mpc.gen = [\n\t99\t")
        with pytest.raises(DanglingReference, match="99"):
            parse_case(bad)

    def test_missing_table(self):
        bad = MINI_CASE.replace("mpc.gencost", "mpc.not_gencost")
        with pytest.warns(UserWarning):
            with pytest.raises(MissingTable, match="gencost"):
                parse_case(bad)

    def test_malformed_row_reports_line(self):
        bad = MINI_CASE.replace("\t0.01\t0.1\t", "\tbogus\t0.1\t")
        with pytest.raises(MalformedRow, match=r"line \d+.*bogus"):
            parse_case(bad)

    def test_piecewise_cost_rejected(self):
        bad = MINI_CASE.replace("2\t0\t0\t3\t0.1\t5\t0", "1\t0\t0\t2\t0\t0\t100\t50")
        with pytest.raises(MalformedRow, match="model 1"):
            parse_case(bad)

    def test_unknown_assignment_warns(self):
        with pytest.warns(UserWarning, match="bus_name"):
            parse_case(MINI_CASE + "\nmpc.bus_name = [\n1;\n];\n")

    def test_line_ending_invariance(self):
        a = parse_case(MINI_CASE)
        b = parse_case(MINI_CASE.replace("\n", "\r\n"))
        assert case_to_json(a) == case_to_json(b)


class TestValidation:
    def test_fixtures_have_zero_issues(self, cases):
        for name, case in cases.items():
            assert validate_case(case) == [], name

    def test_ieee24_has_32_generators(self, cases):
        c = cases["ieee24"]
        assert validate_case(c) == []
        assert c.n_generators == 32

    def test_inverted_voltage_bounds(self):
        case = parse_case(MINI_CASE)
        case.buses[0].v_min, case.buses[0].v_max = 1.1, 0.9
        issues = validate_case(case)
        assert len(issues) == 1
        assert "bus 1" in str(issues[0])

    def test_negative_base_mva(self):
        case = parse_case(MINI_CASE)
        case.base_mva = -100
        issues = validate_case(case)
        assert len(issues) == 1
        assert "base MVA" in str(issues[0])


class TestSerialization:
    def test_roundtrip_identity(self, cases):
        for name, case in cases.items():
            again = case_from_json(case_to_json(case))
            assert again == case, name

    def test_hash_stability(self, cases):
        c = cases["ieee9"]
        assert case_hash(c) == case_hash(case_from_json(case_to_json(c)))
