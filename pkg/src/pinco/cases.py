"""Parsing and validation of power-grid case files in the MATPOWER text format.

Only the matrix-literal subset of the format is understood: the scalar
``baseMVA`` assignment plus the ``bus``, ``gen``, ``branch`` and ``gencost``
tables.  That covers the bundled IEEE benchmark files.  Other assignments
(apart from the standard ``version`` string) are skipped with a warning.

Parsed records keep the file's units: demands and shunts in MW/MVAr,
impedances in per-unit, angles in degrees.  Per-unit conversion happens in
:mod:`pinco.grid`.
"""

from __future__ import annotations

import hashlib
import json
import re
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path


class CaseError(ValueError):
    """Base class for case-file problems."""


class MissingTable(CaseError):
    """A required table (bus/gen/branch/gencost or baseMVA) is absent."""


class MalformedRow(CaseError):
    """A table row has the wrong column count or a non-numeric token."""


class DanglingReference(CaseError):
    """A generator or branch refers to a bus id not present in the bus table."""


@dataclass
class BusRecord:
    bus_id: int
    bus_type: int  # 1 load, 2 generator, 3 reference, 4 isolated
    p_demand_mw: float
    q_demand_mvar: float
    g_shunt_mw: float  # MW consumed at V = 1 pu
    b_shunt_mvar: float  # MVAr injected at V = 1 pu
    v_min: float
    v_max: float


@dataclass
class GenRecord:
    bus_id: int
    p_min_mw: float
    p_max_mw: float
    q_min_mvar: float
    q_max_mvar: float
    in_service: bool


@dataclass
class BranchRecord:
    from_bus: int
    to_bus: int
    resistance: float  # pu
    reactance: float  # pu
    charging: float  # total line charging susceptance, pu
    tap_ratio: float  # 1.0 for plain lines (0 in the file is normalized here)
    phase_shift_deg: float
    rating_mva: float  # 0 means unconstrained
    in_service: bool
    is_transformer: bool  # off-nominal tap or phase shift in the raw file


@dataclass
class CostRecord:
    coefficients: list[float]  # polynomial in MW, highest order first


@dataclass
class GridCase:
    name: str
    base_mva: float
    buses: list[BusRecord] = field(default_factory=list)
    generators: list[GenRecord] = field(default_factory=list)
    branches: list[BranchRecord] = field(default_factory=list)
    costs: list[CostRecord] = field(default_factory=list)

    @property
    def n_buses(self) -> int:
        return len(self.buses)

    @property
    def n_generators(self) -> int:
        return len(self.generators)

    @property
    def n_branches(self) -> int:
        return len(self.branches)

    def bus_ids(self) -> set[int]:
        return {b.bus_id for b in self.buses}

    def reference_bus(self) -> int | None:
        """File bus id of the designated reference (slack) bus, if any."""
        for b in self.buses:
            if b.bus_type == 3:
                return b.bus_id
        return None


@dataclass
class ValidationIssue:
    record: str  # e.g. "bus 5", "generator 3", "branch 7"
    message: str

    def __str__(self) -> str:
        return f"{self.record}: {self.message}"


_TABLE_RE = re.compile(r"mpc\.(\w+)\s*=\s*\[(.*?)\]\s*;", re.DOTALL)
_SCALAR_RE = re.compile(r"mpc\.(\w+)\s*=\s*([^\[\s;][^;]*);")
_NAME_RE = re.compile(r"function\s+mpc\s*=\s*(\w+)")

_KNOWN_TABLES = {"bus", "gen", "branch", "gencost"}
_IGNORED_KEYS = {"version"}

_BUS_COLS = 13
_GEN_COLS = 10  # at least; trailing columns beyond 10 are ignored
_BRANCH_COLS = 11  # at least (angmin/angmax optional)
_GENCOST_COLS = 4  # at least


def _split_rows(block: str, line_offset: int) -> list[tuple[int, list[str]]]:
    rows = []
    for i, line in enumerate(block.split("\n")):
        line = re.sub(r"%.*$", "", line).strip().rstrip(";").strip()
        if not line:
            continue
        rows.append((line_offset + i, line.split()))
    return rows


def _floats(tokens: list[str], lineno: int, table: str) -> list[float]:
    out = []
    for tok in tokens:
        try:
            out.append(float(tok))
        except ValueError:
            raise MalformedRow(
                f"{table} table, line {lineno}: non-numeric token {tok!r}"
            ) from None
    return out


def parse_case(text: str, name: str = "") -> GridCase:
    """Parse MATPOWER-style case text into a :class:`GridCase`.

    All records are kept in file order; out-of-service generators and
    branches are retained with ``in_service=False``.  Raises
    :class:`MissingTable`, :class:`MalformedRow` or
    :class:`DanglingReference` on bad input.
    """
    text = text.replace("\r\n", "\n").replace("\r", "\n")

    m = _NAME_RE.search(text)
    case_name = name or (m.group(1) if m else "case")

    tables: dict[str, list[tuple[int, list[str]]]] = {}
    for m in _TABLE_RE.finditer(text):
        key, block = m.group(1), m.group(2)
        line_offset = text[: m.start(2)].count("\n") + 1
        if key in _KNOWN_TABLES:
            tables[key] = _split_rows(block, line_offset)
        else:
            warnings.warn(f"ignoring unrecognized table 'mpc.{key}'", stacklevel=2)

    base_mva = None
    for m in _SCALAR_RE.finditer(text):
        key, value = m.group(1), m.group(2).strip()
        if key == "baseMVA":
            lineno = text[: m.start()].count("\n") + 1
            base_mva = _floats([value], lineno, "baseMVA")[0]
        elif key not in _IGNORED_KEYS:
            warnings.warn(f"ignoring unrecognized assignment 'mpc.{key}'", stacklevel=2)

    if base_mva is None:
        raise MissingTable("baseMVA assignment not found")
    for required in ("bus", "gen", "branch", "gencost"):
        if required not in tables:
            raise MissingTable(f"required table 'mpc.{required}' not found")

    case = GridCase(name=case_name, base_mva=base_mva)

    for lineno, tokens in tables["bus"]:
        if len(tokens) < _BUS_COLS:
            raise MalformedRow(
                f"bus table, line {lineno}: expected {_BUS_COLS} columns, got {len(tokens)}"
            )
        v = _floats(tokens[:_BUS_COLS], lineno, "bus")
        case.buses.append(
            BusRecord(
                bus_id=int(v[0]),
                bus_type=int(v[1]),
                p_demand_mw=v[2],
                q_demand_mvar=v[3],
                g_shunt_mw=v[4],
                b_shunt_mvar=v[5],
                v_min=v[12],
                v_max=v[11],
            )
        )

    known_ids = case.bus_ids()

    for lineno, tokens in tables["gen"]:
        if len(tokens) < _GEN_COLS:
            raise MalformedRow(
                f"gen table, line {lineno}: expected at least {_GEN_COLS} columns, got {len(tokens)}"
            )
        v = _floats(tokens, lineno, "gen")
        bus_id = int(v[0])
        if bus_id not in known_ids:
            raise DanglingReference(f"gen table, line {lineno}: unknown bus {bus_id}")
        case.generators.append(
            GenRecord(
                bus_id=bus_id,
                p_min_mw=v[9],
                p_max_mw=v[8],
                q_min_mvar=v[4],
                q_max_mvar=v[3],
                in_service=v[7] > 0,
            )
        )

    for lineno, tokens in tables["branch"]:
        if len(tokens) < _BRANCH_COLS:
            raise MalformedRow(
                f"branch table, line {lineno}: expected at least {_BRANCH_COLS} columns, got {len(tokens)}"
            )
        v = _floats(tokens, lineno, "branch")
        f_bus, t_bus = int(v[0]), int(v[1])
        for b in (f_bus, t_bus):
            if b not in known_ids:
                raise DanglingReference(f"branch table, line {lineno}: unknown bus {b}")
        raw_tap, shift = v[8], v[9]
        case.branches.append(
            BranchRecord(
                from_bus=f_bus,
                to_bus=t_bus,
                resistance=v[2],
                reactance=v[3],
                charging=v[4],
                tap_ratio=raw_tap if raw_tap != 0.0 else 1.0,
                phase_shift_deg=shift,
                rating_mva=v[5],
                in_service=v[10] > 0,
                is_transformer=raw_tap != 0.0 or shift != 0.0,
            )
        )

    for lineno, tokens in tables["gencost"]:
        if len(tokens) < _GENCOST_COLS:
            raise MalformedRow(
                f"gencost table, line {lineno}: expected at least {_GENCOST_COLS} columns, got {len(tokens)}"
            )
        v = _floats(tokens, lineno, "gencost")
        model, n_cost = int(v[0]), int(v[3])
        if model != 2:
            raise MalformedRow(
                f"gencost table, line {lineno}: only polynomial cost rows (model 2) "
                f"are supported, got model {model}"
            )
        coeffs = v[4 : 4 + n_cost]
        if len(coeffs) != n_cost:
            raise MalformedRow(
                f"gencost table, line {lineno}: expected {n_cost} coefficients, got {len(coeffs)}"
            )
        case.costs.append(CostRecord(coefficients=coeffs))

    return case


def parse_case_file(path: str | Path) -> GridCase:
    path = Path(path)
    return parse_case(path.read_text(encoding="utf-8"), name=path.stem)


def validate_case(case: GridCase) -> list[ValidationIssue]:
    """Check structural invariants; an empty list means the case is sound."""
    issues: list[ValidationIssue] = []
    if case.base_mva <= 0:
        issues.append(ValidationIssue("case", f"base MVA must be positive, got {case.base_mva}"))

    seen: set[int] = set()
    for b in case.buses:
        if b.bus_id in seen:
            issues.append(ValidationIssue(f"bus {b.bus_id}", "duplicate bus id"))
        seen.add(b.bus_id)
        if b.v_min > b.v_max:
            issues.append(
                ValidationIssue(
                    f"bus {b.bus_id}", f"V_min {b.v_min} exceeds V_max {b.v_max}"
                )
            )

    for i, g in enumerate(case.generators):
        if g.bus_id not in seen:
            issues.append(ValidationIssue(f"generator {i}", f"unknown bus {g.bus_id}"))
        if g.p_min_mw > g.p_max_mw:
            issues.append(
                ValidationIssue(f"generator {i}", f"P_min {g.p_min_mw} exceeds P_max {g.p_max_mw}")
            )
        if g.q_min_mvar > g.q_max_mvar:
            issues.append(
                ValidationIssue(f"generator {i}", f"Q_min {g.q_min_mvar} exceeds Q_max {g.q_max_mvar}")
            )

    for i, br in enumerate(case.branches):
        for b in (br.from_bus, br.to_bus):
            if b not in seen:
                issues.append(ValidationIssue(f"branch {i}", f"unknown bus {b}"))

    if len(case.costs) != len(case.generators):
        issues.append(
            ValidationIssue(
                "case",
                f"{len(case.costs)} cost records for {len(case.generators)} generators",
            )
        )
    return issues


# ---------------------------------------------------------------------------
# canonical JSON serialization
#
# Schema (stable key order, one object):
#   {"name": str, "base_mva": float,
#    "buses":      [{bus record fields}...],
#    "generators": [{gen record fields}...],
#    "branches":   [{branch record fields}...],
#    "costs":      [{"coefficients": [...]}, ...]}


def case_to_json(case: GridCase) -> str:
    payload = {
        "name": case.name,
        "base_mva": case.base_mva,
        "buses": [asdict(b) for b in case.buses],
        "generators": [asdict(g) for g in case.generators],
        "branches": [asdict(b) for b in case.branches],
        "costs": [asdict(c) for c in case.costs],
    }
    return json.dumps(payload, indent=1)


def case_from_json(text: str) -> GridCase:
    raw = json.loads(text)
    return GridCase(
        name=raw["name"],
        base_mva=raw["base_mva"],
        buses=[BusRecord(**b) for b in raw["buses"]],
        generators=[GenRecord(**g) for g in raw["generators"]],
        branches=[BranchRecord(**b) for b in raw["branches"]],
        costs=[CostRecord(**c) for c in raw["costs"]],
    )


def case_hash(case: GridCase) -> str:
    """SHA-256 of the canonical JSON serialization."""
    return hashlib.sha256(case_to_json(case).encode("utf-8")).hexdigest()


_DATA_DIR = Path(__file__).parent / "data"

FIXTURES = {
    "ieee9": _DATA_DIR / "ieee9.m",
    "ieee24": _DATA_DIR / "ieee24.m",
    "ieee30": _DATA_DIR / "ieee30.m",
    "ieee118": _DATA_DIR / "ieee118.m",
}


def load_fixture(name: str) -> GridCase:
    """Load a bundled benchmark case by short name (ieee9/ieee24/ieee30/ieee118)."""
    try:
        path = FIXTURES[name]
    except KeyError:
        raise KeyError(f"unknown fixture {name!r}; choose from {sorted(FIXTURES)}") from None
    return parse_case_file(path)
