"""Case-file input and output.

Supports a MATPOWER subset (``mpc.bus``, ``mpc.branch``, ``mpc.gen``,
``mpc.gencost``, ``mpc.baseMVA``), the package's own JSON case schema,
demand time series in CSV, and the closed-loop results CSV.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
import warnings
from dataclasses import MISSING, asdict, dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    AlignmentError,
    CaseReferenceError,
    CaseValidationError,
    MissingFieldError,
    ParseError,
    UnsupportedCostError,
)
from .netmodel import Branch, Bus, Demand, Generator, GridCase, Storage

log = logging.getLogger(__name__)

DEFAULT_FLOW_LIMIT = 300.0

# MATPOWER column indices (0-based)
BUS_I, BUS_TYPE, PD = 0, 1, 2
F_BUS, T_BUS, BR_X, RATE_A, TAP, BR_STATUS = 0, 1, 3, 5, 8, 10
GEN_BUS, GEN_STATUS, PMAX, PMIN = 0, 7, 8, 9
MODEL, NCOST, COST = 0, 3, 4
POLYNOMIAL = 2


@dataclass
class RawMatpowerCase:
    bus: np.ndarray
    branch: np.ndarray
    gen: np.ndarray
    gencost: np.ndarray | None
    baseMVA: float
    source: str | None = None


_ASSIGN = re.compile(r"^\s*mpc\.(\w+)\s*=\s*(.*)$")


def _strip_comment(line: str) -> str:
    quoted = False
    for i, ch in enumerate(line):
        if ch == "'":
            quoted = not quoted
        elif ch == "%" and not quoted:
            return line[:i]
    return line


def _parse_number(tok: str, lineno: int, source: str | None) -> float:
    try:
        return float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", lineno, source) from None


def parse_matpower(text: str, source: str | None = None) -> RawMatpowerCase:
    """Parse the numeric matrices of a MATPOWER case file.

    Unrecognized ``mpc.*`` fields (strings, cell arrays, extra matrices) are
    skipped.  Every error carries the offending line number.
    """
    matrices: dict[str, list[tuple[list[float], int]]] = {}
    scalars: dict[str, float] = {}
    current: str | None = None  # name of the matrix being read
    skip_until: str | None = None  # terminator of an ignored multi-line value

    def add_rows(name: str, chunk: str, lineno: int) -> None:
        for piece in chunk.split(";"):
            toks = piece.replace(",", " ").replace("...", " ").split()
            if toks:
                matrices[name].append(([_parse_number(t, lineno, source) for t in toks], lineno))

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = _strip_comment(raw)
        if current is not None:
            if "]" in line:
                add_rows(current, line[: line.index("]")], lineno)
                current = None
            else:
                add_rows(current, line, lineno)
            continue
        if skip_until is not None:
            if skip_until in line:
                skip_until = None
            continue
        m = _ASSIGN.match(line)
        if not m:
            continue
        name, rhs = m.group(1), m.group(2).strip()
        if rhs.startswith("["):
            body = rhs[1:]
            matrices[name] = []
            if "]" in body:
                add_rows(name, body[: body.index("]")], lineno)
            else:
                current = name
                add_rows(name, body, lineno)
        elif rhs.startswith("{"):
            if "}" not in rhs:
                skip_until = "}"
        elif rhs.startswith("'"):
            continue
        else:
            value = rhs.rstrip(";").strip()
            try:
                scalars[name] = float(value)
            except ValueError:
                log.debug("ignoring mpc.%s on line %d", name, lineno)
    if current is not None:
        raise ParseError(f"unterminated matrix mpc.{current}", None, source)

    def as_matrix(name: str) -> np.ndarray:
        rows = matrices[name]
        if not rows:
            return np.zeros((0, 0))
        width = len(rows[0][0])
        for vals, ln in rows:
            if len(vals) != width:
                raise ParseError(
                    f"ragged row in mpc.{name}: expected {width} entries, got {len(vals)}", ln, source
                )
        return np.array([vals for vals, _ in rows], dtype=float)

    for required in ("bus", "branch", "gen"):
        if required not in matrices:
            raise MissingFieldError(f"missing field mpc.{required}", None, source)
    if "baseMVA" not in scalars:
        raise MissingFieldError("missing field mpc.baseMVA", None, source)
    gencost = as_matrix("gencost") if "gencost" in matrices else None
    gen = as_matrix("gen")
    if gencost is not None and gencost.shape[0] not in (gen.shape[0], 2 * gen.shape[0]):
        raise ParseError(
            f"mpc.gencost has {gencost.shape[0]} rows but mpc.gen has {gen.shape[0]}", None, source
        )
    return RawMatpowerCase(
        bus=as_matrix("bus"),
        branch=as_matrix("branch"),
        gen=gen,
        gencost=gencost,
        baseMVA=scalars["baseMVA"],
        source=source,
    )


def read_matpower(path: str | Path) -> RawMatpowerCase:
    path = Path(path)
    return parse_matpower(path.read_text(), source=str(path))


@dataclass(frozen=True)
class StorageAugmentation:
    storages: tuple[Storage, ...] = ()
    default_flow_limit: float = DEFAULT_FLOW_LIMIT
    delta_hours: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "storages", tuple(self.storages))


def load_augmentation(path: str | Path) -> StorageAugmentation:
    data = json.loads(Path(path).read_text())
    return augmentation_from_dict(data)


def augmentation_from_dict(data: Mapping) -> StorageAugmentation:
    storages = tuple(_record(Storage, rec, f"storages[{k}]") for k, rec in enumerate(data.get("storages", [])))
    return StorageAugmentation(
        storages=storages,
        default_flow_limit=float(data.get("default_flow_limit", DEFAULT_FLOW_LIMIT)),
        delta_hours=float(data.get("delta_hours", 0.25)),
    )


def _poly_cost(row: np.ndarray, k: int) -> tuple[float, float]:
    if int(row[MODEL]) != POLYNOMIAL:
        raise UnsupportedCostError(f"gencost row {k + 1}: only polynomial model 2 is supported")
    n = int(row[NCOST])
    coeffs = row[COST : COST + n]
    if len(coeffs) != n:
        raise UnsupportedCostError(f"gencost row {k + 1}: expected {n} coefficients")
    # coefficients are stored highest order first
    if n > 3 and np.any(coeffs[: n - 3] != 0):
        raise UnsupportedCostError(f"gencost row {k + 1}: polynomial degree {n - 1} > 2 is not supported")
    tail = np.concatenate([np.zeros(max(0, 3 - n)), coeffs[-3:] if n >= 3 else coeffs])
    return float(tail[0]), float(tail[1])


def to_grid_case(
    raw: RawMatpowerCase,
    aug: StorageAugmentation | None = None,
    slack_policy: str | int = "first_gen",
) -> GridCase:
    """Map a parsed MATPOWER case onto a GridCase.

    ``slack_policy`` is ``"first_gen"`` (bus of the first in-service
    generator), ``"ref_bus"`` (the bus of type 3) or an explicit bus id.
    """
    aug = aug or StorageAugmentation()
    buses = tuple(Bus(id=int(r[BUS_I]), pd=float(r[PD])) for r in raw.bus)
    known = {b.id for b in buses}

    branches = []
    for r in raw.branch:
        if r[BR_STATUS] == 0:
            continue
        rate = float(r[RATE_A]) if r[RATE_A] != 0 else aug.default_flow_limit
        tap = float(r[TAP]) if r[TAP] != 0 else 1.0
        branches.append(Branch(int(r[F_BUS]), int(r[T_BUS]), float(r[BR_X]), tap, rate))

    gens = []
    for k, r in enumerate(raw.gen):
        if r[GEN_STATUS] == 0:
            continue
        bus = int(r[GEN_BUS])
        if bus not in known:
            raise CaseReferenceError(f"gen row {k + 1} is on unknown bus {bus}")
        c2, c1 = _poly_cost(raw.gencost[k], k) if raw.gencost is not None else (0.0, 0.0)
        gens.append(Generator(bus, float(r[PMIN]), float(r[PMAX]), c2, c1))
    if not gens:
        raise CaseValidationError("generators", "no generator in service")

    if slack_policy == "first_gen":
        slack = gens[0].bus
    elif slack_policy == "ref_bus":
        refs = [int(r[BUS_I]) for r in raw.bus if int(r[BUS_TYPE]) == 3]
        if not refs:
            raise CaseValidationError("bus", "no reference bus (type 3) in case")
        slack = refs[0]
    else:
        slack = int(slack_policy)
    first = next((i for i, g in enumerate(gens) if g.bus == slack), None)
    if first is None:
        raise CaseValidationError("slack_bus", f"no in-service generator at slack bus {slack}")
    gens.insert(0, gens.pop(first))

    demands = []
    for b in buses:
        if b.pd > 0:
            demands.append(Demand(b.id, len(demands)))
        elif b.pd < 0:
            log.warning("bus %d has negative nominal demand %.3f MW; not modelled as a demand", b.id, b.pd)

    for k, st in enumerate(aug.storages):
        if st.bus not in known:
            raise CaseReferenceError(f"augmentation storage {k} references unknown bus {st.bus}")

    return GridCase(
        buses=buses,
        branches=tuple(branches),
        generators=tuple(gens),
        storages=aug.storages,
        demands=tuple(demands),
        slack_bus=slack,
        delta_hours=aug.delta_hours,
    )


# ---------------------------------------------------------------------------
# native JSON schema

_CASE_KEYS = {
    "buses": Bus,
    "branches": Branch,
    "generators": Generator,
    "storages": Storage,
    "demands": Demand,
}


def case_to_dict(case: GridCase) -> dict:
    out = {key: [asdict(rec) for rec in getattr(case, key)] for key in _CASE_KEYS}
    out["slack_bus"] = case.slack_bus
    out["delta_hours"] = case.delta_hours
    return out


def _record(cls, rec, where: str):
    if not isinstance(rec, Mapping):
        raise CaseValidationError(where, "expected an object")
    kwargs = {}
    for f in fields(cls):
        if f.name in rec:
            val = rec[f.name]
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                raise CaseValidationError(f"{where}.{f.name}", f"expected a number, got {val!r}")
            kwargs[f.name] = int(val) if f.type in ("int", int) else float(val)
        elif f.default is MISSING and f.default_factory is MISSING:
            raise CaseValidationError(f"{where}.{f.name}", "missing required field")
    extra = set(rec) - {f.name for f in fields(cls)}
    if extra:
        warnings.warn(f"{where}: ignoring unknown fields {sorted(extra)}", stacklevel=3)
    return cls(**kwargs)


def case_from_dict(data: Mapping) -> GridCase:
    if not isinstance(data, Mapping):
        raise CaseValidationError("<root>", "expected a JSON object")
    for key in ("buses", "branches", "generators", "slack_bus"):
        if key not in data:
            raise CaseValidationError(key, "missing required key")
    extra = set(data) - set(_CASE_KEYS) - {"slack_bus", "delta_hours"}
    if extra:
        warnings.warn(f"case: ignoring unknown keys {sorted(extra)}", stacklevel=2)
    parts = {}
    for key, cls in _CASE_KEYS.items():
        items = data.get(key, [])
        if not isinstance(items, list):
            raise CaseValidationError(key, "expected a list")
        parts[key] = tuple(_record(cls, rec, f"{key}[{k}]") for k, rec in enumerate(items))
    slack = data["slack_bus"]
    if isinstance(slack, bool) or not isinstance(slack, int):
        raise CaseValidationError("slack_bus", "expected an integer bus id")
    return GridCase(slack_bus=slack, delta_hours=float(data.get("delta_hours", 0.25)), **parts)


def save_case_json(case: GridCase, path: str | Path) -> None:
    Path(path).write_text(json.dumps(case_to_dict(case), indent=1) + "\n")


def load_case_json(path: str | Path) -> GridCase:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, str(path)) from exc
    return case_from_dict(data)


BUILTIN_CASES = ("case3", "case6", "case14", "case118")


def load_builtin_case(name: str) -> GridCase:
    """Bundled fixtures: ``case3`` and ``case6`` (JSON), ``case14`` and
    ``case118`` (stock MATPOWER files plus a storage augmentation)."""
    data = resources.files("ddopf") / "data"
    if name in ("case3", "case6"):
        return case_from_dict(json.loads((data / f"{name}.json").read_text()))
    if name in ("case14", "case118"):
        raw = parse_matpower((data / f"{name}.m").read_text(), source=f"{name}.m")
        aug = augmentation_from_dict(json.loads((data / f"{name}_storage.json").read_text()))
        return to_grid_case(raw, aug)
    raise KeyError(f"unknown builtin case {name!r}; choose from {BUILTIN_CASES}")


def load_case(ref: str | Path) -> GridCase:
    """Resolve a builtin name, a ``.json`` case, or a ``.m`` file."""
    ref = str(ref)
    if ref in BUILTIN_CASES:
        return load_builtin_case(ref)
    if ref.endswith(".m"):
        return to_grid_case(read_matpower(ref))
    return load_case_json(ref)


# ---------------------------------------------------------------------------
# time series


@dataclass
class DemandSeries:
    values: np.ndarray  # (steps, |D|), MW
    delta_hours: float = 0.25

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=float))

    def __len__(self) -> int:
        return self.values.shape[0]

    def window(self, start: int, length: int) -> np.ndarray:
        if start + length > len(self):
            raise AlignmentError(f"demand series has {len(self)} steps, need {start + length}")
        return self.values[start : start + length]


def save_demand_csv(series: DemandSeries, case: GridCase, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([f"bus_{b}" for b in case.demand_buses])
        for row in series.values:
            wr.writerow([repr(float(v)) for v in row])


def load_demand_csv(path: str | Path, case: GridCase, allow_negative: bool = False) -> DemandSeries:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise AlignmentError(f"{path}: empty demand file")
    header = [h.strip() for h in rows[0]]
    cols = {}
    for j, h in enumerate(header):
        m = re.fullmatch(r"bus_(\d+)", h)
        if not m:
            raise AlignmentError(f"{path}: bad column name {h!r}, expected bus_<id>")
        cols[int(m.group(1))] = j
    wanted = case.demand_buses
    unknown = sorted(set(cols) - set(wanted))
    if unknown:
        raise AlignmentError(f"{path}: columns for buses without a demand in the case: {unknown}")
    missing = [b for b in wanted if b not in cols]
    if missing:
        raise AlignmentError(f"{path}: no column for demand buses {missing}")
    body = rows[1:]
    values = np.empty((len(body), len(wanted)))
    for i, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise AlignmentError(f"{path}:{i}: expected {len(header)} fields, got {len(row)}")
        values[i - 2] = [float(row[cols[b]]) for b in wanted]
    if not allow_negative and np.any(values < 0):
        raise AlignmentError(f"{path}: negative demand values")
    return DemandSeries(values, case.delta_hours)


RESULT_FIELDS = ("step", "controller", "stage_cost", "max_abs_flow", "solve_seconds")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def save_results_csv(rows: Iterable[Mapping], path: str | Path) -> int:
    """Write result rows; each row has the RESULT_FIELDS keys plus ``e`` (charges)."""
    rows = list(rows)
    k = len(rows[0]["e"]) if rows else 0
    n = 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(list(RESULT_FIELDS) + [f"e_{i + 1}" for i in range(k)])
        for row in rows:
            wr.writerow([_fmt(row[f]) for f in RESULT_FIELDS] + [_fmt(float(v)) for v in row["e"]])
            n += 1
    return n


def load_results_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
