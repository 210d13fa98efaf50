"""Static DC network model.

Powers are kept in MW throughout.  Branch susceptances are ``1 / (x * tau)``
with ``x`` in p.u., so voltage angles come out in MW per p.u. susceptance;
the PTDF is unitless and unaffected by that choice.

Input ordering used everywhere in the package: ``u`` stacks the non-slack
generators (``case.generators[1:]``) followed by all storages.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components as _cc

from .errors import (
    CaseReferenceError,
    CaseValidationError,
    ConnectivityError,
    DimensionError,
    InvalidParameterError,
    NumericalError,
)


@dataclass(frozen=True)
class Bus:
    id: int
    pd: float = 0.0  # nominal demand, MW


@dataclass(frozen=True)
class Branch:
    from_bus: int
    to_bus: int
    x: float  # reactance, p.u.
    tap: float = 1.0
    rate: float = 300.0  # |f| limit, MW


@dataclass(frozen=True)
class Generator:
    bus: int
    pmin: float
    pmax: float
    cost_quad: float = 0.0  # $/MW^2h
    cost_lin: float = 0.0  # $/MWh


@dataclass(frozen=True)
class Storage:
    bus: int
    e_min: float
    e_max: float
    s_min: float
    s_max: float
    e0: float
    cost_power_quad: float = 0.0
    cost_energy_quad: float = 0.0


@dataclass(frozen=True)
class Demand:
    bus: int
    column: int


@dataclass(frozen=True)
class GridCase:
    """Immutable network description.

    ``generators[0]`` is the slack generator and must sit on ``slack_bus``.
    Storage power ``s`` is positive when discharging into the grid.
    """

    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    generators: tuple[Generator, ...]
    storages: tuple[Storage, ...] = ()
    demands: tuple[Demand, ...] = ()
    slack_bus: int = 1
    delta_hours: float = 0.25

    def __post_init__(self):
        for name in ("buses", "branches", "generators", "storages", "demands"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self._validate()

    def _validate(self) -> None:
        ids = [b.id for b in self.buses]
        if not ids:
            raise CaseValidationError("buses", "at least one bus is required")
        if len(set(ids)) != len(ids):
            raise CaseValidationError("buses", "duplicate bus ids")
        known = set(ids)
        for k, br in enumerate(self.branches):
            for end in (br.from_bus, br.to_bus):
                if end not in known:
                    raise CaseReferenceError(f"branches[{k}] references unknown bus {end}")
            if br.from_bus == br.to_bus:
                raise InvalidParameterError(f"branches[{k}] is a self loop at bus {br.from_bus}")
            if not br.x > 0 or not br.tap > 0:
                raise InvalidParameterError(
                    f"branches[{k}] ({br.from_bus}-{br.to_bus}) needs x > 0 and tap > 0, "
                    f"got x={br.x}, tap={br.tap}"
                )
            if not br.rate > 0:
                raise InvalidParameterError(f"branches[{k}] flow limit must be positive")
        for group in ("generators", "storages", "demands"):
            for k, dev in enumerate(getattr(self, group)):
                if dev.bus not in known:
                    raise CaseReferenceError(f"{group}[{k}] references unknown bus {dev.bus}")
        for k, g in enumerate(self.generators):
            if g.pmin > g.pmax:
                raise CaseValidationError(f"generators[{k}]", "pmin > pmax")
        if self.slack_bus not in known:
            raise CaseReferenceError(f"slack bus {self.slack_bus} does not exist")
        if not self.generators or self.generators[0].bus != self.slack_bus:
            raise CaseValidationError("slack_bus", "generators[0] must be located at the slack bus")
        for k, st in enumerate(self.storages):
            if not st.e_min <= st.e0 <= st.e_max:
                raise CaseValidationError(f"storages[{k}]", "need e_min <= e0 <= e_max")
            if not st.s_min < 0 < st.s_max:
                raise CaseValidationError(f"storages[{k}]", "need s_min < 0 < s_max")
        cols = sorted(d.column for d in self.demands)
        if cols != list(range(len(self.demands))):
            raise CaseValidationError("demands", "columns must be a permutation of 0..|D|-1")
        if not self.delta_hours > 0:
            raise CaseValidationError("delta_hours", "must be positive")

    @property
    def bus_ids(self) -> tuple[int, ...]:
        return tuple(b.id for b in self.buses)

    @property
    def n_u(self) -> int:
        return len(self.generators) - 1 + len(self.storages)

    @property
    def n_w(self) -> int:
        return len(self.demands)

    @property
    def n_y(self) -> int:
        return len(self.storages) + 1 + len(self.branches)

    @property
    def demand_buses(self) -> tuple[int, ...]:
        """Demand buses in demand-series column order."""
        return tuple(d.bus for d in sorted(self.demands, key=lambda d: d.column))

    def nominal_demand(self) -> np.ndarray:
        pd = {b.id: b.pd for b in self.buses}
        return np.array([pd[b] for b in self.demand_buses], dtype=float)

    def input_buses(self) -> tuple[int, ...]:
        return tuple(g.bus for g in self.generators[1:]) + tuple(s.bus for s in self.storages)


def _branch_weights(case: GridCase) -> np.ndarray:
    return np.array([1.0 / (br.x * br.tap) for br in case.branches], dtype=float)


def build_bus_susceptance(case: GridCase) -> np.ndarray:
    """Weighted graph Laplacian of the branch graph (parallel branches summed)."""
    for k, br in enumerate(case.branches):
        if not br.x > 0 or not br.tap > 0:
            raise InvalidParameterError(f"branch {k}: x and tap must be positive")
    pos = {b: i for i, b in enumerate(case.bus_ids)}
    n = len(pos)
    B = np.zeros((n, n))
    for br, wgt in zip(case.branches, _branch_weights(case)):
        i, j = pos[br.from_bus], pos[br.to_bus]
        B[i, j] -= wgt
        B[j, i] -= wgt
    # diagonal as the negated off-diagonal row sum keeps B @ 1 == 0 exactly
    np.fill_diagonal(B, 0.0)
    np.fill_diagonal(B, -B.sum(axis=1))
    return B


def component_lists(case: GridCase) -> list[list[int]]:
    ids = case.bus_ids
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    rows = [pos[br.from_bus] for br in case.branches]
    cols = [pos[br.to_bus] for br in case.branches]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    count, labels = _cc(graph, directed=False)
    comps: list[list[int]] = [[] for _ in range(count)]
    for i, lab in enumerate(labels):
        comps[lab].append(ids[i])
    return comps


def connected_components(case: GridCase) -> int:
    """Number of connected components of the branch graph (graph traversal)."""
    return len(component_lists(case))


@dataclass(frozen=True, eq=False)
class ReducedModel:
    """Slack-reduced DC model.

    Reduced coordinates drop the slack bus; ``reduced_bus_ids`` gives the
    bus id for each reduced row.  ``Cg_red`` maps ``u`` (non-slack
    generators, then storages) to reduced buses and ``Cs_red`` selects the
    storage entries of ``u``.
    """

    case: GridCase
    B: np.ndarray
    B_red: np.ndarray
    Bf: np.ndarray
    Bf_red: np.ndarray
    ptdf: np.ndarray
    Cg: np.ndarray
    Cd: np.ndarray
    Cg_red: np.ndarray
    Cd_red: np.ndarray
    Cs_red: np.ndarray
    slack_index: int
    reduced_bus_ids: tuple[int, ...]
    _chol: tuple = field(repr=False, default=())

    @property
    def n_u(self) -> int:
        return self.Cg_red.shape[1]

    @property
    def n_w(self) -> int:
        return self.Cd_red.shape[1]

    @property
    def q(self) -> int:
        return self.Cs_red.shape[0]

    @property
    def n_e(self) -> int:
        return self.Bf.shape[0]

    @property
    def n_y(self) -> int:
        return self.q + 1 + self.n_e

    @property
    def delta(self) -> float:
        return self.case.delta_hours

    @cached_property
    def flow_limits(self) -> np.ndarray:
        return np.array([br.rate for br in self.case.branches], dtype=float)

    def solve_reduced(self, rhs: np.ndarray) -> np.ndarray:
        """Solve ``B_red @ theta = rhs`` with the cached Cholesky factor."""
        if self.B_red.shape[0] == 0:
            return np.zeros((0,) + np.shape(rhs)[1:])
        return sla.cho_solve(self._chol, rhs)

    def net_injection(self, u: np.ndarray, w: np.ndarray) -> np.ndarray:
        """Reduced net injection ``Cg_red u - Cd_red w`` (MW)."""
        return self.Cg_red @ np.asarray(u, float) - self.Cd_red @ np.asarray(w, float)


def reduce(case: GridCase) -> ReducedModel:
    comps = component_lists(case)
    if len(comps) != 1:
        raise ConnectivityError(comps)
    ids = case.bus_ids
    pos = {b: i for i, b in enumerate(ids)}
    n = len(ids)
    k = pos[case.slack_bus]
    keep = [i for i in range(n) if i != k]

    B = build_bus_susceptance(case)
    B_red = B[np.ix_(keep, keep)]

    wgt = _branch_weights(case)
    Bf = np.zeros((len(case.branches), n))
    for e, (br, b) in enumerate(zip(case.branches, wgt)):
        Bf[e, pos[br.from_bus]] += b
        Bf[e, pos[br.to_bus]] -= b
    Bf_red = Bf[:, keep]

    Cg = np.zeros((n, len(case.generators) + len(case.storages)))
    for j, dev in enumerate(list(case.generators) + list(case.storages)):
        Cg[pos[dev.bus], j] = 1.0
    Cd = np.zeros((n, len(case.demands)))
    for d in case.demands:
        Cd[pos[d.bus], d.column] = 1.0
    # u excludes the slack generator (column 0)
    Cg_red = Cg[np.ix_(keep, range(1, Cg.shape[1]))]
    Cd_red = Cd[keep, :]
    n_gen = len(case.generators) - 1
    q = len(case.storages)
    Cs_red = np.zeros((q, n_gen + q))
    Cs_red[:, n_gen:] = np.eye(q)

    if n > 1:
        try:
            chol = sla.cho_factor(B_red, lower=True)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("reduced susceptance matrix is not positive definite") from exc
        ptdf = sla.cho_solve(chol, Bf_red.T).T
    else:
        chol = ()
        ptdf = np.zeros((len(case.branches), 0))

    return ReducedModel(
        case=case,
        B=B,
        B_red=B_red,
        Bf=Bf,
        Bf_red=Bf_red,
        ptdf=ptdf,
        Cg=Cg,
        Cd=Cd,
        Cg_red=Cg_red,
        Cd_red=Cd_red,
        Cs_red=Cs_red,
        slack_index=k,
        reduced_bus_ids=tuple(ids[i] for i in keep),
        _chol=chol,
    )


def solve_dc_flow(model: ReducedModel, gen_powers, demands) -> tuple[np.ndarray, np.ndarray, float]:
    """DC power flow for given non-slack injections.

    Parameters
    ----------
    gen_powers : array, length ``n_u``
        Non-slack generator and storage powers (MW), in ``u`` ordering.
    demands : array, length ``|D|``
        Demand powers (MW) in demand-column ordering.

    Returns
    -------
    theta_red, flows, p_slack
    """
    u = np.asarray(gen_powers, dtype=float)
    w = np.asarray(demands, dtype=float)
    if u.shape != (model.n_u,) or w.shape != (model.n_w,):
        raise DimensionError(
            f"expected u of length {model.n_u} and w of length {model.n_w}, got {u.shape} and {w.shape}"
        )
    theta = model.solve_reduced(model.net_injection(u, w))
    if not np.all(np.isfinite(theta)):
        raise NumericalError("DC flow solve produced non-finite angles")
    flows = model.Bf_red @ theta
    p1 = float(w.sum() - u.sum())
    return theta, flows, p1
