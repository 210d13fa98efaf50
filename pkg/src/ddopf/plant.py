"""Descriptor-system plant: quasi-Weierstrass matrices, ground-truth
simulation, and PBH-type R-controllability / R-observability tests.

Outputs are ordered ``y = [e; p1; f]`` (charges, slack power, branch flows).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionError, InvalidParameterError
from .netmodel import ReducedModel


@dataclass(frozen=True, eq=False)
class QuasiWeierstrass:
    A1: np.ndarray
    B1: np.ndarray
    F1: np.ndarray
    N: np.ndarray
    B2: np.ndarray
    F2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D: np.ndarray
    G: np.ndarray

    @property
    def q(self) -> int:
        return self.A1.shape[0]

    @property
    def r(self) -> int:
        return self.N.shape[0]

    @property
    def n_u(self) -> int:
        return self.D.shape[1]

    @property
    def n_w(self) -> int:
        return self.G.shape[1]

    @property
    def n_y(self) -> int:
        return self.D.shape[0]

    @property
    def nilpotency_index(self) -> int:
        """Smallest ``s >= 1`` with ``N**s == 0``."""
        r = self.r
        if r == 0 or not np.any(self.N):
            return 1
        P = self.N.copy()
        for s in range(2, r + 1):
            P = P @ self.N
            if not np.any(np.abs(P) > 1e-12 * max(1.0, np.abs(self.N).max())):
                return s
        raise InvalidParameterError("N is not nilpotent")


def assemble_descriptor(model: ReducedModel, delta: float | None = None) -> QuasiWeierstrass:
    """Quasi-Weierstrass form of the DC grid with lossless storage."""
    delta = model.delta if delta is None else float(delta)
    q, n_u, n_w, n_e = model.q, model.n_u, model.n_w, model.n_e
    r = model.B_red.shape[0]
    B2 = -model.solve_reduced(model.Cg_red)
    F2 = model.solve_reduced(model.Cd_red)
    C1 = np.zeros((q + 1 + n_e, q))
    C1[:q] = np.eye(q)
    C2 = np.zeros((q + 1 + n_e, r))
    C2[q + 1 :] = model.Bf_red
    D = np.zeros((q + 1 + n_e, n_u))
    D[q] = -1.0
    G = np.zeros((q + 1 + n_e, n_w))
    G[q] = 1.0
    return QuasiWeierstrass(
        A1=np.eye(q),
        B1=-delta * model.Cs_red,
        F1=np.zeros((q, n_w)),
        N=np.zeros((r, r)),
        B2=B2.reshape(r, n_u),
        F2=F2.reshape(r, n_w),
        C1=C1,
        C2=C2,
        D=D,
        G=G,
    )


@dataclass
class PlantState:
    e: np.ndarray  # MWh
    delta: float  # hours

    def __post_init__(self):
        self.e = np.asarray(self.e, dtype=float).copy()


@dataclass
class TrajectoryLog:
    """Input-output record with rows indexed by time step."""

    u: np.ndarray
    w: np.ndarray
    y: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=float)
        self.w = np.asarray(self.w, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        if not (len(self.u) == len(self.w) == len(self.y)):
            raise DimensionError("u, w, y must have equal row counts")

    def __len__(self) -> int:
        return self.u.shape[0]

    def copy(self) -> "TrajectoryLog":
        return TrajectoryLog(self.u.copy(), self.w.copy(), self.y.copy(), dict(self.meta))

    def slice(self, start: int, stop: int) -> "TrajectoryLog":
        return TrajectoryLog(self.u[start:stop], self.w[start:stop], self.y[start:stop], dict(self.meta))


def _check_s1(sys: QuasiWeierstrass) -> None:
    if np.any(sys.N):
        raise InvalidParameterError("step/simulate support only N = 0 (nilpotency index 1)")


def step(sys: QuasiWeierstrass, state: PlantState, u, w) -> tuple[PlantState, np.ndarray]:
    """Output for the current charge and the charge after one period."""
    _check_s1(sys)
    u = np.asarray(u, dtype=float)
    w = np.asarray(w, dtype=float)
    if u.shape != (sys.n_u,) or w.shape != (sys.n_w,) or state.e.shape != (sys.q,):
        raise DimensionError(
            f"expected u:{sys.n_u}, w:{sys.n_w}, e:{sys.q}; got {u.shape}, {w.shape}, {state.e.shape}"
        )
    x2 = -(sys.B2 @ u + sys.F2 @ w)
    y = sys.C1 @ state.e + sys.C2 @ x2 + sys.D @ u + sys.G @ w
    e_next = sys.A1 @ state.e + sys.B1 @ u + sys.F1 @ w
    return PlantState(e_next, state.delta), y


def _as_rows(seq, n: int) -> np.ndarray:
    a = np.asarray(seq, dtype=float)
    if a.ndim == 2:
        return a
    if n == 0:
        raise DimensionError("pass a (T, 0) array for an empty signal")
    return a.reshape(-1, n)


def simulate(sys: QuasiWeierstrass, e0, u_seq, w_seq, delta: float = 0.25) -> TrajectoryLog:
    u_seq = _as_rows(u_seq, sys.n_u)
    w_seq = _as_rows(w_seq, sys.n_w)
    if len(u_seq) != len(w_seq):
        raise DimensionError("u_seq and w_seq must have equal length")
    state = PlantState(np.asarray(e0, dtype=float).reshape(sys.q), delta)
    ys = np.empty((len(u_seq), sys.n_y))
    for k, (u, w) in enumerate(zip(u_seq, w_seq)):
        state, ys[k] = step(sys, state, u, w)
    return TrajectoryLog(u_seq.copy(), w_seq.copy(), ys, meta={"e_final": state.e.copy(), "q": sys.q})


def _rank(M: np.ndarray, tol: float = 1e-10) -> int:
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    return int(np.sum(sv > tol * sv[0])) if sv[0] > 0 else 0


def r_controllable(sys: QuasiWeierstrass, tol: float = 1e-10) -> bool:
    q = sys.q
    if q == 0:
        return True
    for lam in np.linalg.eigvals(sys.A1):
        M = np.hstack([sys.A1 - lam * np.eye(q), sys.B1, sys.F1])
        if _rank(M, tol) < q:
            return False
    return True


def r_observable(sys: QuasiWeierstrass, tol: float = 1e-10) -> bool:
    q = sys.q
    if q == 0:
        return True
    for lam in np.linalg.eigvals(sys.A1):
        M = np.hstack([sys.A1.T - lam * np.eye(q), sys.C1.T])
        if _rank(M, tol) < q:
            return False
    return True


def save_trajectory_csv(log: TrajectoryLog, path: str | Path) -> None:
    n_u, n_w, n_y = log.u.shape[1], log.w.shape[1], log.y.shape[1]
    header = ["k"] + [f"u_{i + 1}" for i in range(n_u)] + [f"w_{i + 1}" for i in range(n_w)]
    header += [f"y_{i + 1}" for i in range(n_y)]
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for k in range(len(log)):
            row = np.concatenate([log.u[k], log.w[k], log.y[k]])
            wr.writerow([k] + [repr(float(v)) for v in row])


def load_trajectory_csv(path: str | Path) -> TrajectoryLog:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    cols = {p: [i for i, h in enumerate(header) if h.startswith(p + "_")] for p in ("u", "w", "y")}
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(len(rows) - 1, len(header))
    return TrajectoryLog(data[:, cols["u"]], data[:, cols["w"]], data[:, cols["y"]])
