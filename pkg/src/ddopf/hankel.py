"""Hankel matrices, persistency of excitation, the storage-only past
representation, SVD truncation and the disturbance null-space substitution.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ForecastInfeasibleError, InsufficientDataError, PersistencyError
from .plant import TrajectoryLog

log = logging.getLogger(__name__)

RANK_TOL = 1e-10


def numerical_rank(M: np.ndarray, tol: float = RANK_TOL) -> int:
    """Rank with a tolerance relative to the largest singular value."""
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0:
        return 0
    return int(np.sum(sv > tol * sv[0]))


def hankel_matrix(seq, depth: int) -> np.ndarray:
    """Block Hankel matrix with ``depth`` block rows.

    ``seq`` has one row per time step (a 1-D array is a scalar signal).
    Column ``j`` stacks ``v(j), ..., v(j + depth - 1)``.
    """
    v = np.asarray(seq, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    T, n_v = v.shape
    if depth < 1:
        raise ValueError("depth must be positive")
    if T < depth:
        raise InsufficientDataError(f"sequence of length {T} is shorter than depth {depth}")
    cols = T - depth + 1
    H = np.empty((depth * n_v, cols))
    for i in range(depth):
        H[i * n_v : (i + 1) * n_v] = v[i : i + cols].T
    return H


def is_persistently_exciting(seq, order: int, tol: float = RANK_TOL) -> tuple[bool, int]:
    v = np.asarray(seq, dtype=float)
    if v.ndim == 1:
        v = v[:, None]
    if len(v) < order:
        raise InsufficientDataError(f"need at least {order} samples, got {len(v)}")
    H = hankel_matrix(v, order)
    rank = numerical_rank(H, tol)
    return rank == v.shape[1] * order, rank


def min_data_length(n_u: int, n_w: int, q: int, s: int, horizon: int) -> int:
    """Shortest record that can be persistently exciting of order
    ``horizon + 2 (q + s - 1)`` in the joint input ``(u, w)``."""
    return (n_u + n_w + 1) * (horizon + 2 * (q + s - 1)) - 1


def behavior_dimension(n_u: int, n_w: int, q: int, t_ini: int = 1, horizon: int | None = None) -> int:
    """Dimension of the input-disturbance-output behavior over ``t_ini + horizon``
    steps, ``(t_ini + horizon)(n_u + n_w) + q``.

    With the default ``horizon = t_ini`` this is ``2 T_ini (n_u + n_w) + q``,
    the default SVD truncation target.
    """
    horizon = t_ini if horizon is None else horizon
    return (t_ini + horizon) * (n_u + n_w) + q


def simplified_rows(n_u: int, n_w: int, n_y: int, q: int, t_ini: int = 1, horizon: int = 1) -> int:
    return 2 * t_ini * q + horizon * (n_u + n_w + n_y)


def check_persistency(u, w, q: int, horizon: int, policy: str = "truncated", tol: float = RANK_TOL) -> dict:
    """Rank test of the joint input ``(u, w)`` for order ``horizon + 2q``.

    ``policy="strict"`` also enforces the minimum record length and raises
    :class:`PersistencyError` on failure; ``"truncated"`` only reports.
    """
    if policy not in ("strict", "truncated"):
        raise ValueError(f"unknown PE policy {policy!r}")
    uw = np.hstack([np.atleast_2d(u), np.atleast_2d(w)])
    T, n_uw = uw.shape
    n_u = np.atleast_2d(u).shape[1]
    order = horizon + 2 * q  # s = 1, T_ini = q
    T_min = min_data_length(n_u, n_uw - n_u, q, 1, horizon)
    report = {"order": order, "T": T, "T_min": T_min, "required_rank": n_uw * order}
    if T >= order:
        pe, rank = is_persistently_exciting(uw, order, tol)
    else:
        pe, rank = False, None
    report.update(persistently_exciting=bool(pe), rank=rank)
    if policy == "strict":
        if T < T_min:
            raise PersistencyError(f"strict mode needs T >= {T_min}, got {T}")
        if not pe:
            raise PersistencyError(f"(u, w) not persistently exciting of order {order}: rank {rank} < {n_uw * order}")
    elif not pe:
        log.info("data not persistently exciting of order %d (rank %s); relying on truncation", order, rank)
    return report


def split_past_future(data: TrajectoryLog, t_ini: int, horizon: int, s: int = 1) -> dict[str, np.ndarray]:
    """Depth ``t_ini + horizon`` Hankel matrices of u, w, y split into past
    (first ``t_ini`` block rows) and future parts."""
    T = len(data)
    if T - s + 1 < t_ini + horizon:
        raise InsufficientDataError(
            f"record of length {T} too short for t_ini={t_ini}, horizon={horizon}, s={s}"
        )
    out = {}
    for name, sig in (("U", data.u), ("W", data.w), ("Y", data.y)):
        trimmed = sig[: T - s + 1]
        n = trimmed.shape[1]
        H = hankel_matrix(trimmed, t_ini + horizon)
        out[name + "_P"] = H[: t_ini * n]
        out[name + "_F"] = H[t_ini * n :]
    return out


@dataclass(frozen=True)
class TruncationRecord:
    original_rank: int
    target_rank: int
    kept: int
    discarded: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass(frozen=True, eq=False)
class HankelStack:
    """Past/future data blocks sharing one column space.

    In the storage-only representation the past blocks are ``S_P`` and
    ``E_P``; with ``past_mode="full"`` the complete ``U_P, W_P, Y_P`` are
    kept as well.
    """

    S_P: np.ndarray
    E_P: np.ndarray
    U_F: np.ndarray
    W_F: np.ndarray
    Y_F: np.ndarray
    t_ini: int
    horizon: int
    U_P: np.ndarray | None = None
    W_P: np.ndarray | None = None
    Y_P: np.ndarray | None = None
    truncation: TruncationRecord | None = None
    pe_report: dict = field(default_factory=dict)

    @property
    def m(self) -> int:
        return self.U_F.shape[1]

    @property
    def past_mode(self) -> str:
        return "storage" if self.U_P is None else "full"

    def block_names(self) -> list[str]:
        names = ["S_P", "E_P", "U_F", "W_F", "Y_F"]
        if self.U_P is not None:
            names += ["U_P", "W_P", "Y_P"]
        return names

    def stacked(self) -> np.ndarray:
        return np.vstack([getattr(self, n) for n in self.block_names()])

    @property
    def rows(self) -> int:
        return sum(getattr(self, n).shape[0] for n in self.block_names())


def build_simplified_stack(
    data: TrajectoryLog,
    storage_selector: np.ndarray,
    t_ini: int = 1,
    horizon: int = 1,
    past_mode: str = "storage",
    pe_policy: str = "truncated",
    tol: float = RANK_TOL,
) -> HankelStack:
    """Build the data matrices used by the data-driven controller.

    ``storage_selector`` is the ``(q, n_u)`` matrix picking storage powers
    from ``u``; the first ``q`` outputs are the charges.

    ``pe_policy="strict"`` enforces the minimum record length and the rank
    test on ``(u, w)`` and raises :class:`PersistencyError` on failure;
    ``"truncated"`` only records the result.
    """
    Cs = np.atleast_2d(np.asarray(storage_selector, dtype=float))
    q = Cs.shape[0]
    s_data = data.u @ Cs.T if q else np.zeros((len(data), 0))
    e_data = data.y[:, :q]
    parts = split_past_future(data, t_ini, horizon, s=1)
    depth = t_ini + horizon
    Hs = hankel_matrix(s_data, depth) if q else np.zeros((0, parts["U_F"].shape[1]))
    He = hankel_matrix(e_data, depth) if q else np.zeros((0, parts["U_F"].shape[1]))

    report = check_persistency(data.u, data.w, q, horizon, pe_policy, tol)

    full = past_mode == "full"
    if past_mode not in ("storage", "full"):
        raise ValueError(f"unknown past mode {past_mode!r}")
    return HankelStack(
        S_P=Hs[: t_ini * q],
        E_P=He[: t_ini * q],
        U_F=parts["U_F"],
        W_F=parts["W_F"],
        Y_F=parts["Y_F"],
        t_ini=t_ini,
        horizon=horizon,
        U_P=parts["U_P"] if full else None,
        W_P=parts["W_P"] if full else None,
        Y_P=parts["Y_P"] if full else None,
        pe_report=report,
    )


def truncate_rank(stack: HankelStack, target_rank: int, tol: float = RANK_TOL) -> HankelStack:
    """Compress the stack's column space to at most ``target_rank`` columns.

    The stacked matrix ``Z = U S V^T`` is replaced by ``U_r S_r``; singular
    values below ``tol`` relative to the largest one are dropped as well.
    """
    if target_rank < 1:
        raise ValueError("target rank must be at least 1")
    Z = stack.stacked()
    if target_rank >= Z.shape[1]:
        warnings.warn(
            f"target rank {target_rank} >= column count {Z.shape[1]}; stack left unchanged", stacklevel=2
        )
        return stack
    U, sv, _ = np.linalg.svd(Z, full_matrices=False)
    rank = int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    r = max(1, min(target_rank, rank))
    Zr = U[:, :r] * sv[:r]
    blocks = {}
    row = 0
    for name in stack.block_names():
        k = getattr(stack, name).shape[0]
        blocks[name] = Zr[row : row + k]
        row += k
    record = TruncationRecord(original_rank=rank, target_rank=target_rank, kept=r, discarded=sv[r:].copy())
    return replace(stack, truncation=record, **blocks)


@dataclass(frozen=True, eq=False)
class NullspaceSubstitution:
    """``alpha = pinv(W_F) w + basis @ beta`` for a known forecast ``w``."""

    pinv: np.ndarray
    basis: np.ndarray
    W_F: np.ndarray
    rank: int
    tol: float = 1e-8

    def particular(self, w) -> np.ndarray:
        w = np.asarray(w, dtype=float).ravel()
        alpha0 = self.pinv @ w
        resid = np.linalg.norm(self.W_F @ alpha0 - w)
        if resid > self.tol * max(1.0, np.linalg.norm(w)):
            raise ForecastInfeasibleError(
                f"forecast not in the range of W_F (residual {resid:.3e})"
            )
        return alpha0

    def alpha(self, w, beta) -> np.ndarray:
        return self.particular(w) + self.basis @ np.asarray(beta, dtype=float)


def nullspace_substitution(W_F: np.ndarray, tol: float = RANK_TOL) -> NullspaceSubstitution:
    W_F = np.atleast_2d(np.asarray(W_F, dtype=float))
    if W_F.shape[0] == 0:
        # no disturbance channels: alpha is free
        m = W_F.shape[1]
        return NullspaceSubstitution(pinv=np.zeros((m, 0)), basis=np.eye(m), W_F=W_F, rank=0)
    if W_F.size == 0 or not np.any(W_F):
        raise ValueError("W_F must be nonzero")
    U, sv, Vt = np.linalg.svd(W_F, full_matrices=True)
    r = int(np.sum(sv > tol * sv[0]))
    pinv = (Vt[:r].T / sv[:r]) @ U[:, :r].T
    basis = Vt[r:].T.copy()
    return NullspaceSubstitution(pinv=pinv, basis=basis, W_F=W_F, rank=r)
