"""Receding-horizon controllers for multi-stage DC OPF with storage.

Three controllers share one interface, ``plan(measurement, forecast)``:

* :class:`ExactMpc` uses the network model, with angles eliminated through
  the PTDF.
* :class:`SeqIdMpc` first estimates the PTDF from recorded data by least
  squares, then runs the same MPC.
* :class:`DdOpf` predicts directly from Hankel matrices of recorded data.

All plans are computed by :mod:`ddopf.qpsolve`. Each controller builds its QP
template once; later steps only update the linear cost and the bounds.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InfeasibleScheduleError, InvalidParameterError
from .hankel import (
    HankelStack,
    NullspaceSubstitution,
    build_simplified_stack,
    behavior_dimension,
    numerical_rank,
    nullspace_substitution,
    truncate_rank,
)
from .netmodel import GridCase, ReducedModel
from .plant import TrajectoryLog
from .qpsolve import MAX_ITER, OPTIMAL, PRIMAL_INFEASIBLE, QpSettings, QpSolution, QpSolver

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# cost and bounds


@dataclass(frozen=True, eq=False)
class StageCost:
    """``l(u, y) = u'Ru + r'u + y'Qy + q'y`` in $ per step."""

    R: np.ndarray
    r: np.ndarray
    Q: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        object.__setattr__(self, "R", 0.5 * (R + R.T))
        object.__setattr__(self, "Q", 0.5 * (Q + Q.T))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float).ravel())
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float).ravel())
        if self.R.shape != (self.r.size, self.r.size) or self.Q.shape != (self.q.size, self.q.size):
            raise InvalidParameterError("cost matrix and vector sizes disagree")
        if self.r.size:
            try:
                np.linalg.cholesky(self.R)
            except np.linalg.LinAlgError as exc:
                raise InvalidParameterError("R must be positive definite") from exc
        if self.q.size and np.linalg.eigvalsh(self.Q).min() < -1e-10:
            raise InvalidParameterError("Q must be positive semidefinite")

    def __call__(self, u, y) -> float:
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)
        return float(u @ self.R @ u + self.r @ u + y @ self.Q @ y + self.q @ y)


@dataclass(frozen=True, eq=False)
class Bounds:
    u_min: np.ndarray
    u_max: np.ndarray
    y_min: np.ndarray
    y_max: np.ndarray

    def __post_init__(self):
        for name in ("u_min", "u_max", "y_min", "y_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float).ravel())
        if np.any(self.u_min > self.u_max) or np.any(self.y_min > self.y_max):
            raise InvalidParameterError("bounds must satisfy min <= max")

    def u_violation(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        return np.maximum(self.u_min - u, 0.0) + np.maximum(u - self.u_max, 0.0)

    def y_violation(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.maximum(self.y_min - y, 0.0) + np.maximum(y - self.y_max, 0.0)


@dataclass
class CostSettings:
    flow_quad: float = 1e-5  # $/MW^2 per hour on each branch flow
    price_slack: bool = False
    min_quad: float = 1e-6  # floor keeping R positive definite
    per_step: bool = True  # scale hourly prices by the period length


def build_stage_cost(case: GridCase, settings: CostSettings | None = None) -> StageCost:
    """Diagonal quadratic stage cost from the device prices of ``case``."""
    s = settings or CostSettings()
    scale = case.delta_hours if s.per_step else 1.0
    gens, stors = case.generators[1:], case.storages
    R = np.array([g.cost_quad for g in gens] + [st.cost_power_quad for st in stors], dtype=float)
    R = np.maximum(R, s.min_quad)
    r = np.array([g.cost_lin for g in gens] + [0.0] * len(stors), dtype=float)
    q_st = len(stors)
    n_y = case.n_y
    Qd = np.zeros(n_y)
    qv = np.zeros(n_y)
    Qd[:q_st] = [st.cost_energy_quad for st in stors]
    Qd[q_st + 1 :] = s.flow_quad
    if s.price_slack:
        slack = case.generators[0]
        Qd[q_st] = slack.cost_quad
        qv[q_st] = slack.cost_lin
    return StageCost(R=np.diag(R * scale), r=r * scale, Q=np.diag(Qd * scale), q=qv * scale)


def build_bounds(case: GridCase) -> Bounds:
    gens, stors = case.generators[1:], case.storages
    u_min = [g.pmin for g in gens] + [st.s_min for st in stors]
    u_max = [g.pmax for g in gens] + [st.s_max for st in stors]
    slack = case.generators[0]
    rates = [br.rate for br in case.branches]
    y_min = [st.e_min for st in stors] + [slack.pmin] + [-r for r in rates]
    y_max = [st.e_max for st in stors] + [slack.pmax] + rates
    return Bounds(u_min, u_max, y_min, y_max)


def output_labels(q: int, n_e: int) -> list[str]:
    return [f"e{i + 1}" for i in range(q)] + ["p1"] + [f"f{i + 1}" for i in range(n_e)]


# ---------------------------------------------------------------------------
# shared QP plumbing


@dataclass(eq=False)
class Plan:
    u: np.ndarray  # (L, n_u)
    y: np.ndarray  # (L, n_y), predicted
    objective: float
    solution: QpSolution
    beta: np.ndarray | None = None

    @property
    def status(self) -> str:
        return self.solution.status


def _stage_blocks(cost: StageCost, H: int):
    I = np.eye(H)
    return np.kron(I, cost.R), np.tile(cost.r, H), np.kron(I, cost.Q), np.tile(cost.q, H)


def _finish(sol: QpSolution, labels: list[str], context: str) -> None:
    if sol.status == OPTIMAL:
        return
    if sol.status == MAX_ITER:
        log.warning(
            "%s: QP hit the iteration limit (primal %.2e, dual %.2e)", context, sol.prim_res, sol.dual_res
        )
        return
    violated: list[str] = []
    cert = sol.info.get("certificate")
    if sol.status == PRIMAL_INFEASIBLE and cert is not None and cert.size:
        big = np.abs(cert) > 1e-6 * np.abs(cert).max()
        violated = [labels[i] for i in np.flatnonzero(big)]
    raise InfeasibleScheduleError(f"{context}: QP {sol.status}", violated=violated, status=sol.status)


class _MpcTemplate:
    """Multi-stage DC OPF over ``L`` steps in the inputs ``U = [u(0); ...]``.

    Outputs are affine in ``U``: ``Y = Phi U + Yw W + Ye e_now`` stacked over
    steps, with ``y(k) = [e(k); p1(k); f(k)]``.
    """

    def __init__(self, model: ReducedModel, cost: StageCost, bounds: Bounds, L: int,
                 ptdf: np.ndarray | None = None, settings: QpSettings | None = None):
        if L < 1:
            raise InvalidParameterError("horizon must be at least 1")
        M = model.ptdf if ptdf is None else np.asarray(ptdf, dtype=float)
        if M.shape != model.ptdf.shape:
            raise InvalidParameterError(f"PTDF must have shape {model.ptdf.shape}, got {M.shape}")
        self.model, self.cost, self.bounds, self.L = model, cost, bounds, L
        n_u, n_w, q, n_e = model.n_u, model.n_w, model.q, model.n_e
        n_y = q + 1 + n_e
        self.n_u, self.n_w, self.n_y, self.q = n_u, n_w, n_y, q
        Yu = np.zeros((n_y, n_u))
        Yu[q] = -1.0
        Yu[q + 1 :] = M @ model.Cg_red
        Yw = np.zeros((n_y, n_w))
        Yw[q] = 1.0
        Yw[q + 1 :] = -M @ model.Cd_red
        Ye = np.zeros((n_y, q))
        Ye[:q] = np.eye(q)
        B1 = -model.delta * model.Cs_red
        Phi = np.zeros((L * n_y, L * n_u))
        YeB1 = Ye @ B1
        for k in range(L):
            Phi[k * n_y : (k + 1) * n_y, k * n_u : (k + 1) * n_u] = Yu
            for j in range(k):
                Phi[k * n_y : (k + 1) * n_y, j * n_u : (j + 1) * n_u] = YeB1
        self.Phi, self.Yw, self.Ye = Phi, Yw, Ye
        self.Rb, self.rb, self.Qb, self.qb = _stage_blocks(cost, L)
        P = 2.0 * (self.Rb + Phi.T @ self.Qb @ Phi)
        A = np.vstack([np.eye(L * n_u), Phi])
        self.solver = QpSolver(P, A, settings)
        ylab = output_labels(q, n_e)
        self.labels = [f"u{i + 1}[k={k}]" for k in range(L) for i in range(n_u)]
        self.labels += [f"{name}[k={k}]" for k in range(L) for name in ylab]

    def _affine_y(self, e_now, W):
        return (W @ self.Yw.T + np.asarray(e_now, float) @ self.Ye.T).ravel()

    def solve(self, e_now, W, x0=None, y0=None) -> Plan:
        L, n_u, n_y, q = self.L, self.n_u, self.n_y, self.q
        W = np.asarray(W, dtype=float).reshape(L, self.n_w)
        yc = self._affine_y(e_now, W)
        c = self.rb + self.Phi.T @ (2.0 * self.Qb @ yc + self.qb)
        b = self.bounds
        ylo = np.tile(b.y_min, L) - yc
        yhi = np.tile(b.y_max, L) - yc
        # the first charge is fixed by the measurement, not by the plan
        ylo[:q], yhi[:q] = -np.inf, np.inf
        lo = np.concatenate([np.tile(b.u_min, L), ylo])
        hi = np.concatenate([np.tile(b.u_max, L), yhi])
        sol = self.solver.solve(c, lo, hi, x0=x0, y0=y0)
        _finish(sol, self.labels, "exact MPC")
        U = sol.x
        Y = self.Phi @ U + yc
        const = yc @ self.Qb @ yc + self.qb @ yc
        return Plan(u=U.reshape(L, n_u), y=Y.reshape(L, n_y), objective=float(sol.objective + const), solution=sol)

    def shifted_start(self, sol: QpSolution):
        L, n_u, n_y = self.L, self.n_u, self.n_y
        x0 = _shift(sol.x, n_u)
        yu, yy = sol.y[: L * n_u], sol.y[L * n_u :]
        return x0, np.concatenate([_shift(yu, n_u), _shift(yy, n_y)])


def _shift(v: np.ndarray, block: int) -> np.ndarray:
    """Drop the first block and repeat the last one."""
    if v.size <= block:
        return v.copy()
    return np.concatenate([v[block:], v[-block:]])


def exact_mpc_plan(model: ReducedModel, cost: StageCost, bounds: Bounds, e_now, w_forecast,
                   delta: float | None = None, ptdf: np.ndarray | None = None,
                   settings: QpSettings | None = None) -> Plan:
    """Open-loop plan of the multi-stage DC OPF over the forecast horizon.

    Parameters
    ----------
    e_now : array (q,)
        Current storage charges, MWh.
    w_forecast : array (L, n_w)
        Demand forecast, MW.
    ptdf : array, optional
        Replaces the model's PTDF (used with an identified estimate).
    """
    if delta is not None and abs(delta - model.delta) > 1e-12:
        model = replace(model, case=replace(model.case, delta_hours=float(delta)))
    W = np.atleast_2d(np.asarray(w_forecast, dtype=float))
    tpl = _MpcTemplate(model, cost, bounds, W.shape[0], ptdf=ptdf, settings=settings)
    return tpl.solve(e_now, W)


# ---------------------------------------------------------------------------
# sequential identification


@dataclass(eq=False)
class PtdfEstimate:
    M_hat: np.ndarray
    rank: int
    deficient: int  # |N| - 1 - rank
    zero_buses: tuple[int, ...] = ()


def estimate_ptdf(flows, injections, bus_ids=None, tol: float = 1e-10) -> PtdfEstimate:
    """Least-squares PTDF ``M`` with ``flows ~ injections @ M'``.

    ``flows`` is ``(T, |E|)`` and ``injections`` is ``(T, |N|-1)``;
    the minimum-norm solution is returned when the injections are rank
    deficient.
    """
    F = np.atleast_2d(np.asarray(flows, dtype=float))
    Pm = np.atleast_2d(np.asarray(injections, dtype=float))
    if F.shape[0] != Pm.shape[0]:
        raise InvalidParameterError("flows and injections need the same number of samples")
    n_red = Pm.shape[1]
    M_hat = (np.linalg.pinv(Pm, rcond=tol) @ F).T if Pm.size else np.zeros((F.shape[1], n_red))
    rank = numerical_rank(Pm, tol)
    ids = tuple(bus_ids) if bus_ids is not None else tuple(range(1, n_red + 1))
    scale = np.abs(Pm).max() if Pm.size else 0.0
    zero = tuple(ids[i] for i in range(n_red) if not np.any(np.abs(Pm[:, i]) > tol * max(scale, 1e-300)))
    deficient = n_red - rank
    if deficient:
        msg = f"injection data has rank {rank} < {n_red}; {deficient} direction(s) unidentifiable"
        if zero:
            msg += f"; zero-injection buses: {', '.join(map(str, zero))}"
        warnings.warn(msg, stacklevel=2)
    return PtdfEstimate(M_hat=M_hat, rank=rank, deficient=deficient, zero_buses=zero)


def _injections(data: TrajectoryLog, model: ReducedModel) -> np.ndarray:
    return data.u @ model.Cg_red.T - data.w @ model.Cd_red.T


def seqid_estimate_ptdf(data: TrajectoryLog, model: ReducedModel, tol: float = 1e-10) -> PtdfEstimate:
    """PTDF from recorded flows and the net injections implied by ``(u, w)``.

    Only the bus incidence of ``model`` is used, never its PTDF.
    """
    flows = data.y[:, model.q + 1 :]
    return estimate_ptdf(flows, _injections(data, model), model.reduced_bus_ids, tol)


@dataclass(eq=False)
class EquivalenceReport:
    M_UF: np.ndarray
    M_WF: np.ndarray
    M_hat: np.ndarray
    deviation: float  # max entry of |[M_UF, M_WF] - M_hat [Cg, -Cd]|
    projected_deviation: float  # the same difference restricted to the span of the data
    rank_injections: int
    rank_inputs: int

    def ok(self, tol: float = 1e-8) -> bool:
        return self.projected_deviation < tol


def regression_equivalence_check(data: TrajectoryLog, Cg_red, Cd_red, q: int, tol: float = 1e-10) -> EquivalenceReport:
    """Compare the depth-one regression of flows on ``(u, w)`` with the
    identified PTDF mapped through the incidence matrices.

    With net injection ``P = Cg u - Cd w`` the flow regression coefficients
    satisfy ``M_UF = M_hat Cg`` and ``M_WF = -M_hat Cd``.
    """
    Cg = np.asarray(Cg_red, dtype=float)
    Cd = np.asarray(Cd_red, dtype=float)
    F = data.y[:, q + 1 :].T  # depth-one Hankel matrices are the data matrices
    Z = np.vstack([data.u.T, data.w.T])
    Pm = Cg @ data.u.T - Cd @ data.w.T
    Theta = F @ np.linalg.pinv(Z, rcond=tol)
    M_hat = F @ np.linalg.pinv(Pm, rcond=tol)
    n_u = Cg.shape[1]
    K = np.hstack([Cg, -Cd])
    diff = Theta - M_hat @ K
    proj = Z @ np.linalg.pinv(Z, rcond=tol)
    scale = max(1.0, np.abs(Theta).max() if Theta.size else 0.0)
    return EquivalenceReport(
        M_UF=Theta[:, :n_u],
        M_WF=Theta[:, n_u:],
        M_hat=M_hat,
        deviation=float(np.abs(diff).max() / scale) if diff.size else 0.0,
        projected_deviation=float(np.abs(diff @ proj).max() / scale) if diff.size else 0.0,
        rank_injections=numerical_rank(Pm, tol),
        rank_inputs=numerical_rank(Z, tol),
    )


# ---------------------------------------------------------------------------
# data-driven OPF


class _DdTemplate:
    """QP in the null-space coordinates ``beta_j`` of each segment.

    Segment ``j`` predicts steps ``j H .. j H + H - 1`` with
    ``alpha_j = pinv(W_F) w_j + N beta_j``. Its past block rows are tied to
    the measured buffer or, for steps already inside the horizon, to the
    predictions of earlier segments.
    """

    def __init__(self, stacks: list[HankelStack], substs: list[NullspaceSubstitution], cost: StageCost,
                 bounds: Bounds, lam: float, storage_selector: np.ndarray,
                 settings: QpSettings | None = None):
        if lam < 0:
            raise InvalidParameterError("lambda must be nonnegative")
        J = len(stacks)
        if J == 0 or len(substs) != J:
            raise InvalidParameterError("need one substitution per stack")
        H, t_ini = stacks[0].horizon, stacks[0].t_ini
        if any(st.horizon != H or st.t_ini != t_ini for st in stacks):
            raise InvalidParameterError("all segments must share T_ini and horizon")
        full = stacks[0].past_mode == "full"
        if full and J > 1:
            raise InvalidParameterError("full past blocks are only supported without segmentation")
        Cs = np.atleast_2d(np.asarray(storage_selector, dtype=float))
        q, n_u = Cs.shape
        n_y = cost.q.size
        n_w = stacks[0].W_F.shape[0] // H
        self.J, self.H, self.t_ini, self.q, self.full = J, H, t_ini, q, full
        self.n_u, self.n_w, self.n_y = n_u, n_w, n_y
        self.L = J * H
        self.stacks, self.substs, self.cost, self.bounds, self.lam, self.Cs = stacks, substs, cost, bounds, lam, Cs

        self.Gu = [st.U_F @ sb.basis for st, sb in zip(stacks, substs)]
        self.Gy = [st.Y_F @ sb.basis for st, sb in zip(stacks, substs)]
        nb = [sb.basis.shape[1] for sb in substs]
        self.col0 = np.concatenate([[0], np.cumsum(nb)]).astype(int)
        nx = int(self.col0[-1])
        self.nb = nb

        Rb, rb, Qb, qb = _stage_blocks(cost, H)
        self.Rb, self.rb, self.Qb, self.qb = Rb, rb, Qb, qb
        P = np.zeros((nx, nx))
        for j in range(J):
            sl = slice(self.col0[j], self.col0[j + 1])
            P[sl, sl] = 2.0 * (self.Gu[j].T @ Rb @ self.Gu[j] + self.Gy[j].T @ Qb @ self.Gy[j] + lam * np.eye(nb[j]))

        rows = []
        labels: list[str] = []
        ylab = output_labels(q, n_y - q - 1)
        self.seg_rows = []
        for j in range(J):
            st, sb = stacks[j], substs[j]
            sl = slice(self.col0[j], self.col0[j + 1])
            blk_u = np.zeros((H * n_u, nx))
            blk_u[:, sl] = self.Gu[j]
            blk_y = np.zeros((H * n_y, nx))
            blk_y[:, sl] = self.Gy[j]
            past_s = np.zeros((t_ini * q, nx))
            past_e = np.zeros((t_ini * q, nx))
            past_s[:, sl] = st.S_P @ sb.basis
            past_e[:, sl] = st.E_P @ sb.basis
            for i in range(t_ini):
                t = j * H - t_ini + i
                if t < 0:
                    continue
                seg, h = divmod(t, H)
                sl2 = slice(self.col0[seg], self.col0[seg + 1])
                past_s[i * q : (i + 1) * q, sl2] -= Cs @ self.Gu[seg][h * n_u : (h + 1) * n_u]
                past_e[i * q : (i + 1) * q, sl2] -= self.Gy[seg][h * n_y : h * n_y + q]
            blocks = [blk_u, blk_y, past_s, past_e]
            k0 = j * H
            labels += [f"u{i + 1}[k={k0 + h}]" for h in range(H) for i in range(n_u)]
            labels += [f"{nm}[k={k0 + h}]" for h in range(H) for nm in ylab]
            labels += [f"past_s{i + 1}[seg={j},t={p}]" for p in range(t_ini) for i in range(q)]
            labels += [f"past_e{i + 1}[seg={j},t={p}]" for p in range(t_ini) for i in range(q)]
            if full:
                for name in ("U_P", "W_P", "Y_P"):
                    blk = np.zeros((getattr(st, name).shape[0], nx))
                    blk[:, sl] = getattr(st, name) @ sb.basis
                    blocks.append(blk)
                    labels += [f"{name}[{r}]" for r in range(blk.shape[0])]
            seg_block = np.vstack(blocks)
            self.seg_rows.append(seg_block.shape[0])
            rows.append(seg_block)
        A = np.vstack(rows)
        self.labels = labels
        self.solver = QpSolver(P, A, settings)
        self.nx = nx

    def solve(self, past: dict, W, x0=None, y0=None) -> Plan:
        """``past`` holds ``s`` and ``e`` arrays of shape ``(T_ini, q)``, plus
        ``u``, ``w``, ``y`` in full-past mode."""
        J, H, q, t_ini = self.J, self.H, self.q, self.t_ini
        n_u, n_w, n_y = self.n_u, self.n_w, self.n_y
        W = np.asarray(W, dtype=float).reshape(self.L, n_w)
        s_buf = np.asarray(past["s"], dtype=float).reshape(t_ini, q)
        e_buf = np.asarray(past["e"], dtype=float).reshape(t_ini, q)
        b = self.bounds
        alpha0 = [self.substs[j].particular(W[j * H : (j + 1) * H].ravel()) for j in range(J)]
        a_u = [self.stacks[j].U_F @ alpha0[j] for j in range(J)]
        a_y = [self.stacks[j].Y_F @ alpha0[j] for j in range(J)]
        c = np.zeros(self.nx)
        lo_parts, hi_parts = [], []
        const = 0.0
        for j in range(J):
            st = self.stacks[j]
            sl = slice(self.col0[j], self.col0[j + 1])
            c[sl] = self.Gu[j].T @ (2.0 * self.Rb @ a_u[j] + self.rb) + self.Gy[j].T @ (2.0 * self.Qb @ a_y[j] + self.qb)
            const += a_u[j] @ self.Rb @ a_u[j] + self.rb @ a_u[j] + a_y[j] @ self.Qb @ a_y[j] + self.qb @ a_y[j]
            ulo = np.tile(b.u_min, H) - a_u[j]
            uhi = np.tile(b.u_max, H) - a_u[j]
            ylo = np.tile(b.y_min, H) - a_y[j]
            yhi = np.tile(b.y_max, H) - a_y[j]
            if j == 0:
                ylo[:q], yhi[:q] = -np.inf, np.inf
            ps = np.empty(t_ini * q)
            pe = np.empty(t_ini * q)
            for i in range(t_ini):
                t = j * H - t_ini + i
                if t < 0:
                    ps[i * q : (i + 1) * q] = s_buf[t_ini + t]
                    pe[i * q : (i + 1) * q] = e_buf[t_ini + t]
                else:
                    seg, h = divmod(t, H)
                    ps[i * q : (i + 1) * q] = self.Cs @ a_u[seg][h * n_u : (h + 1) * n_u]
                    pe[i * q : (i + 1) * q] = a_y[seg][h * n_y : h * n_y + q]
            ps -= st.S_P @ alpha0[j]
            pe -= st.E_P @ alpha0[j]
            lo_parts += [ulo, ylo, ps, pe]
            hi_parts += [uhi, yhi, ps, pe]
            if self.full:
                for name, key in (("U_P", "u"), ("W_P", "w"), ("Y_P", "y")):
                    val = np.asarray(past[key], dtype=float).ravel() - getattr(st, name) @ alpha0[j]
                    lo_parts.append(val)
                    hi_parts.append(val)
        lo = np.concatenate(lo_parts)
        hi = np.concatenate(hi_parts)
        sol = self.solver.solve(c, lo, hi, x0=x0, y0=y0)
        _finish(sol, self.labels, "data-driven OPF")
        beta = sol.x
        U = np.concatenate([a_u[j] + self.Gu[j] @ beta[self.col0[j] : self.col0[j + 1]] for j in range(J)])
        Y = np.concatenate([a_y[j] + self.Gy[j] @ beta[self.col0[j] : self.col0[j + 1]] for j in range(J)])
        return Plan(u=U.reshape(self.L, n_u), y=Y.reshape(self.L, n_y), objective=float(sol.objective + const),
                    solution=sol, beta=beta)

    def shifted_start(self, sol: QpSolution):
        if self.J == 1:
            return sol.x.copy(), sol.y.copy()
        return _shift(sol.x, self.nb[0]), _shift(sol.y, self.seg_rows[0])


def ddopf_plan(stack: HankelStack, subst: NullspaceSubstitution, cost: StageCost, bounds: Bounds, lam: float,
               init_buffer: dict, w_forecast, storage_selector, settings: QpSettings | None = None) -> Plan:
    """Data-driven plan from a single stack whose future part spans the horizon."""
    tpl = _DdTemplate([stack], [subst], cost, bounds, lam, storage_selector, settings)
    return tpl.solve(init_buffer, w_forecast)


def ddopf_plan_segmented(stacks, substs, cost: StageCost, bounds: Bounds, lam: float, init_buffer: dict,
                         w_forecast, storage_selector, settings: QpSettings | None = None) -> Plan:
    """Data-driven plan chaining one short stack per segment of the horizon.

    ``stacks`` may be a single stack, reused for every segment; the number of
    segments is then the forecast length divided by the stack horizon.
    """
    W = np.atleast_2d(np.asarray(w_forecast, dtype=float))
    if isinstance(stacks, HankelStack):
        J = W.shape[0] // stacks.horizon
        stacks, substs = [stacks] * J, [substs] * J
    tpl = _DdTemplate(list(stacks), list(substs), cost, bounds, lam, storage_selector, settings)
    return tpl.solve(init_buffer, W)


def prepare_stack(data: TrajectoryLog, storage_selector, t_ini: int = 1, horizon: int = 1,
                  past_mode: str = "storage", pe_policy: str = "truncated",
                  target_rank: int | None = None) -> tuple[HankelStack, NullspaceSubstitution]:
    """Build, compress and substitute the data matrices for the controller.

    The stack is always compressed to at most its numerical rank, so that the
    null-space coordinates parametrize distinct trajectories.
    """
    stack = build_simplified_stack(data, storage_selector, t_ini, horizon, past_mode, pe_policy)
    n_u, n_w = data.u.shape[1], data.w.shape[1]
    q = np.atleast_2d(storage_selector).shape[0]
    if target_rank is None:
        target_rank = behavior_dimension(n_u, n_w, q, t_ini, horizon)
    if target_rank < stack.m:
        stack = truncate_rank(stack, target_rank)
    else:
        rank = numerical_rank(stack.stacked())
        if rank < stack.m:
            stack = truncate_rank(stack, rank)
    return stack, nullspace_substitution(stack.W_F)


# ---------------------------------------------------------------------------
# controller objects


@dataclass
class Measurement:
    """What the controller sees at the start of a step.

    ``e`` is the current storage charge; ``past`` holds the most recent
    applied steps (at least ``T_ini`` of them for the data-driven controller).
    """

    e: np.ndarray
    past: TrajectoryLog | None = None


@dataclass
class ControllerState:
    kind: str
    template: object = None
    warm: tuple | None = None
    buffer: dict = field(default_factory=dict)
    solves: int = 0


class Controller:
    kind = "base"

    def __init__(self, settings: QpSettings | None = None, warm_start: bool = True):
        self.settings = settings
        self.warm_start = warm_start
        self.state = ControllerState(kind=self.kind)

    def plan(self, measurement: Measurement, forecast) -> tuple[np.ndarray, dict]:
        tpl = self.state.template
        x0 = y0 = None
        if self.warm_start and self.state.warm is not None:
            x0, y0 = self.state.warm
        plan = self._solve(tpl, measurement, forecast, x0, y0)
        self.state.solves += 1
        if self.warm_start:
            self.state.warm = tpl.shifted_start(plan.solution)
        diag = {
            "objective": plan.objective,
            "y_plan": plan.y,
            "status": plan.status,
            "iterations": plan.solution.iterations,
            "solve_time": plan.solution.solve_time,
            "polished": plan.solution.polished,
        }
        if plan.beta is not None:
            diag["beta"] = plan.beta
        return plan.u, diag

    def reset(self) -> None:
        self.state.warm = None

    def _solve(self, tpl, measurement, forecast, x0, y0) -> Plan:
        raise NotImplementedError


class ExactMpc(Controller):
    kind = "exact"

    def __init__(self, model: ReducedModel, cost: StageCost, bounds: Bounds, horizon: int,
                 settings: QpSettings | None = None, warm_start: bool = True, ptdf: np.ndarray | None = None):
        super().__init__(settings, warm_start)
        self.model = model
        self.horizon = horizon
        self.state.template = _MpcTemplate(model, cost, bounds, horizon, ptdf=ptdf, settings=settings)

    def _solve(self, tpl, measurement, forecast, x0, y0) -> Plan:
        return tpl.solve(measurement.e, forecast, x0=x0, y0=y0)


class SeqIdMpc(ExactMpc):
    """MPC on a PTDF identified from recorded flows and injections."""

    kind = "seqid"

    def __init__(self, model: ReducedModel, cost: StageCost, bounds: Bounds, horizon: int, data: TrajectoryLog,
                 settings: QpSettings | None = None, warm_start: bool = True):
        self.estimate = seqid_estimate_ptdf(data, model)
        super().__init__(model, cost, bounds, horizon, settings, warm_start, ptdf=self.estimate.M_hat)


class DdOpf(Controller):
    """Data-driven OPF. With ``segmented=True`` the horizon is split into
    one-step segments sharing a depth ``T_ini + 1`` stack."""

    kind = "ddopf"

    def __init__(self, data: TrajectoryLog, storage_selector, cost: StageCost, bounds: Bounds, horizon: int,
                 lam: float = 200.0, t_ini: int = 1, segmented: bool = True, past_mode: str = "storage",
                 pe_policy: str = "truncated", target_rank: int | None = None,
                 settings: QpSettings | None = None, warm_start: bool = True):
        super().__init__(settings, warm_start)
        if t_ini < 1:
            raise InvalidParameterError("T_ini must be at least 1 for the data-driven controller")
        if segmented and past_mode == "full" and horizon > 1:
            raise InvalidParameterError("full past mode requires segmented=False")
        self.Cs = np.atleast_2d(np.asarray(storage_selector, dtype=float))
        self.t_ini, self.horizon, self.segmented = t_ini, horizon, segmented
        self.past_mode = past_mode
        seg_h = 1 if segmented else horizon
        self.stack, self.subst = prepare_stack(data, self.Cs, t_ini, seg_h, past_mode, pe_policy, target_rank)
        J = horizon // seg_h
        self.state.template = _DdTemplate([self.stack] * J, [self.subst] * J, cost, bounds, lam, self.Cs, settings)

    def buffer_from(self, past: TrajectoryLog) -> dict:
        if past is None or len(past) < self.t_ini:
            raise InvalidParameterError(f"need at least {self.t_ini} past steps")
        tail = past.slice(len(past) - self.t_ini, len(past))
        q = self.Cs.shape[0]
        buf = {"s": tail.u @ self.Cs.T, "e": tail.y[:, :q]}
        if self.past_mode == "full":
            buf.update(u=tail.u, w=tail.w, y=tail.y)
        return buf

    def _solve(self, tpl, measurement, forecast, x0, y0) -> Plan:
        buf = self.buffer_from(measurement.past)
        self.state.buffer = buf
        return tpl.solve(buf, forecast, x0=x0, y0=y0)
