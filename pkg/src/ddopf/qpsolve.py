"""Dense convex quadratic programming by operator splitting.

Problems have the form::

    minimize    1/2 x'Px + c'x
    subject to  lo <= A x <= hi

The solver is an ADMM iteration with over-relaxation on the Ruiz-equilibrated
problem, an adaptive step size, infeasibility certificates and a polish step
that solves the KKT system on the identified active set. All linear algebra
is dense; :class:`QpSolver` caches the scaling and the factorization so that
repeated solves with new ``c``, ``lo``, ``hi`` only pay for the iterations.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DimensionError, InvalidParameterError

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
MAX_ITER = "max-iter"
PRIMAL_INFEASIBLE = "primal-infeasible"
DUAL_INFEASIBLE = "dual-infeasible"

_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_EQ_RHO_FACTOR = 1e3
_SCALE_MIN, _SCALE_MAX = 1e-4, 1e4


def _norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


@dataclass(eq=False)
class QpProblem:
    P: np.ndarray
    c: np.ndarray
    A: np.ndarray
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        n = self.c.size
        self.P = np.asarray(self.P, dtype=float).reshape(n, n)
        self.P = 0.5 * (self.P + self.P.T)
        self.lo = np.asarray(self.lo, dtype=float).ravel()
        self.hi = np.asarray(self.hi, dtype=float).ravel()
        m = self.lo.size
        self.A = np.asarray(self.A, dtype=float).reshape(m, n)
        if self.hi.size != m:
            raise DimensionError(f"lo has {m} entries, hi has {self.hi.size}")
        if np.any(np.isnan(self.lo)) or np.any(np.isnan(self.hi)):
            raise InvalidParameterError("bounds contain NaN")
        if np.any(self.lo > self.hi):
            bad = np.flatnonzero(self.lo > self.hi)
            raise InvalidParameterError(f"lo > hi in rows {bad[:10].tolist()}")

    @property
    def n(self) -> int:
        return self.c.size

    @property
    def m(self) -> int:
        return self.lo.size

    def objective(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.P @ x + self.c @ x)


@dataclass
class QpSettings:
    eps_abs: float = 1e-8
    eps_rel: float = 1e-8
    eps_prim_inf: float = 1e-7
    eps_dual_inf: float = 1e-7
    max_iter: int = 50_000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    scaling: int = 10
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    check_interval: int = 10
    polish: bool = True
    polish_delta: float = 1e-10
    polish_refine_iter: int = 5
    early_polish: bool = True
    early_polish_trigger: float = 1e-3
    max_polish_attempts: int = 10

    def __post_init__(self):
        if self.eps_abs < 0 or self.eps_rel < 0 or self.eps_abs + self.eps_rel == 0:
            raise InvalidParameterError("tolerances must be nonnegative and not both zero")
        if self.max_iter < 1:
            raise InvalidParameterError("max_iter must be positive")
        if not 0 < self.alpha < 2:
            raise InvalidParameterError("alpha must lie in (0, 2)")
        if self.rho <= 0 or self.sigma <= 0:
            raise InvalidParameterError("rho and sigma must be positive")


@dataclass(eq=False)
class QpSolution:
    x: np.ndarray
    y: np.ndarray  # y_i > 0: upper bound active, y_i < 0: lower bound active
    status: str
    iterations: int
    prim_res: float
    dual_res: float
    solve_time: float
    objective: float
    polished: bool = False
    info: dict = field(default_factory=dict)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


def kkt_residuals(p: QpProblem, x, y) -> tuple[float, float, float]:
    """Stationarity, primal infeasibility and complementarity (inf-norms).

    The complementarity term also counts multipliers pushing against an
    infinite bound, which no optimal point can have.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.size != p.n or y.size != p.m:
        raise DimensionError(f"expected x:{p.n}, y:{p.m}; got {x.size}, {y.size}")
    Ax = p.A @ x
    stat = _norm(p.P @ x + p.c + p.A.T @ y)
    prim = _norm(Ax - np.clip(Ax, p.lo, p.hi))
    yp, ym = np.maximum(y, 0.0), np.maximum(-y, 0.0)
    with np.errstate(invalid="ignore"):
        up = np.where(np.isfinite(p.hi), yp * np.abs(p.hi - Ax), yp)
        lw = np.where(np.isfinite(p.lo), ym * np.abs(Ax - p.lo), ym)
    comp = max(_norm(up), _norm(lw))
    return stat, prim, comp


def _limit(v):
    v = np.asarray(v, dtype=float)
    return np.where(v < _SCALE_MIN, 1.0, np.minimum(v, _SCALE_MAX))


def _ruiz(P, A, c, iters):
    n, m = P.shape[0], A.shape[0]
    D, E, cs = np.ones(n), np.ones(m), 1.0
    Ps, As = P.copy(), A.copy()
    cv = None if c is None else c.copy()
    for _ in range(iters):
        colP = np.abs(Ps).max(axis=0) if n else np.zeros(0)
        colA = np.abs(As).max(axis=0) if m else np.zeros(n)
        dD = 1.0 / np.sqrt(_limit(np.maximum(colP, colA)))
        dE = 1.0 / np.sqrt(_limit(np.abs(As).max(axis=1))) if n else np.ones(m)
        Ps = dD[:, None] * Ps * dD[None, :]
        As = dE[:, None] * As * dD[None, :]
        D *= dD
        E *= dE
        if cv is not None:
            cv = dD * cv
    normP = float(np.mean(np.abs(Ps).max(axis=0))) if n else 0.0
    normc = _norm(cv) if cv is not None else 0.0
    scale = max(float(_limit(normP)), float(_limit(normc))) if (normP or normc) else 1.0
    cs = float(np.clip(1.0 / scale, _SCALE_MIN, _SCALE_MAX))
    return Ps * cs, As, D, E, cs


class QpSolver:
    """Solver bound to fixed ``P`` and ``A``.

    ``c`` and the bounds may change between calls to :meth:`solve`; the
    equilibration and the Gram matrices are computed once.
    """

    def __init__(self, P, A, settings: QpSettings | None = None, c=None):
        self.settings = settings or QpSettings()
        P = np.asarray(P, dtype=float)
        self.n = P.shape[0]
        P = 0.5 * (P + P.T)
        A = np.asarray(A, dtype=float)
        if A.ndim != 2:
            A = A.reshape(-1, self.n)
        if A.shape[1] != self.n:
            raise DimensionError(f"A has {A.shape[1]} columns, P has {self.n}")
        self.m = A.shape[0]
        self._P, self._A = P, A
        c0 = None if c is None else np.asarray(c, dtype=float).ravel()
        self.Ps, self.As, self.D, self.E, self.cs = _ruiz(P, A, c0, self.settings.scaling)
        self.AsT = np.ascontiguousarray(self.As.T)
        self._types = None
        self._Gw = None
        self._base = None
        self._factor = None
        self._rho = None
        self.rho = self.settings.rho
        self.n_factorizations = 0
        n, m = self.n, self.m
        iter_flops = 2.0 * n * n + 4.0 * m * n + 1.0
        self._rho_interval = max(
            self.settings.adaptive_rho_interval, int(0.4 * (n**3 / 3.0) / iter_flops)
        )

    # linear algebra -------------------------------------------------------

    def _row_types(self, lo, hi):
        eq = (hi - lo) <= 1e-12 * np.maximum(1.0, np.abs(lo))
        eq &= np.isfinite(lo)
        free = np.isinf(lo) & np.isinf(hi)
        return eq, free

    def _prepare(self, eq, free):
        key = (eq.tobytes(), free.tobytes())
        if self._types == key:
            return
        self._types = key
        s = self.settings
        weight = np.where(eq, _EQ_RHO_FACTOR, np.where(free, 0.0, 1.0))
        self._Gw = self.AsT @ (weight[:, None] * self.As)
        self._base = self.Ps + s.sigma * np.eye(self.n)
        if np.any(free):
            Af = self.As[free]
            self._base = self._base + _RHO_MIN * (Af.T @ Af)
        self._eq, self._free = eq, free
        self._factor = None

    def _rho_vec(self, rho):
        return np.where(self._eq, _EQ_RHO_FACTOR * rho, np.where(self._free, _RHO_MIN, rho))

    def _factorize(self, rho):
        if self._factor is not None and self._rho == rho:
            return
        K = self._base + rho * self._Gw
        self._factor = sla.cho_factor(K, lower=False, check_finite=False)
        self._rho = rho
        self.n_factorizations += 1

    # polish ---------------------------------------------------------------

    def _polish(self, x, z, y, c, lo, hi):
        s = self.settings
        n = self.n
        with np.errstate(invalid="ignore"):
            low = (z - lo) < -y
            upp = (hi - z) < y
        eq = self._eq
        act = low | upp | eq
        b = np.where(upp & ~low, hi, lo)
        b = np.where(eq, lo, b)
        idx = np.flatnonzero(act)
        Aa = self.As[idx]
        na = idx.size
        K0 = np.zeros((n + na, n + na))
        K0[:n, :n] = self.Ps
        K0[:n, n:] = Aa.T
        K0[n:, :n] = Aa
        K = K0.copy()
        K[:n, :n] += s.polish_delta * np.eye(n)
        K[n:, n:] -= s.polish_delta * np.eye(na)
        rhs = np.concatenate([-c, b[idx]])
        try:
            lu = sla.lu_factor(K, check_finite=False)
        except (ValueError, sla.LinAlgError):
            return None
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(s.polish_refine_iter):
            r = rhs - K0 @ sol
            if _norm(r) <= 1e-15 * max(1.0, _norm(rhs)):
                break
            sol = sol + sla.lu_solve(lu, r, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        xp = sol[:n]
        yp = np.zeros(self.m)
        yp[idx] = sol[n:]
        zp = np.clip(self.As @ xp, lo, hi)
        return xp, zp, yp, act

    # residuals in the original units -------------------------------------

    def _residuals(self, x, z, y, c):
        cs, D, E = self.cs, self.D, self.E
        Ax = self.As @ x
        Px = self.Ps @ x
        ATy = self.AsT @ y
        prim = _norm((Ax - z) / E) if self.m else 0.0
        dual = _norm((Px + c + ATy) / D) / cs
        s = self.settings
        eps_p = s.eps_abs + s.eps_rel * max(_norm(Ax / E), _norm(z / E)) if self.m else s.eps_abs
        eps_d = s.eps_abs + s.eps_rel * max(_norm(Px / D), _norm(ATy / D), _norm(c / D)) / cs
        return prim, dual, eps_p, eps_d, Ax, Px, ATy

    def _accept_polish(self, x, y, c, lo, hi):
        """Check a polished point against tolerances in original units."""
        s = self.settings
        xu = self.D * x
        yu = self.E * y / self.cs
        cu = c / self.D / self.cs
        p = self._unscaled_problem(cu, lo / self.E, hi / self.E)
        stat, prim, comp = kkt_residuals(p, xu, yu)
        Ax = self._A @ xu
        eps_p = s.eps_abs + s.eps_rel * _norm(Ax)
        eps_d = s.eps_abs + s.eps_rel * max(_norm(self._P @ xu), _norm(self._A.T @ yu), _norm(cu))
        eps_c = s.eps_abs + s.eps_rel * max(1.0, _norm(yu)) * max(1.0, _norm(Ax))
        ok = stat <= eps_d and prim <= eps_p and comp <= eps_c
        return ok, stat, prim

    def _unscaled_problem(self, c, lo, hi):
        p = QpProblem.__new__(QpProblem)
        p.P, p.c, p.A, p.lo, p.hi = self._P, c, self._A, lo, hi
        return p

    # certificates ---------------------------------------------------------

    def _primal_infeasible(self, dy, lo, hi):
        dyu = self.E * dy
        nrm = _norm(dyu)
        if nrm < 1e-30:
            return False
        dyu = dyu / nrm
        eps = self.settings.eps_prim_inf
        if _norm((self.AsT @ (dy / nrm)) / self.D) > eps:
            return False
        lo_u, hi_u = lo / self.E, hi / self.E
        pos, neg = np.maximum(dyu, 0.0), np.minimum(dyu, 0.0)
        with np.errstate(invalid="ignore"):
            terms = np.where(pos > 0, hi_u * pos, 0.0) + np.where(neg < 0, lo_u * neg, 0.0)
        return bool(np.sum(terms) < -eps)

    def _dual_infeasible(self, dx, c):
        dxu = self.D * dx
        nrm = _norm(dxu)
        if nrm < 1e-30:
            return False
        dxs = dx / nrm
        eps = self.settings.eps_dual_inf
        if _norm((self.Ps @ dxs) / self.D) / self.cs > eps:
            return False
        if (c @ dxs) / self.cs > -eps:
            return False
        Adx = (self.As @ dxs) / self.E if self.m else np.zeros(0)
        lo_inf, hi_inf = self._lo_inf, self._hi_inf
        ok_hi = hi_inf | (Adx <= eps)
        ok_lo = lo_inf | (Adx >= -eps)
        return bool(np.all(ok_hi & ok_lo))

    # main entry -----------------------------------------------------------

    def solve(self, c, lo, hi, x0=None, y0=None) -> QpSolution:
        t0 = time.perf_counter()
        s = self.settings
        n, m = self.n, self.m
        c_u = np.asarray(c, dtype=float).ravel()
        lo_u = np.asarray(lo, dtype=float).ravel()
        hi_u = np.asarray(hi, dtype=float).ravel()
        if c_u.size != n or lo_u.size != m or hi_u.size != m:
            raise DimensionError(f"expected c:{n}, lo/hi:{m}; got {c_u.size}, {lo_u.size}, {hi_u.size}")
        if np.any(lo_u > hi_u):
            raise InvalidParameterError("lo > hi")
        if n == 0:
            feas = bool(np.all(lo_u <= 0.0) and np.all(hi_u >= 0.0))
            return QpSolution(
                np.zeros(0), np.zeros(m), OPTIMAL if feas else PRIMAL_INFEASIBLE, 0, 0.0, 0.0,
                time.perf_counter() - t0, 0.0,
            )
        self._lo_inf, self._hi_inf = np.isinf(lo_u), np.isinf(hi_u)
        D, E, cs = self.D, self.E, self.cs
        cb = cs * D * c_u
        lob, hib = E * lo_u, E * hi_u
        self._prepare(*self._row_types(lo_u, hi_u))

        x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel() / D
        y = np.zeros(m) if y0 is None else cs * np.asarray(y0, dtype=float).ravel() / E
        z = np.clip(self.As @ x, lob, hib)
        rho = self.rho
        self._factorize(rho)
        rho_vec = self._rho_vec(rho)

        status = MAX_ITER
        polished = False
        attempts = 0
        prev_sig = None
        failed_sig = None
        prim = dual = np.inf
        it = 0
        info: dict = {}
        for it in range(1, s.max_iter + 1):
            x_prev, z_prev, y_prev = x, z, y
            rhs = s.sigma * x_prev - cb + self.AsT @ (rho_vec * z_prev - y_prev)
            xt = sla.cho_solve(self._factor, rhs, check_finite=False)
            zt = self.As @ xt
            x = s.alpha * xt + (1.0 - s.alpha) * x_prev
            zr = s.alpha * zt + (1.0 - s.alpha) * z_prev
            z = np.clip(zr + y_prev / rho_vec, lob, hib)
            y = y_prev + rho_vec * (zr - z)

            check = it % s.check_interval == 0 or it == s.max_iter
            adapt = s.adaptive_rho and it % self._rho_interval == 0
            if not (check or adapt):
                continue
            prim, dual, eps_p, eps_d, Ax, Px, ATy = self._residuals(x, z, y, cb)
            if check:
                if prim <= eps_p and dual <= eps_d:
                    status = OPTIMAL
                    break
                if m and self._primal_infeasible(y - y_prev, lob, hib):
                    status = PRIMAL_INFEASIBLE
                    info["certificate"] = self.E * (y - y_prev)
                    break
                if self._dual_infeasible(x - x_prev, cb):
                    status = DUAL_INFEASIBLE
                    info["certificate"] = D * (x - x_prev)
                    break
                if s.polish and s.early_polish and attempts < s.max_polish_attempts:
                    with np.errstate(invalid="ignore"):
                        sig = (((z - lob) < -y) | ((hib - z) < y)).tobytes()
                    near = prim <= s.early_polish_trigger * (1.0 + _norm(Ax / E))
                    near = near and dual <= s.early_polish_trigger * (1.0 + _norm(cb / D) / cs)
                    if near and sig == prev_sig and sig != failed_sig:
                        attempts += 1
                        res = self._polish(x, z, y, cb, lob, hib)
                        if res is not None:
                            ok, _, _ = self._accept_polish(res[0], res[2], cb, lob, hib)
                            if ok:
                                x, z, y = res[0], res[1], res[2]
                                status = OPTIMAL
                                polished = True
                                break
                        failed_sig = sig
                    prev_sig = sig
            if adapt:
                ps = _norm(Ax - z)
                ds = _norm(Px + cb + ATy)
                pn = max(_norm(Ax), _norm(z), 1e-30)
                dn = max(_norm(Px), _norm(ATy), _norm(cb), 1e-30)
                ratio = np.sqrt((ps / pn) / (ds / dn + 1e-30)) if ps > 0 else 1.0
                new_rho = float(np.clip(rho * ratio, _RHO_MIN, _RHO_MAX))
                if new_rho > rho * s.adaptive_rho_tolerance or new_rho < rho / s.adaptive_rho_tolerance:
                    rho = new_rho
                    self._factorize(rho)
                    rho_vec = self._rho_vec(rho)
        self.rho = rho

        if status == OPTIMAL and s.polish and not polished:
            res = self._polish(x, z, y, cb, lob, hib)
            if res is not None:
                ok, _, _ = self._accept_polish(res[0], res[2], cb, lob, hib)
                if ok:
                    x, z, y = res[0], res[1], res[2]
                    polished = True

        if status in (OPTIMAL, MAX_ITER):
            prim, dual, *_ = self._residuals(x, z, y, cb)
        x_u = D * x
        y_u = E * y / cs
        objective = float(0.5 * x_u @ self._P @ x_u + c_u @ x_u)
        if status == PRIMAL_INFEASIBLE:
            objective = np.inf
        elif status == DUAL_INFEASIBLE:
            objective = -np.inf
        info.update(rho=rho, factorizations=self.n_factorizations, polish_attempts=attempts)
        return QpSolution(
            x=x_u,
            y=y_u,
            status=status,
            iterations=it,
            prim_res=float(prim),
            dual_res=float(dual),
            solve_time=time.perf_counter() - t0,
            objective=objective,
            polished=polished,
            info=info,
        )


def solve(p: QpProblem, settings: QpSettings | None = None, x0=None, y0=None) -> QpSolution:
    """Solve a single problem; see :class:`QpSolver` for repeated solves."""
    solver = QpSolver(p.P, p.A, settings, c=p.c)
    return solver.solve(p.c, p.lo, p.hi, x0=x0, y0=y0)
