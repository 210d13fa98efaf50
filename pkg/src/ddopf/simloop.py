"""Experiment orchestration: demand scenarios, excitation data, measurement
noise, receding-horizon closed loop and controller comparison.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .case_io import DemandSeries, load_case, load_demand_csv
from .controllers import (
    Bounds,
    Controller,
    CostSettings,
    DdOpf,
    ExactMpc,
    Measurement,
    SeqIdMpc,
    StageCost,
    build_bounds,
    build_stage_cost,
)
from .errors import InfeasibleScheduleError, InvalidParameterError
from .hankel import check_persistency
from .netmodel import GridCase, ReducedModel, reduce
from .plant import PlantState, QuasiWeierstrass, TrajectoryLog, assemble_descriptor, step
from .qpsolve import QpSettings

log = logging.getLogger(__name__)

CONTROLLER_KINDS = ("exact", "seqid", "ddopf")


@dataclass
class DemandProfile:
    diurnal_amplitude: float = 0.15
    fluctuation_std: float = 0.03
    fluctuation_ar: float = 0.8  # AR(1) coefficient of the per-demand fluctuation
    period_hours: float = 24.0
    floor: float = 0.05  # lower clip as a fraction of the nominal demand


@dataclass
class ExperimentConfig:
    case: str = "case6"
    controllers: list[str] = field(default_factory=lambda: list(CONTROLLER_KINDS))
    horizon: int = 12
    control_horizon: int = 1
    steps: int = 96
    data_length: int = 417
    delta_hours: float | None = None  # None: use the case's period
    lam: float = 200.0
    noise_ratio: float = 0.01
    online_noise: bool = False
    seed: int = 0
    excitation_seed: int | None = None
    noise_seed: int | None = None
    demand_seed: int | None = None
    pe_policy: str = "truncated"
    t_ini: int = 1
    segmented: bool = True
    past_mode: str = "storage"
    target_rank: int | None = None
    excitation_amplitude: float = 0.1
    excitation_horizon: int | None = None  # None: same as horizon
    price_slack: bool = False
    flow_quad: float = 1e-5
    demand_file: str | None = None
    demand: DemandProfile = field(default_factory=DemandProfile)
    infeasible_policy: str = "abort"
    violation_tol: float = 1e-6
    qp_eps_abs: float = 1e-8
    qp_eps_rel: float = 1e-8
    qp_max_iter: int = 50_000
    qp_polish: bool = True
    record_timing: bool = True

    def __post_init__(self):
        if isinstance(self.demand, dict):
            self.demand = DemandProfile(**self.demand)
        self.controllers = list(self.controllers)
        self.validate()

    def validate(self) -> None:
        if not 1 <= self.control_horizon <= self.horizon:
            raise InvalidParameterError("need 1 <= control_horizon <= horizon")
        if self.steps < 1:
            raise InvalidParameterError("steps must be at least 1")
        if self.delta_hours is not None and self.delta_hours <= 0:
            raise InvalidParameterError("delta_hours must be positive")
        if self.lam < 0:
            raise InvalidParameterError("lam must be nonnegative")
        if self.noise_ratio < 0:
            raise InvalidParameterError("noise_ratio must be nonnegative")
        if self.t_ini < 1:
            raise InvalidParameterError("t_ini must be at least 1")
        if self.data_length < 1:
            raise InvalidParameterError("data_length must be positive")
        unknown = [c for c in self.controllers if c not in CONTROLLER_KINDS]
        if unknown:
            raise InvalidParameterError(f"unknown controllers {unknown}; choose from {CONTROLLER_KINDS}")
        if self.pe_policy not in ("strict", "truncated"):
            raise InvalidParameterError(f"unknown PE policy {self.pe_policy!r}")
        if self.infeasible_policy not in ("abort", "hold"):
            raise InvalidParameterError(f"unknown infeasibility policy {self.infeasible_policy!r}")
        if self.past_mode not in ("storage", "full"):
            raise InvalidParameterError(f"unknown past mode {self.past_mode!r}")

    def seeds(self) -> tuple[int, int, int]:
        """Excitation, noise and demand seeds; unset ones derive from ``seed``."""
        ex = self.seed if self.excitation_seed is None else self.excitation_seed
        no = self.seed + 1 if self.noise_seed is None else self.noise_seed
        de = self.seed + 2 if self.demand_seed is None else self.demand_seed
        return ex, no, de

    def qp_settings(self) -> QpSettings:
        return QpSettings(eps_abs=self.qp_eps_abs, eps_rel=self.qp_eps_rel, max_iter=self.qp_max_iter,
                          polish=self.qp_polish)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - names)
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {unknown}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RunMetrics:
    controller: str
    stage_costs: list[float] = field(default_factory=list)
    max_abs_flow: list[float] = field(default_factory=list)
    flow_ratio: list[float] = field(default_factory=list)  # max |f_i| / f_i^max per step
    solve_times: list[float] = field(default_factory=list)
    solve_steps: list[int] = field(default_factory=list)
    charges: list[list[float]] = field(default_factory=list)  # e(k) measured at each step
    violations: list[dict] = field(default_factory=list)
    infeasible_steps: list[int] = field(default_factory=list)

    @property
    def J_CL(self) -> float:
        return float(math.fsum(self.stage_costs))

    @property
    def median_solve_s(self) -> float:
        return float(np.median(self.solve_times)) if self.solve_times else float("nan")

    def summary(self) -> dict:
        return {
            "J_CL": self.J_CL,
            "median_solve_s": self.median_solve_s,
            "violations": len(self.violations),
            "flow_violation_steps": len({v["step"] for v in self.violations if v["kind"] == "flow"}),
            "max_flow_ratio": max(self.flow_ratio) if self.flow_ratio else float("nan"),
            "solves": len(self.solve_times),
            "infeasible_steps": list(self.infeasible_steps),
        }

    def result_rows(self, record_timing: bool = True) -> list[dict]:
        times = dict(zip(self.solve_steps, self.solve_times))
        rows = []
        for k, cost in enumerate(self.stage_costs):
            t = times.get(k) if record_timing else None
            rows.append({
                "step": k,
                "controller": self.controller,
                "stage_cost": cost,
                "max_abs_flow": self.max_abs_flow[k],
                "solve_seconds": t,
                "e": self.charges[k],
            })
        return rows


# ---------------------------------------------------------------------------
# scenario generation


def generate_demand_series(case: GridCase, length: int, seed: int, profile: DemandProfile | None = None,
                           delta_hours: float | None = None) -> DemandSeries:
    """Nominal demand times a diurnal sinusoid plus an AR(1) fluctuation."""
    p = profile or DemandProfile()
    delta = case.delta_hours if delta_hours is None else delta_hours
    rng = np.random.default_rng(seed)
    nominal = case.nominal_demand()
    n_w = nominal.size
    k = np.arange(length)
    diurnal = p.diurnal_amplitude * np.sin(2.0 * np.pi * k * delta / p.period_hours)
    fluct = np.zeros((length, n_w))
    if p.fluctuation_std > 0 and length:
        a = p.fluctuation_ar
        innov = rng.standard_normal((length, n_w)) * p.fluctuation_std * math.sqrt(1.0 - a * a)
        fluct[0] = rng.standard_normal(n_w) * p.fluctuation_std
        for t in range(1, length):
            fluct[t] = a * fluct[t - 1] + innov[t]
    factor = np.maximum(1.0 + diurnal[:, None] + fluct, p.floor)
    return DemandSeries(nominal[None, :] * factor, delta)


def _storage_power_limits(case: GridCase, e: np.ndarray, delta: float):
    """Storage powers that keep the next charge within bounds."""
    st = case.storages
    lo = np.array([max(s.s_min, (ei - s.e_max) / delta) for s, ei in zip(st, e)])
    hi = np.array([min(s.s_max, (ei - s.e_min) / delta) for s, ei in zip(st, e)])
    return lo, np.maximum(hi, lo)


def generate_excitation(sys: QuasiWeierstrass, model: ReducedModel, cost: StageCost, bounds: Bounds,
                        demand: DemandSeries, T: int, amplitude: float = 0.1, seed: int = 0,
                        e0=None, horizon: int = 12, pe_policy: str = "truncated",
                        pe_horizon: int = 1, settings: QpSettings | None = None) -> TrajectoryLog:
    """Offline record: exact-MPC dispatch with uniform random perturbations.

    Each input is offset by ``amplitude`` times its range, uniformly at
    random, then clipped to its bounds; storage powers are further clipped
    so the charge stays within bounds.
    """
    if len(demand) < T + horizon:
        raise InvalidParameterError(f"demand series needs {T + horizon} steps, has {len(demand)}")
    case = model.case
    delta = model.delta
    e = np.array([s.e0 for s in case.storages]) if e0 is None else np.asarray(e0, dtype=float).copy()
    rng = np.random.default_rng(seed)
    ctrl = ExactMpc(model, cost, bounds, horizon, settings=settings)
    span = bounds.u_max - bounds.u_min
    q, n_u = model.q, model.n_u
    us = np.empty((T, n_u))
    ys = np.empty((T, model.n_y))
    state = PlantState(e, delta)
    for k in range(T):
        u_plan, _ = ctrl.plan(Measurement(e=state.e), demand.window(k, horizon))
        u = u_plan[0] + amplitude * span * rng.uniform(-1.0, 1.0, n_u)
        u = np.clip(u, bounds.u_min, bounds.u_max)
        if q:
            lo, hi = _storage_power_limits(case, state.e, delta)
            u[n_u - q :] = np.clip(u[n_u - q :], lo, hi)
        us[k] = u
        state, ys[k] = step(sys, state, u, demand.values[k])
    data = TrajectoryLog(us, demand.values[:T].copy(), ys, meta={"e_final": state.e.copy(), "q": q})
    data.meta["pe"] = check_persistency(data.u, data.w, q, pe_horizon, pe_policy)
    return data


def add_measurement_noise(log_: TrajectoryLog, ratio: float, seed: int, q: int | None = None) -> TrajectoryLog:
    """Gaussian noise on the flow outputs, scaled per channel to ``ratio``
    times the RMS of the clean signal."""
    if ratio < 0:
        raise InvalidParameterError("noise ratio must be nonnegative")
    out = log_.copy()
    if ratio == 0:
        return out
    q = log_.meta.get("q") if q is None else q
    if q is None:
        raise InvalidParameterError("number of storages unknown; pass q")
    f = log_.y[:, q + 1 :]
    rms = np.sqrt(np.mean(f**2, axis=0))
    rng = np.random.default_rng(seed)
    out.y[:, q + 1 :] = f + rng.standard_normal(f.shape) * (ratio * rms)
    out.meta["noise_ratio"] = ratio
    return out


# ---------------------------------------------------------------------------
# closed loop


def _log_violations(metrics: RunMetrics, k: int, u, y, bounds: Bounds, q: int, tol: float) -> None:
    groups = [("u", u, bounds.u_min, bounds.u_max, 0)]
    groups.append(("e", y[:q], bounds.y_min[:q], bounds.y_max[:q], 0))
    groups.append(("p1", y[q : q + 1], bounds.y_min[q : q + 1], bounds.y_max[q : q + 1], q))
    groups.append(("flow", y[q + 1 :], bounds.y_min[q + 1 :], bounds.y_max[q + 1 :], q + 1))
    for kind, v, lo, hi, _ in groups:
        over = v - hi
        under = lo - v
        for i in np.flatnonzero((over > tol) | (under > tol)):
            limit = hi[i] if over[i] > tol else lo[i]
            metrics.violations.append({
                "step": k, "kind": kind, "index": int(i), "value": float(v[i]), "limit": float(limit),
                "margin": float(max(over[i], under[i])),
            })


def closed_loop(sys: QuasiWeierstrass, controller: Controller, demand: DemandSeries, config: ExperimentConfig,
                cost: StageCost, bounds: Bounds, e0, past: TrajectoryLog, start: int = 0,
                noise_rms: np.ndarray | None = None) -> tuple[RunMetrics, TrajectoryLog]:
    """Receding-horizon loop with exact demand foresight.

    ``past`` is the record preceding ``start``; the data-driven controller
    reads its measurement buffer from it. Stage costs are evaluated on the
    applied inputs and the plant outputs.
    """
    L, Lc, steps = config.horizon, config.control_horizon, config.steps
    q = sys.q
    if len(demand) < start + steps + L - 1:
        raise InvalidParameterError(f"demand series needs {start + steps + L - 1} steps, has {len(demand)}")
    state = PlantState(np.asarray(e0, dtype=float).copy(), demand.delta_hours)
    metrics = RunMetrics(controller=controller.kind)
    hist_u, hist_w, hist_y = [past.u], [past.w], [past.y]
    us, ws, ys = [], [], []
    rng = np.random.default_rng(config.seeds()[1] + 1000) if config.online_noise and noise_rms is not None else None
    last_u = past.u[-1] if len(past) else np.zeros(sys.n_u)
    k = 0
    while k < steps:
        W = demand.window(start + k, L)
        buf = TrajectoryLog(np.vstack(hist_u), np.vstack(hist_w), np.vstack(hist_y))
        t0 = time.perf_counter()
        try:
            u_plan, _ = controller.plan(Measurement(e=state.e.copy(), past=buf), W)
            infeasible = False
        except InfeasibleScheduleError as exc:
            if config.infeasible_policy == "abort":
                raise InfeasibleScheduleError(f"step {k}: {exc}", exc.violated, exc.status) from exc
            log.warning("step %d: infeasible OCP, holding previous input", k)
            u_plan = np.tile(last_u, (Lc, 1))
            infeasible = True
            controller.reset()
        metrics.solve_times.append(time.perf_counter() - t0)
        metrics.solve_steps.append(k)
        for j in range(min(Lc, steps - k)):
            u = u_plan[j]
            w = demand.values[start + k]
            if infeasible:
                metrics.infeasible_steps.append(k)
                metrics.violations.append({"step": k, "kind": "infeasible", "index": -1, "value": float("nan"),
                                           "limit": float("nan"), "margin": float("nan")})
            state, y = step(sys, state, u, w)
            metrics.stage_costs.append(cost(u, y))
            flows = y[q + 1 :]
            limits = bounds.y_max[q + 1 :]
            metrics.max_abs_flow.append(float(np.abs(flows).max()) if flows.size else 0.0)
            metrics.flow_ratio.append(float((np.abs(flows) / limits).max()) if flows.size else 0.0)
            metrics.charges.append(y[:q].tolist())
            _log_violations(metrics, k, u, y, bounds, q, config.violation_tol)
            y_meas = y.copy()
            if rng is not None:
                y_meas[q + 1 :] += rng.standard_normal(flows.size) * noise_rms
            us.append(u)
            ws.append(w)
            ys.append(y)
            hist_u.append(u[None, :])
            hist_w.append(w[None, :])
            hist_y.append(y_meas[None, :])
            last_u = u
            k += 1
    traj = TrajectoryLog(np.array(us), np.array(ws), np.array(ys), meta={"e_final": state.e.copy(), "q": q})
    return metrics, traj


# ---------------------------------------------------------------------------
# full experiment


@dataclass(eq=False)
class Scenario:
    case: GridCase
    model: ReducedModel
    sys: QuasiWeierstrass
    cost: StageCost
    bounds: Bounds
    demand: DemandSeries
    data: TrajectoryLog  # clean offline record
    noisy: TrajectoryLog  # what the data-based controllers see


def prepare_scenario(config: ExperimentConfig, case: GridCase | None = None,
                     demand: DemandSeries | None = None) -> Scenario:
    case = case or load_case(config.case)
    if config.delta_hours is not None:
        case = replace(case, delta_hours=float(config.delta_hours))
    model = reduce(case)
    sys = assemble_descriptor(model)
    cost = build_stage_cost(case, CostSettings(flow_quad=config.flow_quad, price_slack=config.price_slack))
    bounds = build_bounds(case)
    ex_seed, noise_seed, demand_seed = config.seeds()
    H_exc = config.excitation_horizon or config.horizon
    need = config.data_length + config.steps + max(config.horizon, H_exc)
    if demand is None:
        if config.demand_file:
            demand = load_demand_csv(config.demand_file, case)
        else:
            demand = generate_demand_series(case, need, demand_seed, config.demand)
    if len(demand) < need - 1:
        raise InvalidParameterError(f"demand series needs {need - 1} steps, has {len(demand)}")
    pe_h = 1 if config.segmented else config.horizon
    settings = config.qp_settings()
    data = generate_excitation(sys, model, cost, bounds, demand, config.data_length, config.excitation_amplitude,
                               ex_seed, horizon=H_exc, pe_policy=config.pe_policy, pe_horizon=pe_h,
                               settings=settings)
    noisy = add_measurement_noise(data, config.noise_ratio, noise_seed, model.q)
    return Scenario(case, model, sys, cost, bounds, demand, data, noisy)


def build_controller(kind: str, scen: Scenario, config: ExperimentConfig) -> Controller:
    settings = config.qp_settings()
    m = scen.model
    if kind == "exact":
        return ExactMpc(m, scen.cost, scen.bounds, config.horizon, settings=settings)
    if kind == "seqid":
        return SeqIdMpc(m, scen.cost, scen.bounds, config.horizon, scen.noisy, settings=settings)
    if kind == "ddopf":
        return DdOpf(scen.noisy, m.Cs_red, scen.cost, scen.bounds, config.horizon, lam=config.lam,
                     t_ini=config.t_ini, segmented=config.segmented, past_mode=config.past_mode,
                     pe_policy=config.pe_policy, target_rank=config.target_rank, settings=settings)
    raise InvalidParameterError(f"unknown controller {kind!r}")


def run_controller(kind: str, scen: Scenario, config: ExperimentConfig) -> tuple[RunMetrics, TrajectoryLog]:
    ctrl = build_controller(kind, scen, config)
    f_rms = np.sqrt(np.mean(scen.data.y[:, scen.model.q + 1 :] ** 2, axis=0))
    return closed_loop(scen.sys, ctrl, scen.demand, config, scen.cost, scen.bounds, scen.data.meta["e_final"],
                       scen.data, start=config.data_length, noise_rms=config.noise_ratio * f_rms)


def compare_controllers(config: ExperimentConfig, scenario: Scenario | None = None) -> dict[str, RunMetrics]:
    """Run every configured controller on one shared scenario."""
    if not config.controllers:
        return {}
    scen = scenario or prepare_scenario(config)
    out = {}
    for kind in config.controllers:
        log.info("running %s on %s", kind, config.case)
        out[kind], _ = run_controller(kind, scen, config)
    return out


def metrics_summary(results: dict[str, RunMetrics], record_timing: bool = True) -> dict:
    summary = {}
    for kind, m in results.items():
        s = m.summary()
        if not record_timing:
            s["median_solve_s"] = None
        summary[kind] = s
    return summary
