"""Rollout accuracy, conservation drift and the partial-n_c comparison."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .dynamics import predict, weight_arrays
from .models import ParamStore
from .odeint import EVAL, TRUTH, IntegratorConfig, Trajectory, integrate
from .physics import SystemSpec, force_profile, get_system, simulate

EVAL_VERSION = 1


def percentile_summary(values) -> tuple[float, float, float]:
    """(median, 2.5th, 97.5th) percentiles with linear interpolation between ranks."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan"), float("nan")
    lo, med, hi = np.percentile(v, [2.5, 50.0, 97.5], method="linear")
    return float(med), float(lo), float(hi)


@dataclass
class EvalReport:
    method: str
    case: str
    rmse: list[float] = field(default_factory=list)  # nan where the rollout failed
    failed: list[bool] = field(default_factory=list)
    fail_times: list[float | None] = field(default_factory=list)

    @property
    def completed(self) -> np.ndarray:
        return np.array([r for r, f in zip(self.rmse, self.failed) if not f])

    @property
    def n_fail(self) -> int:
        return int(sum(self.failed))

    @property
    def summary(self) -> tuple[float, float, float]:
        return percentile_summary(self.completed)

    @property
    def median(self) -> float:
        return self.summary[0]

    @property
    def p_lo(self) -> float:
        return self.summary[1]

    @property
    def p_hi(self) -> float:
        return self.summary[2]

    def row(self) -> list:
        med, lo, hi = self.summary
        return [self.method, self.case, med, lo, hi, self.n_fail]

    def to_json(self) -> str:
        return json.dumps({
            "version": EVAL_VERSION, "method": self.method, "case": self.case,
            "rmse": [None if f else r for r, f in zip(self.rmse, self.failed)],
            "failed": self.failed, "fail_times": self.fail_times,
        })


REPORT_HEADER = ["method", "case", "median", "p2.5", "p97.5", "n_fail"]


def write_report_csv(reports, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_HEADER)
        for r in reports:
            w.writerow(r.row())


ModelLike = ParamStore | Callable


def model_field(model: ModelLike, force=None) -> Callable[[float, np.ndarray], np.ndarray]:
    """``f(t, s)`` from a checkpoint or from a plain ``fn(s, x)``."""
    if isinstance(model, ParamStore):
        weights, config = weight_arrays(model), model.config

        def fn(s, x):
            return predict(weights, s, x, config)
    else:
        fn = model

    def f(t, s):
        return fn(s, None if force is None else force(t))

    return f


def rollout(model: ModelLike, s0, t_eval, force=None,
            config: IntegratorConfig | None = None) -> Trajectory:
    t_eval = np.asarray(t_eval, dtype=np.float64)
    return integrate(model_field(model, force), s0, (t_eval[0], t_eval[-1]), t_eval,
                     config or EVAL)


def initial_conditions(system: SystemSpec, n_sims: int, seed: int):
    """Initial states (and force profiles for forced systems) for evaluation."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_sims):
        s0 = system.init_sampler(rng)
        a = system.force_sampler(rng) if system.force_sampler is not None else None
        out.append((s0, a))
    return out


def rollout_rmse(model: ModelLike, system: SystemSpec | str, n_sims: int = 100,
                 t_end: float = 100.0, n_points: int = 1000, seed: int = 12345,
                 method: str = "model", config: IntegratorConfig | None = None,
                 keep: list | None = None) -> EvalReport:
    """Per-simulation RMSE between learned and exact rollouts from shared initial states.

    RMSE pools every state component and every sample time of a simulation.
    Failed learned rollouts are recorded and left out of the percentiles.
    ``keep``, if given, collects (t, truth, prediction) per simulation.
    """
    system = get_system(system) if isinstance(system, str) else system
    t_eval = np.linspace(0.0, t_end, n_points)
    report = EvalReport(method, system.name)
    for s0, a in initial_conditions(system, n_sims, seed):
        force = force_profile(a) if a is not None else None
        truth = simulate(system, s0, t_eval, force, TRUTH)
        if not truth.ok:
            raise RuntimeError(f"reference simulation failed at t={truth.t_fail}")
        pred = rollout(model, s0, t_eval, force, config)
        if pred.ok:
            err = float(np.sqrt(np.mean((pred.states - truth.states) ** 2)))
            report.rmse.append(err)
            report.failed.append(False)
            report.fail_times.append(None)
        else:
            report.rmse.append(float("nan"))
            report.failed.append(True)
            report.fail_times.append(pred.t_fail)
        if keep is not None:
            keep.append((t_eval[:len(pred.states)], truth.states, pred.states))
    return report


@dataclass
class DriftSeries:
    names: tuple[str, ...]
    times: np.ndarray
    drift: np.ndarray  # (n_times, n_quantities), c(t) - c(0)
    status: str = "complete"
    t_fail: float | None = None

    def max_abs(self, name: str) -> float:
        k = self.names.index(name)
        return float(np.max(np.abs(self.drift[:, k]))) if len(self.drift) else float("nan")


def conservation_drift(model: ModelLike, system: SystemSpec | str, s0, t_end: float = 100.0,
                       n_points: int = 1000, force_value: float | None = None,
                       config: IntegratorConfig | None = None) -> DriftSeries:
    """Track the system's known quantities along the model's rollout.

    Forced systems are tested under a constant external force
    ``force_value`` (0 if not given), for which the constants are defined.
    """
    system = get_system(system) if isinstance(system, str) else system
    t_eval = np.linspace(0.0, t_end, n_points)
    force = None
    x_const = None
    if system.n_x:
        x_const = np.full(system.n_x, 0.0 if force_value is None else float(force_value))
        force = lambda t: x_const  # noqa: E731
    traj = rollout(model, s0, t_eval, force, config)
    q = system.quantities(traj.states, None if x_const is None else
                          np.broadcast_to(x_const, (len(traj.states), system.n_x)))
    drift = q - q[:1] if len(q) else q
    return DriftSeries(system.quantity_names, traj.times, drift, traj.status, traj.t_fail)


def partial_ncom_study(system: SystemSpec | str, models: Mapping[str, ModelLike],
                       **eval_kwargs) -> dict[str, EvalReport]:
    """Rollout reports keyed by n_c label (e.g. "1", "2", "Full"), same initial states for all."""
    system = get_system(system) if isinstance(system, str) else system
    return {label: rollout_rmse(m, system, method=f"comet[{label}]", **eval_kwargs)
            for label, m in models.items()}


def write_drift_json(series: DriftSeries, path: str | Path) -> None:
    Path(path).write_text(json.dumps({
        "version": EVAL_VERSION, "names": list(series.names), "t": series.times.tolist(),
        "drift": series.drift.tolist(), "status": series.status, "t_fail": series.t_fail,
    }))
