"""Adaptive segmentation of [t_min, t_max] by a closed-form Gauss-Newton step.

For fixed (frozen) model parameters and time t, the step dt minimising

    E||f(x_t) - f(x_{t-dt})||^2 + lam * E||f(x_{t-dt}) - x0||^2

after linearising f(x_{t-dt}) ~ f(x_t) - v dt is

    dt* = lam / (1 + lam) * E[v.(f(x_t) - x0)] / E[v.v]

where v is the total time derivative of f along the fixed-noise path.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .consistency import ConsistencyModel, cm_apply, cm_apply_with_tangent
from .schedule import NoiseSchedule, perturb, time_tangent


class DegenerateModelError(ArithmeticError):
    """The tangent vanishes on the whole batch, so the step is undefined."""


class GridConfigError(ValueError):
    """Solver settings that cannot produce a valid grid."""


@dataclass(frozen=True)
class SolverConfig:
    lam: float = 0.01
    dt_min_frac: float = 1.0 / 256
    dt_max_frac: float = 0.25
    batch_size: int = 256
    n_max: int = 1024

    def __post_init__(self) -> None:
        if self.lam < 0:
            raise GridConfigError("lambda must be non-negative")
        if not 0 < self.dt_min_frac <= self.dt_max_frac <= 1:
            raise GridConfigError(
                f"need 0 < dt_min_frac <= dt_max_frac <= 1, got "
                f"{self.dt_min_frac}, {self.dt_max_frac}"
            )
        if self.batch_size < 1:
            raise GridConfigError("grid batch size must be at least 1")
        if self.n_max < 1:
            raise GridConfigError("n_max must be at least 1")

    def with_lambda(self, lam: float) -> "SolverConfig":
        return SolverConfig(lam, self.dt_min_frac, self.dt_max_frac, self.batch_size, self.n_max)


@dataclass
class SegmentationGrid:
    """Strictly increasing times from t_min to t_max."""

    times: np.ndarray
    built_at_step: int = 0
    lambda_used: float = float("nan")
    clamped_low: int = 0
    clamped_high: int = 0
    negative_steps: int = 0

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.times.ndim != 1 or self.times.size < 2:
            raise GridConfigError("a grid needs at least two times")
        if not np.all(np.diff(self.times) > 0):
            raise GridConfigError("grid times must be strictly increasing")

    @property
    def n_segments(self) -> int:
        return self.times.size - 1

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.times)

    @property
    def midpoints(self) -> np.ndarray:
        return 0.5 * (self.times[1:] + self.times[:-1])


def gauss_newton_step(v: np.ndarray, r: np.ndarray, lam: float) -> float:
    """Unclamped closed-form step from per-sample tangents v and residuals r."""
    vv = float(np.mean(np.sum(v * v, axis=-1)))
    if vv == 0.0:
        raise DegenerateModelError("E[v.v] = 0: the model output does not move along the path")
    vr = float(np.mean(np.sum(v * r, axis=-1)))
    # + 0.0 turns a signed zero into 0.0 when lam = 0
    return lam / (1.0 + lam) * vr / vv + 0.0


@dataclass
class StepEstimate:
    unclamped: float
    clamped: float
    clamp: str | None  # "low", "high", or None
    final: bool  # the step reaches t_min


def clamp_step(dt: float, t: float, schedule: NoiseSchedule, cfg: SolverConfig) -> StepEstimate:
    span = schedule.t_max - schedule.t_min
    lo = cfg.dt_min_frac * span
    room = t - schedule.t_min
    hi = min(cfg.dt_max_frac * span, room)
    clamp = None
    value = dt
    if value < lo:
        value, clamp = lo, "low"
    if value > hi:
        value = hi
        clamp = "high" if hi < room else clamp
    # repeated subtraction drifts by a few ulps; a remainder that small is not a segment
    final = value >= room - 1e-9 * span
    return StepEstimate(dt, value, clamp, final)


def delta_t_star(m: ConsistencyModel, x0, z, t: float, cfg: SolverConfig) -> StepEstimate:
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] == 0:
        raise ValueError("delta_t_star needs a nonempty (batch, dim) sample")
    x_t = perturb(m.schedule, x0, z, t)
    f, v = cm_apply_with_tangent(m, x_t, time_tangent(m.schedule, x0, z, t), t)
    dt = gauss_newton_step(v, f - x0, cfg.lam)
    return clamp_step(dt, t, m.schedule, cfg)


def relaxed_objective(m: ConsistencyModel, x0, z, t: float, lam: float, dts) -> np.ndarray:
    """Exact (non-linearised) local + lam * global objective at each candidate step."""
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    dts = np.asarray(dts, dtype=np.float64)
    b, dim = x0.shape
    f_t = cm_apply(m, perturb(m.schedule, x0, z, t), t)
    out = np.empty(dts.size)
    chunk = max(1, 200_000 // b)
    for start in range(0, dts.size, chunk):
        d = dts[start : start + chunk]
        t_lo = np.repeat(t - d, b)
        x_lo = perturb(m.schedule, np.tile(x0, (d.size, 1)), np.tile(z, (d.size, 1)), t_lo)
        f_lo = cm_apply(m, x_lo, t_lo).reshape(d.size, b, dim)
        local = np.mean(np.sum((f_t[None] - f_lo) ** 2, axis=-1), axis=1)
        glob = np.mean(np.sum((f_lo - x0[None]) ** 2, axis=-1), axis=1)
        out[start : start + chunk] = local + lam * glob
    return out


@dataclass
class OracleResult:
    dt: float
    mesh_step: float
    objective: float


def oracle_delta_t(m: ConsistencyModel, x0, z, t: float, lam: float, mesh_size: int) -> OracleResult:
    """Brute-force argmin of the relaxed objective over a uniform mesh on [0, t - t_min]."""
    if mesh_size < 2:
        raise ValueError("mesh_size must be at least 2")
    room = t - m.schedule.t_min
    mesh = np.linspace(0.0, room, mesh_size)
    obj = relaxed_objective(m, x0, z, t, lam, mesh)
    k = int(np.argmin(obj))
    return OracleResult(float(mesh[k]), room / (mesh_size - 1), float(obj[k]))


BatchSampler = Callable[[np.random.Generator, int], tuple[np.ndarray, np.ndarray]]
StepEstimator = Callable[[np.ndarray, np.ndarray, float], StepEstimate]


def build_grid(
    m: ConsistencyModel,
    cfg: SolverConfig,
    sample_batch: BatchSampler,
    rng: np.random.Generator,
    built_at_step: int = 0,
    estimator: StepEstimator | None = None,
) -> SegmentationGrid:
    """Walk down from t_max, one fresh mini-batch per step, until t_min is reached.

    ``sample_batch(rng, n)`` returns (x0, z). ``estimator`` replaces the
    Gauss-Newton step (used for diagnostics and mocks).
    """
    s = m.schedule
    if estimator is None:
        def estimator(x0, z, t):
            return delta_t_star(m, x0, z, t, cfg)

    limit = math.ceil(1.0 / cfg.dt_min_frac) + 1
    t = s.t_max
    descending = [t]
    low = high = negative = 0
    for _ in range(limit + 1):
        x0, z = sample_batch(rng, cfg.batch_size)
        est = estimator(x0, z, t)
        low += est.clamp == "low"
        high += est.clamp == "high"
        negative += est.unclamped < 0
        if est.final:
            break
        t = t - est.clamped
        descending.append(t)
        if len(descending) + 1 > cfg.n_max + 1:
            raise GridConfigError(
                f"grid exceeded n_max = {cfg.n_max} segments; raise dt_min_frac or n_max"
            )
    else:  # pragma: no cover - the clamp floor makes this unreachable
        raise GridConfigError("grid construction did not terminate")
    descending.append(s.t_min)
    return SegmentationGrid(
        np.array(descending[::-1]),
        built_at_step=built_at_step,
        lambda_used=cfg.lam,
        clamped_low=low,
        clamped_high=high,
        negative_steps=negative,
    )


BASELINES = ("uniform", "exp", "continuous")


def baseline_grid(
    kind: str,
    n: int,
    schedule: NoiseSchedule,
    rho: float = 7.0,
    n_max: int = 1024,
) -> SegmentationGrid:
    """Hand-designed grids: uniform, EDM-style power spacing, or a dense uniform proxy."""
    if kind == "continuous":
        kind, n = "uniform", n_max
    if n < 1:
        raise GridConfigError(f"baseline grid needs n >= 1, got {n}")
    lo, hi = schedule.t_min, schedule.t_max
    frac = np.arange(n + 1) / n
    if kind == "uniform":
        times = lo + frac * (hi - lo)
    elif kind == "exp":
        if rho <= 0:
            raise GridConfigError("rho must be positive")
        times = (lo ** (1 / rho) + frac * (hi ** (1 / rho) - lo ** (1 / rho))) ** rho
    else:
        raise GridConfigError(f"unknown baseline grid {kind!r}")
    times[0], times[-1] = lo, hi
    return SegmentationGrid(times, lambda_used=float("nan"))


def write_grid_csv(grid: SegmentationGrid, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "t", "dt"])
        for i, t in enumerate(grid.times):
            dt = 0.0 if i == 0 else t - grid.times[i - 1]
            w.writerow([i, repr(float(t)), repr(float(dt))])
