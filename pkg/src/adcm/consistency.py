"""Consistency model wrapper, trajectory tangent, distances, weighting, and the training loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    DimensionError,
    DualTensor,
    MlpParams,
    mlp_backward,
    mlp_forward,
    mlp_jvp,
    mlp_trace,
)
from .schedule import (
    DomainError,
    NoiseSchedule,
    Preconditioner,
    perturb,
    precond_coeffs_with_derivs,
    time_tangent,
)


@dataclass
class ConsistencyModel:
    params: MlpParams
    precond: Preconditioner
    schedule: NoiseSchedule

    def __post_init__(self) -> None:
        if self.params.output_dim + 1 != self.params.input_dim:
            raise DimensionError(
                "network input must be data dimension + 1 time channel, "
                f"got in={self.params.input_dim}, out={self.params.output_dim}"
            )

    @property
    def data_dim(self) -> int:
        return self.params.output_dim

    def with_params(self, params: MlpParams) -> "ConsistencyModel":
        return ConsistencyModel(params, self.precond, self.schedule)


def _column(c, batch: int) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0:
        return np.full((batch, 1), float(c))
    return c.reshape(batch, 1)


def _batch(x: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != dim:
        raise DimensionError(f"expected data of width {dim}, got {x.shape}")
    return x, squeeze


def _network_input(m: ConsistencyModel, x: np.ndarray, t):
    (c_skip, c_out, c_in, c_noise), derivs = precond_coeffs_with_derivs(m.precond, t)
    b = x.shape[0]
    cols = [_column(c, b) for c in (c_skip, c_out, c_in, c_noise)]
    dcols = [_column(d, b) for d in derivs]
    return cols, dcols, np.hstack([cols[2] * x, cols[3]])


def _check_time(m: ConsistencyModel, t) -> None:
    lo = np.min(t)
    if lo <= 0 and m.precond.kind == "edm":
        raise DomainError(f"time {lo} not positive")


def cm_apply(m: ConsistencyModel, x_t, t) -> np.ndarray:
    """f(x_t, t); t is a scalar or one time per row."""
    x, squeeze = _batch(x_t, m.data_dim)
    _check_time(m, t)
    (c_skip, c_out, _, _), _, net_in = _network_input(m, x, t)
    out = c_skip * x + c_out * mlp_forward(m.params, net_in)
    return out[0] if squeeze else out


def cm_apply_with_tangent(m: ConsistencyModel, x_t, dx_dt, t) -> tuple[np.ndarray, np.ndarray]:
    """f(x_t, t) and its total derivative along the tangent (dx_dt, 1).

    One forward-mode pass; the preconditioner coefficients contribute their
    own time derivatives.
    """
    x, squeeze = _batch(x_t, m.data_dim)
    dx, _ = _batch(dx_dt, m.data_dim)
    _check_time(m, t)
    (c_skip, c_out, c_in, _), (d_skip, d_out, d_in, d_noise), net_in = _network_input(m, x, t)
    net_tan = np.hstack([d_in * x + c_in * dx, d_noise])
    res = mlp_jvp(m.params, DualTensor(net_in, net_tan))
    f = c_skip * x + c_out * res.primal
    v = d_skip * x + c_skip * dx + d_out * res.primal + c_out * res.tangent
    if squeeze:
        return f[0], v[0]
    return f, v


def cm_tangent(m: ConsistencyModel, x0, z, t) -> np.ndarray:
    """d/dt f(alpha_t x0 + beta_t z, t) with (x0, z) held fixed."""
    x_t = perturb(m.schedule, x0, z, t)
    return cm_apply_with_tangent(m, x_t, time_tangent(m.schedule, x0, z, t), t)[1]


METRICS = ("pseudo_huber", "l2", "squared_l2")


@dataclass(frozen=True)
class DistanceMetric:
    kind: str = "pseudo_huber"
    c: float = 0.03

    def __post_init__(self) -> None:
        if self.kind not in METRICS:
            raise ValueError(f"unknown metric {self.kind!r}")
        if self.c < 0:
            raise ValueError("metric constant c must be non-negative")


def distance(d: DistanceMetric, x, y) -> np.ndarray:
    """Per-sample distance over the last axis."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise DimensionError(f"distance operands differ in shape: {x.shape} vs {y.shape}")
    sq = np.sum((x - y) ** 2, axis=-1)
    if d.kind == "squared_l2":
        return sq
    if d.kind == "l2":
        return np.sqrt(sq)
    # sqrt(s + c^2) - c, rewritten to avoid cancellation when s << c^2
    return sq / (np.sqrt(sq + d.c * d.c) + d.c) if d.c > 0 else np.sqrt(sq)


def distance_grad(d: DistanceMetric, x, y) -> np.ndarray:
    """Gradient of the per-sample distance with respect to x."""
    u = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    sq = np.sum(u * u, axis=-1, keepdims=True)
    if d.kind == "squared_l2":
        return 2.0 * u
    denom = np.sqrt(sq + d.c * d.c) if d.kind == "pseudo_huber" else np.sqrt(sq)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = u / denom
    return np.where(denom > 0, g, 0.0)


WEIGHTINGS = ("adaptive", "constant", "inv_gap", "inv_time")


@dataclass(frozen=True)
class WeightingConfig:
    mode: str = "adaptive"
    floor: float = 1e-8

    def __post_init__(self) -> None:
        if self.mode not in WEIGHTINGS:
            raise ValueError(f"unknown weighting {self.mode!r}")
        if self.floor <= 0:
            raise ValueError("weight floor must be positive")


def adaptive_weight(w: WeightingConfig, d: DistanceMetric, teacher_out, x0, t_i, t_prev):
    """Loss weight per sample (scalar for unbatched input)."""
    teacher_out = np.asarray(teacher_out, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if teacher_out.shape != x0.shape:
        raise DimensionError("teacher output and x0 differ in shape")
    batch_shape = teacher_out.shape[:-1]
    if w.mode == "adaptive":
        return 1.0 / np.maximum(distance(d, teacher_out, x0), w.floor)
    if w.mode == "constant":
        return np.ones(batch_shape) if batch_shape else 1.0
    t_i = np.asarray(t_i, dtype=np.float64)
    if w.mode == "inv_time":
        return np.broadcast_to(1.0 / t_i, batch_shape).copy() if batch_shape else 1.0 / float(t_i)
    gap = t_i - np.asarray(t_prev, dtype=np.float64)
    if np.any(gap <= 0):
        raise DomainError("inverse-gap weighting needs t_i > t_prev")
    return np.broadcast_to(1.0 / gap, batch_shape).copy() if batch_shape else 1.0 / float(gap)


@dataclass
class LossResult:
    loss: float
    grads: list[np.ndarray]
    per_sample: np.ndarray


def adcm_loss(
    student: ConsistencyModel,
    teacher: ConsistencyModel,
    d: DistanceMetric,
    w: WeightingConfig,
    x0,
    z,
    t_i,
    t_prev,
) -> LossResult:
    """Batch-mean weighted distance between student at t_i and frozen teacher at t_prev.

    Gradients are taken through the student branch only.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.ndim != 2:
        raise DimensionError("adcm_loss expects batched (batch, dim) data")
    b = x0.shape[0]
    if np.any(np.asarray(t_i) < np.asarray(t_prev)):
        raise DomainError("t_i must not be below t_prev")
    x_hi = perturb(student.schedule, x0, z, t_i)
    x_lo = perturb(student.schedule, x0, z, t_prev)
    target = cm_apply(teacher, x_lo, t_prev)
    weight = adaptive_weight(w, d, target, x0, t_i, t_prev)

    (c_skip, c_out, _, _), _, net_in = _network_input(student, x_hi, t_i)
    trace = mlp_trace(student.params, net_in)
    f_student = c_skip * x_hi + c_out * trace.output
    per_sample = weight * distance(d, f_student, target)

    cot = (np.asarray(weight).reshape(b, 1) / b) * distance_grad(d, f_student, target)
    grads = mlp_backward(student.params, trace, c_out * cot).arrays
    return LossResult(float(np.mean(per_sample)), grads, per_sample)
