"""Noise schedules, preconditioning, and time sampling over a segmentation grid."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import DimensionError


class DomainError(ValueError):
    """A time or parameter lies outside the region where a formula is defined."""


VE_DEFAULT_RANGE = (0.002, 80.0)
FM_DEFAULT_RANGE = (1e-3, 1.0 - 1e-3)


@dataclass(frozen=True)
class NoiseSchedule:
    """x_t = alpha_t * x0 + beta_t * z.

    ``ve``: alpha = 1, beta = t.  ``fm``: alpha = 1 - t, beta = t.
    """

    kind: str = "ve"
    t_min: float = VE_DEFAULT_RANGE[0]
    t_max: float = VE_DEFAULT_RANGE[1]

    def __post_init__(self) -> None:
        if self.kind not in ("ve", "fm"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.kind == "ve" and self.t_min <= 0:
            raise DomainError("VE schedule needs t_min > 0")
        if self.kind == "fm" and (self.t_min < 0 or self.t_max > 1):
            raise DomainError("flow-matching times must lie in [0, 1]")
        if not self.t_max > self.t_min:
            raise DomainError(f"t_max ({self.t_max}) must exceed t_min ({self.t_min})")

    @classmethod
    def default(cls, kind: str) -> "NoiseSchedule":
        lo, hi = VE_DEFAULT_RANGE if kind == "ve" else FM_DEFAULT_RANGE
        return cls(kind, lo, hi)

    def check(self, t: float, slack: float = 0.0) -> None:
        # the upper bound for FM is the process endpoint 1, not t_max, so pure-noise starts are allowed
        hi = 1.0 if self.kind == "fm" else self.t_max
        if not (self.t_min - slack <= t <= hi + slack):
            raise DomainError(f"t = {t} outside [{self.t_min}, {hi}]")


def schedule_eval(s: NoiseSchedule, t: float, check: bool = True) -> tuple[float, float, float, float]:
    """Return (alpha, beta, d alpha/dt, d beta/dt) at time t."""
    if check:
        s.check(t)
    if s.kind == "ve":
        return 1.0, float(t), 0.0, 1.0
    return 1.0 - t, float(t), -1.0, 1.0


def snr(s: NoiseSchedule, t: float) -> float:
    """beta_t / alpha_t.

    This is the ratio used for log-normal time sampling. Conventionally it
    would be called a noise-to-signal ratio; the name is kept as used there.
    """
    alpha, beta, _, _ = schedule_eval(s, t, check=False)
    if alpha == 0.0:
        raise DomainError(f"SNR undefined at t = {t}: alpha_t = 0")
    return beta / alpha


def time_from_snr(s: NoiseSchedule, value) -> np.ndarray:
    """Inverse of :func:`snr`, vectorised."""
    value = np.asarray(value, dtype=np.float64)
    if s.kind == "ve":
        return value
    return value / (1.0 + value)


def _check_pair(x0: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if x0.shape != z.shape:
        raise DimensionError(f"x0 {x0.shape} and z {z.shape} differ in shape")
    return x0, z


def perturb(s: NoiseSchedule, x0, z, t) -> np.ndarray:
    """x_t for scalar t, or per-row times when t is an array of shape (batch,)."""
    x0, z = _check_pair(x0, z)
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 1:
        t = t[:, None]
    alpha = 1.0 if s.kind == "ve" else 1.0 - t
    return alpha * x0 + t * z


def time_tangent(s: NoiseSchedule, x0, z, t=None) -> np.ndarray:
    """d x_t / dt along the fixed-(x0, z) path. Independent of t for both schedules."""
    x0, z = _check_pair(x0, z)
    if s.kind == "ve":
        return z.copy()
    return z - x0


@dataclass(frozen=True)
class Preconditioner:
    """f(x, t) = c_skip(t) x + c_out(t) F(c_in(t) x, c_noise(t)).

    ``identity`` (c_skip = c_out = c_in = 1, c_noise = t) is a diagnostic
    wrapper: with a linear network it yields a model affine in (x, t).
    """

    kind: str = "edm"
    sigma_data: float = 0.5

    def __post_init__(self) -> None:
        if self.kind not in ("edm", "rf", "identity"):
            raise ValueError(f"unknown preconditioner kind {self.kind!r}")
        if self.sigma_data <= 0:
            raise DomainError("sigma_data must be positive")


def precond_coeffs(p: Preconditioner, t):
    """(c_skip, c_out, c_in, c_noise) at time t (scalar or array)."""
    return precond_coeffs_with_derivs(p, t)[0]


def precond_coeffs_with_derivs(p: Preconditioner, t):
    """Coefficients and their exact first derivatives in t, as two 4-tuples.

    Works elementwise on array-valued t.
    """
    scalar = np.ndim(t) == 0
    t = np.asarray(t, dtype=np.float64)
    if p.kind == "edm":
        if np.any(t <= 0):
            raise DomainError(f"EDM preconditioning needs t > 0, got min t = {np.min(t)}")
        sd = p.sigma_data
        sd2 = sd * sd
        q = sd2 + t * t
        root = np.sqrt(q)
        coeffs = (sd2 / q, sd * t / root, 1.0 / root, 0.25 * np.log(t))
        derivs = (-2.0 * sd2 * t / (q * q), sd * sd2 / (q * root), -t / (q * root), 0.25 / t)
    elif p.kind == "rf":
        one, zero = np.ones_like(t), np.zeros_like(t)
        coeffs = (one, -t, one, t)
        derivs = (zero, -one, zero, one)
    else:
        one, zero = np.ones_like(t), np.zeros_like(t)
        coeffs = (one, one, one, t)
        derivs = (zero, zero, zero, one)
    if scalar:
        return tuple(float(c) for c in coeffs), tuple(float(d) for d in derivs)
    return coeffs, derivs


@dataclass(frozen=True)
class TimeSampler:
    kind: str = "lognormal"
    p_mean: float = -1.1
    p_std: float = 2.0

    def __post_init__(self) -> None:
        if self.kind not in ("lognormal", "uniform"):
            raise ValueError(f"unknown time sampler {self.kind!r}")
        if self.kind == "lognormal" and self.p_std < 0:
            raise ValueError("p_std must be non-negative")


def snap_to_grid(times: np.ndarray, query) -> np.ndarray:
    """Index of the nearest grid time, never below 1. ``times`` is ascending."""
    times = np.asarray(times, dtype=np.float64)
    query = np.asarray(query, dtype=np.float64)
    hi = np.clip(np.searchsorted(times, query), 1, len(times) - 1)
    lo = hi - 1
    nearer_lo = (query - times[lo]) <= (times[hi] - query)
    idx = np.where(nearer_lo, lo, hi)
    return np.maximum(idx, 1)


def sample_time_indices(
    sampler: TimeSampler,
    times,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    size: int,
) -> np.ndarray:
    """Upper indices i >= 1 of adjacent pairs (times[i-1], times[i])."""
    times = np.asarray(times, dtype=np.float64)
    if times.size < 2:
        raise ValueError("time grid needs at least two points")
    if sampler.kind == "uniform":
        return rng.integers(1, times.size, size=size)
    log_snr = sampler.p_mean + sampler.p_std * rng.standard_normal(size)
    t = time_from_snr(schedule, np.exp(log_snr))
    return snap_to_grid(times, t)


def sample_time_pair(
    sampler: TimeSampler,
    grid,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> tuple[float, float, int]:
    """Draw one adjacent pair (t_i, t_{i-1}, i) from the grid."""
    times = getattr(grid, "times", grid)
    i = int(sample_time_indices(sampler, times, schedule, rng, 1)[0])
    return float(times[i]), float(times[i - 1]), i


def snapped_lognormal_mass(sampler: TimeSampler, times, schedule: NoiseSchedule) -> np.ndarray:
    """Exact probability of each index 1..N under log-normal sampling plus snapping.

    Entry k of the result is the mass of index k + 1.
    """
    from scipy.stats import norm

    times = np.asarray(times, dtype=np.float64)
    mids = 0.5 * (times[:-1] + times[1:])
    # index i collects t in (mid_{i-1}, mid_i]; index 1 also takes everything below mid_1
    edges = np.concatenate(([0.0], mids[1:], [np.inf]))

    def cdf(t):
        t = np.asarray(t, dtype=np.float64)
        out = np.zeros_like(t)
        pos = t > 0
        if schedule.kind == "ve":
            s = t[pos]
        else:
            s = np.where(t[pos] >= 1.0, np.inf, t[pos] / np.maximum(1.0 - t[pos], 1e-300))
        with np.errstate(divide="ignore"):
            out[pos] = norm.cdf((np.log(s) - sampler.p_mean) / sampler.p_std)
        return out

    c = cdf(edges)
    return np.diff(c)
