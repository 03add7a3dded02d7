"""Toy datasets, one/two-step generation, Wasserstein metrics, and diagnostics export."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from scipy.optimize import linear_sum_assignment

from .consistency import ConsistencyModel, cm_apply
from .discretizer import SegmentationGrid
from .schedule import DomainError, perturb, schedule_eval

DATASETS = ("gmm8", "gmm2", "gauss", "ring", "checkerboard")

# fixed stream for estimating normalisation constants, independent of run seeds
_NORMALIZATION_SEED = 20240601
_NORMALIZATION_DRAWS = 200_000


@dataclass
class ToyDataset:
    """2-D toy distribution, affinely normalised to a target standard deviation.

    ``shift`` and ``scale`` map raw draws to normalised ones:
    ``x = (raw - shift) * scale``.
    """

    kind: str
    centers: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))
    scales: np.ndarray = field(default_factory=lambda: np.ones(1))
    radius: float = 1.0
    sigma_data: float = 0.5
    shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: float = 1.0
    dimension: int = 2

    def _raw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.kind == "gauss_mixture":
            comp = rng.integers(0, len(self.centers), size=n)
            noise = rng.standard_normal((n, 2))
            return self.centers[comp] + self.scales[comp, None] * noise
        if self.kind == "ring":
            angle = rng.uniform(0.0, 2 * math.pi, size=n)
            r = self.radius + self.scales[0] * rng.standard_normal(n)
            return np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        if self.kind == "checkerboard":
            u = rng.uniform(0.0, 1.0, size=(n, 2))
            cell = rng.integers(0, 8, size=n)
            # 4x4 board, draw from the 8 dark cells
            row = cell // 2
            col = 2 * (cell % 2) + (row % 2)
            return np.stack([col + u[:, 0] - 2.0, row + u[:, 1] - 2.0], axis=1)
        raise ValueError(f"unknown dataset kind {self.kind!r}")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return (self._raw(rng, n) - self.shift) * self.scale


def make_dataset(kind: str, sigma_data: float = 0.5, normalize: bool = True, **kw) -> ToyDataset:
    """Build a named toy dataset normalised to ``sigma_data``.

    Names: ``gmm8`` (eight Gaussians on a circle), ``gmm2``, ``gauss``,
    ``ring``, ``checkerboard``. ``gauss_mixture`` with explicit ``centers``
    and ``scales`` is also accepted.
    """
    if sigma_data <= 0:
        raise ValueError("sigma_data must be positive")
    if kind == "gmm8":
        ang = 2 * math.pi * np.arange(8) / 8
        ds = ToyDataset("gauss_mixture", np.stack([2 * np.cos(ang), 2 * np.sin(ang)], 1), np.full(8, 0.1))
    elif kind == "gmm2":
        ds = ToyDataset("gauss_mixture", np.array([[-1.0, 0.0], [1.0, 0.0]]), np.full(2, 0.2))
    elif kind == "gauss":
        ds = ToyDataset("gauss_mixture", np.zeros((1, 2)), np.array([kw.get("scale", sigma_data)]))
    elif kind == "gauss_mixture":
        centers = np.asarray(kw["centers"], dtype=np.float64).reshape(-1, 2)
        scales = np.broadcast_to(np.asarray(kw["scales"], dtype=np.float64), (len(centers),)).copy()
        if np.any(scales < 0):
            raise ValueError("component scales must be non-negative")
        ds = ToyDataset("gauss_mixture", centers, scales)
    elif kind == "ring":
        radius = float(kw.get("radius", 1.0))
        width = float(kw.get("width", 0.05))
        if radius <= 0 or width < 0:
            raise ValueError("ring needs radius > 0 and width >= 0")
        ds = ToyDataset("ring", radius=radius, scales=np.array([width]))
    elif kind == "checkerboard":
        ds = ToyDataset("checkerboard")
    else:
        raise ValueError(f"unknown dataset {kind!r}; expected one of {', '.join(DATASETS)}")
    ds.sigma_data = sigma_data
    if normalize:
        ref = ds._raw(np.random.default_rng(_NORMALIZATION_SEED), _NORMALIZATION_DRAWS)
        ds.shift = ref.mean(axis=0)
        ds.scale = sigma_data / math.sqrt(float(np.mean(ref.var(axis=0))))
    return ds


def generate(
    model: ConsistencyModel,
    n: int,
    steps: int,
    rng: np.random.Generator,
    t_mid: float | None = None,
    apply: Callable = cm_apply,
) -> np.ndarray:
    """Sample with one or two model evaluations per point.

    The prior draw is x_T = alpha_T * 0 + beta_T * z.
    """
    s = model.schedule
    if steps not in (1, 2):
        raise ValueError("steps must be 1 or 2")
    t_top = s.t_max
    _, beta_top, _, _ = schedule_eval(s, t_top)
    z = rng.standard_normal((n, model.data_dim))
    y = apply(model, beta_top * z, t_top)
    if steps == 1:
        return y
    if t_mid is None:
        t_mid = default_t_mid(s.kind)
    if not s.t_min < t_mid < s.t_max:
        raise DomainError(f"t_mid = {t_mid} must lie strictly inside ({s.t_min}, {s.t_max})")
    z2 = rng.standard_normal((n, model.data_dim))
    return apply(model, perturb(s, y, z2, t_mid), t_mid)


VE_T_MID = 0.420


def default_t_mid(schedule_kind: str) -> float:
    """0.420 under VE; under FM, the time with the same beta/alpha ratio."""
    if schedule_kind == "ve":
        return VE_T_MID
    return VE_T_MID / (1.0 + VE_T_MID)


W2_EXACT_CAP = 1024


def w2_exact(a, b) -> float:
    """Exact W2 between equal-size point sets via optimal assignment."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"point sets differ in shape: {a.shape} vs {b.shape}")
    if a.shape[0] > W2_EXACT_CAP:
        raise ValueError(f"w2_exact is capped at {W2_EXACT_CAP} points; use w2_sliced")
    if a.shape[0] == 0:
        raise ValueError("empty point sets")
    cost = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=-1)
    rows, cols = linear_sum_assignment(cost)
    return math.sqrt(max(float(cost[rows, cols].mean()), 0.0))


def w2_sliced(
    a,
    b,
    n_projections: int,
    rng: np.random.Generator | None = None,
    directions: np.ndarray | None = None,
    scale_by_dim: bool = True,
) -> float:
    """Sliced W2 from sorted 1-D projections.

    Returns sqrt(k * mean_theta W2_theta^2) with k the dimension when
    ``scale_by_dim`` (so a pure mean shift of isotropic clouds matches the
    exact W2 in expectation), otherwise k = 1. Sets may differ in size;
    quantiles are then matched on a common grid.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise ValueError("empty point sets")
    dim = a.shape[1]
    if directions is None:
        if rng is None:
            raise ValueError("need an rng or explicit directions")
        directions = rng.standard_normal((n_projections, dim))
    directions = np.asarray(directions, dtype=np.float64).reshape(-1, dim)
    directions = directions / np.linalg.norm(directions, axis=1, keepdims=True)
    pa = np.sort(a @ directions.T, axis=0)
    pb = np.sort(b @ directions.T, axis=0)
    if pa.shape[0] != pb.shape[0]:
        q = (np.arange(max(pa.shape[0], pb.shape[0])) + 0.5) / max(pa.shape[0], pb.shape[0])
        pa = np.quantile(pa, q, axis=0)
        pb = np.quantile(pb, q, axis=0)
    per_dir = np.mean((pa - pb) ** 2, axis=0)
    k = dim if scale_by_dim else 1
    return math.sqrt(k * float(per_dir.mean()))


@dataclass
class ChainBoundReport:
    lhs: float
    rhs: float
    boundary_residual: float
    tolerance: float
    holds: bool
    prefix_violations: int = 0

    @property
    def slack(self) -> float:
        return self.rhs + self.boundary_residual + self.tolerance - self.lhs


def chain_bound_check(model: ConsistencyModel, grid: SegmentationGrid, x0, z) -> ChainBoundReport:
    """Accumulated-error check along the grid with shared (x0, z).

    lhs = sqrt(E||f(x_T) - x0||^2); rhs = sum over segments of
    sqrt(E||f(x_{t_i}) - f(x_{t_{i-1}})||^2); the boundary residual
    sqrt(E||f(x_{t_min}) - x0||^2) covers the inexact boundary condition.
    Every prefix of the chain is checked, the full chain is reported.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    n = x0.shape[0]
    outs = np.stack([cm_apply(model, perturb(model.schedule, x0, z, t), t) for t in grid.times])
    seg = np.sqrt(np.mean(np.sum(np.diff(outs, axis=0) ** 2, axis=-1), axis=1))
    err_sq = np.sum((outs - x0[None]) ** 2, axis=-1)
    err = np.sqrt(np.mean(err_sq, axis=1))
    boundary = float(err[0])
    rhs_prefix = np.cumsum(seg)
    # 3-sigma standard error of each lhs estimate (delta method on the root)
    with np.errstate(divide="ignore", invalid="ignore"):
        se = np.where(err > 0, np.std(err_sq, axis=1) / (2.0 * err * math.sqrt(n)), 0.0)
    tol = 3.0 * se[1:]
    scale = 1e-12 * (1.0 + rhs_prefix + boundary)
    ok = err[1:] <= rhs_prefix + boundary + tol + scale
    return ChainBoundReport(
        lhs=float(err[-1]),
        rhs=float(rhs_prefix[-1]),
        boundary_residual=boundary,
        tolerance=float(tol[-1]),
        holds=bool(np.all(ok)),
        prefix_violations=int(np.count_nonzero(~ok)),
    )


@dataclass
class SampleReport:
    n_samples: int
    nfe: int
    w2_exact: float
    w2_sliced: float
    chain_bound_slack: float
    seed: int

    def __post_init__(self) -> None:
        for name in ("w2_exact", "w2_sliced"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")

    def as_rows(self) -> list[tuple[str, str]]:
        return [
            ("n_samples", str(self.n_samples)),
            ("nfe", str(self.nfe)),
            ("w2_exact", repr(self.w2_exact)),
            ("w2_sliced", repr(self.w2_sliced)),
            ("chain_bound_slack", repr(self.chain_bound_slack)),
            ("seed", str(self.seed)),
        ]


def spearman(x, y) -> float:
    from scipy.stats import spearmanr

    return float(spearmanr(x, y).statistic)


def _write_csv(path: Path, header: Iterable[str], rows: Iterable[Iterable]) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(header))
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def export_diagnostics(
    path,
    grid: SegmentationGrid | None = None,
    history: Iterable[tuple[int, float, float, int]] = (),
    samples: np.ndarray | None = None,
    step_count: int = 0,
    svg: bool = False,
) -> list[Path]:
    """Write schedule.csv, loss.csv, samples.csv (and SVG plots when asked)."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    sched_rows = []
    if grid is not None:
        for i, t in enumerate(grid.times):
            sched_rows.append((i, float(t), 0.0 if i == 0 else float(t - grid.times[i - 1])))
    _write_csv(out / "schedule.csv", ("index", "t", "dt"), sched_rows)
    _write_csv(out / "loss.csv", ("step", "loss", "lambda", "grid_id"), ((int(s), float(l), float(lam), int(g)) for s, l, lam, g in history))
    sample_rows = [] if samples is None else [(float(x), float(y), step_count) for x, y in np.asarray(samples)]
    _write_csv(out / "samples.csv", ("x", "y", "step_count"), sample_rows)
    written += [out / "schedule.csv", out / "loss.csv", out / "samples.csv"]
    if svg:
        written += plot_from_csv(out)
    return written


def _read_csv(path: Path) -> dict[str, np.ndarray]:
    with path.open(encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: np.array([float(r[i]) for r in body]) for i, h in enumerate(header)}
    return cols


def plot_from_csv(directory) -> list[Path]:
    """Render the diagnostics CSVs in ``directory`` as self-contained SVG files."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "adcm"
    matplotlib.rcParams["svg.fonttype"] = "path"
    directory = Path(directory)
    written = []

    def save(fig, name):
        target = directory / name
        fig.savefig(target, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(target)

    sched = directory / "schedule.csv"
    if sched.exists():
        cols = _read_csv(sched)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if cols["t"].size > 1:
            ax.plot(cols["t"][1:], cols["dt"][1:], marker=".", lw=1)
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel("segment width dt")
        ax.set_title("segmentation grid")
        save(fig, "schedule.svg")
    loss = directory / "loss.csv"
    if loss.exists():
        cols = _read_csv(loss)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if cols["step"].size:
            ax.plot(cols["step"], cols["loss"], lw=0.5)
            ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("loss")
        ax.set_title("training loss")
        save(fig, "loss.svg")
    samp = directory / "samples.csv"
    if samp.exists():
        cols = _read_csv(samp)
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.scatter(cols["x"], cols["y"], s=2)
        ax.set_xlabel("x")
        ax.set_ylabel("y")
        ax.set_aspect("equal", adjustable="datalim")
        ax.set_title("samples")
        save(fig, "samples.svg")
    return written
