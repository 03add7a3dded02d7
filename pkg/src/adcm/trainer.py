"""Alternating optimisation: rebuild the segmentation grid, then run m parameter updates."""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import TrainingSnapshot, load_checkpoint, save_checkpoint
from .config import RunConfig, dump_config
from .consistency import ConsistencyModel, DistanceMetric, WeightingConfig, adcm_loss
from .discretizer import SegmentationGrid, SolverConfig, baseline_grid, build_grid
from .evalgen import ToyDataset, make_dataset
from .numerics import EmaState, MlpParams, OptimizerState, adam_step, ema_update, init_mlp
from .schedule import NoiseSchedule, Preconditioner, TimeSampler, sample_time_indices

log = logging.getLogger("adcm")

MAX_CONSECUTIVE_ABORTS = 3


class TrainingHalted(RuntimeError):
    """Repeated non-finite losses."""


def lambda_at(cfg: RunConfig, step: int) -> float:
    """Lambda used for the grid built at ``step``: log-linear warm-up, then constant."""
    if step < 0:
        raise ValueError("step must be non-negative")
    if cfg.lam is not None:
        return cfg.lam
    start, end, n = cfg.lambda_start, cfg.lambda_end, cfg.lambda_warmup_steps
    if start == end or n <= 0 or step >= n:
        return end
    if end == 0.0:
        # log-linear is undefined with a zero endpoint; fall back to linear
        return start + (end - start) * step / n
    return math.exp(math.log(start) + (math.log(end) - math.log(start)) * step / n)


@dataclass
class Components:
    """Immutable pieces derived from a config."""

    schedule: NoiseSchedule
    precond: Preconditioner
    sampler: TimeSampler
    metric: DistanceMetric
    weighting: WeightingConfig
    solver: SolverConfig
    dataset: ToyDataset

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "Components":
        lo, hi = cfg.resolved_range()
        return cls(
            NoiseSchedule(cfg.schedule, lo, hi),
            Preconditioner(cfg.precond, cfg.sigma_data),
            TimeSampler(cfg.time_sampler, cfg.p_mean, cfg.p_std),
            DistanceMetric(cfg.metric, cfg.metric_c),
            WeightingConfig(cfg.weighting, cfg.weight_floor),
            SolverConfig(
                cfg.lam if cfg.lam is not None else cfg.lambda_start,
                cfg.dt_min_frac,
                cfg.dt_max_frac,
                cfg.grid_batch,
                cfg.n_max,
            ),
            make_dataset(cfg.dataset, cfg.sigma_data),
        )

    def batch_sampler(self):
        def sample(rng: np.random.Generator, n: int):
            x0 = self.dataset.sample(rng, n)
            return x0, rng.standard_normal(x0.shape)

        return sample


@dataclass
class TrainState:
    params: MlpParams
    optimizer: OptimizerState
    ema: EmaState
    grid: SegmentationGrid | None
    step: int
    rng: np.random.Generator
    aborts: int = 0

    def model(self, comp: Components) -> ConsistencyModel:
        return ConsistencyModel(self.params, comp.precond, comp.schedule)

    def ema_model(self, comp: Components) -> ConsistencyModel:
        return ConsistencyModel(self.ema.shadow, comp.precond, comp.schedule)

    def snapshot(self, comp: Components) -> TrainingSnapshot:
        return TrainingSnapshot(
            self.params, self.optimizer, self.ema, self.grid, self.step, self.rng,
            comp.schedule, comp.precond,
        )


def optimizer_hyper(cfg: RunConfig) -> dict:
    return {"learning_rate": cfg.learning_rate}


def init_state(cfg: RunConfig, comp: Components) -> TrainState:
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    if cfg.init_checkpoint:
        snap = load_checkpoint(cfg.init_checkpoint, optimizer_hyper(cfg))
        params = snap.params
    else:
        dim = comp.dataset.dimension
        dims = [dim + 1] + [cfg.hidden] * cfg.depth + [dim]
        params = init_mlp(dims, rng, cfg.activation, final_scale=0.0)
    return TrainState(
        params,
        OptimizerState.zeros_like(params, **optimizer_hyper(cfg)),
        EmaState(params.copy(), cfg.ema_decay),
        None,
        0,
        rng,
    )


def state_from_snapshot(snap: TrainingSnapshot, cfg: RunConfig) -> TrainState:
    snap.optimizer.learning_rate = cfg.learning_rate
    return TrainState(snap.params, snap.optimizer, snap.ema, snap.grid, snap.step, snap.rng)


@dataclass
class StepResult:
    loss: float
    aborted: bool = False


def train_step(state: TrainState, comp: Components, cfg: RunConfig) -> StepResult:
    """One parameter update on a fresh mini-batch; mutates ``state``."""
    if state.grid is None:
        raise ValueError("train_step needs a grid")
    rng = state.rng
    x0 = comp.dataset.sample(rng, cfg.batch_size)
    z = rng.standard_normal(x0.shape)
    times = state.grid.times
    idx = sample_time_indices(comp.sampler, times, comp.schedule, rng, cfg.batch_size)
    model = state.model(comp)
    with np.errstate(all="ignore"):
        res = adcm_loss(model, model, comp.metric, comp.weighting, x0, z, times[idx], times[idx - 1])
    finite = math.isfinite(res.loss) and all(np.all(np.isfinite(g)) for g in res.grads)
    if not finite:
        state.aborts += 1
        log.warning("step=%d event=abort reason=non_finite_loss consecutive=%d", state.step, state.aborts)
        if state.aborts >= MAX_CONSECUTIVE_ABORTS:
            raise TrainingHalted(f"{state.aborts} consecutive non-finite steps at step {state.step}")
        state.step += 1
        return StepResult(res.loss, aborted=True)
    state.aborts = 0
    state.params, state.optimizer = adam_step(state.optimizer, state.params, res.grads)
    state.ema = ema_update(state.ema, state.params)
    state.step += 1
    return StepResult(res.loss)


def rebuild_grid(state: TrainState, comp: Components, cfg: RunConfig) -> SegmentationGrid:
    if cfg.baseline != "none":
        grid = baseline_grid(cfg.baseline, cfg.baseline_n, comp.schedule, cfg.exp_rho, cfg.n_max)
        grid.built_at_step = state.step
        return grid
    lam = lambda_at(cfg, state.step)
    solver = comp.solver.with_lambda(lam)
    return build_grid(state.model(comp), solver, comp.batch_sampler(), state.rng, built_at_step=state.step)


@dataclass
class RunManifest:
    config: dict
    seed: int
    code_version: str
    started_at: float
    host: str
    grids: list[dict] = field(default_factory=list)
    finished_at: float | None = None
    status: str = "running"

    def record_grid(self, grid: SegmentationGrid) -> None:
        self.grids.append(
            {
                "step": grid.built_at_step,
                "segments": grid.n_segments,
                "lambda": grid.lambda_used,
                "clamped_low": grid.clamped_low,
                "clamped_high": grid.clamped_high,
                "negative_steps": grid.negative_steps,
            }
        )

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")


@dataclass
class TrainResult:
    state: TrainState
    comp: Components
    manifest: RunManifest
    history: list[tuple[int, float, float, int]]
    grids: list[SegmentationGrid]


def train_loop(
    cfg: RunConfig,
    out_dir=None,
    resume: TrainState | None = None,
    stop_at: int | None = None,
    log_every: int = 0,
) -> TrainResult:
    """Run until ``stop_at`` (default ``cfg.total_steps``) updates have been made.

    With ``out_dir``, the resolved config and manifest are written before any
    compute, checkpoints go to ``checkpoint.bin`` (and ``checkpoint_<step>.bin``
    when ``checkpoint_every`` is set).
    """
    comp = Components.from_config(cfg)
    state = resume if resume is not None else init_state(cfg, comp)
    stop = cfg.total_steps if stop_at is None else min(stop_at, cfg.total_steps)
    manifest = RunManifest(
        {k: v for k, v in asdict(cfg).items()},
        cfg.seed,
        __version__,
        time.time(),
        platform.node(),
    )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
        manifest.write(out / "manifest.json")

    history: list[tuple[int, float, float, int]] = []
    grids: list[SegmentationGrid] = []
    m = cfg.grid_update_every
    try:
        while state.step < stop:
            if state.grid is None or state.step % m == 0 and state.grid.built_at_step != state.step:
                state.grid = rebuild_grid(state, comp, cfg)
                grids.append(state.grid)
                manifest.record_grid(state.grid)
                log.info(
                    "step=%d event=grid segments=%d lambda=%.6g clamped_low=%d clamped_high=%d negative=%d",
                    state.step, state.grid.n_segments, state.grid.lambda_used,
                    state.grid.clamped_low, state.grid.clamped_high, state.grid.negative_steps,
                )
            grid_id = len(manifest.grids) - 1
            res = train_step(state, comp, cfg)
            history.append((state.step, res.loss, state.grid.lambda_used, grid_id))
            if log_every and state.step % log_every == 0:
                log.info("step=%d loss=%.6g lambda=%.6g grid_len=%d", state.step, res.loss,
                         state.grid.lambda_used, state.grid.n_segments)
            if out is not None and cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{state.step}.bin", state.snapshot(comp))
    except BaseException:
        manifest.status = "failed"
        manifest.finished_at = time.time()
        if out is not None:
            manifest.write(out / "manifest.json")
        raise
    manifest.status = "completed" if state.step >= cfg.total_steps else "paused"
    manifest.finished_at = time.time()
    if out is not None:
        save_checkpoint(out / "checkpoint.bin", state.snapshot(comp))
        manifest.write(out / "manifest.json")
    return TrainResult(state, comp, manifest, history, grids)
