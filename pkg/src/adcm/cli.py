"""Command-line entry point: ``adcm <verb> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 1 usage error, 2 config error, 3 runtime or
numerical error, 4 I/O error (including unreadable checkpoints).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import shutil
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig, describe_keys, load_config
from .discretizer import (
    DegenerateModelError,
    GridConfigError,
    SolverConfig,
    build_grid,
    delta_t_star,
    oracle_delta_t,
    write_grid_csv,
)
from .evalgen import (
    SampleReport,
    chain_bound_check,
    export_diagnostics,
    generate,
    plot_from_csv,
    w2_exact,
    w2_sliced,
)
from .numerics import NonFiniteError
from .schedule import DomainError
from .trainer import (
    Components,
    TrainingHalted,
    init_state,
    lambda_at,
    optimizer_hyper,
    state_from_snapshot,
    train_loop,
)

log = logging.getLogger("adcm")

VERBS = ("train", "schedule", "sample", "eval", "oracle", "export-plot")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3, 4

_VERB_HELP = {
    "train": "run the alternating grid / parameter optimisation",
    "schedule": "build one segmentation grid from a checkpoint and write schedule.csv",
    "sample": "generate samples from the EMA weights and write samples.csv",
    "eval": "report Wasserstein distances and the chain-bound check",
    "oracle": "compare the closed-form step with a brute-force mesh search",
    "export-plot": "render SVG plots from the CSV files in --out",
}


class UsageError(Exception):
    def __init__(self, message: str, help_text: str = ""):
        super().__init__(message)
        self.help_text = help_text


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message, self.format_help())


@dataclass
class Command:
    verb: str
    config_path: str | None = None
    overrides: list[str] = field(default_factory=list)
    output_dir: str | None = None
    checkpoint: str | None = None


def _build_parser() -> _Parser:
    parser = _Parser(prog="adcm", description="Adaptive discretization for consistency models on toy data.")
    sub = parser.add_subparsers(dest="verb", metavar="VERB", parser_class=_Parser)
    for verb in VERBS:
        p = sub.add_parser(
            verb,
            help=_VERB_HELP[verb],
            description=_VERB_HELP[verb],
            epilog="config keys (set with --set key=value):\n" + describe_keys(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
        p.add_argument("--out", help="output directory")
        if verb in ("schedule", "sample", "eval", "oracle"):
            p.add_argument("--checkpoint", help="checkpoint to read (default: fresh initialisation)")
    return parser


def parse_invocation(argv: list[str]) -> Command:
    parser = _build_parser()
    if not argv:
        raise UsageError("missing verb", parser.format_help())
    ns = parser.parse_args(argv)
    if ns.verb is None:
        raise UsageError("missing verb", parser.format_help())
    overrides = list(ns.overrides)
    if ns.seed is not None:
        overrides.append(f"seed={ns.seed}")
    return Command(ns.verb, ns.config, overrides, ns.out, getattr(ns, "checkpoint", None))


def _thread_count(cfg: RunConfig) -> int:
    raw = os.environ.get("ADCM_THREADS")
    if raw is None or raw == "":
        return cfg.threads
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"ADCM_THREADS = {raw!r} is not an integer") from None
    if n < 1:
        raise ConfigError("ADCM_THREADS must be at least 1")
    return n


def _out_dir(cmd: Command, default: str) -> Path:
    return Path(cmd.output_dir if cmd.output_dir else default)


def _load_state(cmd: Command, cfg: RunConfig, comp: Components):
    if cmd.checkpoint:
        snap = load_checkpoint(cmd.checkpoint, optimizer_hyper(cfg))
        return state_from_snapshot(snap, cfg)
    return init_state(cfg, comp)


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _reference(comp: Components, cfg: RunConfig, n: int) -> np.ndarray:
    # held-out data stream, independent of the sampling stream
    return comp.dataset.sample(np.random.Generator(np.random.Philox(cfg.seed + 1_000_003)), n)


def _cmd_train(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    out = _out_dir(cmd, "run")
    created.append(out)
    result = train_loop(cfg, out_dir=out, log_every=max(1, cfg.grid_update_every // 10))
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    samples = generate(result.state.ema_model(result.comp), cfg.n_samples, cfg.steps, rng, t_mid=cfg.t_mid)
    export_diagnostics(out, result.state.grid, result.history, samples, cfg.steps)
    log.info("event=done steps=%d out=%s", result.state.step, out)


def _cmd_schedule(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    comp = Components.from_config(cfg)
    state = _load_state(cmd, cfg, comp)
    solver = comp.solver.with_lambda(lambda_at(cfg, state.step))
    grid = build_grid(state.model(comp), solver, comp.batch_sampler(), state.rng, built_at_step=state.step)
    out = _out_dir(cmd, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "schedule.csv"
    created.append(path)
    write_grid_csv(grid, path)
    log.info("event=grid segments=%d lambda=%.6g clamped_low=%d clamped_high=%d negative=%d out=%s",
             grid.n_segments, grid.lambda_used, grid.clamped_low, grid.clamped_high, grid.negative_steps, path)


def _cmd_sample(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    comp = Components.from_config(cfg)
    state = _load_state(cmd, cfg, comp)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    samples = generate(state.ema_model(comp), cfg.n_samples, cfg.steps, rng, t_mid=cfg.t_mid)
    out = _out_dir(cmd, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "samples.csv"
    created.append(path)
    _write_rows(path, ("x", "y", "step_count"), ((repr(float(a)), repr(float(b)), cfg.steps) for a, b in samples))
    log.info("event=sample n=%d nfe=%d out=%s", cfg.n_samples, cfg.steps, path)


def _cmd_eval(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    comp = Components.from_config(cfg)
    state = _load_state(cmd, cfg, comp)
    model = state.ema_model(comp)
    n = cfg.n_samples
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    samples = generate(model, n, cfg.steps, rng, t_mid=cfg.t_mid)
    ref = _reference(comp, cfg, n)
    exact = w2_exact(samples, ref) if n <= 1024 else float("nan")
    sliced = w2_sliced(samples, ref, cfg.n_projections, rng)
    grid = state.grid
    if grid is None:
        solver = comp.solver.with_lambda(lambda_at(cfg, state.step))
        grid = build_grid(state.model(comp), solver, comp.batch_sampler(), rng)
    x0 = comp.dataset.sample(rng, n)
    chain = chain_bound_check(model, grid, x0, rng.standard_normal(x0.shape))
    report = SampleReport(n, cfg.steps, exact, sliced, chain.slack, cfg.seed)
    rows = report.as_rows() + [
        ("chain_lhs", repr(chain.lhs)),
        ("chain_rhs", repr(chain.rhs)),
        ("boundary_residual", repr(chain.boundary_residual)),
        ("chain_holds", str(chain.holds).lower()),
        ("grid_segments", str(grid.n_segments)),
    ]
    out = _out_dir(cmd, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "eval.csv"
    created.append(path)
    _write_rows(path, ("key", "value"), rows)
    for k, v in rows:
        print(f"{k}={v}")


def _cmd_oracle(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    comp = Components.from_config(cfg)
    state = _load_state(cmd, cfg, comp)
    model = state.model(comp)
    s = comp.schedule
    lam = cfg.lam if cfg.lam is not None else lambda_at(cfg, state.step)
    solver: SolverConfig = comp.solver.with_lambda(lam)
    times = [cfg.t] if cfg.t is not None else list(np.geomspace(s.t_min * 10, s.t_max, 6))
    rows = []
    for t in times:
        if not s.t_min < t <= s.t_max:
            raise DomainError(f"t = {t} must lie in ({s.t_min}, {s.t_max}]")
        x0, z = comp.batch_sampler()(state.rng, cfg.grid_batch)
        est = delta_t_star(model, x0, z, t, solver)
        orc = oracle_delta_t(model, x0, z, t, lam, cfg.mesh)
        rows.append((repr(float(t)), repr(lam), repr(est.unclamped), repr(est.clamped),
                     repr(orc.dt), repr(orc.mesh_step)))
    header = ("t", "lambda", "gauss_newton", "gauss_newton_clamped", "oracle", "mesh_step")
    out = _out_dir(cmd, ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "oracle.csv"
    created.append(path)
    _write_rows(path, header, rows)
    print(",".join(header))
    for r in rows:
        print(",".join(r))


def _cmd_export_plot(cmd: Command, cfg: RunConfig, created: list[Path]) -> None:
    out = _out_dir(cmd, ".")
    if not out.is_dir():
        raise FileNotFoundError(f"no such directory: {out}")
    before = set(out.glob("*.svg"))
    written = plot_from_csv(out)
    created += [p for p in written if p not in before]
    for p in written:
        log.info("event=plot out=%s", p)


_HANDLERS = {
    "train": _cmd_train,
    "schedule": _cmd_schedule,
    "sample": _cmd_sample,
    "eval": _cmd_eval,
    "oracle": _cmd_oracle,
    "export-plot": _cmd_export_plot,
}


def _cleanup(cmd: Command, created: list[Path]) -> None:
    for path in created:
        if cmd.verb == "train" and path.is_dir():
            # keep the config and manifest for forensics, drop everything else
            for child in path.iterdir():
                if child.name not in ("config.cfg", "manifest.json"):
                    if child.is_dir():
                        shutil.rmtree(child, ignore_errors=True)
                    else:
                        child.unlink(missing_ok=True)
        elif path.is_file():
            path.unlink(missing_ok=True)


def run_command(cmd: Command) -> int:
    try:
        cfg = load_config(cmd.config_path, cmd.overrides)
        threads = _thread_count(cfg)
    except ConfigError as exc:
        log.error("event=error kind=config message=%s", exc)
        return EXIT_CONFIG

    from threadpoolctl import threadpool_limits

    created: list[Path] = []
    try:
        with threadpool_limits(limits=threads):
            _HANDLERS[cmd.verb](cmd, cfg, created)
    except ConfigError as exc:
        _cleanup(cmd, created)
        log.error("event=error kind=config message=%s", exc)
        return EXIT_CONFIG
    except (CheckpointError, OSError) as exc:
        _cleanup(cmd, created)
        log.error("event=error kind=io message=%s", exc)
        return EXIT_IO
    except (TrainingHalted, NonFiniteError, DegenerateModelError, GridConfigError, DomainError,
            ArithmeticError, ValueError) as exc:
        _cleanup(cmd, created)
        log.error("event=error kind=runtime message=%s", exc)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not logging.getLogger().handlers and not log.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("level=%(levelname)s %(message)s"))
        log.addHandler(handler)
        log.setLevel(logging.INFO)
    try:
        cmd = parse_invocation(argv)
    except UsageError as exc:
        sys.stderr.write(f"adcm: error: {exc}\n\n{exc.help_text}")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    return run_command(cmd)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
