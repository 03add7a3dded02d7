"""Flat ``key = value`` run configuration.

Keys may be written bare (``lambda``) or with their section prefix
(``solver.lambda``). Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .consistency import METRICS, WEIGHTINGS


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def _key(section: str, help: str, choices: tuple[str, ...] | None = None) -> dict:
    return {"section": section, "help": help, "choices": choices}


@dataclass
class RunConfig:
    # data / model
    dataset: str = dataclasses.field(default="gmm8", metadata=_key("data", "toy dataset", ("gmm8", "gmm2", "gauss", "ring", "checkerboard")))
    hidden: int = dataclasses.field(default=128, metadata=_key("model", "hidden width"))
    depth: int = dataclasses.field(default=3, metadata=_key("model", "number of hidden layers"))
    activation: str = dataclasses.field(default="tanh", metadata=_key("model", "hidden activation", ("tanh", "silu")))
    time_embedding: str = dataclasses.field(default="scalar", metadata=_key("model", "time conditioning scheme", ("scalar",)))
    # schedule
    schedule: str = dataclasses.field(default="ve", metadata=_key("schedule", "noise schedule", ("ve", "fm")))
    precond: str = dataclasses.field(default="edm", metadata=_key("schedule", "preconditioning", ("edm", "rf", "identity")))
    sigma_data: float = dataclasses.field(default=0.5, metadata=_key("schedule", "data standard deviation"))
    t_min: float | None = dataclasses.field(default=None, metadata=_key("schedule", "smallest time (default per schedule)"))
    t_max: float | None = dataclasses.field(default=None, metadata=_key("schedule", "largest time (default per schedule)"))
    time_sampler: str = dataclasses.field(default="lognormal", metadata=_key("schedule", "training time sampler", ("lognormal", "uniform")))
    p_mean: float = dataclasses.field(default=-1.1, metadata=_key("schedule", "log-SNR mean"))
    p_std: float = dataclasses.field(default=2.0, metadata=_key("schedule", "log-SNR std"))
    # loss
    metric: str = dataclasses.field(default="pseudo_huber", metadata=_key("loss", "distance metric", METRICS))
    metric_c: float = dataclasses.field(default=0.03, metadata=_key("loss", "Pseudo-Huber constant"))
    weighting: str = dataclasses.field(default="adaptive", metadata=_key("loss", "loss weighting", WEIGHTINGS))
    weight_floor: float = dataclasses.field(default=1e-8, metadata=_key("loss", "adaptive weight denominator floor"))
    # solver
    lam: float | None = dataclasses.field(default=None, metadata=_key("solver", "constant lambda (overrides warm-up when set)"))
    dt_min_frac: float = dataclasses.field(default=1.0 / 256, metadata=_key("solver", "step floor as a fraction of the time span"))
    dt_max_frac: float = dataclasses.field(default=0.25, metadata=_key("solver", "step ceiling as a fraction of the time span"))
    grid_batch: int = dataclasses.field(default=256, metadata=_key("solver", "mini-batch per grid step"))
    n_max: int = dataclasses.field(default=1024, metadata=_key("solver", "maximum grid segments"))
    baseline: str = dataclasses.field(default="none", metadata=_key("solver", "fixed grid instead of adaptive", ("none", "uniform", "exp", "continuous")))
    baseline_n: int = dataclasses.field(default=16, metadata=_key("solver", "baseline grid segments"))
    exp_rho: float = dataclasses.field(default=7.0, metadata=_key("solver", "exponent for the exp baseline"))
    # train
    total_steps: int = dataclasses.field(default=20000, metadata=_key("train", "parameter updates"))
    grid_update_every: int = dataclasses.field(default=1000, metadata=_key("train", "updates between grid rebuilds (m)"))
    batch_size: int = dataclasses.field(default=256, metadata=_key("train", "training mini-batch"))
    learning_rate: float = dataclasses.field(default=3e-4, metadata=_key("train", "Adam learning rate"))
    ema_decay: float = dataclasses.field(default=0.999, metadata=_key("train", "EMA decay"))
    lambda_start: float = dataclasses.field(default=0.64, metadata=_key("train", "lambda at step 0"))
    lambda_end: float = dataclasses.field(default=0.01, metadata=_key("train", "lambda after warm-up"))
    lambda_warmup_steps: int = dataclasses.field(default=5000, metadata=_key("train", "log-linear warm-up length"))
    checkpoint_every: int = dataclasses.field(default=0, metadata=_key("train", "checkpoint period (0 = final only)"))
    init_checkpoint: str = dataclasses.field(default="", metadata=_key("train", "optional warm-start checkpoint"))
    seed: int = dataclasses.field(default=0, metadata=_key("run", "random seed"))
    threads: int = dataclasses.field(default=1, metadata=_key("run", "worker threads (1 = deterministic)"))
    # eval / sample / oracle
    n_samples: int = dataclasses.field(default=1024, metadata=_key("eval", "generated samples"))
    steps: int = dataclasses.field(default=1, metadata=_key("eval", "generation steps (1 or 2)"))
    t_mid: float | None = dataclasses.field(default=None, metadata=_key("eval", "intermediate time for 2-step generation"))
    n_projections: int = dataclasses.field(default=256, metadata=_key("eval", "sliced-W2 projections"))
    t: float | None = dataclasses.field(default=None, metadata=_key("oracle", "time at which to compare step estimates"))
    mesh: int = dataclasses.field(default=10000, metadata=_key("oracle", "oracle mesh size"))

    def resolved_range(self) -> tuple[float, float]:
        from .schedule import FM_DEFAULT_RANGE, VE_DEFAULT_RANGE

        lo, hi = VE_DEFAULT_RANGE if self.schedule == "ve" else FM_DEFAULT_RANGE
        return (lo if self.t_min is None else self.t_min, hi if self.t_max is None else self.t_max)

    def validate(self) -> "RunConfig":
        for f in fields(self):
            choices = f.metadata.get("choices")
            value = getattr(self, f.name)
            if choices and value not in choices:
                raise ConfigError(f"{config_name(f.name)} = {value!r}; expected one of {', '.join(choices)}")
        if self.total_steps < self.grid_update_every or self.grid_update_every < 1:
            raise ConfigError("need total_steps >= grid_update_every >= 1")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError("ema_decay must lie in [0, 1]")
        if not self.lambda_start >= self.lambda_end >= 0:
            raise ConfigError("need lambda_start >= lambda_end >= 0")
        if self.lam is not None and self.lam < 0:
            raise ConfigError("lambda must be non-negative")
        if self.steps not in (1, 2):
            raise ConfigError("steps must be 1 or 2")
        if self.batch_size < 1 or self.grid_batch < 1:
            raise ConfigError("batch sizes must be positive")
        if not 0 < self.dt_min_frac <= self.dt_max_frac <= 1:
            raise ConfigError("need 0 < dt_min_frac <= dt_max_frac <= 1")
        if self.n_max < math.ceil(1.0 / self.dt_min_frac) and self.baseline == "none":
            raise ConfigError(
                f"n_max = {self.n_max} is below ceil(1/dt_min_frac) = {math.ceil(1.0 / self.dt_min_frac)}"
            )
        if self.hidden < 1 or self.depth < 1:
            raise ConfigError("network needs positive width and depth")
        lo, hi = self.resolved_range()
        if not hi > lo:
            raise ConfigError("t_max must exceed t_min")
        if self.threads < 1:
            raise ConfigError("threads must be at least 1")
        return self


# config-file names that differ from attribute names
_ALIASES = {"lambda": "lam"}
_REVERSE = {v: k for k, v in _ALIASES.items()}


def config_name(attr: str) -> str:
    return _REVERSE.get(attr, attr)


def _field_map() -> dict[str, dataclasses.Field]:
    return {config_name(f.name): f for f in fields(RunConfig)}


def _convert(f: dataclasses.Field, raw: str):
    raw = raw.strip()
    tp = str(f.type)
    optional = "None" in tp
    if optional and raw.lower() in ("none", ""):
        return None
    try:
        if tp.startswith("int"):
            return int(raw)
        if tp.startswith("float"):
            if "/" in raw:
                num, den = raw.split("/", 1)
                return float(num) / float(den)
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{config_name(f.name)}: cannot parse {raw!r}") from exc
    return raw


def apply_setting(cfg: RunConfig, key: str, raw: str) -> None:
    key = key.strip()
    fmap = _field_map()
    name = key
    if name not in fmap and "." in key:
        section, name = key.split(".", 1)
        if name in fmap and fmap[name].metadata["section"] != section:
            raise ConfigError(f"key {name!r} belongs to section {fmap[name].metadata['section']!r}, not {section!r}")
    if name not in fmap:
        raise ConfigError(f"unknown config key {key!r}")
    f = fmap[name]
    setattr(cfg, f.name, _convert(f, raw))


def parse_config_text(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg if cfg is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = line.split("=", 1)
        try:
            apply_setting(cfg, key, value)
        except ConfigError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
    return cfg


def load_config(path=None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    cfg = RunConfig()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        parse_config_text(text, cfg)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        apply_setting(cfg, key, value)
    return cfg.validate()


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    section = None
    for f in fields(cfg):
        sec = f.metadata["section"]
        if sec != section:
            if section is not None:
                lines.append("")
            lines.append(f"# {sec}")
            section = sec
        lines.append(f"{config_name(f.name)} = {_format(getattr(cfg, f.name))}")
    return "\n".join(lines) + "\n"


def describe_keys() -> str:
    defaults = RunConfig()
    rows = []
    for f in fields(RunConfig):
        name = f"{f.metadata['section']}.{config_name(f.name)}"
        choices = f.metadata.get("choices")
        extra = f" [{'|'.join(choices)}]" if choices else ""
        rows.append(f"  {name:<28} default={_format(getattr(defaults, f.name))}  {f.metadata['help']}{extra}")
    return "\n".join(rows)
