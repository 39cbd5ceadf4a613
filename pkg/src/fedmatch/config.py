"""Experiment configuration: strict JSON in, fully-defaulted dataclass out.

Unknown keys are rejected (typos must not silently fall back to defaults),
every field is type- and range-checked with the offending field named in
the error, and the materialized config can be echoed back to JSON so a run
directory records exactly what produced it.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .losses import LossSettings
from .models import arch_for_task
from .tuner import HyperAxis, HyperGrid, default_grid

TASKS = ("mnist", "cifar10", "kws", "synthetic")
PARTITIONS = ("iid", "non_iid")
AGGREGATIONS = ("literal", "renormalized")
UPDATE_SIGNS = ("ascent", "descent")


class ConfigError(ValueError):
    """A config file is malformed; the message names the field."""


@dataclass(frozen=True)
class TunerConfig:
    axes: tuple[HyperAxis, ...] | None = None  # None -> task default grid
    window: int = 10
    hyper_lr: float = 0.1
    init_std: float = 0.2
    freeze_precision: bool = False
    update_sign: str = "ascent"


@dataclass(frozen=True)
class ScheduleConfig:
    """Fixed baseline: lr halves every rounds/3, iteration count constant."""

    initial_lr: float = 0.1
    iterations: int = 30


@dataclass(frozen=True)
class LossConfig:
    matching_coeff: float = 1.0
    wd_coeff: float = 0.1
    min_entropy: float = 0.5
    use_er: bool = True
    match_input_site: bool = True


@dataclass(frozen=True)
class SyntheticConfig:
    classes: int = 10
    per_class: int = 200
    test_per_class: int = 50
    input_dim: int = 784
    spread: float = 1.0


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    seed: int
    output_dir: str
    data_dir: str | None = None
    partition: str = "iid"
    use_tuner: bool = False
    use_matching: bool = False
    use_wd: bool = False
    aggregation: str = "literal"
    n_clients: int = 10
    client_fraction: float = 1.0
    rounds: int = 200
    batch_size: int = 64
    validation_size: int = 1000
    eval_every: int = 10
    train_subset: int | None = None
    parallel_clients: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    tuner: TunerConfig = field(default_factory=TunerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    @property
    def arch_name(self) -> str:
        return arch_for_task(self.task)

    def loss_settings(self) -> LossSettings:
        return LossSettings(
            use_matching=self.use_matching,
            use_wd=self.use_wd,
            use_er=self.loss.use_er,
            matching_coeff=self.loss.matching_coeff,
            wd_coeff=self.loss.wd_coeff,
            min_entropy=self.loss.min_entropy,
        )

    def hyper_grid(self) -> HyperGrid:
        if self.tuner.axes is not None:
            return HyperGrid(axes=self.tuner.axes)
        return default_grid(self.task)


# ---------------------------------------------------------------------------
# Parsing helpers


def _expect_keys(section: str, d: dict, allowed: set[str]) -> None:
    unknown = set(d) - allowed
    if unknown:
        where = f" in section {section!r}" if section else ""
        raise ConfigError(f"unknown key {sorted(unknown)[0]!r}{where}")


def _get(d: dict, key: str, kind, default, section: str = ""):
    if key not in d:
        if default is _REQUIRED:
            where = f" in section {section!r}" if section else ""
            raise ConfigError(f"missing required key {key!r}{where}")
        return default
    v = d[key]
    label = f"{section}.{key}" if section else key
    if kind is bool:
        if not isinstance(v, bool):
            raise ConfigError(f"{label} must be a boolean, got {v!r}")
        return v
    if kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            raise ConfigError(f"{label} must be an integer, got {v!r}")
        return v
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"{label} must be a number, got {v!r}")
        return float(v)
    if kind is str:
        if not isinstance(v, str):
            raise ConfigError(f"{label} must be a string, got {v!r}")
        return v
    if kind is dict:
        if not isinstance(v, dict):
            raise ConfigError(f"{label} must be an object, got {v!r}")
        return v
    raise AssertionError(f"unhandled kind {kind}")


_REQUIRED = object()


def _parse_axes(raw, section: str) -> tuple[HyperAxis, ...]:
    if not isinstance(raw, list) or not raw:
        raise ConfigError(f"{section}.axes must be a non-empty list")
    axes = []
    for i, entry in enumerate(raw):
        if not isinstance(entry, dict):
            raise ConfigError(f"{section}.axes[{i}] must be an object")
        _expect_keys(f"{section}.axes[{i}]", entry, {"name", "values", "integer"})
        name = _get(entry, "name", str, _REQUIRED, f"{section}.axes[{i}]")
        values = entry.get("values")
        if (not isinstance(values, list) or not values
                or any(isinstance(v, bool) or not isinstance(v, (int, float))
                       for v in values)):
            raise ConfigError(f"{section}.axes[{i}].values must be a list of numbers")
        integer = entry.get("integer", all(float(v) == int(v) for v in values))
        if not isinstance(integer, bool):
            raise ConfigError(f"{section}.axes[{i}].integer must be a boolean")
        try:
            axes.append(HyperAxis(name, tuple(float(v) for v in values), integer))
        except ValueError as e:
            raise ConfigError(f"{section}.axes[{i}]: {e}") from e
    return tuple(axes)


def _parse_tuner(d: dict) -> TunerConfig:
    _expect_keys("tuner", d, {"axes", "window", "hyper_lr", "init_std",
                              "freeze_precision", "update_sign"})
    axes = _parse_axes(d["axes"], "tuner") if "axes" in d else None
    cfg = TunerConfig(
        axes=axes,
        window=_get(d, "window", int, 10, "tuner"),
        hyper_lr=_get(d, "hyper_lr", float, 0.1, "tuner"),
        init_std=_get(d, "init_std", float, 0.2, "tuner"),
        freeze_precision=_get(d, "freeze_precision", bool, False, "tuner"),
        update_sign=_get(d, "update_sign", str, "ascent", "tuner"),
    )
    if cfg.window < 0:
        raise ConfigError("tuner.window must be non-negative")
    if cfg.hyper_lr < 0:
        raise ConfigError("tuner.hyper_lr must be non-negative")
    if cfg.init_std <= 0:
        raise ConfigError("tuner.init_std must be positive")
    if cfg.update_sign not in UPDATE_SIGNS:
        raise ConfigError(f"tuner.update_sign must be one of {UPDATE_SIGNS}")
    return cfg


def _parse_schedule(d: dict) -> ScheduleConfig:
    _expect_keys("schedule", d, {"initial_lr", "iterations"})
    cfg = ScheduleConfig(
        initial_lr=_get(d, "initial_lr", float, 0.1, "schedule"),
        iterations=_get(d, "iterations", int, 30, "schedule"),
    )
    if cfg.initial_lr <= 0:
        raise ConfigError("schedule.initial_lr must be positive")
    if cfg.iterations < 1:
        raise ConfigError("schedule.iterations must be at least 1")
    return cfg


def _parse_loss(d: dict) -> LossConfig:
    _expect_keys("loss", d, {"matching_coeff", "wd_coeff", "min_entropy",
                             "use_er", "match_input_site"})
    cfg = LossConfig(
        matching_coeff=_get(d, "matching_coeff", float, 1.0, "loss"),
        wd_coeff=_get(d, "wd_coeff", float, 0.1, "loss"),
        min_entropy=_get(d, "min_entropy", float, 0.5, "loss"),
        use_er=_get(d, "use_er", bool, True, "loss"),
        match_input_site=_get(d, "match_input_site", bool, True, "loss"),
    )
    if cfg.matching_coeff < 0 or cfg.wd_coeff < 0 or cfg.min_entropy < 0:
        raise ConfigError("loss coefficients must be non-negative")
    return cfg


def _parse_synthetic(d: dict) -> SyntheticConfig:
    _expect_keys("synthetic", d, {"classes", "per_class", "test_per_class",
                                  "input_dim", "spread"})
    cfg = SyntheticConfig(
        classes=_get(d, "classes", int, 10, "synthetic"),
        per_class=_get(d, "per_class", int, 200, "synthetic"),
        test_per_class=_get(d, "test_per_class", int, 50, "synthetic"),
        input_dim=_get(d, "input_dim", int, 784, "synthetic"),
        spread=_get(d, "spread", float, 1.0, "synthetic"),
    )
    if not 2 <= cfg.classes <= 10:
        raise ConfigError("synthetic.classes must be between 2 and 10")
    if cfg.per_class < 1 or cfg.test_per_class < 1:
        raise ConfigError("synthetic per-class counts must be positive")
    if cfg.input_dim != 784:
        raise ConfigError("synthetic.input_dim must be 784 to fit the mlp")
    if cfg.spread <= 0:
        raise ConfigError("synthetic.spread must be positive")
    return cfg


TOP_KEYS = {
    "task", "seed", "output_dir", "data_dir", "partition", "use_tuner",
    "use_matching", "use_wd", "aggregation", "n_clients", "client_fraction",
    "rounds", "batch_size", "validation_size", "eval_every", "train_subset",
    "parallel_clients", "loss", "tuner", "schedule", "synthetic",
}


def from_dict(d: dict) -> ExperimentConfig:
    """Validate a raw JSON object and fill in every default."""
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    _expect_keys("", d, TOP_KEYS)
    task = _get(d, "task", str, _REQUIRED)
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    seed = _get(d, "seed", int, _REQUIRED)
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    output_dir = _get(d, "output_dir", str, f"runs/{task}-seed{seed}")
    if not output_dir:
        raise ConfigError("output_dir must be non-empty")

    train_subset = None
    if d.get("train_subset") is not None:
        train_subset = _get(d, "train_subset", int, None)

    cfg = ExperimentConfig(
        task=task,
        seed=seed,
        output_dir=output_dir,
        data_dir=_get(d, "data_dir", str, None) if d.get("data_dir") is not None else None,
        partition=_get(d, "partition", str, "iid"),
        use_tuner=_get(d, "use_tuner", bool, False),
        use_matching=_get(d, "use_matching", bool, False),
        use_wd=_get(d, "use_wd", bool, False),
        aggregation=_get(d, "aggregation", str, "literal"),
        n_clients=_get(d, "n_clients", int, 10),
        client_fraction=_get(d, "client_fraction", float, 1.0),
        rounds=_get(d, "rounds", int, 200),
        batch_size=_get(d, "batch_size", int, 64),
        validation_size=_get(d, "validation_size", int, 1000),
        eval_every=_get(d, "eval_every", int, 10),
        train_subset=train_subset,
        parallel_clients=_get(d, "parallel_clients", int, 1),
        loss=_parse_loss(_get(d, "loss", dict, {}, "")),
        tuner=_parse_tuner(_get(d, "tuner", dict, {}, "")),
        schedule=_parse_schedule(_get(d, "schedule", dict, {}, "")),
        synthetic=_parse_synthetic(_get(d, "synthetic", dict, {}, "")),
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.partition not in PARTITIONS:
        raise ConfigError(f"partition must be one of {PARTITIONS}")
    if cfg.aggregation not in AGGREGATIONS:
        raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
    if cfg.use_matching and cfg.use_wd:
        raise ConfigError("use_matching and use_wd are mutually exclusive")
    if cfg.n_clients < 1:
        raise ConfigError("n_clients must be at least 1")
    if not 0 < cfg.client_fraction <= 1:
        raise ConfigError("client_fraction must be in (0, 1]")
    if cfg.rounds < 0:
        raise ConfigError("rounds must be non-negative")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be at least 1")
    if cfg.validation_size < 1:
        raise ConfigError("validation_size must be at least 1")
    if cfg.eval_every < 1:
        raise ConfigError("eval_every must be at least 1")
    if cfg.train_subset is not None and cfg.train_subset < cfg.n_clients:
        raise ConfigError("train_subset must cover at least one sample per client")
    if cfg.parallel_clients < 1:
        raise ConfigError("parallel_clients must be at least 1")
    if cfg.task != "synthetic" and not cfg.data_dir:
        raise ConfigError(f"data_dir is required for task {cfg.task!r}")
    if cfg.partition == "non_iid":
        classes = cfg.synthetic.classes if cfg.task == "synthetic" else 10
        if cfg.n_clients != classes:
            raise ConfigError(
                f"non_iid partition assigns one class per client, so n_clients "
                f"must equal the class count ({classes}), got {cfg.n_clients}")
    if cfg.use_tuner:
        grid = cfg.hyper_grid()
        names = sorted(a.name for a in grid.axes)
        if names != ["learning_rate", "sgd_iterations"]:
            raise ConfigError(
                "tuner.axes must define exactly 'learning_rate' and "
                f"'sgd_iterations', got {names}")
        for a in grid.axes:
            if a.name == "sgd_iterations" and not a.integer:
                raise ConfigError("tuner axis 'sgd_iterations' must be integer")
            if a.name == "learning_rate" and a.values[0] <= 0:
                raise ConfigError("tuner learning rates must be positive")
            if a.name == "sgd_iterations" and a.values[0] < 1:
                raise ConfigError("tuner iteration counts must be at least 1")


def parse_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a JSON config file."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return from_dict(raw)


# ---------------------------------------------------------------------------
# Echo / hashing


def to_dict(cfg: ExperimentConfig) -> dict:
    """Full materialized config as a JSON-ready dict (defaults included)."""
    grid = cfg.hyper_grid()
    return {
        "task": cfg.task,
        "seed": cfg.seed,
        "output_dir": cfg.output_dir,
        "data_dir": cfg.data_dir,
        "partition": cfg.partition,
        "use_tuner": cfg.use_tuner,
        "use_matching": cfg.use_matching,
        "use_wd": cfg.use_wd,
        "aggregation": cfg.aggregation,
        "n_clients": cfg.n_clients,
        "client_fraction": cfg.client_fraction,
        "rounds": cfg.rounds,
        "batch_size": cfg.batch_size,
        "validation_size": cfg.validation_size,
        "eval_every": cfg.eval_every,
        "train_subset": cfg.train_subset,
        "parallel_clients": cfg.parallel_clients,
        "loss": {
            "matching_coeff": cfg.loss.matching_coeff,
            "wd_coeff": cfg.loss.wd_coeff,
            "min_entropy": cfg.loss.min_entropy,
            "use_er": cfg.loss.use_er,
            "match_input_site": cfg.loss.match_input_site,
        },
        "tuner": {
            "axes": [{"name": a.name, "values": list(a.values), "integer": a.integer}
                     for a in grid.axes],
            "window": cfg.tuner.window,
            "hyper_lr": cfg.tuner.hyper_lr,
            "init_std": cfg.tuner.init_std,
            "freeze_precision": cfg.tuner.freeze_precision,
            "update_sign": cfg.tuner.update_sign,
        },
        "schedule": {
            "initial_lr": cfg.schedule.initial_lr,
            "iterations": cfg.schedule.iterations,
        },
        "synthetic": {
            "classes": cfg.synthetic.classes,
            "per_class": cfg.synthetic.per_class,
            "test_per_class": cfg.synthetic.test_per_class,
            "input_dim": cfg.synthetic.input_dim,
            "spread": cfg.synthetic.spread,
        },
    }


def config_hash(cfg: ExperimentConfig) -> str:
    """Hash of everything that defines the experiment except seed and paths.

    Runs that differ only in seed (or where their outputs land) share a
    hash, which is how result tables group repeats.
    """
    d = to_dict(cfg)
    for k in ("seed", "output_dir", "data_dir"):
        d.pop(k, None)
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]
