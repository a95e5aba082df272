"""Run configuration: hyperparameters, benchmark shape, parsing, hashing.

Config files are line-oriented ``key = value`` text; ``#`` starts a comment.
Values parse against the field types of :class:`WorldConfig` and
:class:`TrainerConfig`, which share one flat key namespace. Unknown keys and
invariant violations fail with the offending key named.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field, fields
from typing import Iterable, Optional

from .ood import SCORERS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    """Shape of the synthetic benchmark."""

    num_classes: int = 10
    num_id_classes: int = 4
    feature_dim: int = 16
    feature_spread: float = 0.25
    background_spread: float = 0.25
    mean_scale: float = 1.2
    style_scale: float = 1.5
    ood_primary_weight: float = 1.0
    ood_secondary_weight: float = 0.6
    ood_dir_noise: float = 0.15
    ood_radius: float = 1.0
    num_labeled: int = 50
    unlabeled_id: int = 60
    unlabeled_mix: int = 180
    unlabeled_ood: int = 60
    min_instances: int = 2
    max_instances: int = 5
    box_min: float = 0.05
    box_max: float = 0.3

    def validate(self) -> None:
        if not 0 < self.num_id_classes < self.num_classes:
            raise ConfigError("num_id_classes: need 0 < num_id_classes < num_classes")
        if self.feature_dim < 2:
            raise ConfigError("feature_dim: must be at least 2")
        if self.feature_spread <= 0:
            raise ConfigError("feature_spread: must be positive")
        if self.background_spread < 0:
            raise ConfigError("background_spread: must be non-negative")
        if self.style_scale < 0:
            raise ConfigError("style_scale: must be non-negative")
        if self.num_labeled < 1:
            raise ConfigError("num_labeled: need at least one labeled scene")
        if self.unlabeled_id + self.unlabeled_mix + self.unlabeled_ood < 1:
            raise ConfigError("unlabeled_id/mix/ood: need at least one unlabeled scene")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("min_instances/max_instances: bad range")
        if not 0 < self.box_min <= self.box_max < 1:
            raise ConfigError("box_min/box_max: bad range")


@dataclass(frozen=True)
class TrainerConfig:
    """Every training knob, paper-derived defaults where they exist.

    tau is the pseudo-label classification threshold, tau_prime the OOD
    filter on detections, tau_ood the stricter threshold for mining ID
    training targets for the OOD head. tau_prime = 0 disables filtering
    entirely (the plain semi-supervised baseline).
    """

    tau: float = 0.7
    tau_prime: float = 0.5
    tau_ood: float = 0.7
    lambda_unsup: float = 2.0
    lambda_ood: float = 0.1
    alpha: float = 0.999
    fg_iou: float = 0.7
    bg_iou: float = 0.3
    proposals_per_image: int = 256
    ood_subsample: int = 64
    burn_in_iters: int = 300
    total_iters: int = 1800
    eval_interval: int = 250
    learning_rate: float = 0.05
    nms_threshold: float = 0.5
    weak_noise: float = 0.05
    strong_noise: float = 0.2
    scorer: str = "ova"
    seed: int = 0
    unsup_regression: bool = True
    # artifact-level settings
    labeled_batch: int = 8
    unlabeled_batch: int = 8
    per_gt_copies: int = 8
    jitter_scale: float = 0.4
    det_bg_ratio: float = 3.0
    det_bg_floor: int = 8
    hidden_dim: int = 0
    ood_hidden_dim: int = 16
    energy_temperature: float = 1.0
    eval_scenes: int = 32
    eval_unlabeled_cap: int = 64

    def validate(self) -> None:
        if not 0.0 <= self.tau_prime <= 1.0:
            raise ConfigError("tau_prime: must lie in [0, 1] (0 disables filtering)")
        if not 0.5 <= self.tau_ood <= 1.0:
            raise ConfigError("tau_ood: three-band mining requires 0.5 <= tau_ood <= 1")
        if self.tau_prime > self.tau_ood:
            raise ConfigError("tau_prime: must not exceed tau_ood")
        if self.tau <= 0:
            raise ConfigError("tau: must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha: EMA weight must lie in [0, 1]")
        if self.lambda_unsup < 0 or self.lambda_ood < 0:
            raise ConfigError("lambda_unsup/lambda_ood: must be non-negative")
        if not self.fg_iou > self.bg_iou >= 0:
            raise ConfigError("fg_iou/bg_iou: need fg_iou > bg_iou >= 0")
        if self.ood_subsample < 1 or self.ood_subsample > self.proposals_per_image:
            raise ConfigError("ood_subsample: need 1 <= ood_subsample <= proposals_per_image")
        if self.burn_in_iters < 0 or self.total_iters < self.burn_in_iters:
            raise ConfigError("total_iters: need total_iters >= burn_in_iters >= 0")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval: must be at least 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate: must be positive")
        if self.nms_threshold < 0 or self.nms_threshold > 1:
            raise ConfigError("nms_threshold: must lie in [0, 1]")
        if self.weak_noise < 0 or self.strong_noise < 0:
            raise ConfigError("weak_noise/strong_noise: must be non-negative")
        if self.scorer not in SCORERS:
            raise ConfigError(f"scorer: unknown scorer {self.scorer!r}")
        if self.labeled_batch < 1 or self.unlabeled_batch < 1:
            raise ConfigError("labeled_batch/unlabeled_batch: must be at least 1")
        if self.per_gt_copies < 1:
            raise ConfigError("per_gt_copies: must be at least 1")
        if self.det_bg_ratio < 0 or self.det_bg_floor < 0:
            raise ConfigError("det_bg_ratio/det_bg_floor: must be non-negative")
        if self.jitter_scale < 0:
            raise ConfigError("jitter_scale: must be non-negative")
        if self.hidden_dim < 0 or self.ood_hidden_dim < 0:
            raise ConfigError("hidden_dim/ood_hidden_dim: must be non-negative")
        if self.energy_temperature <= 0:
            raise ConfigError("energy_temperature: must be positive")
        if self.eval_scenes < 1:
            raise ConfigError("eval_scenes: must be at least 1")
        if self.eval_unlabeled_cap < 1:
            raise ConfigError("eval_unlabeled_cap: must be at least 1")


@dataclass(frozen=True)
class RunConfig:
    """One runnable experiment: benchmark shape plus trainer settings."""

    world: WorldConfig = field(default_factory=WorldConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)

    def validate(self) -> None:
        self.world.validate()
        self.trainer.validate()

    def with_overrides(self, overrides: dict[str, object]) -> "RunConfig":
        world_keys = {f.name for f in fields(WorldConfig)}
        trainer_keys = {f.name for f in fields(TrainerConfig)}
        w, t = {}, {}
        for key, value in overrides.items():
            if key in world_keys:
                w[key] = value
            elif key in trainer_keys:
                t[key] = value
            else:
                raise ConfigError(f"unknown key {key!r}")
        return RunConfig(
            world=dataclasses.replace(self.world, **w),
            trainer=dataclasses.replace(self.trainer, **t),
        )

    def items(self) -> list[tuple[str, object]]:
        out = [(f.name, getattr(self.world, f.name)) for f in fields(WorldConfig)]
        out += [(f.name, getattr(self.trainer, f.name)) for f in fields(TrainerConfig)]
        return sorted(out)


def _field_types() -> dict[str, type]:
    types: dict[str, type] = {}
    for cls in (WorldConfig, TrainerConfig):
        for f in fields(cls):
            if f.name in types:
                raise RuntimeError(f"config key collision: {f.name}")
            types[f.name] = f.type if isinstance(f.type, type) else type(f.default)
    return types


CONFIG_KEY_TYPES = _field_types()


def parse_value(key: str, text: str) -> object:
    """Parse one raw value against the declared type of its key."""
    if key not in CONFIG_KEY_TYPES:
        raise ConfigError(f"unknown key {key!r}")
    target = CONFIG_KEY_TYPES[key]
    text = text.strip()
    try:
        if target is bool:
            lowered = text.lower()
            if lowered in ("true", "on", "1", "yes"):
                return True
            if lowered in ("false", "off", "0", "no"):
                return False
            raise ValueError(text)
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {target.__name__}") from None


def parse_override_list(items: Iterable[str]) -> dict[str, object]:
    out: dict[str, object] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, text = item.split("=", 1)
        key = key.strip()
        out[key] = parse_value(key, text)
    return out


def read_config_file(path) -> dict[str, object]:
    out: dict[str, object] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, text = line.split("=", 1)
            key = key.strip()
            out[key] = parse_value(key, text)
    return out


def config_hash(config: RunConfig, extra: Optional[dict] = None) -> str:
    """Deterministic digest of every semantically meaningful setting."""
    lines = [f"{k} = {v!r}" for k, v in config.items()]
    for k in sorted(extra or {}):
        lines.append(f"{k} = {extra[k]!r}")
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class ExperimentManifest:
    """A matrix of runs: base config x variant overrides x seeds."""

    base: RunConfig
    variants: tuple[tuple[str, tuple[tuple[str, object], ...]], ...]
    seeds: tuple[int, ...]
    preset: str = "custom"

    def variant_config(self, name: str, seed: int) -> RunConfig:
        overrides = dict(dict(self.variants)[name])
        overrides["seed"] = seed
        return self.base.with_overrides(overrides)

    @property
    def hash(self) -> str:
        extra = {
            "preset": self.preset,
            "seeds": list(self.seeds),
            "variants": [[name, sorted(list(ov))] for name, ov in self.variants],
        }
        return config_hash(self.base, extra)


def parse_config(path: Optional[str], overrides: Iterable[str] = ()) -> RunConfig:
    """Defaults, overlaid by the config file, overlaid by key=value overrides."""
    config = RunConfig()
    if path is not None:
        config = config.with_overrides(read_config_file(path))
    config = config.with_overrides(parse_override_list(overrides))
    config.validate()
    return config


def _variants(axis: str, values: Iterable[object], fmt=lambda v: str(v)):
    return tuple((f"{axis}-{fmt(v)}", ((axis, v),)) for v in values)


def preset_manifest(name: str, base: RunConfig, seeds: Iterable[int] = (0, 1, 2)) -> ExperimentManifest:
    """Named experiment matrices covering the benchmark's comparison axes."""
    seeds = tuple(int(s) for s in seeds)
    if name == "single":
        variants = (("run", ()),)
    elif name == "no-filter-baseline":
        variants = (("run", (("tau_prime", 0.0), ("lambda_ood", 0.0))),)
    elif name == "combo-sweep":
        variants = (
            ("id-only", (("unlabeled_id", 100), ("unlabeled_mix", 0), ("unlabeled_ood", 0))),
            ("id-mix", (("unlabeled_id", 100), ("unlabeled_mix", 150), ("unlabeled_ood", 0))),
            ("id-mix-ood", (("unlabeled_id", 100), ("unlabeled_mix", 150), ("unlabeled_ood", 50))),
        )
    elif name == "label-sweep":
        variants = _variants("num_labeled", (25, 50, 100))
    elif name == "idclass-sweep":
        variants = _variants("num_id_classes", (2, 4, 6))
    elif name == "scorer-ablation":
        variants = tuple((scorer, (("scorer", scorer),)) for scorer in ("msp", "energy", "entropy", "ova"))
    else:
        raise ConfigError(f"unknown preset {name!r}")
    return ExperimentManifest(base=base, variants=variants, seeds=seeds, preset=name)


PRESETS = (
    "single",
    "no-filter-baseline",
    "combo-sweep",
    "label-sweep",
    "idclass-sweep",
    "scorer-ablation",
)
