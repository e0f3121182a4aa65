"""Flat run configuration shared by every CLI subcommand.

One YAML mapping of scalar keys (plus a few lists). Unknown keys are rejected,
every key has a default, and ``render`` / ``parse`` round-trip exactly.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from .datagen import OracleTransform, SyntheticSpec
from .exceptions import ConfigurationError, IngestionError
from .losses import LossWeights
from .nets import FeatureExtractorSpec, LatentSpec, PatchDiscriminatorSpec, StudentTranslatorSpec, TeacherGeneratorSpec


@dataclass
class RunConfig:
    # run
    seed: int = 0
    out: str = "runs/default"
    deterministic: bool = True
    # synthetic domain
    resolution: int = 32
    num_shapes: int = 3
    palette_seed: int = 0
    background_mode: str = "gradient"
    oracle: str = "edge_sketch"
    oracle_levels: int = 4
    oracle_gain: float = 2.0
    oracle_blend: float = 0.0
    source_pool: int = 600
    train_pool: int = 360
    test_size: int = 400
    k_shot: int = 20
    # teacher
    latent_dim: int = 128
    teacher_widths: list = field(default_factory=lambda: [128, 64, 32, 16])
    pretrain_iterations: int = 6000
    pretrain_batch: int = 32
    adapt_iterations: int = 1000
    adapt_batch: int = 16
    consistency_weight: float = 1.0
    adapt_tune_last: int = 0
    teacher_lr: float = 2e-4
    # distillation
    mode: str = "Aug+Anchor"
    iterations: int = 30000
    batch_size: int = 8
    lambda1: float = 1.0
    lambda2: float = 1.0
    mu: float = 5.0
    literal_labels: bool = False
    schedule_mode: str = "deterministic_cycle"
    ratio_in: int = 1
    ratio_out: int = 2
    lr: float = 2e-4
    augment_pool: int = 0
    disc_base_channels: int = 32
    log_interval: int = 100
    checkpoint_interval: int = 0
    extractor_seed: int = 0
    extractor_taps: list = field(default_factory=lambda: [2, 4])
    # augment export
    augment_count: int = 64
    # sweep
    scales: list = field(default_factory=lambda: [0.0625, 0.125, 0.25, 0.5, 1.0])
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    modes: list = field(default_factory=lambda: ["BL", "Aug", "Aug+Anchor"])
    scale_modes: list = field(default_factory=lambda: ["BL", "Aug", "Aug+Anchor"])
    min_gap: float = 0.01

    def __post_init__(self):
        self.validate()

    def validate(self):
        for f in fields(self):
            v = getattr(self, f.name)
            want = type(f.default) if f.default is not dataclasses.MISSING else list
            if want is float and isinstance(v, int) and not isinstance(v, bool):
                setattr(self, f.name, float(v))
            elif want is list and isinstance(v, tuple):
                setattr(self, f.name, list(v))
            elif not isinstance(v, want) or (want is int and isinstance(v, bool)):
                raise ConfigurationError(f"config key {f.name!r} must be {want.__name__}, got {v!r}")
        if self.mode not in ("BL", "Aug", "Aug+Anchor"):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if any(m not in ("BL", "Aug", "Aug+Anchor") for m in self.modes + self.scale_modes):
            raise ConfigurationError("modes / scale_modes may only list BL, Aug, Aug+Anchor")
        if not 1 <= self.k_shot <= 20:
            raise ConfigurationError("k_shot must be within 1..20")
        if self.k_shot > self.train_pool:
            raise ConfigurationError("k_shot cannot exceed train_pool")
        if any(not 0 < s <= 1 for s in self.scales):
            raise ConfigurationError("scales are fractions of train_pool in (0, 1]")
        if self.augment_pool < 0:
            raise ConfigurationError("augment_pool must be >= 0 (0 means fresh latents)")
        if self.adapt_tune_last < 0 or self.adapt_tune_last > len(self.teacher_widths):
            raise ConfigurationError("adapt_tune_last must be within 0..len(teacher_widths)")
        self.synthetic_spec().validate()
        self.oracle_transform()
        return self

    # -- typed views -----------------------------------------------------

    def synthetic_spec(self):
        return SyntheticSpec(self.resolution, self.num_shapes, self.palette_seed, self.background_mode)

    def oracle_transform(self):
        params = {
            "invert_colors": {},
            "edge_sketch": {"gain": self.oracle_gain, "blend": self.oracle_blend},
            "posterize": {"levels": self.oracle_levels},
        }
        if self.oracle not in params:
            raise ConfigurationError(f"unknown oracle {self.oracle!r}")
        return OracleTransform(self.oracle, params[self.oracle])

    def teacher_spec(self):
        return TeacherGeneratorSpec(LatentSpec(self.latent_dim), tuple(self.teacher_widths), self.resolution)

    def pretrain_config(self):
        from .teacher import AdaptConfig

        return AdaptConfig(
            iterations=self.pretrain_iterations, batch=self.pretrain_batch,
            lr_g=self.teacher_lr, lr_d=self.teacher_lr, seed=self.seed,
        )

    def adapt_config(self):
        from .teacher import AdaptConfig

        return AdaptConfig(
            iterations=self.adapt_iterations, batch=self.adapt_batch,
            consistency_weight=self.consistency_weight, lr_g=self.teacher_lr, lr_d=self.teacher_lr,
            seed=self.seed + 1, tune_last=self.adapt_tune_last,
        )

    def loss_weights(self):
        kw = dict(lambda1=self.lambda1, lambda2=self.lambda2, mu=self.mu)
        return LossWeights.literal(**kw) if self.literal_labels else LossWeights(**kw)

    def extractor_spec(self):
        return FeatureExtractorSpec(seed=self.extractor_seed, layer_taps=tuple(self.extractor_taps))

    def distill_config(self, mode=None, seed=None, out_dir=None):
        from .distill import DistillConfig

        return DistillConfig(
            mode=mode or self.mode,
            iterations=self.iterations,
            batch_size=self.batch_size,
            weights=self.loss_weights(),
            schedule_mode=self.schedule_mode,
            ratio_in=self.ratio_in,
            ratio_out=self.ratio_out,
            lr=self.lr,
            seed=self.seed if seed is None else seed,
            student=StudentTranslatorSpec(),
            discriminator=PatchDiscriminatorSpec(base_channels=self.disc_base_channels),
            extractor=self.extractor_spec(),
            log_interval=self.log_interval,
            checkpoint_interval=self.checkpoint_interval,
            out_dir=str(out_dir) if out_dir else None,
            deterministic=self.deterministic,
            augment_pool=self.augment_pool or None,
        )

    def to_dict(self):
        return dataclasses.asdict(self)

    def replace(self, **changes):
        return parse_dict({**self.to_dict(), **changes})


KEYS = tuple(f.name for f in fields(RunConfig))


def parse_dict(d):
    if d is None:
        d = {}
    if not isinstance(d, dict):
        raise ConfigurationError("config document must be a mapping")
    unknown = sorted(set(d) - set(KEYS))
    if unknown:
        raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
    return RunConfig(**d)


def parse(text):
    try:
        d = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"config is not valid YAML: {exc}") from exc
    return parse_dict(d)


def render(config: RunConfig):
    return yaml.safe_dump(config.to_dict(), sort_keys=False, default_flow_style=None)


def load(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IngestionError(f"cannot read config {path}: {exc}") from exc
    return parse(text)
