"""Anchor-based distillation of a teacher generator pair into a student translator.

Each iteration draws its batch either from the anchor set (the K real training
pairs) or from the augmented stream, following a 1:2 schedule. Anchor batches are
judged by the fine-patch discriminator and augmented batches by the coarse-patch
one; the student is updated on the weighted adversarial plus perceptual objective.
"""
from __future__ import annotations

import csv
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_images, to_tensor
from .augment import AugmentedPairStream
from .datagen import ImagePair, PairedDataset
from .exceptions import ConfigurationError, ContractError, TrainingDivergence
from .losses import (
    AdvTerm,
    LossWeights,
    combined_adv_loss,
    combined_per_loss,
    lsgan_d_loss,
    lsgan_g_loss,
    perceptual_loss,
    total_loss,
)
from .metrics import ssim_batch, translate
from .nets import (
    FeatureExtractorSpec,
    PatchDiscriminatorSpec,
    StudentTranslatorSpec,
    build_feature_extractor,
    build_patch_discriminator,
    build_student,
    save_checkpoint,
    snapshot,
)

ANCHOR, AUGMENTED = "anchor", "augmented"
MODES = ("BL", "Aug", "Aug+Anchor")
LOG_FIELDS = ("iteration", "mode", "adv_fine", "adv_crs", "per_anchor", "per_aug", "total")


def set_deterministic(enabled=True):
    torch.use_deterministic_algorithms(enabled)
    if enabled:
        torch.set_num_threads(1)
        os.environ.setdefault("CUBLAS_WORKSPACE_CONFIG", ":4096:8")


# -- anchors and schedule ---------------------------------------------------


class AnchorSet:
    """The K original training pairs; read-only for the lifetime of a run."""

    def __init__(self, pairs, max_k=None):
        pairs = list(pairs.pairs if isinstance(pairs, PairedDataset) else pairs)
        if not pairs:
            raise ConfigurationError("anchor set must be nonempty")
        if max_k is not None and len(pairs) > max_k:
            raise ConfigurationError(f"few-shot anchor set allows at most {max_k} pairs, got {len(pairs)}")
        src = np.stack([p.source for p in pairs]).astype(np.float32)
        tgt = np.stack([p.target for p in pairs]).astype(np.float32)
        src.setflags(write=False)
        tgt.setflags(write=False)
        self.sources, self.targets = src, tgt
        self._src_t = torch.from_numpy(src.copy())
        self._tgt_t = torch.from_numpy(tgt.copy())

    @property
    def K(self):
        return len(self.sources)

    def __len__(self):
        return self.K

    def sample(self, n, rng: np.random.Generator):
        """Uniform draw with replacement."""
        idx = torch.from_numpy(rng.integers(0, self.K, size=n))
        return self._src_t[idx], self._tgt_t[idx]


class SamplingSchedule:
    """Decides whether each iteration draws anchor or augmented data.

    ``deterministic_cycle`` repeats ``ratio_in`` anchor draws followed by
    ``ratio_out`` augmented draws; ``bernoulli`` draws anchor with probability
    ``ratio_in / (ratio_in + ratio_out)`` from a seeded stream.
    """

    def __init__(self, ratio_in=1, ratio_out=2, mode="deterministic_cycle", seed=0):
        if mode not in ("deterministic_cycle", "bernoulli"):
            raise ConfigurationError(f"unknown schedule mode {mode!r}")
        if ratio_in < 0 or ratio_out < 0 or ratio_in + ratio_out == 0:
            raise ConfigurationError("schedule ratios must be >= 0 and not both zero")
        self.ratio_in, self.ratio_out, self.mode, self.seed = ratio_in, ratio_out, mode, seed
        self._pattern = [ANCHOR] * ratio_in + [AUGMENTED] * ratio_out
        self._rng = np.random.default_rng(seed)
        self.draws = 0

    @property
    def anchor_fraction(self):
        return self.ratio_in / (self.ratio_in + self.ratio_out)

    def next(self):
        if self.mode == "deterministic_cycle":
            out = self._pattern[self.draws % len(self._pattern)]
        else:
            out = ANCHOR if self._rng.random() < self.anchor_fraction else AUGMENTED
        self.draws += 1
        return out


def schedule_next(s: SamplingSchedule):
    return s.next()


def schedule_for_mode(mode, kind="deterministic_cycle", seed=0, ratio_in=1, ratio_out=2):
    if mode == "BL":
        return SamplingSchedule(1, 0, "deterministic_cycle", seed)
    if mode == "Aug":
        return SamplingSchedule(0, 1, "deterministic_cycle", seed)
    if mode == "Aug+Anchor":
        return SamplingSchedule(ratio_in, ratio_out, kind, seed)
    raise ConfigurationError(f"unknown mode {mode!r}; expected one of {MODES}")


# -- training state ---------------------------------------------------------


@dataclass
class DistillConfig:
    mode: str = "Aug+Anchor"
    iterations: int = 30000
    batch_size: int = 8
    weights: LossWeights = field(default_factory=LossWeights)
    schedule_mode: str = "deterministic_cycle"
    ratio_in: int = 1
    ratio_out: int = 2
    lr: float = 2e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    student: StudentTranslatorSpec = field(default_factory=StudentTranslatorSpec)
    discriminator: PatchDiscriminatorSpec = field(default_factory=PatchDiscriminatorSpec)
    extractor: FeatureExtractorSpec = field(default_factory=FeatureExtractorSpec)
    log_interval: int = 100
    checkpoint_interval: int = 0
    out_dir: str | None = None
    deterministic: bool = True
    augment_pool: int | None = None
    max_k: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigurationError("iterations must be >= 0 and batch_size >= 1")


@dataclass
class TrainState:
    student: torch.nn.Module
    d_fine: torch.nn.Module
    d_crs: torch.nn.Module
    opt_g: torch.optim.Optimizer
    opt_fine: torch.optim.Optimizer
    opt_crs: torch.optim.Optimizer
    iteration: int = 0
    history: list = field(default_factory=list)
    steps: dict = field(default_factory=lambda: {ANCHOR: 0, AUGMENTED: 0})
    d_updates: dict = field(default_factory=lambda: {"fine": 0, "coarse": 0})
    g_updates: int = 0


def init_state(config: DistillConfig, resolution=32):
    student = build_student(config.student, config.seed)
    d_fine = build_patch_discriminator("fine", config.discriminator, resolution, seed=config.seed + 1)
    d_crs = build_patch_discriminator("coarse", config.discriminator, resolution, seed=config.seed + 2)
    adam = lambda m: torch.optim.Adam(m.parameters(), lr=config.lr, betas=config.betas)
    return TrainState(student, d_fine, d_crs, adam(student), adam(d_fine), adam(d_crs))


class Distiller:
    """Owns the data sources and objective for one run; ``step`` advances a TrainState."""

    def __init__(self, config: DistillConfig, anchors: AnchorSet | None, stream: AugmentedPairStream | None,
                 extractor=None):
        self.config = config
        self.weights = config.weights
        self.anchors = anchors
        self.stream = stream
        self.extractor = extractor if extractor is not None else build_feature_extractor(config.extractor)
        self.rng = np.random.default_rng(np.random.SeedSequence([config.seed, 7]))

    def draw(self, source):
        n = self.config.batch_size
        if source == ANCHOR:
            if self.anchors is None:
                raise ContractError("anchor step requested but no anchor set is configured")
            return self.anchors.sample(n, self.rng)
        if source == AUGMENTED:
            if self.stream is None:
                raise ContractError("augmented step requested but no augmented stream is configured")
            return self.stream.sample_batch(n)
        raise ContractError(f"unknown batch source {source!r}")

    def generator_objective(self, student, disc, scale, src, tgt):
        """Returns (total, adv, per) for one batch, composed with the routing tags."""
        w = self.weights
        fake = student(src)
        adv = AdvTerm(lsgan_g_loss(disc(fake), w), scale)
        per = perceptual_loss(fake, tgt, self.extractor)
        if scale == "fine":
            adv_total = combined_adv_loss(adv, None, w)
            per_total = combined_per_loss(per, None, w)
        else:
            adv_total = combined_adv_loss(None, adv, w)
            per_total = combined_per_loss(None, per, w)
        return total_loss(adv_total, per_total, w), adv.value, per

    def step(self, state: TrainState, source, batch=None) -> TrainState:
        if source == ANCHOR:
            disc, opt_d, scale = state.d_fine, state.opt_fine, "fine"
        elif source == AUGMENTED:
            disc, opt_d, scale = state.d_crs, state.opt_crs, "coarse"
        else:
            raise ContractError(f"unknown batch source {source!r}")
        src, tgt = self.draw(source) if batch is None else batch
        w = self.weights

        with torch.no_grad():
            fake = state.student(src)
        loss_d = lsgan_d_loss(disc(tgt), disc(fake), w)
        opt_d.zero_grad(set_to_none=True)
        loss_d.backward()
        opt_d.step()
        state.d_updates[scale] += 1

        for p in disc.parameters():
            p.requires_grad_(False)
        try:
            total, adv, per = self.generator_objective(state.student, disc, scale, src, tgt)
        finally:
            for p in disc.parameters():
                p.requires_grad_(True)
        values = {"loss_d": loss_d.item(), "adv": adv.item(), "per": per.item(), "total": total.item()}
        if not all(np.isfinite(v) for v in values.values()):
            dump = self._dump(state)
            raise TrainingDivergence(
                f"non-finite loss at iteration {state.iteration + 1}: {values}; state dumped to {dump}",
                dump_path=dump,
            )
        state.opt_g.zero_grad(set_to_none=True)
        total.backward()
        state.opt_g.step()
        state.g_updates += 1

        state.iteration += 1
        state.steps[source] += 1
        state.last = {
            "iteration": state.iteration,
            "mode": source,
            "adv_fine": values["adv"] if scale == "fine" else "",
            "adv_crs": values["adv"] if scale == "coarse" else "",
            "per_anchor": values["per"] if scale == "fine" else "",
            "per_aug": values["per"] if scale == "coarse" else "",
            "total": values["total"],
        }
        return state

    def _dump(self, state):
        base = Path(self.config.out_dir) if self.config.out_dir else Path(tempfile.mkdtemp(prefix="gpd_"))
        path = base / f"divergence_dump_{state.iteration + 1:06d}"
        for name in ("student", "d_fine", "d_crs"):
            save_checkpoint(getattr(state, name), path / name, {"iteration": state.iteration})
        return path


def train_step(state: TrainState, batch_source, distiller: Distiller, batch=None) -> TrainState:
    return distiller.step(state, batch_source, batch)


def write_log(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def train(config: DistillConfig, anchors=None, teacher=None, extractor=None, callback=None) -> TrainState:
    """Run the full schedule.

    ``anchors``: PairedDataset / list of ImagePair (needed unless mode is Aug).
    ``teacher``: (G_s, G_t) pair (needed unless mode is BL).
    """
    if config.deterministic:
        set_deterministic(True)
    mode = config.mode
    anchor_set = None
    if mode != "Aug":
        if anchors is None:
            raise ConfigurationError(f"mode {mode} requires an anchor set")
        anchor_set = anchors if isinstance(anchors, AnchorSet) else AnchorSet(anchors, config.max_k)
    stream = None
    if mode != "BL":
        if teacher is None:
            raise ConfigurationError(f"mode {mode} requires source and target teacher generators")
        g_s, g_t = teacher
        stream = AugmentedPairStream(g_s, g_t, stream_seed=config.seed, pool_size=config.augment_pool)
    if anchor_set is not None:
        resolution = anchor_set.sources.shape[-1]
    else:
        resolution = stream.g_source.spec.output_resolution

    torch.manual_seed(config.seed)
    state = init_state(config, resolution)
    distiller = Distiller(config, anchor_set, stream, extractor)
    schedule = schedule_for_mode(mode, config.schedule_mode, config.seed, config.ratio_in, config.ratio_out)
    out = Path(config.out_dir) if config.out_dir else None
    for _ in range(config.iterations):
        distiller.step(state, schedule.next())
        it = state.iteration
        if it % config.log_interval == 0 or it == config.iterations:
            state.history.append(state.last)
            if callback is not None:
                callback(state)
        if out and config.checkpoint_interval and it % config.checkpoint_interval == 0:
            save_checkpoint(state.student, out / "checkpoints" / f"student_{it:06d}", {"iteration": it})
    state.distiller = distiller
    if out:
        write_log(state.history, out / "train_log.csv")
    return state


# -- estimator --------------------------------------------------------------


class GPDTranslator(BaseEstimator, TransformerMixin):
    """Few-shot image translator distilled from a teacher generator pair.

    ``fit(X, Y, teacher=(G_s, G_t))`` trains on the paired anchors ``X -> Y``
    together with teacher-augmented pairs, as selected by ``mode``:
    ``"BL"`` uses anchors only, ``"Aug"`` augmented pairs only and
    ``"Aug+Anchor"`` both at the ``ratio_in:ratio_out`` schedule.
    """

    def __init__(
        self,
        mode="Aug+Anchor",
        iterations=30000,
        batch_size=8,
        lambda1=1.0,
        lambda2=1.0,
        mu=5.0,
        schedule_mode="deterministic_cycle",
        ratio_in=1,
        ratio_out=2,
        lr=2e-4,
        beta1=0.5,
        beta2=0.999,
        encoder_widths=(16, 32, 64),
        decoder_widths=(32, 16),
        disc_base_channels=32,
        extractor_seed=0,
        extractor_taps=(2, 4),
        literal_labels=False,
        augment_pool=None,
        log_interval=100,
        checkpoint_interval=0,
        out_dir=None,
        deterministic=True,
        seed=0,
    ):
        self.mode = mode
        self.iterations = iterations
        self.batch_size = batch_size
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.mu = mu
        self.schedule_mode = schedule_mode
        self.ratio_in = ratio_in
        self.ratio_out = ratio_out
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.encoder_widths = encoder_widths
        self.decoder_widths = decoder_widths
        self.disc_base_channels = disc_base_channels
        self.extractor_seed = extractor_seed
        self.extractor_taps = extractor_taps
        self.literal_labels = literal_labels
        self.augment_pool = augment_pool
        self.log_interval = log_interval
        self.checkpoint_interval = checkpoint_interval
        self.out_dir = out_dir
        self.deterministic = deterministic
        self.seed = seed

    def _weights(self):
        kw = dict(lambda1=self.lambda1, lambda2=self.lambda2, mu=self.mu)
        return LossWeights.literal(**kw) if self.literal_labels else LossWeights(**kw)

    def _config(self):
        return DistillConfig(
            mode=self.mode,
            iterations=self.iterations,
            batch_size=self.batch_size,
            weights=self._weights(),
            schedule_mode=self.schedule_mode,
            ratio_in=self.ratio_in,
            ratio_out=self.ratio_out,
            lr=self.lr,
            betas=(self.beta1, self.beta2),
            seed=self.seed,
            student=StudentTranslatorSpec(tuple(self.encoder_widths), tuple(self.decoder_widths)),
            discriminator=PatchDiscriminatorSpec(base_channels=self.disc_base_channels),
            extractor=FeatureExtractorSpec(seed=self.extractor_seed, layer_taps=tuple(self.extractor_taps)),
            log_interval=self.log_interval,
            checkpoint_interval=self.checkpoint_interval,
            out_dir=self.out_dir,
            deterministic=self.deterministic,
            augment_pool=self.augment_pool,
        )

    def fit(self, X=None, Y=None, teacher=None):
        config = self._config()
        anchors = None
        if self.mode != "Aug":
            if X is None or Y is None:
                raise ConfigurationError(f"mode {self.mode} needs paired anchors X, Y")
            X = check_images(X, "X")
            Y = check_images(Y, "Y")
            if X.shape != Y.shape:
                raise ContractError(f"X and Y shapes differ: {X.shape} vs {Y.shape}")
            anchors = [ImagePair(x, y, "anchor") for x, y in zip(X, Y)]
        if hasattr(teacher, "generator_source_"):
            teacher = (teacher.generator_source_, teacher.generator_target_)
        state = train(config, anchors, teacher)
        self.student_ = state.student
        self.state_ = state
        self.history_ = state.history
        self.n_iter_ = state.iteration
        return self

    def transform(self, X):
        check_is_fitted(self, "student_")
        return translate(self.student_, X)

    predict = transform

    def score(self, X, Y):
        """Mean SSIM between translations of ``X`` and ``Y``."""
        return float(ssim_batch(self.transform(X), check_images(Y, "Y")).mean())
