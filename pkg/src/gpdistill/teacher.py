"""Teacher generators: pretraining on the source domain and few-shot adaptation.

Adaptation clones the source generator and trains the clone against K <= 20
target images with a least-squares adversarial loss. A pairwise
distance-consistency term keeps the clone's sample geometry aligned with the
source generator on shared latent batches, which is what later makes
``(G_s(z), G_t(z))`` a usable image pair.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.base import BaseEstimator

from ._validation import check_images, to_tensor
from .exceptions import ConfigurationError, TrainingDivergence
from .losses import lsgan_d_loss, lsgan_g_loss
from .nets import (
    LatentSpec,
    PatchDiscriminatorSpec,
    TeacherGeneratorSpec,
    build_patch_discriminator,
    build_teacher_generator,
    clone_generator,
)

MAX_SHOTS = 20


@dataclass(frozen=True)
class LatentCode:
    values: np.ndarray
    seed: int


@dataclass(frozen=True)
class AdaptConfig:
    iterations: int = 2000
    batch: int = 16
    consistency_weight: float = 1.0
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    betas: tuple = (0.5, 0.999)
    seed: int = 0
    log_interval: int = 50
    # adapt only: 0 fine-tunes every layer, n > 0 only the last n upsampling
    # stages plus the RGB head
    tune_last: int = 0

    def __post_init__(self):
        if self.iterations < 0:
            raise ConfigurationError("iterations must be >= 0")
        if self.batch < 1:
            raise ConfigurationError("batch must be >= 1")
        if self.consistency_weight < 0:
            raise ConfigurationError("consistency_weight must be >= 0")
        if self.tune_last < 0:
            raise ConfigurationError("tune_last must be >= 0")


def sample_latent(spec: LatentSpec, seed: int) -> LatentCode:
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    return LatentCode(rng.standard_normal(spec.dim).astype(np.float32), int(seed))


def latent_batch(spec: LatentSpec, n: int, generator: torch.Generator):
    return torch.randn(n, spec.dim, generator=generator)


def pairwise_distances(feats):
    """Euclidean distances between rows of flattened per-sample features."""
    f = feats.reshape(feats.shape[0], -1)
    sq = (f.unsqueeze(1) - f.unsqueeze(0)).pow(2).sum(-1)
    # sqrt has an infinite slope at 0; the diagonal is masked out later anyway
    eye = torch.eye(f.shape[0], dtype=torch.bool, device=f.device)
    return torch.sqrt(sq.masked_fill(eye, 1.0)).masked_fill(eye, 0.0)


def distance_consistency_loss(src_feats, tgt_feats, temperature=1.0):
    """Mean row-wise KL(P_tgt || P_src), where row i of P is a softmax over the
    negated distances from sample i to every other sample of the same batch."""
    n = src_feats.shape[0]
    if n < 2 or tgt_feats.shape[0] != n:
        raise ConfigurationError("distance consistency needs two equal batches of >= 2 samples")
    off = ~torch.eye(n, dtype=torch.bool, device=src_feats.device)
    ds = pairwise_distances(src_feats)[off].view(n, n - 1)
    dt = pairwise_distances(tgt_feats)[off].view(n, n - 1)
    log_ps = F.log_softmax(-ds / temperature, dim=1)
    log_pt = F.log_softmax(-dt / temperature, dim=1)
    kl = (log_pt.exp() * (log_pt - log_ps)).sum(dim=1)
    return kl.mean().clamp_min(0.0)


def _check_finite(values, where, iteration):
    for name, v in values.items():
        if not np.isfinite(v):
            raise TrainingDivergence(f"non-finite {name} at {where} iteration {iteration}")


def _write_log(rows, path):
    if path is None or not rows:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


PRETRAIN_CRITIC = PatchDiscriminatorSpec(patch_scale="coarse", minibatch_std=True)


def pretrain_source(g, images, config: AdaptConfig, log_path=None, critic=PRETRAIN_CRITIC):
    """Train a copy of ``g`` as an LSGAN on source-domain images. Returns (generator, log rows)."""
    X = to_tensor(check_images(images, "source images"))
    g = clone_generator(g)
    history = []
    if config.iterations == 0:
        return g, history
    torch.manual_seed(config.seed)
    d = build_patch_discriminator(critic.patch_scale, critic, image_size=X.shape[-1], seed=config.seed + 1)
    opt_g = torch.optim.Adam(g.parameters(), lr=config.lr_g, betas=config.betas)
    opt_d = torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.betas)
    gen = torch.Generator().manual_seed(config.seed)
    latent = g.spec.latent
    g.train()
    for it in range(1, config.iterations + 1):
        idx = torch.randint(len(X), (config.batch,), generator=gen)
        real = X[idx]
        z = latent_batch(latent, config.batch, gen)
        fake = g(z)
        loss_d = lsgan_d_loss(d(real), d(fake.detach()))
        opt_d.zero_grad()
        loss_d.backward()
        opt_d.step()
        loss_g = lsgan_g_loss(d(fake))
        opt_g.zero_grad()
        loss_g.backward()
        opt_g.step()
        if it % config.log_interval == 0 or it == config.iterations:
            row = {"iteration": it, "loss_d": loss_d.item(), "loss_g": loss_g.item()}
            _check_finite(row, "pretrain", it)
            history.append(row)
    g.eval()
    _write_log(history, log_path)
    return g, history


def trainable_parameters(g, tune_last=0):
    if tune_last == 0:
        return list(g.parameters())
    if tune_last > len(g.stages):
        raise ConfigurationError(f"tune_last={tune_last} exceeds {len(g.stages)} stages")
    params = [p for st in g.stages[-tune_last:] for p in st.parameters()]
    return params + list(g.to_rgb.parameters())


def adapt(g_source, target_images, config: AdaptConfig, log_path=None):
    """Few-shot adaptation. ``g_source`` is never modified. Returns (G_t, log rows)."""
    Y = to_tensor(check_images(target_images, "target images", allow_empty=True))
    k = len(Y)
    if not 1 <= k <= MAX_SHOTS:
        raise ConfigurationError(f"adaptation needs 1..{MAX_SHOTS} target images, got {k}")
    g_target = clone_generator(g_source)
    history = []
    if config.iterations == 0:
        return g_target, history
    g_source.requires_grad_(False)
    # batch-norm statistics stay frozen at the source values, so G_t(z) and
    # G_s(z) are computed the same way and only the weights drift
    g_target.eval()
    try:
        torch.manual_seed(config.seed)
        d = build_patch_discriminator("fine", image_size=Y.shape[-1], seed=config.seed + 1)
        opt_g = torch.optim.Adam(
            trainable_parameters(g_target, config.tune_last), lr=config.lr_g, betas=config.betas
        )
        opt_d = torch.optim.Adam(d.parameters(), lr=config.lr_d, betas=config.betas)
        gen = torch.Generator().manual_seed(config.seed)
        latent = g_source.spec.latent
        n_consist = max(config.batch, 2)
        for it in range(1, config.iterations + 1):
            real = Y[torch.randint(k, (config.batch,), generator=gen)]
            z = latent_batch(latent, n_consist, gen)
            fake, feats_t = g_target(z, return_features=True)
            with torch.no_grad():
                _, feats_s = g_source(z, return_features=True)
            fake_d = fake[: config.batch]
            loss_d = lsgan_d_loss(d(real), d(fake_d.detach()))
            opt_d.zero_grad()
            loss_d.backward()
            opt_d.step()
            adv = lsgan_g_loss(d(fake_d))
            consist = distance_consistency_loss(feats_s, feats_t)
            loss_g = adv + config.consistency_weight * consist
            opt_g.zero_grad()
            loss_g.backward()
            opt_g.step()
            if it % config.log_interval == 0 or it == config.iterations:
                row = {
                    "iteration": it,
                    "adversarial_loss": adv.item(),
                    "consistency_loss": consist.item(),
                    "loss_d": loss_d.item(),
                }
                _check_finite(row, "adapt", it)
                history.append(row)
    finally:
        g_source.requires_grad_(True)
    _write_log(history, log_path)
    return g_target, history


def consistency_gap(g_source, g_target, n=16, seed=0):
    """Distance-consistency KL between the two generators on one shared latent batch."""
    gen = torch.Generator().manual_seed(seed)
    z = latent_batch(g_source.spec.latent, n, gen)
    with torch.no_grad():
        _, fs = g_source(z, return_features=True)
        _, ft = g_target(z, return_features=True)
        return float(distance_consistency_loss(fs, ft))


class FewShotTeacher(BaseEstimator):
    """Source/target generator pair exposing the estimator API.

    ``fit(source_images, target_images)`` pretrains a source generator on the
    (large) source set and adapts a clone to the (<= 20) target images.
    """

    def __init__(
        self,
        latent_dim=128,
        channel_widths=(128, 64, 32, 16),
        pretrain_iterations=2000,
        adapt_iterations=2000,
        batch=16,
        consistency_weight=1.0,
        lr_g=2e-4,
        lr_d=2e-4,
        seed=0,
    ):
        self.latent_dim = latent_dim
        self.channel_widths = channel_widths
        self.pretrain_iterations = pretrain_iterations
        self.adapt_iterations = adapt_iterations
        self.batch = batch
        self.consistency_weight = consistency_weight
        self.lr_g = lr_g
        self.lr_d = lr_d
        self.seed = seed

    def _config(self, iterations, seed_offset):
        return AdaptConfig(
            iterations=iterations,
            batch=self.batch,
            consistency_weight=self.consistency_weight,
            lr_g=self.lr_g,
            lr_d=self.lr_d,
            seed=self.seed + seed_offset,
        )

    def fit(self, source_images, target_images, log_dir=None):
        Xs = check_images(source_images, "source images")
        spec = TeacherGeneratorSpec(
            latent=LatentSpec(self.latent_dim),
            channel_widths=tuple(self.channel_widths),
            output_resolution=Xs.shape[-1],
        )
        g0 = build_teacher_generator(spec, self.seed)
        log_dir = Path(log_dir) if log_dir else None
        self.generator_source_, self.pretrain_history_ = pretrain_source(
            g0, Xs, self._config(self.pretrain_iterations, 0),
            log_dir / "pretrain_log.csv" if log_dir else None,
        )
        self.generator_target_, self.adapt_history_ = adapt(
            self.generator_source_, target_images, self._config(self.adapt_iterations, 1000),
            log_dir / "adapt_log.csv" if log_dir else None,
        )
        return self

    def sample(self, n, seed=0):
        """Return ``n`` shared-latent (source, target) image pairs as arrays."""
        from .augment import AugmentedPairStream

        stream = AugmentedPairStream(self.generator_source_, self.generator_target_, stream_seed=seed)
        src, tgt = stream.sample_batch(n)
        return src.numpy(), tgt.numpy()
