"""Shared-latent paired augmentation.

Draw ``i`` of a stream feeds the latent code derived from ``(stream_seed, i)`` to
both the source and the target generator. Because the code is addressed by a
counter, any pair can be regenerated without replaying earlier draws.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .datagen import ImagePair, PairedDataset, write_image_folder
from .exceptions import ConfigurationError, IngestionError
from .nets import parameter_fingerprint


def latent_for_draw(dim, stream_seed, index):
    rng = np.random.default_rng(np.random.SeedSequence([int(stream_seed), int(index)]))
    return rng.standard_normal(dim).astype(np.float32)


class AugmentedPairStream:
    """On-the-fly source of augmented pairs.

    With ``pool_size`` set, draw indices wrap modulo the pool so the stream
    replays a fixed set of latent codes. That mode exists only for the
    fixed-pool ablation; the default is a fresh code per draw.
    """

    def __init__(self, g_source, g_target, stream_seed=0, pool_size=None):
        ls, lt = g_source.spec.latent, g_target.spec.latent
        if ls != lt:
            raise ConfigurationError("source and target generators must share a latent space")
        if g_source.spec.output_resolution != g_target.spec.output_resolution:
            raise ConfigurationError("source and target generator resolutions differ")
        if pool_size is not None and pool_size < 1:
            raise ConfigurationError("pool_size must be >= 1")
        self.g_source = g_source
        self.g_target = g_target
        self.latent = ls
        self.stream_seed = int(stream_seed)
        self.pool_size = pool_size
        self.counter = 0

    def _index(self, i):
        return i if self.pool_size is None else i % self.pool_size

    def latents(self, start, n):
        return np.stack(
            [latent_for_draw(self.latent.dim, self.stream_seed, self._index(i)) for i in range(start, start + n)]
        )

    @torch.no_grad()
    def sample_batch(self, n):
        """Next ``n`` pairs as (source, target) float tensors of shape (n, C, H, W)."""
        z = torch.from_numpy(self.latents(self.counter, n))
        self.counter += n
        return self.g_source(z), self.g_target(z)

    def sample_paired(self) -> ImagePair:
        index = self.counter
        src, tgt = self.sample_batch(1)
        return ImagePair(
            src[0].double().numpy(),
            tgt[0].double().numpy(),
            "augmented",
            {"draw_index": index, "latent_index": self._index(index)},
        )


def sample_paired(stream: AugmentedPairStream) -> ImagePair:
    return stream.sample_paired()


def export_augmented_set(stream: AugmentedPairStream, n: int, out_dir) -> PairedDataset:
    """Materialize ``n`` draws as PNG pair folders plus a JSON manifest."""
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IngestionError(f"cannot create {out}: {exc}") from exc
    pairs = [stream.sample_paired() for _ in range(n)]
    dataset = PairedDataset(pairs, domain_label="augmented", split_seed=stream.stream_seed)
    extra = {
        "stream_seed": stream.stream_seed,
        "pool_size": stream.pool_size,
        "latent_dim": stream.latent.dim,
        "checkpoints": {
            "source": parameter_fingerprint(stream.g_source),
            "target": parameter_fingerprint(stream.g_target),
        },
    }
    write_image_folder(dataset, out, manifest_extra=extra, prefix="aug")
    return dataset


def read_manifest(out_dir):
    return json.loads((Path(out_dir) / "manifest.json").read_text())
