"""Synthetic paired-image domains with an analytic style oracle, plus folder ingestion.

Source images are random ellipses and convex polygons over a solid or gradient
background. A target is the source pushed through an :class:`OracleTransform`, so
the ground-truth translation of any test image is known exactly.

Pixel values of generated sources sit on the 8-bit grid ``k / 255`` (rounded to
float32 precision, stored as float64). This makes PNG export lossless and makes
``invert_colors`` an exact involution under float64 arithmetic.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from ._validation import check_image, check_power_of_two
from .exceptions import ConfigurationError, ContractError, IngestionError

PROVENANCES = ("anchor", "augmented", "synthetic-oracle")
ORACLE_KINDS = ("invert_colors", "edge_sketch", "posterize", "compose")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp")


@dataclass(frozen=True)
class SyntheticSpec:
    resolution: int = 32
    num_shapes: int = 3
    palette_seed: int = 0
    background_mode: str = "gradient"
    channels: int = 3
    palette_size: int = 8

    def validate(self):
        check_power_of_two(self.resolution, minimum=16)
        if not 2 <= self.num_shapes <= 5:
            raise ConfigurationError(f"num_shapes must be in [2, 5], got {self.num_shapes}")
        if self.background_mode not in ("solid", "gradient"):
            raise ConfigurationError(f"unknown background_mode {self.background_mode!r}")
        if self.channels != 3:
            raise ConfigurationError("only 3-channel images are supported")
        if self.palette_size < 2:
            raise ConfigurationError("palette_size must be >= 2")
        return self

    def palette(self):
        rng = np.random.default_rng(self.palette_seed)
        return rng.uniform(0.0, 1.0, size=(self.palette_size, self.channels))


@dataclass(frozen=True)
class OracleTransform:
    """A deterministic target style.

    ``params`` per kind:

    * ``invert_colors``: none
    * ``edge_sketch``: ``gain`` (edge strength multiplier, default 2.0) and
      ``blend`` (0 gives a grayscale sketch, 1 darkens edges on the input colors)
    * ``posterize``: ``levels`` (>= 2)
    * ``compose``: ``steps``, a list of ``{"kind": ..., "params": {...}}`` applied in order
    """

    kind: str = "invert_colors"
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"kind": self.kind, "params": dict(self.params)}

    @classmethod
    def from_dict(cls, d):
        return cls(kind=d["kind"], params=dict(d.get("params", {})))


@dataclass
class ImagePair:
    source: np.ndarray
    target: np.ndarray
    provenance: str = "synthetic-oracle"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.source = check_image(self.source, "source")
        self.target = check_image(self.target, "target")
        if self.source.shape != self.target.shape:
            raise ContractError(
                f"source/target shapes differ: {self.source.shape} vs {self.target.shape}"
            )
        if self.provenance not in PROVENANCES:
            raise ContractError(f"unknown provenance {self.provenance!r}")


@dataclass
class PairedDataset:
    pairs: list
    domain_label: str = ""
    split_seed: int = 0

    def __post_init__(self):
        if not self.pairs:
            raise ConfigurationError("a paired dataset must be nonempty")
        shape = self.pairs[0].source.shape
        for p in self.pairs:
            if p.source.shape != shape:
                raise ContractError("all pairs in a dataset must share resolution")

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    def __iter__(self):
        return iter(self.pairs)

    @property
    def sources(self):
        return np.stack([p.source for p in self.pairs])

    @property
    def targets(self):
        return np.stack([p.target for p in self.pairs])

    @property
    def resolution(self):
        return self.pairs[0].source.shape[-1]

    def subset(self, indices, label=None):
        return PairedDataset(
            [self.pairs[i] for i in indices],
            domain_label=self.domain_label if label is None else label,
            split_seed=self.split_seed,
        )

    def with_provenance(self, provenance):
        return PairedDataset(
            [ImagePair(p.source, p.target, provenance, dict(p.meta)) for p in self.pairs],
            self.domain_label,
            self.split_seed,
        )


def quantize(x):
    """Snap to the 8-bit grid at float32 precision, returned as float64."""
    q = np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    return q.astype(np.float32).astype(np.float64)


def _item_seed(seed, index):
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def _ellipse_mask(yy, xx, rng, res):
    cy, cx = rng.uniform(0.15, 0.85, size=2) * res
    ay, ax = rng.uniform(0.08, 0.3, size=2) * res
    theta = rng.uniform(0.0, np.pi)
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def _polygon_mask(yy, xx, rng, res):
    n = int(rng.integers(3, 7))
    cy, cx = rng.uniform(0.2, 0.8, size=2) * res
    radius = rng.uniform(0.12, 0.32) * res
    # vertices on a circle with bounded angular jitter stay convex and in order
    step = 2 * np.pi / n
    angles = rng.uniform(0, 2 * np.pi) + step * (np.arange(n) + rng.uniform(-0.3, 0.3, size=n))
    vy = cy + radius * np.sin(angles)
    vx = cx + radius * np.cos(angles)
    mask = np.ones_like(xx, dtype=bool)
    for i in range(n):
        j = (i + 1) % n
        cross = (vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i])
        mask &= cross >= 0
    return mask


def generate_source_image(spec: SyntheticSpec, seed: int) -> np.ndarray:
    """Render one (C, H, W) source image; a pure function of ``(spec, seed)``."""
    spec.validate()
    if seed < 0:
        raise ConfigurationError(f"seed must be >= 0, got {seed}")
    res = spec.resolution
    palette = spec.palette()
    rng = np.random.default_rng(np.random.SeedSequence([spec.palette_seed, int(seed)]))

    yy, xx = np.mgrid[0:res, 0:res].astype(np.float64) + 0.5
    if spec.background_mode == "solid":
        img = np.broadcast_to(palette[rng.integers(len(palette))][:, None, None], (3, res, res)).copy()
    else:
        c0, c1 = palette[rng.choice(len(palette), size=2, replace=False)]
        angle = rng.uniform(0, 2 * np.pi)
        t = ((xx - res / 2) * np.cos(angle) + (yy - res / 2) * np.sin(angle)) / res + 0.5
        t = np.clip(t, 0.0, 1.0)
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
    for _ in range(spec.num_shapes):
        color = palette[rng.integers(len(palette))]
        if rng.uniform() < 0.5:
            mask = _ellipse_mask(yy, xx, rng, res)
        else:
            mask = _polygon_mask(yy, xx, rng, res)
        img[:, mask] = color[:, None]
    return quantize(img)


def _grayscale(x):
    return x.mean(axis=0)


def _edge_sketch(x, gain=2.0, blend=0.0):
    gray = _grayscale(x)
    gy = ndimage.sobel(gray, axis=0, mode="nearest")
    gx = ndimage.sobel(gray, axis=1, mode="nearest")
    # Sobel magnitude of a unit step is 4; normalize so a full step reads as 1
    edges = np.clip(gain * np.hypot(gx, gy) / 4.0, 0.0, 1.0)
    sketch = 1.0 - edges
    base = (1.0 - blend) + blend * x
    return np.clip(sketch[None] * base, 0.0, 1.0)


def _posterize(x, levels=4):
    levels = int(levels)
    if levels < 2:
        raise ConfigurationError("posterize needs levels >= 2")
    return np.minimum(np.floor(x * levels), levels - 1) / (levels - 1)


def apply_oracle(t: OracleTransform, x) -> np.ndarray:
    """Apply a style oracle to a (C, H, W) image. Computes and returns float64."""
    if t.kind not in ORACLE_KINDS:
        raise ConfigurationError(f"unknown oracle kind {t.kind!r}")
    x = check_image(x).astype(np.float64)
    p = t.params
    if t.kind == "invert_colors":
        return 1.0 - x
    if t.kind == "edge_sketch":
        return _edge_sketch(x, gain=float(p.get("gain", 2.0)), blend=float(p.get("blend", 0.0)))
    if t.kind == "posterize":
        return _posterize(x, p.get("levels", 4))
    steps = p.get("steps", [])
    if not steps:
        raise ConfigurationError("compose needs at least one step")
    for step in steps:
        x = apply_oracle(OracleTransform.from_dict(step), x)
    return x


def build_paired_dataset(
    spec: SyntheticSpec, t: OracleTransform, n: int, seed: int, label: str = ""
) -> PairedDataset:
    if n < 1:
        raise ConfigurationError(f"n must be >= 1, got {n}")
    pairs = []
    for i in range(n):
        s = _item_seed(seed, i)
        src = generate_source_image(spec, s)
        pairs.append(ImagePair(src, apply_oracle(t, src), "synthetic-oracle", {"seed": s, "index": i}))
    return PairedDataset(pairs, domain_label=label or t.kind, split_seed=seed)


def split(dataset: PairedDataset, k_train: int, seed: int):
    """Seeded shuffle into disjoint (train, test) with exactly ``k_train`` train pairs."""
    n = len(dataset)
    if not 1 <= k_train < n:
        raise ConfigurationError(f"k_train must be in [1, {n - 1}], got {k_train}")
    perm = np.random.default_rng(seed).permutation(n)
    train = dataset.subset(sorted(perm[:k_train].tolist()))
    test = dataset.subset(sorted(perm[k_train:].tolist()))
    train.split_seed = test.split_seed = seed
    return train, test


# -- PNG folders ------------------------------------------------------------


def to_uint8(x):
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(x, path):
    arr = to_uint8(np.asarray(x)).transpose(1, 2, 0)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def read_image(path, resolution=None):
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if resolution is not None and im.size != (resolution, resolution):
                im = im.resize((resolution, resolution), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except Exception as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def _list_images(d):
    d = Path(d)
    if not d.is_dir():
        raise IngestionError(f"not a directory: {d}")
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def load_image_folder(source_dir, target_dir, resolution=32, provenance="anchor", label=""):
    """Pair images from two folders by filename."""
    src, tgt = _list_images(source_dir), _list_images(target_dir)
    unmatched = sorted(set(src) ^ set(tgt))
    if unmatched:
        raise IngestionError(f"unmatched image names: {', '.join(unmatched)}")
    if not src:
        raise IngestionError(f"no images found in {source_dir} / {target_dir}")
    pairs = [
        ImagePair(
            read_image(src[name], resolution),
            read_image(tgt[name], resolution),
            provenance,
            {"name": name},
        )
        for name in sorted(src)
    ]
    return PairedDataset(pairs, domain_label=label or Path(target_dir).name)


def write_image_folder(dataset: PairedDataset, out_dir, manifest_extra=None, prefix="img"):
    """Write ``source/`` and ``target/`` PNG folders plus ``manifest.json``."""
    out = Path(out_dir)
    try:
        (out / "source").mkdir(parents=True, exist_ok=True)
        (out / "target").mkdir(parents=True, exist_ok=True)
        entries = []
        for i, p in enumerate(dataset):
            name = f"{prefix}_{i:05d}.png"
            save_png(p.source, out / "source" / name)
            save_png(p.target, out / "target" / name)
            entries.append({"file": name, "provenance": p.provenance, **_jsonable(p.meta)})
        manifest = {
            "domain_label": dataset.domain_label,
            "split_seed": dataset.split_seed,
            "count": len(dataset),
            "quantization": "8-bit PNG, value = round(255 * x) / 255",
            "pairs": entries,
        }
        manifest.update(manifest_extra or {})
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    except OSError as exc:
        raise IngestionError(f"cannot write to {out}: {exc}") from exc
    return out


def _jsonable(d):
    return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def spec_to_dict(spec: SyntheticSpec):
    return asdict(spec)
