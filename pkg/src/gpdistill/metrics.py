"""Image-quality metrics and trend verdicts.

``perceptual_distance`` and ``frechet_distance`` are computed on features from a
pluggable extractor, so their values are only comparable between runs using the
same extractor spec.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ._validation import check_images, check_same_shape, to_tensor
from .exceptions import ConfigurationError, ContractError

C1 = 0.01**2
C2 = 0.03**2
SSIM_WINDOW = 8
MODES = ("BL", "Aug", "Aug+Anchor")


# -- SSIM -------------------------------------------------------------------


def _box_mean(a, k):
    """Mean over every k x k window (valid positions) of the last two axes."""
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]
    return s / (k * k)


def ssim_batch(X, Y, window=SSIM_WINDOW):
    """Per-image SSIM for (N, C, H, W) arrays; mean over channels and windows."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    check_same_shape(X, Y)
    if X.ndim == 3:
        X, Y = X[None], Y[None]
    if min(X.shape[-2:]) < window:
        raise ContractError(f"images smaller than the {window}x{window} SSIM window")
    mx, my = _box_mean(X, window), _box_mean(Y, window)
    vx = _box_mean(X * X, window) - mx * mx
    vy = _box_mean(Y * Y, window) - my * my
    cxy = _box_mean(X * Y, window) - mx * my
    s = ((2 * mx * my + C1) * (2 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
    return s.mean(axis=(1, 2, 3))


def ssim(x, y):
    x, y = np.asarray(x), np.asarray(y)
    check_same_shape(x, y)
    return float(ssim_batch(x[None], y[None])[0])


# -- feature distances ------------------------------------------------------


def _unit_channels(f, eps=1e-10):
    return f / (f.pow(2).sum(dim=1, keepdim=True).sqrt() + eps)


@torch.no_grad()
def perceptual_distance_batch(X, Y, extractor):
    """Per-image distance: for each tap, channel-unit-normalize the activations and
    average the squared difference over C, H, W; then sum over taps."""
    X, Y = to_tensor(X), to_tensor(Y)
    check_same_shape(X, Y)
    if X.ndim == 3:
        X, Y = X[None], Y[None]
    fx, fy = extractor(X), extractor(Y)
    total = torch.zeros(X.shape[0], dtype=torch.float64)
    for j in extractor.spec.layer_taps:
        a, b = _unit_channels(fx[j].double()), _unit_channels(fy[j].double())
        total += (a - b).pow(2).mean(dim=(1, 2, 3))
    return total.numpy()


def perceptual_distance(x, y, extractor):
    return float(perceptual_distance_batch(x, y, extractor)[0])


# -- Frechet distance -------------------------------------------------------


@dataclass
class FeatureStats:
    mean: np.ndarray
    covariance: np.ndarray
    sample_count: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.covariance = np.asarray(self.covariance, dtype=np.float64)
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ContractError("covariance must be d x d for a d-dimensional mean")
        if not np.allclose(self.covariance, self.covariance.T, atol=1e-8):
            raise ContractError("covariance must be symmetric")
        if self.sample_count < 2:
            raise ConfigurationError("feature statistics need at least 2 samples")

    @classmethod
    def from_features(cls, feats):
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ConfigurationError("need a (n >= 2, d) feature matrix")
        cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), (cov + cov.T) / 2, feats.shape[0])


def _psd_sqrt(a):
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^{1/2}).

    The trace of (S_a S_b)^{1/2} equals that of the symmetric PSD matrix
    (S_a^{1/2} S_b S_a^{1/2})^{1/2}, which is what is computed.
    """
    if a.mean.shape != b.mean.shape:
        raise ContractError(f"dimensionality mismatch: {a.mean.shape[0]} vs {b.mean.shape[0]}")
    diff = a.mean - b.mean
    ra = _psd_sqrt(a.covariance)
    m = ra @ b.covariance @ ra
    w = np.clip(np.linalg.eigvalsh((m + m.T) / 2), 0.0, None)
    value = diff @ diff + np.trace(a.covariance) + np.trace(b.covariance) - 2.0 * np.sqrt(w).sum()
    return float(max(value, 0.0))


@torch.no_grad()
def extractor_stats(X, extractor, batch=256):
    X = to_tensor(X)
    feats = torch.cat([extractor.pooled(X[i : i + batch]) for i in range(0, len(X), batch)])
    return FeatureStats.from_features(feats.double().numpy())


def frechet_report_distance(X, Y, extractor):
    """Fréchet distance between extractor stats of two image sets, with a sample-size floor."""
    d = extractor.spec.widths[max(extractor.spec.layer_taps) - 1]
    need = max(d + 1, 32)
    if min(len(X), len(Y)) < need:
        raise ConfigurationError(f"Fréchet reports need >= {need} samples per set")
    return frechet_distance(extractor_stats(X, extractor), extractor_stats(Y, extractor))


# -- evaluation -------------------------------------------------------------


@torch.no_grad()
def translate(student, X, batch=128):
    X = to_tensor(check_images(X))
    was_training = student.training
    student.eval()
    try:
        out = torch.cat([student(X[i : i + batch]) for i in range(0, len(X), batch)])
    finally:
        student.train(was_training)
    return out.numpy()


def evaluate_student(student, test_set, extractor, frechet="auto"):
    """One report row: SSIM and perceptual distance per image (mean and median),
    plus the Fréchet distance between translated and ground-truth feature stats.

    ``student`` is either a network or a callable mapping an (N, C, H, W) array
    to translated images.
    """
    if test_set is None or len(test_set) == 0:
        raise ConfigurationError("empty test set")
    X, Y = test_set.sources, test_set.targets
    out = translate(student, X) if isinstance(student, torch.nn.Module) else np.asarray(student(X))
    s = ssim_batch(out, Y)
    p = perceptual_distance_batch(out.astype(np.float32), Y.astype(np.float32), extractor)
    fd = float("nan")
    if frechet is True or frechet == "auto":
        try:
            fd = frechet_report_distance(out.astype(np.float32), Y.astype(np.float32), extractor)
        except ConfigurationError:
            if frechet is True:
                raise
    return {
        "n": len(X),
        "ssim": float(s.mean()),
        "ssim_median": float(np.median(s)),
        "perceptual": float(p.mean()),
        "perceptual_median": float(np.median(p)),
        "frechet": fd,
    }


# -- reports ----------------------------------------------------------------


def write_report_csv(rows, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in keys})


def _fmt(v):
    return repr(v) if isinstance(v, float) else v


def read_report_csv(path):
    rows = []
    with Path(path).open() as fh:
        for r in csv.DictReader(fh):
            rows.append({k: _parse(v) for k, v in r.items()})
    return rows


def _parse(v):
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def _median_by(rows, mode, scale, metric):
    vals = [r[metric] for r in rows if r["mode"] == mode and r["data_scale"] == scale]
    if not vals:
        raise ConfigurationError(f"missing report cells for mode={mode} scale={scale}")
    return float(np.median(vals))


def _strict_order(values, higher_is_better, min_gap):
    """values ordered worst -> best; each step must improve by more than min_gap
    (strictly positive improvement when min_gap is 0)."""
    gaps = []
    for a, b in zip(values, values[1:]):
        gaps.append(b - a if higher_is_better else a - b)
    ok = all(g > 0 and g >= min_gap for g in gaps)
    return ok, gaps


def trend_report(rows, ablation_scale=None, min_gap=0.0, metrics=(("ssim", True), ("perceptual", False)),
                 gapped=("ssim",)):
    """Verdicts on seed medians.

    * ``ablation_<metric>``: at ``ablation_scale``, BL < Aug < Aug+Anchor in quality.
      ``min_gap`` applies to the metrics in ``gapped``; the others need strict order only.
    * ``scale_benefit_<metric>``: the Aug+Anchor improvement over BL at the smallest
      data scale is at least the improvement at the largest.

    Rows need keys ``mode``, ``data_scale``, ``seed`` and one per metric. Verdicts
    whose cells are entirely absent from ``rows`` are skipped; partially present
    grids raise.
    """
    verdicts = {}
    scales = sorted({r["data_scale"] for r in rows if r["mode"] == "BL"}, key=float)
    modes_at = lambda s: {r["mode"] for r in rows if r["data_scale"] == s}
    if ablation_scale is not None:
        present = modes_at(ablation_scale)
        if not present:
            raise ConfigurationError(f"no rows at ablation scale {ablation_scale}")
        for metric, hib in metrics:
            meds = [_median_by(rows, m, ablation_scale, metric) for m in MODES]
            gap = min_gap if metric in gapped else 0.0
            ok, gaps = _strict_order(meds, hib, gap)
            verdicts[f"ablation_{metric}"] = {
                "pass": ok,
                "medians": dict(zip(MODES, meds)),
                "gaps": gaps,
                "min_gap": gap,
            }
    sweep = [s for s in scales if s != ablation_scale and "Aug+Anchor" in modes_at(s)]
    if len(sweep) >= 2:
        lo, hi = sweep[0], sweep[-1]
        for metric, hib in metrics:
            benefit = {}
            for s in (lo, hi):
                bl = _median_by(rows, "BL", s, metric)
                full = _median_by(rows, "Aug+Anchor", s, metric)
                benefit[s] = full - bl if hib else bl - full
            verdicts[f"scale_benefit_{metric}"] = {
                "pass": benefit[lo] >= benefit[hi],
                "benefit_smallest": benefit[lo],
                "benefit_largest": benefit[hi],
                "scales": [lo, hi],
            }
    if not verdicts:
        raise ConfigurationError("no verdicts could be computed from the given rows")
    return verdicts


def write_verdicts(verdicts, path):
    Path(path).write_text(json.dumps(verdicts, indent=2, sort_keys=True, default=float))


def contact_sheet(columns, path, max_rows=8, pad=2):
    """Write a PNG grid; ``columns`` is a list of (N, C, H, W) arrays shown side by side
    (e.g. input | student output | ground truth)."""
    from PIL import Image

    cols = [np.asarray(c)[:max_rows] for c in columns]
    n, _, h, w = cols[0].shape
    sheet = np.ones((n * (h + pad) + pad, len(cols) * (w + pad) + pad, 3))
    for j, col in enumerate(cols):
        for i in range(n):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            sheet[y : y + h, x : x + w] = np.clip(col[i], 0, 1).transpose(1, 2, 0)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(sheet * 255).astype(np.uint8)).save(path)
    return Path(path)
