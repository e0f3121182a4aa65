"""Network definitions: teacher generator, student translator, patch
discriminators and frozen feature extractors, plus checkpoint I/O.

Every builder takes an explicit seed and initializes under a forked torch RNG, so
building a network never perturbs global random state.
"""
from __future__ import annotations

import copy
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ._validation import check_power_of_two
from .exceptions import ConfigurationError, ContractError, IngestionError

FINE_LAYERS = ((4, 2), (3, 1), (1, 1))
COARSE_LAYERS = ((4, 2), (4, 2), (4, 2), (2, 1), (1, 1))


# -- specs ------------------------------------------------------------------


@dataclass(frozen=True)
class LatentSpec:
    dim: int = 128
    distribution: str = "standard_normal"

    def __post_init__(self):
        if self.dim < 2:
            raise ConfigurationError(f"latent dim must be >= 2, got {self.dim}")
        if self.distribution != "standard_normal":
            raise ConfigurationError("only the standard normal latent distribution is supported")


@dataclass(frozen=True)
class TeacherGeneratorSpec:
    latent: LatentSpec = field(default_factory=LatentSpec)
    channel_widths: tuple = (128, 64, 32, 16)
    output_resolution: int = 32
    channels: int = 3

    @property
    def base_resolution(self):
        return self.output_resolution // 2 ** len(self.channel_widths)

    def validate(self):
        check_power_of_two(self.output_resolution, minimum=16, name="output_resolution")
        n = len(self.channel_widths)
        if n < 1 or self.base_resolution < 1 or self.base_resolution * 2**n != self.output_resolution:
            raise ConfigurationError(
                f"{n} upsampling stages cannot reach resolution {self.output_resolution}"
            )
        return self


@dataclass(frozen=True)
class StudentTranslatorSpec:
    encoder_widths: tuple = (16, 32, 64)
    decoder_widths: tuple = (32, 16)
    skip_connections: bool = True
    channels: int = 3

    def validate(self):
        if len(self.encoder_widths) < 1 or len(self.decoder_widths) != len(self.encoder_widths) - 1:
            raise ConfigurationError("decoder_widths must have one fewer stage than encoder_widths")
        return self


@dataclass(frozen=True)
class PatchDiscriminatorSpec:
    conv_layers: tuple | None = None
    base_channels: int = 32
    patch_scale: str = "fine"
    channels: int = 3
    max_mult: int = 4
    minibatch_std: bool = False

    def layers(self):
        if self.conv_layers is not None:
            return tuple(tuple(map(int, l)) for l in self.conv_layers)
        return FINE_LAYERS if self.patch_scale == "fine" else COARSE_LAYERS


@dataclass(frozen=True)
class FeatureExtractorSpec:
    kind: str = "fixed_random"
    layer_taps: tuple = (2, 4)
    seed: int = 0
    widths: tuple = (16, 32, 32, 64)
    strides: tuple = (1, 2, 1, 2)
    weights_path: str | None = None

    def validate(self):
        if self.kind not in ("fixed_random", "external_pretrained"):
            raise ConfigurationError(f"unknown extractor kind {self.kind!r}")
        if len(self.widths) != len(self.strides):
            raise ConfigurationError("widths and strides must have equal length")
        if not self.layer_taps or any(not 1 <= j <= len(self.widths) for j in self.layer_taps):
            raise ConfigurationError(f"layer_taps must index layers 1..{len(self.widths)}")
        return self


def spec_to_dict(spec):
    return json.loads(json.dumps(asdict(spec)))


def _seeded(seed, build):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        return build()


# -- teacher ----------------------------------------------------------------


class TeacherGenerator(nn.Module):
    """Latent vector -> image in [0, 1]. Each stage doubles the resolution.

    Built in eval mode so that G(z) is a per-sample function that ignores the
    rest of the batch; only pretraining switches batch-norm statistics on.
    """

    def __init__(self, spec: TeacherGeneratorSpec):
        super().__init__()
        self.spec = spec.validate()
        w = spec.channel_widths
        b = spec.base_resolution
        self.project = nn.Linear(spec.latent.dim, w[0] * b * b)
        stages = []
        for c_in, c_out in zip(w, w[1:] + (w[-1],)):
            stages.append(
                nn.Sequential(
                    nn.Upsample(scale_factor=2, mode="nearest"),
                    nn.Conv2d(c_in, c_out, 3, padding=1),
                    nn.BatchNorm2d(c_out),
                    nn.LeakyReLU(0.2),
                )
            )
        self.stages = nn.ModuleList(stages)
        self.project_norm = nn.BatchNorm2d(w[0])
        self.to_rgb = nn.Conv2d(w[-1], spec.channels, 3, padding=1)
        self.eval()

    def forward(self, z, return_features=False):
        s = self.spec
        h = self.project(z).view(z.shape[0], s.channel_widths[0], s.base_resolution, s.base_resolution)
        h = F.leaky_relu(self.project_norm(h), 0.2)
        feats = None
        for i, stage in enumerate(self.stages):
            h = stage(h)
            if i == len(self.stages) - 2:
                feats = h
        out = torch.sigmoid(self.to_rgb(h))
        if return_features:
            # single-stage generators have no penultimate stage; fall back to the last
            return out, h if feats is None else feats
        return out


def build_teacher_generator(spec: TeacherGeneratorSpec, seed: int) -> TeacherGenerator:
    return _seeded(seed, lambda: TeacherGenerator(spec))


def clone_generator(g: nn.Module) -> nn.Module:
    return copy.deepcopy(g)


# -- student ----------------------------------------------------------------


def _conv_block(c_in, c_out, stride=1):
    k = 4 if stride == 2 else 3
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, k, stride=stride, padding=1),
        nn.InstanceNorm2d(c_out, affine=True),
        nn.LeakyReLU(0.2),
    )


class StudentTranslator(nn.Module):
    """Skip-connected encoder-decoder with a sigmoid output head."""

    def __init__(self, spec: StudentTranslatorSpec):
        super().__init__()
        self.spec = spec.validate()
        e, d = spec.encoder_widths, spec.decoder_widths
        self.stem = nn.Sequential(nn.Conv2d(spec.channels, e[0], 3, padding=1), nn.LeakyReLU(0.2))
        self.down = nn.ModuleList(_conv_block(a, b, stride=2) for a, b in zip(e, e[1:]))
        up, prev = [], e[-1]
        for i, width in enumerate(d):
            skip = e[-2 - i] if spec.skip_connections else 0
            up.append(nn.ModuleDict({
                "up": nn.Upsample(scale_factor=2, mode="nearest"),
                "conv": _conv_block(prev + skip, width),
            }))
            prev = width
        self.up = nn.ModuleList(up)
        self.head = nn.Conv2d(prev, spec.channels, 3, padding=1)

    def forward(self, x):
        h = self.stem(x)
        skips = [h]
        for block in self.down:
            h = block(h)
            skips.append(h)
        skips.pop()
        for block in self.up:
            h = block["up"](h)
            if self.spec.skip_connections:
                h = torch.cat([h, skips.pop()], dim=1)
            h = block["conv"](h)
        return torch.sigmoid(self.head(h))


def build_student(spec: StudentTranslatorSpec, seed: int) -> StudentTranslator:
    return _seeded(seed, lambda: StudentTranslator(spec))


# -- patch discriminators ---------------------------------------------------


def receptive_field(conv_layers) -> int:
    """Closed-form receptive field of a conv stack given (kernel, stride) pairs."""
    rf, jump = 1, 1
    for kernel, stride in conv_layers:
        if kernel < 1 or stride < 1:
            raise ConfigurationError("kernel and stride must be >= 1")
        rf += (kernel - 1) * jump
        jump *= stride
    return rf


class MinibatchStdDev(nn.Module):
    """Appends the batch-averaged feature standard deviation as one extra channel.

    Lets a critic see sample diversity, which counters generator mode collapse.
    Couples all spatial positions, so it is only used for teacher pretraining.
    """

    def forward(self, x):
        if x.shape[0] < 2:
            stat = torch.zeros_like(x[:, :1])
        else:
            stat = x.std(dim=0, unbiased=False).mean().expand(x.shape[0], 1, *x.shape[2:])
        return torch.cat([x, stat], dim=1)


class PatchDiscriminator(nn.Module):
    """Fully convolutional critic returning an (N, 1, h, w) score map."""

    def __init__(self, spec: PatchDiscriminatorSpec):
        super().__init__()
        self.spec = spec
        self.conv_layers = spec.layers()
        mods, c_in = [], spec.channels
        for i, (k, s) in enumerate(self.conv_layers):
            last = i == len(self.conv_layers) - 1
            if last and spec.minibatch_std:
                mods.append(MinibatchStdDev())
                c_in += 1
            c_out = 1 if last else spec.base_channels * min(2**i, spec.max_mult)
            mods.append(nn.Conv2d(c_in, c_out, k, stride=s, padding=(k - 1) // 2))
            if not last:
                mods.append(nn.LeakyReLU(0.2))
            c_in = c_out
        self.net = nn.Sequential(*mods)

    @property
    def receptive_field(self):
        return receptive_field(self.conv_layers)

    def forward(self, x):
        return self.net(x)


def build_patch_discriminator(
    scale: str, base: PatchDiscriminatorSpec | None = None, image_size: int = 32, seed: int = 0
) -> PatchDiscriminator:
    if scale not in ("fine", "coarse"):
        raise ConfigurationError(f"scale must be 'fine' or 'coarse', got {scale!r}")
    base = base or PatchDiscriminatorSpec()
    spec = PatchDiscriminatorSpec(
        conv_layers=base.conv_layers if base.patch_scale == scale else None,
        base_channels=base.base_channels,
        patch_scale=scale,
        channels=base.channels,
        max_mult=base.max_mult,
        minibatch_std=base.minibatch_std,
    )
    rf = receptive_field(spec.layers())
    if rf > image_size:
        raise ConfigurationError(f"receptive field {rf} exceeds image size {image_size}")
    return _seeded(seed, lambda: PatchDiscriminator(spec))


def probe_receptive_field(disc: nn.Module, canvas: int | None = None) -> int:
    """Measure the receptive field of one central output unit from its input gradient.

    Weights are replaced by their absolute values in a copy so no two paths can
    cancel; LeakyReLU slopes are strictly positive, so the gradient is nonzero on
    exactly the receptive field.
    """
    probe = copy.deepcopy(disc).double()
    with torch.no_grad():
        for p in probe.parameters():
            p.copy_(p.abs() + 1e-3)
    if canvas is None:
        rf = getattr(disc, "receptive_field", 64)
        canvas = 16
        while canvas < 3 * rf:
            canvas *= 2
    x = torch.rand(1, disc.spec.channels, canvas, canvas, dtype=torch.float64, requires_grad=True)
    out = probe(x)
    h, w = out.shape[-2:]
    out[0, 0, h // 2, w // 2].backward()
    nz = (x.grad.abs().sum(dim=(0, 1)) > 0).nonzero()
    rows, cols = nz[:, 0], nz[:, 1]
    extent_h = int(rows.max() - rows.min() + 1)
    extent_w = int(cols.max() - cols.min() + 1)
    if extent_h != extent_w:
        raise ContractError(f"non-square receptive field {extent_h}x{extent_w}")
    if rows.min() == 0 or rows.max() == canvas - 1:
        raise ContractError("probe canvas too small: receptive field touches the border")
    return extent_h


# -- feature extractors -----------------------------------------------------


class FeatureExtractor(nn.Module):
    """Frozen conv stack exposing activations at ``spec.layer_taps`` (1-based)."""

    def __init__(self, spec: FeatureExtractorSpec):
        super().__init__()
        self.spec = spec.validate()
        layers, c_in = [], 3
        for width, stride in zip(spec.widths, spec.strides):
            layers.append(nn.Conv2d(c_in, width, 3, stride=stride, padding=1))
            c_in = width
        self.layers = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.eval()

    def train(self, mode=True):
        # frozen: never leave eval mode
        return super().train(False)

    def forward(self, x):
        h = x * 2.0 - 1.0
        out = {}
        last = max(self.spec.layer_taps)
        for j, conv in enumerate(self.layers, start=1):
            h = F.relu(conv(h))
            if j in self.spec.layer_taps:
                out[j] = h
            if j == last:
                break
        return out

    def tap_shapes(self, resolution: int):
        """(C_j, H_j, W_j) per tap from conv arithmetic (kernel 3, padding 1)."""
        shapes, size = {}, resolution
        for j, (width, stride) in enumerate(zip(self.spec.widths, self.spec.strides), start=1):
            size = (size + 2 - 3) // stride + 1
            if j in self.spec.layer_taps:
                shapes[j] = (width, size, size)
        return shapes

    def pooled(self, x):
        """Global-average-pooled final-tap features, shape (N, C)."""
        return self.forward(x)[max(self.spec.layer_taps)].mean(dim=(2, 3))


def _init_random_extractor(spec):
    ext = FeatureExtractor(spec)
    g = torch.Generator().manual_seed(int(spec.seed))
    with torch.no_grad():
        for conv in ext.layers:
            fan_in = conv.in_channels * 9
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=g) * np.sqrt(2.0 / fan_in))
            conv.bias.zero_()
    return ext


def build_feature_extractor(spec: FeatureExtractorSpec | None = None) -> FeatureExtractor:
    spec = (spec or FeatureExtractorSpec()).validate()
    if spec.kind == "fixed_random":
        return _init_random_extractor(spec)
    if not spec.weights_path:
        raise IngestionError("external_pretrained extractor needs weights_path")
    ext = FeatureExtractor(spec)
    load_checkpoint(ext, spec.weights_path, check_fingerprint=False)
    ext.requires_grad_(False)
    return ext


# -- checkpoints ------------------------------------------------------------


def architecture_fingerprint(module: nn.Module) -> str:
    desc = {
        "class": type(module).__name__,
        "tensors": [[k, list(v.shape), str(v.dtype)] for k, v in module.state_dict().items()],
    }
    return hashlib.sha256(json.dumps(desc, sort_keys=True).encode()).hexdigest()[:16]


def parameter_fingerprint(module: nn.Module) -> str:
    """Content hash of all tensors; changes whenever any parameter bit changes."""
    h = hashlib.sha256()
    for k, v in module.state_dict().items():
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_checkpoint(module: nn.Module, path, metadata=None) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        tensors = {}
        for i, (name, t) in enumerate(module.state_dict().items()):
            arr = t.detach().cpu().contiguous().numpy()
            blob = f"{i:04d}.bin"
            (path / blob).write_bytes(arr.tobytes())
            tensors[name] = {"file": blob, "shape": list(arr.shape), "dtype": str(arr.dtype)}
        header = {
            "architecture": type(module).__name__,
            "fingerprint": architecture_fingerprint(module),
            "content_hash": parameter_fingerprint(module),
            "spec": spec_to_dict(module.spec) if hasattr(module, "spec") else None,
            "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
            "metadata": metadata or {},
            "tensors": tensors,
        }
        (path / "header.json").write_text(json.dumps(header, indent=2, sort_keys=True))
    except OSError as exc:
        raise IngestionError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_checkpoint_header(path) -> dict:
    path = Path(path)
    try:
        return json.loads((path / "header.json").read_text())
    except (OSError, ValueError) as exc:
        raise IngestionError(f"missing or corrupt checkpoint header in {path}: {exc}") from exc


def load_checkpoint(module: nn.Module, path, check_fingerprint=True) -> dict:
    """Load tensors into ``module`` in place and return the header."""
    path = Path(path)
    header = read_checkpoint_header(path)
    if check_fingerprint and header.get("fingerprint") != architecture_fingerprint(module):
        raise ContractError(
            f"checkpoint fingerprint {header.get('fingerprint')} does not match "
            f"{type(module).__name__} ({architecture_fingerprint(module)})"
        )
    state = module.state_dict()
    new_state = {}
    for name, ref in state.items():
        entry = header["tensors"].get(name)
        if entry is None:
            raise IngestionError(f"checkpoint {path} lacks tensor {name!r}")
        try:
            raw = (path / entry["file"]).read_bytes()
            arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        except (OSError, ValueError, TypeError) as exc:
            raise IngestionError(f"corrupt tensor {name!r} in {path}: {exc}") from exc
        if tuple(arr.shape) != tuple(ref.shape):
            raise IngestionError(f"shape mismatch for {name!r}: {arr.shape} vs {tuple(ref.shape)}")
        new_state[name] = torch.from_numpy(arr.copy())
    module.load_state_dict(new_state)
    return header


def teacher_from_checkpoint(path) -> TeacherGenerator:
    header = read_checkpoint_header(path)
    s = header.get("spec") or {}
    try:
        spec = TeacherGeneratorSpec(
            latent=LatentSpec(**s["latent"]),
            channel_widths=tuple(s["channel_widths"]),
            output_resolution=s["output_resolution"],
            channels=s["channels"],
        )
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"checkpoint {path} does not describe a teacher generator") from exc
    g = TeacherGenerator(spec)
    load_checkpoint(g, path)
    return g


def student_from_checkpoint(path) -> StudentTranslator:
    header = read_checkpoint_header(path)
    s = header.get("spec") or {}
    try:
        spec = StudentTranslatorSpec(
            encoder_widths=tuple(s["encoder_widths"]),
            decoder_widths=tuple(s["decoder_widths"]),
            skip_connections=s["skip_connections"],
            channels=s["channels"],
        )
    except (KeyError, TypeError) as exc:
        raise IngestionError(f"checkpoint {path} does not describe a student translator") from exc
    g = StudentTranslator(spec)
    load_checkpoint(g, path)
    return g


# -- parameter helpers ------------------------------------------------------


def snapshot(module: nn.Module) -> dict:
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def same_parameters(a, b) -> bool:
    """Bit-level equality between two modules or snapshots."""
    sa = a if isinstance(a, dict) else a.state_dict()
    sb = b if isinstance(b, dict) else b.state_dict()
    return sa.keys() == sb.keys() and all(torch.equal(sa[k], sb[k]) for k in sa)
