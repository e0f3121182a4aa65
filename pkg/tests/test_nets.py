import numpy as np
import pytest
import torch

from gpdistill.exceptions import ConfigurationError, ContractError, IngestionError
from gpdistill.nets import (
    COARSE_LAYERS,
    FINE_LAYERS,
    FeatureExtractorSpec,
    LatentSpec,
    PatchDiscriminator,
    PatchDiscriminatorSpec,
    StudentTranslatorSpec,
    TeacherGeneratorSpec,
    build_feature_extractor,
    build_patch_discriminator,
    build_student,
    build_teacher_generator,
    clone_generator,
    load_checkpoint,
    probe_receptive_field,
    receptive_field,
    same_parameters,
    save_checkpoint,
    snapshot,
    student_from_checkpoint,
    teacher_from_checkpoint,
)

SMALL_TEACHER = TeacherGeneratorSpec(LatentSpec(16), (32, 16, 8, 8), 32)


def test_latent_spec_validation():
    with pytest.raises(ConfigurationError):
        LatentSpec(1)


def test_teacher_seeded_init():
    a = build_teacher_generator(SMALL_TEACHER, 3)
    b = build_teacher_generator(SMALL_TEACHER, 3)
    c = build_teacher_generator(SMALL_TEACHER, 4)
    assert same_parameters(a, b)
    assert not same_parameters(a, c)


def test_teacher_builder_leaves_global_rng_alone():
    torch.manual_seed(0)
    expected = torch.rand(3)
    torch.manual_seed(0)
    build_teacher_generator(SMALL_TEACHER, 9)
    assert torch.equal(torch.rand(3), expected)


def test_teacher_forward_shape_and_range():
    g = build_teacher_generator(SMALL_TEACHER, 0)
    out = g(torch.randn(5, 16))
    assert out.shape == (5, 3, 32, 32)
    assert out.min() >= 0 and out.max() <= 1


def test_teacher_different_latents_differ():
    g = build_teacher_generator(SMALL_TEACHER, 0)
    z = torch.randn(2, 16)
    out = g(z)
    assert not torch.equal(out[0], out[1])


def test_teacher_resolution_mismatch():
    with pytest.raises(ConfigurationError):
        build_teacher_generator(TeacherGeneratorSpec(LatentSpec(8), (8, 8, 8, 8, 8, 8), 32), 0)
    with pytest.raises(ConfigurationError):
        build_teacher_generator(TeacherGeneratorSpec(LatentSpec(8), (8, 8, 8), 24), 0)


def test_teacher_penultimate_features():
    g = build_teacher_generator(SMALL_TEACHER, 0)
    img, feats = g(torch.randn(2, 16), return_features=True)
    # stage 3 of 4: 2 -> 4 -> 8 -> 16
    assert feats.shape == (2, 8, 16, 16)


def test_clone_is_independent_copy():
    g = build_teacher_generator(SMALL_TEACHER, 0)
    before = snapshot(g)
    c = clone_generator(g)
    z = torch.randn(3, 16)
    assert same_parameters(g, c)
    assert torch.equal(g(z), c(z))
    with torch.no_grad():
        for p in c.parameters():
            p.add_(0.1)
    assert same_parameters(g, before)
    assert not same_parameters(g, c)


# -- receptive fields --------------------------------------------------------


@pytest.mark.parametrize(
    "layers, expected",
    [
        ([(1, 1)], 1),
        ([(4, 2), (4, 2), (4, 2)], 22),
        ([(3, 1), (3, 1)], 5),
        (FINE_LAYERS, 8),
        (COARSE_LAYERS, 30),
    ],
)
def test_receptive_field_recurrence(layers, expected):
    assert receptive_field(layers) == expected


def _brute_force_rf(layers):
    # walk backwards from one output unit: a span of s units at a layer with
    # (k, stride) covers (s - 1) * stride + k inputs
    span = 1
    for k, s in reversed(layers):
        span = (span - 1) * s + k
    return span


@pytest.mark.parametrize(
    "layers",
    [
        [(4, 2), (4, 2), (4, 2)],
        [(3, 1), (3, 1)],
        [(5, 1), (4, 2), (3, 2), (2, 1)],
        list(FINE_LAYERS),
        list(COARSE_LAYERS),
        [(4, 2), (4, 2), (4, 2), (4, 2), (4, 2)],
    ],
)
def test_receptive_field_closed_form_matches_impulse_probe(layers):
    spec = PatchDiscriminatorSpec(conv_layers=tuple(layers), base_channels=4)
    torch.manual_seed(0)
    d = PatchDiscriminator(spec)
    rf = receptive_field(layers)
    assert rf == _brute_force_rf(layers)
    assert probe_receptive_field(d) == rf


def test_shipped_discriminators_probe_and_ratio():
    fine = build_patch_discriminator("fine", image_size=32)
    coarse = build_patch_discriminator("coarse", image_size=32)
    rf_f, rf_c = probe_receptive_field(fine), probe_receptive_field(coarse)
    assert rf_f == fine.receptive_field and rf_c == coarse.receptive_field
    assert 3.5 <= rf_c / rf_f <= 4.5


@pytest.mark.parametrize("scale", ["fine", "coarse"])
def test_discriminator_score_map_shape(scale):
    d = build_patch_discriminator(scale, image_size=32)
    out = d(torch.rand(2, 3, 32, 32))
    assert out.ndim == 4 and out.shape[:2] == (2, 1)
    assert out.shape[2] >= 1 and out.shape[3] >= 1


def test_discriminator_rf_larger_than_image_rejected():
    base = PatchDiscriminatorSpec(conv_layers=((4, 2),) * 5, patch_scale="coarse")
    with pytest.raises(ConfigurationError):
        build_patch_discriminator("coarse", base, image_size=32)
    with pytest.raises(ConfigurationError):
        build_patch_discriminator("medium")


# -- feature extractor -------------------------------------------------------


def test_fixed_random_extractor_reproducible():
    x = torch.rand(2, 3, 32, 32)
    a = build_feature_extractor(FeatureExtractorSpec(seed=5))
    b = build_feature_extractor(FeatureExtractorSpec(seed=5))
    c = build_feature_extractor(FeatureExtractorSpec(seed=6))
    fa, fb, fc = a(x), b(x), c(x)
    assert sorted(fa) == [2, 4]
    for j in fa:
        assert torch.equal(fa[j], fb[j])
    assert not torch.equal(fa[4], fc[4])


@pytest.mark.parametrize("res", [16, 32, 33])
def test_extractor_tap_shapes_match_conv_arithmetic(res):
    ext = build_feature_extractor(FeatureExtractorSpec(layer_taps=(1, 2, 3, 4)))
    feats = ext(torch.rand(1, 3, res, res))
    shapes = ext.tap_shapes(res)
    for j, f in feats.items():
        assert tuple(f.shape[1:]) == shapes[j]
    # independent arithmetic: strides (1, 2, 1, 2), kernel 3, padding 1
    h2 = (res - 1) // 2 + 1
    h4 = (h2 - 1) // 2 + 1
    assert shapes[2] == (32, h2, h2) and shapes[4] == (64, h4, h4)


def test_extractor_is_frozen():
    ext = build_feature_extractor()
    before = snapshot(ext)
    assert not any(p.requires_grad for p in ext.parameters())
    ext.train()
    assert not ext.training
    x = torch.rand(2, 3, 32, 32, requires_grad=True)
    sum(f.sum() for f in ext(x).values()).backward()
    assert x.grad is not None
    assert same_parameters(ext, before)


def test_extractor_spec_validation():
    with pytest.raises(ConfigurationError):
        build_feature_extractor(FeatureExtractorSpec(layer_taps=(5,)))
    with pytest.raises(ConfigurationError):
        build_feature_extractor(FeatureExtractorSpec(kind="vgg"))


def test_external_extractor_loads_weights(tmp_path):
    src = build_feature_extractor(FeatureExtractorSpec(seed=11))
    save_checkpoint(src, tmp_path / "w")
    ext = build_feature_extractor(FeatureExtractorSpec(kind="external_pretrained", weights_path=str(tmp_path / "w")))
    assert same_parameters(src, ext)
    assert not any(p.requires_grad for p in ext.parameters())


def test_external_extractor_missing_or_corrupt(tmp_path):
    with pytest.raises(IngestionError):
        build_feature_extractor(FeatureExtractorSpec(kind="external_pretrained", weights_path=str(tmp_path / "nope")))
    src = build_feature_extractor()
    save_checkpoint(src, tmp_path / "w")
    blob = sorted((tmp_path / "w").glob("*.bin"))[0]
    blob.write_bytes(b"\x00\x01")
    with pytest.raises(IngestionError):
        build_feature_extractor(FeatureExtractorSpec(kind="external_pretrained", weights_path=str(tmp_path / "w")))


# -- student -----------------------------------------------------------------


@pytest.mark.parametrize("skip", [True, False])
def test_student_shape_and_range(skip):
    s = build_student(StudentTranslatorSpec((8, 16, 32), (16, 8), skip_connections=skip), 0)
    x = torch.rand(3, 3, 32, 32)
    y = s(x)
    assert y.shape == x.shape
    assert y.min() >= 0 and y.max() <= 1


def test_student_spec_validation():
    with pytest.raises(ConfigurationError):
        build_student(StudentTranslatorSpec((8, 16), (8, 8)), 0)


# -- checkpoints -------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact(tmp_path):
    g = build_teacher_generator(SMALL_TEACHER, 1)
    save_checkpoint(g, tmp_path / "ck", {"note": "x"})
    h = build_teacher_generator(SMALL_TEACHER, 2)
    assert not same_parameters(g, h)
    header = load_checkpoint(h, tmp_path / "ck")
    assert same_parameters(g, h)
    assert header["metadata"] == {"note": "x"}
    assert same_parameters(teacher_from_checkpoint(tmp_path / "ck"), g)


def test_student_checkpoint_rebuild(tmp_path):
    s = build_student(StudentTranslatorSpec((8, 16), (8,)), 0)
    save_checkpoint(s, tmp_path / "s")
    t = student_from_checkpoint(tmp_path / "s")
    x = torch.rand(1, 3, 16, 16)
    assert torch.equal(s(x), t(x))


def test_checkpoint_fingerprint_mismatch(tmp_path):
    g = build_teacher_generator(SMALL_TEACHER, 1)
    save_checkpoint(g, tmp_path / "ck")
    other = build_student(StudentTranslatorSpec(), 0)
    with pytest.raises(ContractError):
        load_checkpoint(other, tmp_path / "ck")


def test_checkpoint_missing(tmp_path):
    with pytest.raises(IngestionError):
        load_checkpoint(build_student(StudentTranslatorSpec(), 0), tmp_path / "none")


def test_teacher_sample_does_not_depend_on_batch():
    g = build_teacher_generator(SMALL_TEACHER, 0)
    z = torch.randn(6, 16)
    with torch.no_grad():
        assert torch.allclose(g(z)[:2], g(z[:2]), atol=1e-6)


def test_minibatch_std_critic():
    spec = PatchDiscriminatorSpec(patch_scale="coarse", minibatch_std=True)
    d = build_patch_discriminator("coarse", spec, image_size=32)
    plain = build_patch_discriminator("coarse", image_size=32)
    assert d.receptive_field == plain.receptive_field
    assert d(torch.rand(4, 3, 32, 32)).shape == plain(torch.rand(4, 3, 32, 32)).shape
    # the statistic reacts to batch diversity: same image repeated vs distinct images
    same = torch.rand(1, 3, 32, 32).repeat(4, 1, 1, 1)
    assert not torch.allclose(d(same)[:1], d(torch.cat([same[:1], torch.rand(3, 3, 32, 32)]))[:1])
