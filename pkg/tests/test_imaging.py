import numpy as np
import pytest

from sonomim.autodiff import Tape, Tensor, backward, finite_diff_check, ops
from sonomim.imaging import (
    AugmentConfig,
    IDENTITY_AUGMENT,
    ImageSample,
    ImagingError,
    MaskSpec,
    augment,
    load_image,
    masks_to_bool,
    patchify,
    patchify_array,
    sample_mask,
    save_image,
    substitute_mask_token,
    unpatchify,
)


def test_patchify_small():
    img = ImageSample(pixels=np.arange(16, dtype=np.float32).reshape(4, 4, 1) / 16.0)
    grid = patchify(img, 2)
    assert grid.count == 4 and grid.grid == (2, 2)
    # row-major patch order: first patch is the top-left 2x2 block
    np.testing.assert_array_equal(grid.patches[0] * 16.0, [0, 1, 4, 5])


def test_patchify_paper_scale_token_count():
    px = np.zeros((256, 256, 1), dtype=np.float32)
    assert patchify_array(px, 2).shape[0] == 256 * 256 // 4


def test_patchify_divisibility_error():
    img = ImageSample(pixels=np.zeros((6, 6, 1), dtype=np.float32))
    with pytest.raises(ImagingError, match="divide"):
        patchify(img, 4)


def test_unpatchify_patchify_identity_100_images():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = int(rng.choice([1, 3]))
        px = rng.random((16, 24, c)).astype(np.float32)
        grid = patchify(ImageSample(pixels=px), 4)
        assert np.max(np.abs(unpatchify(grid) - px)) == 0.0


def test_sample_mask_count_and_determinism():
    spec = sample_mask(64, 0.5, seed=42)
    assert spec.masked.size == 32
    assert np.array_equal(spec.masked, np.unique(spec.masked))
    spec2 = sample_mask(64, 0.5, seed=42)
    np.testing.assert_array_equal(spec.masked, spec2.masked)
    assert spec.masked.max() < 64


def test_sample_mask_degenerate():
    with pytest.raises(ImagingError):
        sample_mask(1, 0.5, seed=0)
    with pytest.raises(ImagingError):
        sample_mask(16, 0.0, seed=0)
    with pytest.raises(ImagingError):
        sample_mask(16, 1.0, seed=0)


def test_sample_mask_monte_carlo_uniform():
    counts = np.zeros(16)
    n = 10_000
    for seed in range(n):
        counts[sample_mask(16, 0.5, seed).masked] += 1
    freq = counts / n
    assert np.all(np.abs(freq - 0.5) <= 0.02)


def test_substitute_empty_mask_is_identity():
    rng = np.random.default_rng(1)
    emb = Tensor(rng.random((5, 4)).astype(np.float32))
    token = Tensor(np.ones(4, dtype=np.float32))
    out = substitute_mask_token(emb, np.zeros(5, dtype=bool), token)
    np.testing.assert_array_equal(out.data, emb.data)


def test_substitute_full_mask_all_token():
    rng = np.random.default_rng(2)
    emb = Tensor(rng.random((5, 4)).astype(np.float32))
    token = Tensor(np.full(4, 0.25, dtype=np.float32))
    out = substitute_mask_token(emb, np.ones(5, dtype=bool), token)
    assert np.all(out.data == 0.25)


def test_substitute_unmasked_rows_bit_identical():
    rng = np.random.default_rng(3)
    emb = Tensor(rng.random((8, 6)))
    token = Tensor(rng.random(6))
    spec = sample_mask(8, 0.5, seed=7)
    out = substitute_mask_token(emb, spec, token)
    keep = ~spec.bool_mask()
    np.testing.assert_array_equal(out.data[keep], emb.data[keep])


def test_mask_token_gradient_is_sum_of_masked_rows():
    # 3-patch toy: the token's gradient must equal the summed upstream
    # gradient of the masked rows, and match finite differences
    rng = np.random.default_rng(4)
    emb = Tensor(rng.random((3, 4)), requires_grad=True)
    token = Tensor(rng.random(4), requires_grad=True)
    mask = np.array([True, False, True])
    w = rng.standard_normal((3, 4))

    def f():
        return ops.sum_(ops.mul(substitute_mask_token(emb, mask, token), w))

    assert finite_diff_check(f, [emb, token]) < 1e-8
    with Tape() as tape:
        loss = f()
    g = backward(loss, tape)
    np.testing.assert_allclose(g[token].data, w[mask].sum(axis=0), atol=1e-12)


def test_masks_to_bool_shape():
    specs = [sample_mask(16, 0.5, seed=s) for s in range(3)]
    assert masks_to_bool(specs).shape == (3, 16)


def test_augment_all_zero_probs_is_identity():
    rng = np.random.default_rng(5)
    for c in (1, 3):
        px = rng.random((12, 12, c)).astype(np.float32)
        img = ImageSample(pixels=px, labels=np.array([True, False]))
        out = augment(img, IDENTITY_AUGMENT, np.random.default_rng(0))
        np.testing.assert_array_equal(out.pixels, px)
        np.testing.assert_array_equal(out.labels, img.labels)


def test_vflip_twice_is_identity():
    rng = np.random.default_rng(6)
    px = rng.random((8, 8, 1)).astype(np.float32)
    cfg = AugmentConfig(p_vflip=1.0, p_hflip=0.0, p_crop=0.0, p_jitter=0.0)
    once = augment(ImageSample(pixels=px), cfg, np.random.default_rng(1))
    twice = augment(once, cfg, np.random.default_rng(2))
    np.testing.assert_array_equal(twice.pixels, px)


def test_jitter_application_frequency():
    rng = np.random.default_rng(7)
    px = rng.random((6, 6, 1)).astype(np.float32) * 0.5 + 0.25
    img = ImageSample(pixels=px)
    cfg = AugmentConfig(p_vflip=0.0, p_hflip=0.0, p_crop=0.0, p_jitter=0.2)
    stream = np.random.default_rng(123)
    n = 10_000
    hits = sum(
        int(not np.array_equal(augment(img, cfg, stream).pixels, px)) for _ in range(n)
    )
    assert abs(hits / n - 0.2) <= 0.01


def test_augment_preserves_dtype_labels_and_range():
    rng = np.random.default_rng(8)
    px = rng.random((16, 16, 3)).astype(np.float32)
    img = ImageSample(pixels=px, labels=np.array([True, True, False]))
    cfg = AugmentConfig()  # all transforms live
    stream = np.random.default_rng(9)
    for _ in range(50):
        out = augment(img, cfg, stream)
        assert out.pixels.dtype == np.float32
        assert out.pixels.shape == px.shape
        assert out.pixels.min() >= 0.0 and out.pixels.max() <= 1.0
        np.testing.assert_array_equal(out.labels, img.labels)


def test_mask_content_independent():
    # same (N, ratio, seed) gives the same mask; content never enters
    a = sample_mask(32, 0.25, seed=11)
    b = sample_mask(32, 0.25, seed=11)
    np.testing.assert_array_equal(a.masked, b.masked)
    assert a.masked.size == 8


def test_image_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    px = (rng.integers(0, 256, size=(10, 12, 1)) / 255.0).astype(np.float32)
    path = tmp_path / "img.png"
    save_image(px, path)
    back = load_image(path)
    np.testing.assert_allclose(back, px, atol=1 / 255.0 / 2)


def test_image_sample_validation():
    with pytest.raises(ImagingError, match="pixel values"):
        ImageSample(pixels=np.full((4, 4, 1), 1.5, dtype=np.float32))
    with pytest.raises(ImagingError, match="C in"):
        ImageSample(pixels=np.zeros((4, 4, 2), dtype=np.float32))
