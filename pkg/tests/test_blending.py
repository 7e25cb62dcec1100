import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import check_gradients
from tryonkit.blending import (
    AutoencoderStub,
    BlendExample,
    StageBlend,
    background_mse,
    blend_view,
    decode_with_elbm,
    elbm_fuse,
    elbm_loss,
    init_blend,
    ssim,
    train_elbm,
)
from tryonkit.fixtures import garment_texture
from tryonkit.numerics import DTYPE, ConvParams, NumericError, ParamStore, Rng


def conv1x1(w, b):
    return ConvParams(torch.tensor([[[[w]]]], dtype=DTYPE), torch.tensor([b], dtype=DTYPE))


@pytest.fixture(scope="module")
def ae():
    return AutoencoderStub.create(0)


def _store(ae, kernel=3, seed=0):
    store = ParamStore()
    init_blend(store, Rng(seed).child("blend"), ae.channels, kernel)
    return store


def _dataset(n, size=32, foreground=False):
    mask = np.zeros((size, size), np.uint8)
    if foreground:
        mask[size // 4 : 3 * size // 4, size // 4 : 3 * size // 4] = 1
    return [BlendExample(garment_texture(size, size, seed=i), mask) for i in range(n)]


def _mean_bg(ae, ds, params):
    errs = []
    for ex in ds:
        latent, feats = ae.encode(ex.image)
        errs.append(background_mse(decode_with_elbm(latent, feats, ex.mask, ae, params), ex.image, ex.mask))
    return float(np.mean(errs))


# --------------------------------------------------------------------------
# autoencoder


def test_autoencoder_extents_mirror(ae):
    img = garment_texture(64, 48, seed=1)
    latent, feats = ae.encode(img)
    assert latent.shape == (4, 8, 6)
    assert [tuple(f.shape) for f in feats] == [(8, 32, 24), (16, 16, 12), (32, 8, 6)]
    assert ae.decode(latent).shape == (3, 64, 48)


def test_autoencoder_is_seeded_and_rejects_odd_extents(ae):
    other = AutoencoderStub.create(0)
    img = garment_texture(32, 32, seed=2)
    assert torch.equal(ae.encode(img)[0], other.encode(img)[0])
    with pytest.raises(ValueError, match="divisible by 8"):
        ae.encode(np.zeros((3, 30, 32)))


def test_plain_decode_is_blurred_reconstruction(ae):
    img = garment_texture(32, 32, seed=3)
    out = ae.decode(ae.encode(img)[0])
    assert ((out - img) ** 2).mean() < ((img - img.mean()) ** 2).mean()


# --------------------------------------------------------------------------
# fusion


def test_zero_convs_are_identity():
    rng = Rng(0)
    d, e = rng.normal((2, 3, 3)), rng.normal((2, 3, 3))
    zero = ConvParams(torch.zeros(2, 2, 3, 3, dtype=DTYPE), torch.zeros(2, dtype=DTYPE))
    params = StageBlend(ConvParams(rng.normal((2, 2, 3, 3)), rng.normal((2,))), zero, zero)
    assert torch.equal(elbm_fuse(d, e, torch.ones(3, 3, dtype=DTYPE), params), d)


def test_zero_mask_leaves_only_linear_residual():
    rng = Rng(1)
    d, e = rng.normal((1, 2, 2)), rng.normal((1, 2, 2))
    params = StageBlend(conv1x1(0.7, 0.1), conv1x1(-1.3, 0.2), conv1x1(0.4, -0.05))
    out = elbm_fuse(d, e, torch.zeros(2, 2, dtype=DTYPE), params)
    assert torch.allclose(out, d + 0.4 * d - 0.05, atol=1e-15, rtol=0)


def test_fuse_1x2x2_hand_computation():
    d = [[0.5, -1.0], [2.0, 0.0]]
    e = [[1.0, 0.3], [-0.7, 2.5]]
    m = [[1.0, 0.0], [1.0, 1.0]]
    a, b0, c, b1, k, b2 = 0.8, -0.2, 1.5, 0.1, -0.3, 0.05
    params = StageBlend(conv1x1(a, b0), conv1x1(c, b1), conv1x1(k, b2))
    want = []
    for i in range(2):
        row = []
        for j in range(2):
            x = a * e[i][j] + b0
            branch = c * (x / (1 + math.exp(-x))) + b1
            dh = d[i][j] + branch * m[i][j]
            row.append(dh + k * dh + b2)
        want.append(row)
    got = elbm_fuse(torch.tensor([d], dtype=DTYPE), torch.tensor([e], dtype=DTYPE), torch.tensor(m, dtype=DTYPE), params)
    np.testing.assert_allclose(got[0].numpy(), want, atol=1e-15, rtol=0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mask_locality_with_1x1_convs(seed):
    rng = Rng(seed)
    d, e = rng.normal((3, 5, 4)), rng.normal((3, 5, 4))
    m_tilde = (rng.uniform(0, 1, (5, 4)) > 0.5).to(DTYPE)
    edited = torch.where(m_tilde.bool(), e, rng.normal((3, 5, 4)))
    one = ConvParams(rng.normal((3, 3, 1, 1)), rng.normal((3,)))
    zero = ConvParams(torch.zeros(3, 3, 1, 1, dtype=DTYPE), torch.zeros(3, dtype=DTYPE))
    params = StageBlend(one, ConvParams(rng.normal((3, 3, 1, 1)), rng.normal((3,))), zero)
    assert torch.equal(elbm_fuse(d, e, m_tilde, params), elbm_fuse(d, edited, m_tilde, params))


def test_fuse_rejects_mismatched_extents():
    params = StageBlend(conv1x1(1, 0), conv1x1(1, 0), conv1x1(1, 0))
    with pytest.raises(ValueError, match="differ"):
        elbm_fuse(torch.zeros(1, 2, 2, dtype=DTYPE), torch.zeros(1, 2, 3, dtype=DTYPE), torch.ones(2, 2, dtype=DTYPE), params)
    with pytest.raises(ValueError, match="mask"):
        elbm_fuse(torch.zeros(1, 2, 2, dtype=DTYPE), torch.zeros(1, 2, 2, dtype=DTYPE), torch.ones(3, 2, dtype=DTYPE), params)


# --------------------------------------------------------------------------
# decode path


def test_zero_init_decode_bit_identical_to_plain(ae):
    store = _store(ae)
    img = garment_texture(64, 48, seed=4)
    mask = np.zeros((64, 48), np.uint8)
    mask[10:40, 5:30] = 1
    latent, feats = ae.encode(img)
    shifted = latent + 0.1 * Rng(2).normal(tuple(latent.shape))
    assert np.array_equal(decode_with_elbm(shifted, feats, mask, ae, blend_view(store)), ae.decode(shifted))


def test_decode_rejects_stage_count_mismatch(ae):
    img = garment_texture(32, 32, seed=5)
    latent, feats = ae.encode(img)
    with pytest.raises(ValueError, match="encoder features"):
        decode_with_elbm(latent, feats[:2], np.zeros((32, 32), np.uint8), ae, blend_view(_store(ae)))


def test_foreground_only_image_ignores_encoder_skip(ae):
    # garment mask everywhere: m~ = 0 at every stage, so only the linear residual acts
    store = _store(ae)
    for k in store:
        store[k] = 0.05 * Rng(7).child(k).normal(tuple(store[k].shape))
    img = garment_texture(32, 32, seed=6)
    latent, feats = ae.encode(img)
    full = np.ones((32, 32), np.uint8)
    noisy = [f + Rng(8).normal(tuple(f.shape)) for f in feats]
    a = decode_with_elbm(latent, feats, full, ae, blend_view(store))
    b = decode_with_elbm(latent, noisy, full, ae, blend_view(store))
    assert np.array_equal(a, b)


# --------------------------------------------------------------------------
# training


def test_zero_learning_rate_leaves_params(ae):
    store = _store(ae)
    new, _ = train_elbm(store, _dataset(1), ae, 0.0, 2)
    assert all(torch.equal(new[k], store[k]) for k in store)


def test_single_image_loss_monotone_over_20_steps(ae):
    _, history = train_elbm(_store(ae), _dataset(1), ae, 0.01, 21)
    assert all(b < a for a, b in zip(history, history[1:]))


def test_toy_training_improves_background_over_plain_decoder(ae):
    ds = _dataset(32)
    trained, history = train_elbm(_store(ae), ds, ae, 0.02, 30)
    assert elbm_loss(trained, ds, ae).item() < history[0]
    plain = _mean_bg(ae, ds, None)
    blended = _mean_bg(ae, ds, blend_view(trained))
    assert blended <= plain, (blended, plain)


def test_trained_decode_is_deterministic(ae):
    ds = _dataset(2, foreground=True)
    a, _ = train_elbm(_store(ae), ds, ae, 1e-3, 3)
    b, _ = train_elbm(_store(ae), ds, ae, 1e-3, 3)
    latent, feats = ae.encode(ds[0].image)
    assert np.array_equal(
        decode_with_elbm(latent, feats, ds[0].mask, ae, blend_view(a)),
        decode_with_elbm(latent, feats, ds[0].mask, ae, blend_view(b)),
    )


def test_gradients_on_1x1_blend(ae):
    store = _store(ae, kernel=1)
    for k in list(store):
        if not store[k].any():
            store[k] = 0.1 * Rng(3).child(k).normal(tuple(store[k].shape))
    ds = _dataset(1, size=16, foreground=True)
    errors = check_gradients(lambda p: elbm_loss(p, ds, ae), store, max_elems=8)
    assert len(errors) == 18 and max(errors.values()) < 1e-4


def test_divergence_aborts(ae):
    with pytest.raises(NumericError, match="diverged"):
        train_elbm(_store(ae), _dataset(4), ae, 0.3, 20)


def test_empty_dataset_rejected(ae):
    with pytest.raises(ValueError, match="empty"):
        train_elbm(_store(ae), [], ae, 1e-3, 1)


def test_background_mse_needs_background():
    img = np.zeros((3, 4, 4))
    with pytest.raises(ValueError, match="background"):
        background_mse(img, img, np.ones((4, 4), np.uint8))
    other = img.copy()
    other[:, 0, 0] = 1.0
    mask = np.zeros((4, 4), np.uint8)
    assert background_mse(other, img, mask) == pytest.approx(1 / 16)
    mask[0, 0] = 1
    assert background_mse(other, img, mask) == 0.0


# --------------------------------------------------------------------------
# SSIM


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0, 1, (3, 20, 18)), rng.uniform(0, 1, (3, 20, 18))
    assert abs(ssim(a, a) - 1.0) <= 1e-9
    assert ssim(a, b) == ssim(b, a)


def test_ssim_of_negative_is_negative():
    a = np.random.default_rng(1).uniform(0, 1, (1, 16, 16))
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_constant_images_closed_form():
    c1, c2 = 0.2, 0.7
    a, b = np.full((1, 16, 16), c1), np.full((1, 16, 16), c2)
    k1 = 0.01**2
    # zero variance everywhere: the contrast-structure factor is C2 / C2 = 1
    want = (2 * c1 * c2 + k1) / (c1**2 + c2**2 + k1)
    assert ssim(a, b) == pytest.approx(want, abs=1e-12)


def test_ssim_matches_scikit_image():
    from skimage.metrics import structural_similarity

    rng = np.random.default_rng(2)
    a = rng.uniform(0, 1, (3, 32, 24))
    b = np.clip(a + 0.1 * rng.normal(size=a.shape), 0, 1)
    ref = structural_similarity(
        a, b, channel_axis=0, data_range=1.0, gaussian_weights=True, sigma=1.5, use_sample_covariance=False
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-9)


def test_ssim_rejects_bad_extents():
    with pytest.raises(ValueError, match="differ"):
        ssim(np.zeros((1, 16, 16)), np.zeros((1, 16, 17)))
    with pytest.raises(ValueError, match="at least"):
        ssim(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)))
