import math

import numpy as np
import pytest
import torch

from gradcheck import check_gradients
from tryonkit.denoiser import (
    ModelConfig,
    TrainingSample,
    build_conditions,
    init_params,
    make_toy_batch,
    predict_noise,
    random_raw_conditions,
    timestep_embedding,
    train_step,
    training_loss,
)
from tryonkit.diffusion import make_schedule
from tryonkit.numerics import DTYPE, NumericError, Rng, linear

SMALL = ModelConfig(channels=(4, 4, 4, 4), heads=2, clip_dim=8, vae_channels=2, time_dim=4)
LATENT = (8, 8)


@pytest.fixture(scope="module")
def setup():
    sched = make_schedule(20)
    batch = make_toy_batch(Rng(1), SMALL, sched, 2, LATENT)
    return sched, batch


def _perturbed(seed=0):
    """Small-model params with every zero-initialized tensor made nonzero."""
    params = init_params(SMALL, seed)
    rng = Rng(seed).child("perturb")
    for name, value in params.items():
        if not value.any():
            params[name] = 0.3 * rng.normal(tuple(value.shape)) if value.dim() else torch.tensor(0.5, dtype=DTYPE)
    return params


def test_init_is_deterministic_and_gates_start_closed():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    assert a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)
    gammas = [k for k in a if k.endswith(".gamma")]
    assert len(gammas) == 7  # one attention block per UNet stage
    assert all(a[k].item() == 0.0 for k in gammas)


def test_default_channels_accept_conditioning():
    with pytest.raises(ValueError, match="channel counts"):
        ModelConfig(channels=(4, 4, 4))
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(channels=(3, 4, 4, 4))


def test_timestep_embedding_values():
    e = timestep_embedding(0, 4)
    assert e.tolist() == [1.0, 1.0, 0.0, 0.0]
    e = timestep_embedding(3, 4)
    assert e[1].item() == pytest.approx(math.cos(3 * 0.01))


def test_predict_noise_shape_and_determinism(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    s = batch[0]
    cond = build_conditions(params, SMALL, s.raw)
    out = predict_noise(params, SMALL, s.z0, s.t, cond)
    assert out.shape == s.z0.shape
    assert torch.equal(out, predict_noise(params, SMALL, s.z0, s.t, cond))


# --------------------------------------------------------------------------
# objective


def test_oracle_denoiser_gives_zero_loss(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    lookup = iter(batch)

    def oracle(p, z_t, step, cond):
        return next(lookup).eps

    assert training_loss(params, SMALL, batch, sched, oracle).item() == 0.0


def test_zero_denoiser_gives_mean_square_noise(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    loss = training_loss(params, SMALL, batch, sched, lambda p, z, step, c: torch.zeros_like(z))
    want = sum(float((s.eps**2).mean()) for s in batch) / len(batch)
    assert loss.item() == pytest.approx(want, rel=1e-14)


def _linear_toy(params, z_t, step, cond):
    flat = z_t.reshape(1, -1)
    return linear(flat, params.linear("toy")).reshape(z_t.shape)


def test_toy_denoiser_eight_element_hand_oracle():
    sched = make_schedule(10, 0.05, 0.2)
    params = init_params(SMALL, 0)
    rng = Rng(4)
    w = rng.normal((8, 8)) * 0.2
    b = rng.normal((8,)) * 0.1
    params["toy.weight"], params["toy.bias"] = w, b
    batch = []
    for step in (3, 9):
        raw = random_raw_conditions(rng, SMALL, LATENT)
        batch.append(TrainingSample(raw, rng.normal((2, 2, 2)), step, rng.normal((2, 2, 2))))

    total = 0.0
    for s in batch:
        ab = sched[s.t]
        z0, eps = s.z0.reshape(-1).tolist(), s.eps.reshape(-1).tolist()
        z_t = [math.sqrt(ab) * a + math.sqrt(1 - ab) * e for a, e in zip(z0, eps)]
        pred = [b[o].item() + sum(w[o, i].item() * z_t[i] for i in range(8)) for o in range(8)]
        total += sum((e - p) ** 2 for e, p in zip(eps, pred)) / 8
    got = training_loss(params, SMALL, batch, sched, _linear_toy)
    assert got.item() == pytest.approx(total / 2, rel=1e-12)


def test_linear_toy_denoiser_gradients():
    sched = make_schedule(10)
    params = init_params(SMALL, 0)
    rng = Rng(5)
    params["toy.weight"], params["toy.bias"] = rng.normal((8, 8)), rng.normal((8,))
    batch = [TrainingSample(random_raw_conditions(rng, SMALL, LATENT), rng.normal((2, 2, 2)), 4, rng.normal((2, 2, 2)))]
    check_gradients(lambda p: training_loss(p, SMALL, batch, sched, _linear_toy), params, names=["toy.weight", "toy.bias"])


def test_empty_batch_rejected():
    with pytest.raises(ValueError, match="empty"):
        training_loss(init_params(SMALL, 0), SMALL, [], make_schedule(5))


# --------------------------------------------------------------------------
# training


def test_zero_learning_rate_leaves_params(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    new, _ = train_step(params, SMALL, batch, sched, 0.0)
    assert all(torch.equal(new[k], params[k]) for k in params)


def test_fifty_steps_reduce_loss_by_thirty_percent(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    initial = training_loss(params, SMALL, batch, sched).item()
    for _ in range(50):
        params, _ = train_step(params, SMALL, batch, sched, 0.3)
    final = training_loss(params, SMALL, batch, sched).item()
    assert final <= 0.7 * initial, (initial, final)


def test_every_block_gradient_matches_finite_differences(setup):
    sched, batch = setup
    params = _perturbed()
    # deep adapter weights see gradients near 1e-8 on an O(1) loss; a wider
    # central-difference step keeps round-off below the tolerance
    errors = check_gradients(lambda p: training_loss(p, SMALL, batch[:1], sched), params, max_elems=2, h=1e-3)
    prefixes = {k.split(".")[0] + "." + k.split(".")[1] for k in params}
    assert {k.split(".")[0] + "." + k.split(".")[1] for k in errors} == prefixes
    assert max(errors.values()) < 1e-4


def test_non_finite_loss_aborts(setup):
    sched, batch = setup
    params = init_params(SMALL, 0)
    params["unet.conv_out.bias"] = torch.full_like(params["unet.conv_out.bias"], float("nan"))
    with pytest.raises(NumericError, match="training aborted"):
        train_step(params, SMALL, batch, sched, 1e-3)


def test_toy_batch_is_seeded():
    sched = make_schedule(10)
    a = make_toy_batch(Rng(2), SMALL, sched, 2, LATENT)
    b = make_toy_batch(Rng(2), SMALL, sched, 2, LATENT)
    assert all(x.t == y.t and torch.equal(x.eps, y.eps) for x, y in zip(a, b))
    assert all(1 <= s.t <= 10 for s in a)
    np.testing.assert_array_equal(a[0].raw.mask.numpy(), b[0].raw.mask.numpy())
