"""Diffusion core tests.

Frozen values below were worked out by direct scalar arithmetic on the
closed forms, independent of the tensor engine.
"""

import numpy as np
import pytest

from diffguard import autodiff as ad
from diffguard.autodiff import Tensor
from diffguard.diffusion import (
    Denoiser,
    DiffusionTrainConfig,
    TrainingDiverged,
    build_schedule,
    ddpm_loss,
    posterior_mean,
    q_sample,
    reverse_step,
    sample,
    score_from_denoiser,
    train_denoiser,
)
from diffguard.rng import Rng


def test_schedule_cumulative_products():
    # betas [0.1, 0.2, 0.3] -> alphas [0.9, 0.8, 0.7]
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    assert np.allclose(s.beta, [0.1, 0.2, 0.3])
    assert np.allclose(s.alpha_bar, [0.9, 0.72, 0.504])
    # frozen posterior variances: [0, 0.2*0.1/0.28, 0.3*0.28/0.496]
    assert np.allclose(s.sigma2, [0.0, 0.07142857142857144, 0.16935483870967744])


def test_schedule_beta_mode_uses_beta_as_variance():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3, sigma_mode="beta")
    assert np.allclose(s.sigma2, s.beta)


def test_schedule_default_endpoints():
    s = build_schedule(T=1000)
    assert s.beta[0] == pytest.approx(1e-4)
    assert s.beta[-1] == pytest.approx(0.02)
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.alpha_bar[-1] < 1e-4


def test_schedule_validation():
    with pytest.raises(ValueError):
        build_schedule(T=0)
    with pytest.raises(ValueError):
        build_schedule(T=10, beta_start=0.0)
    with pytest.raises(ValueError):
        build_schedule(T=10, beta_start=0.5, beta_end=0.1)
    with pytest.raises(ValueError):
        build_schedule(T=10, beta_end=1.0)


def test_q_sample_hand_value():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    x0 = Tensor([[1.0, 0.0]])
    eps = Tensor([[1.0, 1.0]])
    out = q_sample(s, x0, 1, eps)
    assert np.allclose(out.data, [[1.3776783996367752, 0.5291502622129182]])


def test_q_sample_zero_noise_scales_signal():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    x0 = Tensor([[2.0, -1.0]])
    out = q_sample(s, x0, 2, Tensor([[0.0, 0.0]]))
    assert np.allclose(out.data, np.sqrt(0.504) * x0.data)


def test_q_sample_per_row_timesteps():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    x0 = Tensor(np.ones((3, 2)))
    eps = Tensor(np.zeros((3, 2)))
    out = q_sample(s, x0, np.array([0, 1, 2]), eps)
    assert np.allclose(out.data[:, 0], np.sqrt([0.9, 0.72, 0.504]))


def test_q_sample_moments():
    # forward marginal: mean sqrt(ab)*x0, var (1 - ab), checked over many draws
    s = build_schedule(T=10, beta_start=0.05, beta_end=0.5)
    t = 6
    x0_row = np.array([1.5, -2.0])
    n = 20_000
    rng = Rng(seed=21)
    eps = Tensor(rng.normal((n, 2)))
    out = q_sample(s, Tensor(np.tile(x0_row, (n, 1))), t, eps).data
    ab = s.alpha_bar[t]
    se = np.sqrt(1.0 - ab) / np.sqrt(n)
    assert np.all(np.abs(out.mean(axis=0) - np.sqrt(ab) * x0_row) < 4 * se)
    assert np.all(np.abs(out.var(axis=0) - (1.0 - ab)) < 0.05 * (1.0 - ab))


def test_posterior_mean_hand_value():
    # betas [0.1, 0.2]: at t=1, alpha=0.8, alpha_bar=0.72; x_t=1, eps_hat=0.5
    s = build_schedule(T=2, beta_start=0.1, beta_end=0.2)
    stub = lambda x, t: Tensor(np.full(x.shape, 0.5))
    mu = posterior_mean(s, stub, Tensor([[1.0]]), 1)
    assert np.allclose(mu.data, [[0.9067454250677657]])


def test_reverse_step_at_zero_returns_mean_exactly():
    s = build_schedule(T=2, beta_start=0.1, beta_end=0.2)
    stub = lambda x, t: Tensor(np.zeros(x.shape))
    x_t = Tensor([[0.3, -0.7]])
    out = reverse_step(s, stub, x_t, 0)
    expected = posterior_mean(s, stub, x_t, 0)
    assert np.array_equal(out.data, expected.data)


def test_reverse_step_noise_override_is_exact():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    stub = lambda x, t: Tensor(np.zeros(x.shape))
    x_t = Tensor([[1.0, 2.0]])
    z = Tensor([[0.5, -0.25]])
    out = reverse_step(s, stub, x_t, 2, noise=z)
    mean = posterior_mean(s, stub, x_t, 2)
    assert np.array_equal(out.data, mean.data + np.sqrt(s.sigma2[2]) * z.data)


def test_reverse_step_variance_matches_schedule():
    s = build_schedule(T=5, beta_start=0.1, beta_end=0.4)
    stub = lambda x, t: Tensor(np.zeros(x.shape))
    t = 3
    n = 20_000
    rng = Rng(seed=22)
    x_t = Tensor(np.ones((n, 1)))
    out = reverse_step(s, stub, x_t, t, rng=rng).data
    assert abs(out.var() - s.sigma2[t]) < 0.05 * s.sigma2[t]


def test_ddpm_loss_perfect_stub_is_zero():
    # with x0 = 0 the noised sample is noise_scale * eps, so eps is recoverable
    s = build_schedule(T=1, beta_start=0.3, beta_end=0.3)
    scale = float(np.sqrt(1.0 - s.alpha_bar[0]))
    perfect = lambda x, t: ad.mul(x, 1.0 / scale)
    loss = ddpm_loss(s, perfect, Tensor(np.zeros((64, 3))), Rng(seed=23))
    assert loss.item() < 1e-24


def test_ddpm_loss_zero_stub_scores_dimension():
    s = build_schedule(T=6, beta_start=0.1, beta_end=0.4)
    zero = lambda x, t: ad.mul(x, 0.0)
    d = 4
    loss = ddpm_loss(s, zero, Tensor(np.zeros((10_000, d))), Rng(seed=24))
    assert abs(loss.item() - d) < 0.05 * d


def test_score_hand_value():
    # 1 - alpha_bar = 0.25 and eps_hat = [1, -2] gives score [-2, 4]
    s = build_schedule(T=1, beta_start=0.25, beta_end=0.25)
    stub = lambda x, t: Tensor([[1.0, -2.0]])
    score = score_from_denoiser(s, stub, Tensor([[0.0, 0.0]]), 0)
    assert np.allclose(score.data, [[-2.0, 4.0]])


def test_denoiser_shapes_and_determinism():
    model_a = Denoiser(data_dim=2, rng=Rng(seed=7, stream=1))
    model_b = Denoiser(data_dim=2, rng=Rng(seed=7, stream=1))
    x = Tensor(Rng(seed=8).normal((5, 2)))
    out_a = model_a(x, 3)
    out_b = model_b(x, 3)
    assert out_a.shape == (5, 2)
    assert np.array_equal(out_a.data, out_b.data)


def test_denoiser_depends_on_timestep():
    model = Denoiser(data_dim=2, rng=Rng(seed=7, stream=1))
    x = Tensor(np.ones((1, 2)))
    assert not np.array_equal(model(x, 0).data, model(x, 9).data)


def test_train_zero_epochs_leaves_parameters():
    s = build_schedule(T=10)
    model = Denoiser(data_dim=2, rng=Rng(seed=1), hidden_dims=(16,))
    before = [p.data.copy() for p in model.parameters()]
    history = train_denoiser(s, model, np.zeros((8, 2)), DiffusionTrainConfig(epochs=0))
    assert history == []
    for p, b in zip(model.parameters(), before):
        assert np.array_equal(p.data, b)


def test_training_reduces_loss():
    s = build_schedule(T=20, beta_start=1e-3, beta_end=0.2)
    rng = Rng(seed=31)
    data = rng.normal((256, 2)) * 0.3 + np.array([1.0, -1.0])
    model = Denoiser(data_dim=2, rng=Rng(seed=32), hidden_dims=(32, 32))
    history = train_denoiser(
        s, model, data, DiffusionTrainConfig(epochs=8, batch_size=64, seed=33)
    )
    assert history[-1] < history[0]


def test_training_is_deterministic():
    s = build_schedule(T=10, beta_start=1e-3, beta_end=0.2)
    data = Rng(seed=34).normal((64, 2))

    def run():
        model = Denoiser(data_dim=2, rng=Rng(seed=35), hidden_dims=(16,))
        hist = train_denoiser(
            s, model, data, DiffusionTrainConfig(epochs=2, batch_size=32, seed=36)
        )
        return hist, model.net.state()

    h1, s1 = run()
    h2, s2 = run()
    assert h1 == h2
    for k in s1:
        assert np.array_equal(s1[k], s2[k])


def test_training_divergence_raises():
    s = build_schedule(T=10)
    model = Denoiser(data_dim=2, rng=Rng(seed=41), hidden_dims=(8,))
    cfg = DiffusionTrainConfig(epochs=3, batch_size=16, lr=1e9, seed=42)
    with pytest.raises(TrainingDiverged):
        train_denoiser(s, model, Rng(seed=43).normal((32, 2)), cfg)


def test_sampling_shape_and_determinism():
    s = build_schedule(T=5, beta_start=0.05, beta_end=0.3)
    model = Denoiser(data_dim=2, rng=Rng(seed=51), hidden_dims=(8,))
    a = sample(s, model, 7, 2, Rng(seed=52))
    b = sample(s, model, 7, 2, Rng(seed=52))
    assert a.shape == (7, 2)
    assert np.array_equal(a, b)


def test_sampling_clip_range_bounds_final_output():
    s = build_schedule(T=5, beta_start=0.05, beta_end=0.3)
    model = Denoiser(data_dim=2, rng=Rng(seed=51), hidden_dims=(8,))
    raw = sample(s, model, 64, 2, Rng(seed=53))
    assert raw.min() < 0.0 or raw.max() > 1.0  # untrained model roams freely
    clipped = sample(s, model, 64, 2, Rng(seed=53), clip_range=(0.0, 1.0))
    assert np.array_equal(clipped, np.clip(raw, 0.0, 1.0))


def test_timestep_out_of_range_raises():
    s = build_schedule(T=3, beta_start=0.1, beta_end=0.3)
    stub = lambda x, t: Tensor(np.zeros(x.shape))
    with pytest.raises(ValueError):
        q_sample(s, Tensor([[0.0]]), 3, Tensor([[0.0]]))
    with pytest.raises(ValueError):
        posterior_mean(s, stub, Tensor([[0.0]]), -1)
