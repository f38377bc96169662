"""Purifier tests.

Key oracles: bitwise agreement of the guided step with the plain reverse
step when guidance is off or vacuous, closed-form mean shifts for a linear
classifier, finite-difference agreement of the end-to-end differentiable
chain, and a closed-form variance law for the SDE integrator with a zero
score.
"""

import numpy as np
import pytest

from diffguard import autodiff as ad
from diffguard.autodiff import Tensor
from diffguard.diffusion import (
    NoiseSchedule,
    Denoiser,
    build_schedule,
    posterior_mean,
    q_sample,
    reverse_step,
)
from diffguard.guidance import GuidanceClassifier
from diffguard.purifier import (
    FrozenNoise,
    PurifyConfig,
    default_t_star,
    diffuse_to_tstar,
    differentiable_purify,
    draw_frozen_noise,
    guided_reverse_step,
    purify,
    sde_guided_reverse,
)
from diffguard.rng import Rng


def _zero_denoiser():
    return lambda x, t: Tensor(np.zeros(x.shape))


def _linear_classifier(weight):
    d, c = weight.shape
    clf = GuidanceClassifier(d, c, Rng(seed=0), hidden_dims=(), noise_conditioning=False)
    clf.net.load_state({"w0": weight, "b0": np.zeros(c)})
    return clf


def _softmax_np(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def test_default_t_star_scales_with_schedule():
    assert default_t_star(1000) == 100
    assert default_t_star(200) == 20
    assert default_t_star(5) == 1


def test_diffuse_to_tstar_matches_forward_marginal():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    x = Tensor(Rng(seed=1).normal((4, 2)))
    eps = Tensor(Rng(seed=2).normal((4, 2)))
    out = diffuse_to_tstar(s, x, 7, eps=eps)
    direct = q_sample(s, x, 6, eps)
    assert np.array_equal(out.data, direct.data)


def test_guided_step_mode_none_is_bitwise_reverse_step():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    x = Tensor(Rng(seed=3).normal((4, 2)))
    z = Tensor(Rng(seed=4).normal((4, 2)))
    cfg = PurifyConfig(t_star=5, guidance_mode="none")
    guided = guided_reverse_step(s, model, None, x, 4, cfg, noise=z)
    plain = reverse_step(s, model, x, 4, noise=z)
    assert np.array_equal(guided.data, plain.data)


def test_guided_step_scale_zero_is_bitwise_reverse_step():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    clf = GuidanceClassifier(2, 2, Rng(seed=5), hidden_dims=(8,))
    x = Tensor(Rng(seed=6).normal((4, 2)))
    z = Tensor(Rng(seed=7).normal((4, 2)))
    cfg = PurifyConfig(t_star=5, guidance_scale=0.0, guidance_mode="full")
    guided = guided_reverse_step(
        s, model, clf, x, 4, cfg, labels=np.array([0, 1, 0, 1]), x_ref=Tensor(x.data), noise=z
    )
    plain = reverse_step(s, model, x, 4, noise=z)
    assert np.array_equal(guided.data, plain.data)


def test_guided_step_constant_logits_matches_reverse_step():
    # a classifier with zero final layer produces constant logits, so both
    # guidance gradients are exactly zero arrays
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    clf = GuidanceClassifier(2, 2, Rng(seed=8), hidden_dims=(8,), noise_conditioning=False)
    state = clf.net.state()
    state["w1"] = np.zeros_like(state["w1"])
    clf.net.load_state(state)
    x = Tensor(Rng(seed=9).normal((4, 2)))
    z = Tensor(Rng(seed=10).normal((4, 2)))
    cfg = PurifyConfig(t_star=5, guidance_mode="full", guidance_scale=1.0)
    guided = guided_reverse_step(
        s, model, clf, x, 4, cfg, labels=np.array([0, 1, 0, 1]), x_ref=Tensor(x.data), noise=z
    )
    plain = reverse_step(s, model, x, 4, noise=z)
    assert np.array_equal(guided.data, plain.data)


def test_label_guidance_shift_closed_form():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    w = Rng(seed=11).normal((2, 3))
    clf = _linear_classifier(w)
    x = Rng(seed=12).normal((4, 2))
    y = np.array([0, 2, 1, 0])
    t = 6
    scale = 1.7
    cfg = PurifyConfig(t_star=7, guidance_mode="label_only", guidance_scale=scale)
    zero_noise = Tensor(np.zeros((4, 2)))
    out = guided_reverse_step(s, model, clf, Tensor(x), t, cfg, labels=y, noise=zero_noise)
    mean = posterior_mean(s, model, Tensor(x), t).data
    p = _softmax_np(x @ w)
    onehot = np.zeros_like(p)
    onehot[np.arange(4), y] = 1.0
    expected = mean + scale * s.sigma2[t] * ((onehot - p) @ w.T)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_discrepancy_guidance_shift_closed_form():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    w = Rng(seed=13).normal((2, 3))
    clf = _linear_classifier(w)
    x_ref = Rng(seed=14).normal((4, 2))
    x_t = Rng(seed=15).normal((4, 2))
    t = 5
    cfg = PurifyConfig(
        t_star=7, guidance_mode="discrepancy_only", guidance_scale=2.0, distance="l2_logits"
    )
    zero_noise = Tensor(np.zeros((4, 2)))
    out = guided_reverse_step(
        s, model, clf, Tensor(x_t), t, cfg, x_ref=Tensor(x_ref), noise=zero_noise
    )
    mean = posterior_mean(s, model, Tensor(x_t), t).data
    grad_d = -2.0 * (x_ref @ w - x_t @ w) @ w.T
    expected = mean - 2.0 * s.sigma2[t] * grad_d
    assert np.allclose(out.data, expected, atol=1e-12)


def test_purify_none_mode_equals_manual_unguided_chain():
    s = build_schedule(T=20, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=16), hidden_dims=(8,))
    x_adv = Rng(seed=17).normal((3, 2))
    cfg = PurifyConfig(t_star=6, guidance_mode="none")
    out, trace = purify(s, model, None, x_adv, cfg, Rng(seed=18))
    # replay with the identical draw order
    rng = Rng(seed=18)
    with ad.no_grad():
        x = diffuse_to_tstar(s, Tensor(x_adv), 6, rng=rng)
        for t in reversed(range(6)):
            x = reverse_step(s, model, x, t, rng=rng)
    assert np.array_equal(out, x.data)
    assert len(trace.records) == 6
    assert all(r.label_shift == 0.0 and r.discrepancy_shift == 0.0 for r in trace.records)


def test_purify_trace_length_and_determinism():
    s = build_schedule(T=20, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=19), hidden_dims=(8,))
    clf = GuidanceClassifier(2, 2, Rng(seed=20), hidden_dims=(8,))
    x_adv = Rng(seed=21).normal((3, 2))
    cfg = PurifyConfig(t_star=5, guidance_mode="full")
    out_a, trace_a = purify(s, model, clf, x_adv, cfg, Rng(seed=22))
    out_b, trace_b = purify(s, model, clf, x_adv, cfg, Rng(seed=22))
    assert np.array_equal(out_a, out_b)
    assert len(trace_a.records) == 5
    assert trace_a.guidance_mode == "full"
    # guidance actually moved something
    assert any(r.label_shift > 0 or r.discrepancy_shift > 0 for r in trace_a.records)
    assert [r.t for r in trace_a.records] == [4, 3, 2, 1, 0]


def test_purify_label_source_true_requires_labels():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    clf = GuidanceClassifier(2, 2, Rng(seed=23), hidden_dims=(8,))
    cfg = PurifyConfig(t_star=3, guidance_mode="full", label_source="true")
    with pytest.raises(ValueError):
        purify(s, model, clf, np.zeros((2, 2)), cfg, Rng(seed=24))


def test_purify_config_validation():
    with pytest.raises(ValueError):
        PurifyConfig(guidance_mode="both").validate()
    with pytest.raises(ValueError):
        PurifyConfig(distance="cosine").validate()
    with pytest.raises(ValueError):
        PurifyConfig(sampler="heun").validate()
    with pytest.raises(ValueError):
        PurifyConfig(guidance_scale=-1.0).validate()
    with pytest.raises(ValueError):
        PurifyConfig(clip_range=(1.0, 0.0)).validate()
    s = build_schedule(T=10)
    with pytest.raises(ValueError):
        purify(s, _zero_denoiser(), None, np.zeros((1, 2)),
               PurifyConfig(t_star=11, guidance_mode="none"), Rng(seed=25))


def test_purify_clip_range_bounds_output_only():
    # zero denoiser leaves the diffused noise in place, so outputs spill far
    # outside [0, 1] unless the final clip is applied
    s = build_schedule(T=10, beta_start=0.05, beta_end=0.4)
    x = np.full((6, 4), 0.5)
    cfg = PurifyConfig(t_star=8, guidance_mode="none")
    raw, _ = purify(s, _zero_denoiser(), None, x, cfg, Rng(seed=31))
    assert raw.min() < 0.0 or raw.max() > 1.0
    clipped, _ = purify(s, _zero_denoiser(), None, x,
                        PurifyConfig(t_star=8, guidance_mode="none", clip_range=(0.0, 1.0)),
                        Rng(seed=31))
    assert clipped.min() >= 0.0 and clipped.max() <= 1.0
    # identical randomness: the clipped run is exactly the raw run, bounded
    assert np.array_equal(clipped, np.clip(raw, 0.0, 1.0))
    sde_clipped, _ = purify(s, _zero_denoiser(), None, x,
                            PurifyConfig(t_star=8, guidance_mode="none", sampler="sde",
                                         clip_range=(0.0, 1.0)),
                            Rng(seed=31))
    assert sde_clipped.min() >= 0.0 and sde_clipped.max() <= 1.0


def test_differentiable_purify_matches_inference_purify():
    s = build_schedule(T=20, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=26), hidden_dims=(8,))
    clf = GuidanceClassifier(2, 2, Rng(seed=27), hidden_dims=(8,))
    x_adv = Rng(seed=28).normal((3, 2))
    cfg = PurifyConfig(t_star=4, guidance_mode="full")
    frozen = draw_frozen_noise((3, 2), 4, Rng(seed=29))
    out_graph = differentiable_purify(s, model, clf, Tensor(x_adv.copy()), cfg, frozen)
    out_plain, _ = purify(s, model, clf, x_adv, cfg, Rng(seed=29))
    assert np.allclose(out_graph.data, out_plain, atol=1e-12)


def test_differentiable_purify_frozen_noise_reuse_is_bitwise():
    s = build_schedule(T=20, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=30), hidden_dims=(8,))
    clf = GuidanceClassifier(2, 2, Rng(seed=31), hidden_dims=(8,))
    x_adv = Rng(seed=32).normal((2, 2))
    cfg = PurifyConfig(t_star=3, guidance_mode="full")
    frozen = draw_frozen_noise((2, 2), 3, Rng(seed=33))
    a = differentiable_purify(s, model, clf, Tensor(x_adv.copy()), cfg, frozen)
    b = differentiable_purify(s, model, clf, Tensor(x_adv.copy()), cfg, frozen)
    assert np.array_equal(a.data, b.data)


def test_differentiable_purify_gradient_matches_finite_differences():
    s = build_schedule(T=20, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=34), hidden_dims=(8,))
    clf = GuidanceClassifier(2, 2, Rng(seed=35), hidden_dims=(8,))
    cfg = PurifyConfig(t_star=3, guidance_mode="full", label_source="true")
    frozen = draw_frozen_noise((1, 2), 3, Rng(seed=36))
    y = np.array([1])

    def chain(x_in):
        out = differentiable_purify(s, model, clf, x_in, cfg, frozen, y_true=y)
        return ad.tensor_sum(ad.square(out))

    x_adv = Tensor(Rng(seed=37).normal((1, 2)))
    val = chain(x_adv)
    (g,) = ad.grads(val, [x_adv])
    fd = ad.finite_difference_gradient(chain, Tensor(x_adv.data.copy()), step=1e-5)
    rel = np.max(np.abs(g.data - fd.data)) / max(np.max(np.abs(fd.data)), 1e-12)
    assert rel < 1e-4


def test_differentiable_purify_rejects_bad_noise_length():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = _zero_denoiser()
    frozen = FrozenNoise(diffusion_eps=np.zeros((1, 2)), step_noise=[np.zeros((1, 2))])
    cfg = PurifyConfig(t_star=4, guidance_mode="none")
    with pytest.raises(ValueError):
        differentiable_purify(s, model, None, Tensor(np.zeros((1, 2))), cfg, frozen)


def _constant_beta_schedule(T: int, beta: float) -> NoiseSchedule:
    b = np.full(T, beta)
    alpha = 1.0 - b
    ab = np.cumprod(alpha)
    abp = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule(
        T=T, beta_start=beta, beta_end=beta, sigma_mode="posterior",
        beta=b, alpha=alpha, alpha_bar=ab,
        sigma2=b * (1 - abp) / (1 - ab),
    )


def test_sde_variance_growth_with_zero_score():
    # with score = 0 and constant beta, backward integration of
    # dx = 0.5 * beta * x dtau + sqrt(beta) dw from x = 0 over time t gives
    # Var = exp(beta * t) - 1
    beta, t_start = 0.3, 4
    s = _constant_beta_schedule(8, beta)
    model = _zero_denoiser()
    cfg = PurifyConfig(t_star=t_start, guidance_mode="none", sde_substeps_per_step=8)
    n = 20_000
    out = sde_guided_reverse(
        s, model, None, Tensor(np.zeros((n, 1))), t_start, cfg, rng=Rng(seed=38)
    )
    target = np.exp(beta * t_start) - 1.0
    assert abs(out.var() - target) < 0.1 * target


def test_sde_substep_count_and_determinism():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    model = Denoiser(data_dim=2, rng=Rng(seed=39), hidden_dims=(8,))
    clf = GuidanceClassifier(2, 2, Rng(seed=40), hidden_dims=(8,))
    x = Rng(seed=41).normal((5, 2))
    cfg = PurifyConfig(t_star=3, guidance_mode="full", sampler="sde", sde_substeps_per_step=4)
    out_a, trace_a = purify(s, model, clf, x, cfg, Rng(seed=42))
    out_b, _ = purify(s, model, clf, x, cfg, Rng(seed=42))
    assert np.array_equal(out_a, out_b)
    assert out_a.shape == (5, 2)
    # one record per substep
    assert len(trace_a.records) == 3 * 4


def test_differentiable_purify_requires_ancestral():
    s = build_schedule(T=10, beta_start=0.01, beta_end=0.2)
    cfg = PurifyConfig(t_star=2, guidance_mode="none", sampler="sde")
    frozen = draw_frozen_noise((1, 2), 2, Rng(seed=43))
    with pytest.raises(ValueError):
        differentiable_purify(s, _zero_denoiser(), None, Tensor(np.zeros((1, 2))), cfg, frozen)
