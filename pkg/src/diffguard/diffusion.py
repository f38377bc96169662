"""Denoising diffusion core: schedule, forward noising, training, sampling.

The forward process multiplies signal by sqrt(alpha_bar) and adds unit
Gaussian noise scaled by sqrt(1 - alpha_bar); the denoiser is trained to
recover that noise from the corrupted sample and the timestep.  Reverse steps
convert the noise estimate into the posterior mean and add schedule-dependent
Gaussian noise.

Timestep convention: zero-based.  `alpha_bar[t]` is the signal coefficient
after t + 1 forward steps, so diffusing "t_star steps" reads index
t_star - 1 and the reverse chain visits t = t_star - 1 down to 0.  No noise
is added at t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import Mlp, TIME_EMBED_DIM, time_embedding
from .optim import Adam, Sgd, zero_grad
from .rng import Rng

__all__ = [
    "NoiseSchedule",
    "build_schedule",
    "Denoiser",
    "q_sample",
    "ddpm_loss",
    "DiffusionTrainConfig",
    "train_denoiser",
    "posterior_mean",
    "reverse_step",
    "sample",
    "score_from_denoiser",
    "TrainingDiverged",
]


class TrainingDiverged(RuntimeError):
    """Raised when a training loop hits non-finite or exploding loss."""


@dataclass(eq=False)
class NoiseSchedule:
    """Variance schedule plus its cached cumulative products.

    `sigma2[t]` is the reverse-step noise variance: either the posterior
    variance beta_t * (1 - alpha_bar[t-1]) / (1 - alpha_bar[t]) with
    alpha_bar[-1] taken as 1 (mode "posterior"), or beta_t itself
    (mode "beta").
    """

    T: int
    beta_start: float
    beta_end: float
    sigma_mode: str
    beta: np.ndarray = field(repr=False)
    alpha: np.ndarray = field(repr=False)
    alpha_bar: np.ndarray = field(repr=False)
    sigma2: np.ndarray = field(repr=False)


def build_schedule(
    T: int = 200,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    sigma_mode: str = "posterior",
) -> NoiseSchedule:
    """Linear variance schedule from beta_start to beta_end over T steps."""
    if T < 1:
        raise ValueError("schedule needs at least one step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("betas must satisfy 0 < beta_start <= beta_end < 1")
    if sigma_mode not in ("posterior", "beta"):
        raise ValueError(f"unknown sigma_mode '{sigma_mode}'")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    alpha_bar_prev = np.concatenate([[1.0], alpha_bar[:-1]])
    if sigma_mode == "posterior":
        sigma2 = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar)
    else:
        sigma2 = beta.copy()
    return NoiseSchedule(
        T=T,
        beta_start=float(beta_start),
        beta_end=float(beta_end),
        sigma_mode=sigma_mode,
        beta=beta,
        alpha=alpha,
        alpha_bar=alpha_bar,
        sigma2=sigma2,
    )


class Denoiser:
    """Noise-prediction MLP conditioned on the timestep embedding."""

    def __init__(
        self,
        data_dim: int,
        rng: Rng,
        hidden_dims: tuple = (128, 128, 128),
        time_dim: int = TIME_EMBED_DIM,
    ):
        self.data_dim = int(data_dim)
        self.time_dim = int(time_dim)
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        self.net = Mlp(self.data_dim + self.time_dim, self.hidden_dims, self.data_dim, rng)

    def __call__(self, x_t: Tensor, t) -> Tensor:
        x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
        n = x_t.shape[0]
        t_rows = np.full(n, t, dtype=np.float64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        if t_rows.shape != (n,):
            raise ValueError(f"timesteps must be scalar or shape ({n},), got {t_rows.shape}")
        emb = Tensor(time_embedding(t_rows, self.time_dim))
        return self.net(ad.concat([x_t, emb], axis=1))

    def parameters(self) -> list:
        return self.net.parameters()

    def named_parameters(self) -> dict:
        return self.net.named_parameters()

    def load_state(self, state: dict) -> None:
        self.net.load_state(state)


def _per_row_scales(schedule: NoiseSchedule, t, n: int):
    """sqrt(alpha_bar) and sqrt(1 - alpha_bar) as (n, 1) columns."""
    t_idx = np.full(n, t, dtype=int) if np.ndim(t) == 0 else np.asarray(t, dtype=int)
    if t_idx.min() < 0 or t_idx.max() >= schedule.T:
        raise ValueError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bar[t_idx]
    return (
        Tensor(np.sqrt(ab)[:, None]),
        Tensor(np.sqrt(1.0 - ab)[:, None]),
        t_idx,
    )


def q_sample(schedule: NoiseSchedule, x0: Tensor, t, eps: Tensor) -> Tensor:
    """Forward marginal draw: sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps."""
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.shape != x0.shape:
        raise ValueError(f"noise shape {eps.shape} does not match data {x0.shape}")
    signal, noise, _ = _per_row_scales(schedule, t, x0.shape[0])
    return ad.add(ad.mul(signal, x0), ad.mul(noise, eps))


def ddpm_loss(schedule: NoiseSchedule, model, x0: Tensor, rng: Rng) -> Tensor:
    """Noise-prediction objective on one batch.

    Draws a uniform timestep and a fresh noise vector per row; returns the
    mean over rows of the squared error norm, so a zero predictor scores
    about the data dimension.
    """
    x0 = x0 if isinstance(x0, Tensor) else Tensor(x0)
    n, d = x0.shape
    t_rows = rng.integers(0, schedule.T, n)
    eps = Tensor(rng.normal((n, d)))
    x_t = q_sample(schedule, x0, t_rows, eps)
    pred = model(x_t, t_rows)
    residual = ad.sub(pred, eps)
    return ad.tensor_mean(ad.tensor_sum(ad.square(residual), axis=1))


@dataclass
class DiffusionTrainConfig:
    epochs: int = 60
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    loss_ceiling: float = 1e6


def train_denoiser(
    schedule: NoiseSchedule,
    model: Denoiser,
    data: np.ndarray,
    config: DiffusionTrainConfig,
) -> list:
    """Minibatch training of the noise predictor; returns per-epoch mean loss.

    Zero epochs leaves parameters untouched.  Non-finite or exploding loss
    aborts with TrainingDiverged.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"training data must be (n, d), got shape {data.shape}")
    params = model.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, lr=config.lr)
    elif config.optimizer == "sgd":
        opt = Sgd(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer '{config.optimizer}'")
    shuffle_rng = Rng(config.seed, stream=101)
    noise_rng = Rng(config.seed, stream=102)
    history = []
    n = data.shape[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            batch = data[order[start:start + config.batch_size]]
            zero_grad(params)
            try:
                loss = ddpm_loss(schedule, model, Tensor(batch), noise_rng)
                loss.backward()
            except ad.NonFiniteError as err:
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}") from err
            value = loss.item()
            if not np.isfinite(value) or value > config.loss_ceiling:
                raise TrainingDiverged(f"loss {value} in epoch {epoch}")
            opt.step()
            epoch_losses.append(value)
        history.append(float(np.mean(epoch_losses)))
    return history


def posterior_mean(schedule: NoiseSchedule, model, x_t: Tensor, t: int) -> Tensor:
    """Mean of the reverse transition: (x_t - beta_t / sqrt(1-ab_t) * eps_hat) / sqrt(alpha_t)."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    if not (0 <= t < schedule.T):
        raise ValueError(f"timestep {t} out of range [0, {schedule.T})")
    eps_hat = model(x_t, t)
    coef = schedule.beta[t] / np.sqrt(1.0 - schedule.alpha_bar[t])
    inv_sqrt_alpha = 1.0 / np.sqrt(schedule.alpha[t])
    return ad.mul(ad.sub(x_t, ad.mul(eps_hat, coef)), inv_sqrt_alpha)


def reverse_step(
    schedule: NoiseSchedule,
    model,
    x_t: Tensor,
    t: int,
    rng: Rng | None = None,
    noise: Tensor | None = None,
) -> Tensor:
    """One ancestral reverse step; `noise` overrides the rng draw when given.

    At t = 0 the mean is returned exactly and no noise is consumed.
    """
    mean = posterior_mean(schedule, model, x_t, t)
    if t == 0:
        return mean
    if noise is None:
        if rng is None:
            raise ValueError("reverse_step needs an rng when no noise is supplied")
        noise = Tensor(rng.normal(mean.shape))
    sigma = float(np.sqrt(schedule.sigma2[t]))
    return ad.add(mean, ad.mul(noise, sigma))


def sample(
    schedule: NoiseSchedule,
    model,
    n: int,
    data_dim: int,
    rng: Rng,
    clip_range: tuple | None = None,
) -> np.ndarray:
    """Unconditional ancestral sampling from the standard normal prior.

    `clip_range` bounds the finished samples only; the chain itself is
    never clipped.
    """
    with ad.no_grad():
        x = Tensor(rng.normal((n, data_dim)))
        for t in reversed(range(schedule.T)):
            x = reverse_step(schedule, model, x, t, rng=rng)
    out = x.data
    if clip_range is not None:
        out = np.clip(out, clip_range[0], clip_range[1])
    return out


def score_from_denoiser(schedule: NoiseSchedule, model, x_t: Tensor, t) -> Tensor:
    """Marginal score estimate: -eps_hat / sqrt(1 - alpha_bar[t])."""
    x_t = x_t if isinstance(x_t, Tensor) else Tensor(x_t)
    _, noise_scale, _ = _per_row_scales(schedule, t, x_t.shape[0])
    eps_hat = model(x_t, t)
    return ad.neg(ad.div(eps_hat, noise_scale))
