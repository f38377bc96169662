"""Projected gradient attacks, against bare classifiers and through the purifier.

`pgd_attack` runs the classic loop on a classifier: ascend the cross-entropy
in sign (or normalized) steps, projecting back onto the norm ball after each
step.  `pgd_eot_attack` is the adaptive version for the full defense: each
step's gradient is an average over purification replays with independent
frozen noise, taken through the exact differentiable chain rather than any
straight-through approximation.  Attack success is always judged with fresh
purification noise, never the noise the attacker optimized against.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .guidance import GuidanceClassifier
from .purifier import PurifierBundle, differentiable_purify, draw_frozen_noise
from .rng import Rng

__all__ = [
    "AttackSpec",
    "AttackResult",
    "project_ball",
    "projected_ascent",
    "pgd_attack",
    "eot_gradient",
    "pgd_eot_attack",
]

NORMS = ("linf", "l2")


@dataclass
class AttackSpec:
    """Attack configuration.

    `step_size` of None resolves to 2.5 * epsilon / steps, which reaches the
    ball boundary with room to explore.  `target` switches to a targeted
    attack: descend toward that label and count success as reaching it.
    `eot_samples` only matters for the purifier attack.
    """

    name: str = "pgd"
    norm: str = "linf"
    epsilon: float = 0.1
    steps: int = 40
    step_size: float | None = None
    random_start: bool = False
    eot_samples: int = 10
    target: int | None = None
    seed: int = 0

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / max(self.steps, 1)

    def validate(self) -> None:
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm '{self.norm}'")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.eot_samples < 1:
            raise ValueError("eot_samples must be at least 1")


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray
    loss_trajectory: list = field(default_factory=list)

    def success_rate(self) -> float:
        return float(np.mean(self.success))


def project_ball(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    """Project perturbation rows onto the epsilon ball; interior rows pass through."""
    delta = np.asarray(delta, dtype=np.float64)
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        norms = np.sqrt(np.sum(delta**2, axis=1, keepdims=True))
        factor = np.ones_like(norms)
        over = norms[:, 0] > epsilon
        factor[over] = epsilon / norms[over]
        return delta * factor
    raise ValueError(f"unknown norm '{norm}'")


def _random_start(shape: tuple, epsilon: float, norm: str, rng: Rng) -> np.ndarray:
    if norm == "linf":
        return (rng.uniform(shape) * 2.0 - 1.0) * epsilon
    raw = rng.normal(shape)
    return project_ball(raw, epsilon, norm)


def projected_ascent(loss_and_grad, x: np.ndarray, spec: AttackSpec, rng: Rng | None = None):
    """Generic projected gradient ascent around `x`.

    `loss_and_grad(x_pert)` returns (mean loss, gradient array).  Returns the
    final perturbed points and the per-step loss trajectory (including the
    starting point).  For a targeted attack the caller negates its loss.
    """
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    if spec.random_start:
        if rng is None:
            raise ValueError("random_start needs an rng")
        delta = _random_start(x.shape, spec.epsilon, spec.norm, rng)
    else:
        delta = np.zeros_like(x)
    step = spec.resolved_step_size()
    trajectory = []
    for _ in range(spec.steps):
        loss, grad = loss_and_grad(x + delta)
        trajectory.append(loss)
        if spec.norm == "linf":
            delta = delta + step * np.sign(grad)
        else:
            row_norms = np.sqrt(np.sum(grad**2, axis=1, keepdims=True))
            delta = delta + step * grad / np.maximum(row_norms, 1e-12)
        delta = project_ball(delta, spec.epsilon, spec.norm)
    final_loss, _ = loss_and_grad(x + delta)
    trajectory.append(final_loss)
    return x + delta, trajectory


def _ce_loss_and_grad(clf: GuidanceClassifier, y: np.ndarray, t, sign: float):
    def fn(x_pert: np.ndarray):
        leaf = Tensor(x_pert, requires_grad=True)
        with ad.enable_grad():
            logits = clf(leaf, t)
            loss = ad.cross_entropy(logits, y)
            (g,) = ad.grads(loss, [leaf])
        return sign * loss.item(), sign * g.data
    return fn


def pgd_attack(
    clf: GuidanceClassifier,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    t=None,
    rng: Rng | None = None,
) -> AttackResult:
    """PGD against the bare classifier (conditioning timestep t, default 0).

    Untargeted by default: maximizes cross-entropy against the true labels
    and succeeds where the prediction moves off them.
    """
    spec.validate()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if rng is None:
        rng = Rng(spec.seed, stream=301)
    if spec.target is None:
        loss_fn = _ce_loss_and_grad(clf, y, t, sign=1.0)
    else:
        target_rows = np.full(y.shape, spec.target, dtype=int)
        loss_fn = _ce_loss_and_grad(clf, target_rows, t, sign=-1.0)
    x_adv, trajectory = projected_ascent(loss_fn, x, spec, rng=rng)
    pred = clf.predict(x_adv, t)
    success = (pred == spec.target) if spec.target is not None else (pred != y)
    return AttackResult(x_adv=x_adv, success=success, loss_trajectory=trajectory)


def eot_gradient(
    bundle: PurifierBundle,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
    rng: Rng,
) -> tuple:
    """Average loss and gradient over purification replays.

    Each of `spec.eot_samples` replicas draws independent frozen noise from
    `rng`, replays the purifier differentiably, classifies the result at
    t = 0, and backpropagates the cross-entropy to the input.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    t_star = bundle.t_star()
    grad_sum = np.zeros_like(x)
    loss_sum = 0.0
    for _ in range(spec.eot_samples):
        frozen = draw_frozen_noise(x.shape, t_star, rng)
        leaf = Tensor(x, requires_grad=True)
        with ad.enable_grad():
            purified = differentiable_purify(
                bundle.schedule, bundle.denoiser, bundle.clf, leaf,
                bundle.config, frozen, y_true=y,
            )
            logits = bundle.clf(purified, 0)
            loss = ad.cross_entropy(logits, y)
            (g,) = ad.grads(loss, [leaf])
        grad_sum += g.data
        loss_sum += loss.item()
    n = spec.eot_samples
    return loss_sum / n, grad_sum / n


def pgd_eot_attack(
    bundle: PurifierBundle,
    x: np.ndarray,
    y: np.ndarray,
    spec: AttackSpec,
) -> AttackResult:
    """Adaptive PGD through the purifier with expectation-over-noise gradients.

    Success is judged by purifying the final points once with fresh noise and
    comparing the resulting predictions to the labels.
    """
    spec.validate()
    if bundle.clf is None:
        raise ValueError("pgd_eot_attack needs a classifier in the bundle")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    noise_rng = Rng(spec.seed, stream=311)
    start_rng = Rng(spec.seed, stream=312)
    eval_rng = Rng(spec.seed, stream=313)

    def loss_fn(x_pert: np.ndarray):
        return eot_gradient(bundle, x_pert, y, spec, noise_rng)

    x_adv, trajectory = projected_ascent(loss_fn, x, spec, rng=start_rng)
    pred = bundle.classify_purified(x_adv, eval_rng, y_true=y)
    success = pred != y
    return AttackResult(x_adv=x_adv, success=success, loss_trajectory=trajectory)
