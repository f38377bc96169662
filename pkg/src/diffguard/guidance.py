"""Robust guidance classifier and its training objective.

The classifier serves two duties.  At evaluation time it labels inputs.
During purification its log-probability and logit-discrepancy gradients steer
the reverse diffusion toward samples it classifies confidently and
consistently with the (possibly attacked) input.

Training combines clean cross-entropy with an adversarial-discrepancy
penalty: an inner loop searches a norm ball around each input for the
perturbation that maximally disturbs the classifier's output distribution,
and the outer loss penalizes that disturbance with weight `lam`.  With
`lam = 0` this reduces to standard training; larger values trade standard
accuracy for robustness.

The classifier can be noise-conditioned: trained on forward-diffused inputs
with the timestep embedded, so its gradients remain informative at every
point of the reverse chain.  Clean inputs use t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import NoiseSchedule, TrainingDiverged, q_sample
from .nets import Mlp, TIME_EMBED_DIM, time_embedding
from .optim import Adam, Sgd, zero_grad
from .rng import Rng

__all__ = [
    "DISTANCE_MEASURES",
    "GuidanceClassifier",
    "logit_distance",
    "label_guidance_gradient",
    "discrepancy_guidance_gradient",
    "GuidanceTrainConfig",
    "inner_max_perturbation",
    "trades_loss",
    "train_guidance",
]

DISTANCE_MEASURES = ("kl_softmax", "l2_logits")


class GuidanceClassifier:
    """MLP classifier, optionally conditioned on the diffusion timestep."""

    def __init__(
        self,
        data_dim: int,
        class_count: int,
        rng: Rng,
        hidden_dims: tuple = (128, 128, 128),
        noise_conditioning: bool = True,
        time_dim: int = TIME_EMBED_DIM,
        distance_measure: str = "kl_softmax",
    ):
        if class_count < 2:
            raise ValueError("classifier needs at least two classes")
        if distance_measure not in DISTANCE_MEASURES:
            raise ValueError(f"unknown distance measure '{distance_measure}'")
        self.data_dim = int(data_dim)
        self.class_count = int(class_count)
        self.noise_conditioning = bool(noise_conditioning)
        self.time_dim = int(time_dim)
        # which discrepancy this classifier was trained to flatten; recorded
        # so downstream guidance can default to the matching measure
        self.distance_measure = distance_measure
        self.hidden_dims = tuple(int(h) for h in hidden_dims)
        in_dim = self.data_dim + (self.time_dim if self.noise_conditioning else 0)
        self.net = Mlp(in_dim, self.hidden_dims, self.class_count, rng)

    def __call__(self, x: Tensor, t=None) -> Tensor:
        """Logits for a (batch, data_dim) input at timestep t (default 0)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if not self.noise_conditioning:
            return self.net(x)
        n = x.shape[0]
        if t is None:
            t = 0
        t_rows = np.full(n, t, dtype=np.float64) if np.ndim(t) == 0 else np.asarray(t, dtype=np.float64)
        emb = Tensor(time_embedding(t_rows, self.time_dim))
        return self.net(ad.concat([x, emb], axis=1))

    def predict(self, x, t=None) -> np.ndarray:
        with ad.no_grad():
            logits = self(x if isinstance(x, Tensor) else Tensor(x), t)
        return np.argmax(logits.data, axis=1)

    def parameters(self) -> list:
        return self.net.parameters()

    def named_parameters(self) -> dict:
        return self.net.named_parameters()

    def load_state(self, state: dict) -> None:
        self.net.load_state(state)


def logit_distance(p_logits: Tensor, q_logits: Tensor, measure: str, reduction: str = "mean") -> Tensor:
    """Output discrepancy between two logit batches.

    "kl_softmax": KL between the softmax distributions (reference branch
    first).  "l2_logits": squared L2 distance between raw logits.
    """
    if measure == "kl_softmax":
        return ad.kl_divergence(p_logits, q_logits, reduction=reduction)
    if measure == "l2_logits":
        per_row = ad.tensor_sum(ad.square(ad.sub(p_logits, q_logits)), axis=1)
        if reduction == "mean":
            return ad.tensor_mean(per_row)
        if reduction == "sum":
            return ad.tensor_sum(per_row)
        raise ValueError(f"unknown reduction '{reduction}'")
    raise ValueError(f"unknown distance measure '{measure}'")


def _one_hot(labels: np.ndarray, class_count: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], class_count), dtype=np.float64)
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def label_guidance_gradient(
    clf: GuidanceClassifier,
    x_t: Tensor,
    labels: np.ndarray,
    t=None,
    create_graph: bool = False,
) -> Tensor:
    """Per-row gradient of log p(label | x_t, t) with respect to x_t.

    With `create_graph=True` the input must live in an active graph and the
    returned gradient stays differentiable (needed when an attacker
    backpropagates through the purifier).  Otherwise the gradient is computed
    on a detached local graph and returned as a constant.
    """
    labels = np.asarray(labels, dtype=int)
    if create_graph:
        if not (x_t.requires_grad or x_t._parents):
            x_t.requires_grad = True
        with ad.enable_grad():
            logits = clf(x_t, t)
            picked = ad.tensor_sum(ad.mul(ad.log_softmax(logits), Tensor(_one_hot(labels, clf.class_count))))
            (g,) = ad.grads(picked, [x_t], create_graph=True)
        return g
    with ad.enable_grad():
        leaf = Tensor(x_t.data, requires_grad=True)
        logits = clf(leaf, t)
        picked = ad.tensor_sum(ad.mul(ad.log_softmax(logits), Tensor(_one_hot(labels, clf.class_count))))
        (g,) = ad.grads(picked, [leaf])
    return Tensor(g.data)


def discrepancy_guidance_gradient(
    clf: GuidanceClassifier,
    x_ref: Tensor,
    x_t: Tensor,
    t=None,
    measure: str = "kl_softmax",
    create_graph: bool = False,
) -> Tensor:
    """Per-row gradient of D(f(x_ref, 0), f(x_t, t)) with respect to x_t.

    The reference branch is evaluated at t = 0 (clean conditioning).  The
    gradient operator acts on x_t only, but under `create_graph=True` the
    returned tensor keeps its dependence on both branches so that end-to-end
    derivatives through x_ref remain exact.
    """
    if create_graph:
        if not (x_t.requires_grad or x_t._parents):
            x_t.requires_grad = True
        with ad.enable_grad():
            ref_logits = clf(x_ref if isinstance(x_ref, Tensor) else Tensor(x_ref), 0)
            cur_logits = clf(x_t, t)
            d = logit_distance(ref_logits, cur_logits, measure, reduction="sum")
            (g,) = ad.grads(d, [x_t], create_graph=True)
        return g
    with ad.enable_grad():
        leaf = Tensor(x_t.data, requires_grad=True)
        ref_logits = clf(Tensor(x_ref.data if isinstance(x_ref, Tensor) else x_ref), 0)
        cur_logits = clf(leaf, t)
        d = logit_distance(ref_logits, cur_logits, measure, reduction="sum")
        (g,) = ad.grads(d, [leaf])
    return Tensor(g.data)


@dataclass
class GuidanceTrainConfig:
    """Settings for classifier training.

    `lam` weighs the adversarial-discrepancy term; 6.0 is the working
    default.  The inner maximization takes `inner_steps` sign (or normalized)
    steps of size `inner_step_size` (epsilon / 4 when unset) inside the
    epsilon ball, starting from a small random perturbation by default; a
    zero start is available but sits at a stationary point of the
    discrepancy, so the first step direction would vanish.
    """

    lam: float = 6.0
    epsilon: float = 0.1
    norm: str = "linf"
    distance: str = "kl_softmax"
    inner_steps: int = 10
    inner_step_size: float | None = None
    inner_init: str = "random"
    epochs: int = 30
    batch_size: int = 128
    lr: float = 1e-3
    optimizer: str = "adam"
    noise_augment: bool = True
    seed: int = 0
    loss_ceiling: float = 1e6

    def resolved_step_size(self) -> float:
        return self.epsilon / 4.0 if self.inner_step_size is None else self.inner_step_size


def _project_ball(delta: np.ndarray, epsilon: float, norm: str) -> np.ndarray:
    if norm == "linf":
        return np.clip(delta, -epsilon, epsilon)
    if norm == "l2":
        norms = np.sqrt(np.sum(delta**2, axis=1, keepdims=True))
        factor = np.ones_like(norms)
        over = norms[:, 0] > epsilon
        factor[over] = epsilon / norms[over]
        return delta * factor
    raise ValueError(f"unknown norm '{norm}'")


def inner_max_perturbation(
    clf: GuidanceClassifier,
    x: np.ndarray,
    config: GuidanceTrainConfig,
    rng: Rng,
    t=None,
) -> np.ndarray:
    """Search the epsilon ball for the perturbation maximizing output discrepancy.

    Returns delta with x + delta the adversarial point.  The classifier's
    clean output is held fixed; only the perturbed branch is differentiated.
    """
    if config.norm not in ("linf", "l2"):
        raise ValueError(f"unknown norm '{config.norm}'")
    if config.inner_init not in ("random", "zero"):
        raise ValueError(f"unknown inner_init '{config.inner_init}'")
    x = np.asarray(x, dtype=np.float64)
    if config.epsilon == 0.0 or config.inner_steps == 0:
        return np.zeros_like(x)
    if config.inner_init == "random":
        delta = _project_ball(0.001 * rng.normal(x.shape), config.epsilon, config.norm)
    else:
        delta = np.zeros_like(x)
    step = config.resolved_step_size()
    with ad.no_grad():
        clean_logits = clf(Tensor(x), t)
    clean_const = Tensor(clean_logits.data)
    for _ in range(config.inner_steps):
        leaf = Tensor(delta, requires_grad=True)
        with ad.enable_grad():
            adv_logits = clf(ad.add(Tensor(x), leaf), t)
            d = logit_distance(clean_const, adv_logits, config.distance, reduction="sum")
            (g,) = ad.grads(d, [leaf])
        grad = g.data
        if config.norm == "linf":
            delta = delta + step * np.sign(grad)
        else:
            row_norms = np.sqrt(np.sum(grad**2, axis=1, keepdims=True))
            delta = delta + step * grad / np.maximum(row_norms, 1e-12)
        delta = _project_ball(delta, config.epsilon, config.norm)
    return delta


def trades_loss(
    clf: GuidanceClassifier,
    x: np.ndarray,
    y: np.ndarray,
    config: GuidanceTrainConfig,
    rng: Rng,
    t=None,
) -> tuple:
    """Clean cross-entropy plus lam times the worst-case output discrepancy.

    Returns (loss tensor, diagnostics dict with the two raw terms).
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    x_tensor = Tensor(x)
    logits = clf(x_tensor, t)
    ce = ad.cross_entropy(logits, y)
    if config.lam == 0.0:
        disc = Tensor(0.0)
    else:
        delta = inner_max_perturbation(clf, x, config, rng, t=t)
        adv_logits = clf(Tensor(x + delta), t)
        disc = logit_distance(logits, adv_logits, config.distance, reduction="mean")
    loss = ad.add(ce, ad.mul(disc, config.lam)) if config.lam != 0.0 else ce
    return loss, {"ce": ce.item(), "discrepancy": disc.item() if isinstance(disc, Tensor) else 0.0}


def train_guidance(
    clf: GuidanceClassifier,
    data_x: np.ndarray,
    data_y: np.ndarray,
    config: GuidanceTrainConfig,
    schedule: NoiseSchedule | None = None,
) -> dict:
    """Minibatch training; returns per-epoch histories of the loss terms.

    With `noise_augment` on (requires a schedule and a noise-conditioned
    classifier), each batch is pushed through the forward process at a
    uniformly drawn timestep before the loss is applied, mixing in t = 0
    rows so clean classification is also learned.
    """
    data_x = np.asarray(data_x, dtype=np.float64)
    data_y = np.asarray(data_y, dtype=int)
    if data_x.ndim != 2 or data_x.shape[0] != data_y.shape[0]:
        raise ValueError("data_x must be (n, d) with matching labels")
    if config.noise_augment and schedule is None:
        raise ValueError("noise_augment requires a schedule")
    if config.distance not in DISTANCE_MEASURES:
        raise ValueError(f"unknown distance measure '{config.distance}'")
    params = clf.parameters()
    if config.optimizer == "adam":
        opt = Adam(params, lr=config.lr)
    elif config.optimizer == "sgd":
        opt = Sgd(params, lr=config.lr)
    else:
        raise ValueError(f"unknown optimizer '{config.optimizer}'")
    shuffle_rng = Rng(config.seed, stream=201)
    noise_rng = Rng(config.seed, stream=202)
    inner_rng = Rng(config.seed, stream=203)
    history = {"loss": [], "ce": [], "discrepancy": []}
    n = data_x.shape[0]
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        sums = {"loss": 0.0, "ce": 0.0, "discrepancy": 0.0}
        batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb, yb = data_x[idx], data_y[idx]
            if config.noise_augment:
                m = xb.shape[0]
                # half the rows stay clean (t=0) so the t=0 slice stays sharp
                t_rows = noise_rng.integers(0, schedule.T, m)
                t_rows[noise_rng.uniform((m,)) < 0.5] = 0
                eps = noise_rng.normal(xb.shape)
                with ad.no_grad():
                    xb = q_sample(schedule, Tensor(xb), t_rows, Tensor(eps)).data
                t_cond = t_rows
            else:
                t_cond = None
            zero_grad(params)
            try:
                loss, terms = trades_loss(clf, xb, yb, config, inner_rng, t=t_cond)
                loss.backward()
            except ad.NonFiniteError as err:
                raise TrainingDiverged(f"non-finite loss in epoch {epoch}") from err
            value = loss.item()
            if not np.isfinite(value) or value > config.loss_ceiling:
                raise TrainingDiverged(f"loss {value} in epoch {epoch}")
            opt.step()
            sums["loss"] += value
            sums["ce"] += terms["ce"]
            sums["discrepancy"] += terms["discrepancy"]
            batches += 1
        for key in history:
            history[key].append(sums[key] / max(batches, 1))
    return history
