"""Desk-scale laboratory for adversarially guided diffusion purification.

The pieces, bottom to top: a reverse-mode autodiff engine able to take
gradients of gradients (`autodiff`), counter-based reproducible randomness
(`rng`), small MLPs and optimizers (`nets`, `optim`), DDPM training and
sampling (`diffusion`), the guidance classifier with its robustness loss
(`guidance`), the guided reverse process in ancestral and SDE forms
(`purifier`), PGD and adaptive PGD+EOT attacks (`attacks`), toy datasets
(`datasets`), JSON checkpoints (`checkpoint`), and the experiment harness
with its CLI (`harness`, `cli`).
"""

from .autodiff import (
    GradGraph,
    NonFiniteError,
    Tensor,
    cross_entropy,
    enable_grad,
    finite_difference_gradient,
    grads,
    kl_divergence,
    no_grad,
)
from .rng import Rng
from .nets import Mlp, time_embedding
from .optim import Adam, Sgd
from .diffusion import (
    Denoiser,
    DiffusionTrainConfig,
    NoiseSchedule,
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
from .guidance import (
    GuidanceClassifier,
    GuidanceTrainConfig,
    discrepancy_guidance_gradient,
    label_guidance_gradient,
    logit_distance,
    trades_loss,
    train_guidance,
)
from .purifier import (
    FrozenNoise,
    PurifierBundle,
    PurifyConfig,
    PurifyTrace,
    default_t_star,
    differentiable_purify,
    draw_frozen_noise,
    guided_reverse_step,
    purify,
    sde_guided_reverse,
)
from .attacks import (
    AttackResult,
    AttackSpec,
    eot_gradient,
    pgd_attack,
    pgd_eot_attack,
    project_ball,
)
from .datasets import DatasetSpec, DatasetSplits, generate_dataset
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .harness import (
    EvalReport,
    EvalSettings,
    ExperimentConfig,
    StageError,
    evaluate,
    run_experiment,
    run_sweep,
)

__version__ = "0.1.0"
