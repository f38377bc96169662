"""JSON checkpoints for denoisers and guidance classifiers.

The on-disk format is a single JSON object:

    {
      "format_version": 1,
      "module": "denoiser" | "guidance_classifier",
      "shapes": {param_name: [dims...]},
      "data": {param_name: nested float lists},
      "schedule": {"T", "beta_start", "beta_end", "sigma_mode"} | null,
      "seed": int | null,
      "architecture": {...}          # enough to rebuild the network
    }

Classifier checkpoints additionally carry "class_count",
"noise_conditioning" and "distance_measure".  Parameters are written as
float64 lists; Python's repr-based float serialization round-trips bit
exactly, so save followed by load reproduces the model with identical bytes.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np

from .diffusion import Denoiser, NoiseSchedule, build_schedule
from .guidance import DISTANCE_MEASURES, GuidanceClassifier
from .rng import Rng

__all__ = ["FORMAT_VERSION", "CheckpointError", "save_checkpoint", "load_checkpoint", "LoadedCheckpoint"]

FORMAT_VERSION = 1


class CheckpointError(Exception):
    """Raised when a checkpoint cannot be written or faithfully restored."""


def _schedule_payload(schedule: Optional[NoiseSchedule]):
    if schedule is None:
        return None
    return {
        "T": schedule.T,
        "beta_start": schedule.beta_start,
        "beta_end": schedule.beta_end,
        "sigma_mode": schedule.sigma_mode,
    }


def _schedule_from_payload(payload) -> Optional[NoiseSchedule]:
    if payload is None:
        return None
    try:
        return build_schedule(
            T=int(payload["T"]),
            beta_start=float(payload["beta_start"]),
            beta_end=float(payload["beta_end"]),
            sigma_mode=payload["sigma_mode"],
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid schedule block: {exc}") from exc


def _param_payload(model):
    shapes, data = {}, {}
    for name, tensor in model.named_parameters().items():
        arr = np.asarray(tensor.data, dtype=np.float64)
        shapes[name] = list(arr.shape)
        data[name] = arr.tolist()
    return shapes, data


def save_checkpoint(
    path: str,
    model,
    schedule: Optional[NoiseSchedule] = None,
    seed: Optional[int] = None,
) -> None:
    """Write `model` (a Denoiser or GuidanceClassifier) to `path` as JSON."""
    if not isinstance(model, (Denoiser, GuidanceClassifier)):
        raise CheckpointError(f"cannot checkpoint object of type {type(model).__name__}")
    shapes, data = _param_payload(model)
    payload = {
        "format_version": FORMAT_VERSION,
        "shapes": shapes,
        "data": data,
        "schedule": _schedule_payload(schedule),
        "seed": seed,
    }
    if isinstance(model, Denoiser):
        if schedule is None:
            raise CheckpointError("denoiser checkpoints must include their schedule")
        payload["module"] = "denoiser"
        payload["architecture"] = {
            "data_dim": model.data_dim,
            "hidden_dims": list(model.hidden_dims),
            "time_dim": model.time_dim,
        }
    elif isinstance(model, GuidanceClassifier):
        payload["module"] = "guidance_classifier"
        payload["class_count"] = model.class_count
        payload["noise_conditioning"] = model.noise_conditioning
        payload["distance_measure"] = model.distance_measure
        payload["architecture"] = {
            "data_dim": model.data_dim,
            "hidden_dims": list(model.hidden_dims),
            "time_dim": model.time_dim,
        }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh)
    os.replace(tmp, path)


class LoadedCheckpoint:
    """A restored model plus the metadata stored next to it."""

    def __init__(self, module, model, schedule, seed):
        self.module = module
        self.model = model
        self.schedule = schedule
        self.seed = seed


def _require(payload, key):
    if key not in payload:
        raise CheckpointError(f"checkpoint is missing required key '{key}'")
    return payload[key]


def _restore_params(model, shapes, data):
    state = {}
    for name, shape in shapes.items():
        if name not in data:
            raise CheckpointError(f"parameter '{name}' has a shape entry but no data")
        arr = np.asarray(data[name], dtype=np.float64)
        if list(arr.shape) != list(shape):
            raise CheckpointError(
                f"parameter '{name}' data shape {list(arr.shape)} does not match declared {shape}"
            )
        state[name] = arr
    try:
        model.load_state(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"parameter set does not fit the architecture: {exc}") from exc


def load_checkpoint(path: str) -> LoadedCheckpoint:
    """Read a checkpoint written by save_checkpoint and rebuild the model."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError("checkpoint root must be a JSON object")

    version = _require(payload, "format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format_version {version!r} (expected {FORMAT_VERSION})")

    module = _require(payload, "module")
    shapes = _require(payload, "shapes")
    data = _require(payload, "data")
    arch = _require(payload, "architecture")
    schedule = _schedule_from_payload(payload.get("schedule"))
    seed = payload.get("seed")

    try:
        data_dim = int(arch["data_dim"])
        hidden_dims = tuple(int(h) for h in arch["hidden_dims"])
        time_dim = int(arch["time_dim"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid architecture block: {exc}") from exc

    # Rng(0) init values are irrelevant; load_state overwrites every tensor.
    if module == "denoiser":
        if schedule is None:
            raise CheckpointError("denoiser checkpoint has no schedule")
        model = Denoiser(data_dim, Rng(0), hidden_dims=hidden_dims, time_dim=time_dim)
    elif module == "guidance_classifier":
        class_count = int(_require(payload, "class_count"))
        noise_conditioning = bool(_require(payload, "noise_conditioning"))
        distance = _require(payload, "distance_measure")
        if distance not in DISTANCE_MEASURES:
            raise CheckpointError(f"unknown distance_measure '{distance}'")
        model = GuidanceClassifier(
            data_dim,
            class_count,
            Rng(0),
            hidden_dims=hidden_dims,
            noise_conditioning=noise_conditioning,
            time_dim=time_dim,
        )
        model.distance_measure = distance
    else:
        raise CheckpointError(f"unknown module '{module}'")

    _restore_params(model, shapes, data)
    return LoadedCheckpoint(module=module, model=model, schedule=schedule, seed=seed)
