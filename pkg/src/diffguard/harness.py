"""Experiment orchestration: configs, evaluation, metrics, and the run pipeline.

A run is described by one JSON document (every default materialized into the
copy written next to the results), executes up to five stages in order

    train_diffusion -> train_guidance -> attack -> evaluate -> report

and leaves behind checkpoints, a JSON report, a flat metrics CSV, and
plot-data CSVs.  Identical config + seed reproduces every output byte for
byte; wall-clock columns are written as 0.0 unless `record_timings` is set,
since real timings would break that guarantee.

Attack fairness in the guidance-mode breakdown: attacks that only see the
classifier are crafted once and shared across modes; end-to-end attacks are
re-crafted against each mode's purifier.  The report records which regime
applied to each attack.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .attacks import AttackSpec, pgd_attack, pgd_eot_attack
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .datasets import DatasetSpec, generate_dataset
from .diffusion import (
    Denoiser,
    DiffusionTrainConfig,
    TrainingDiverged,
    build_schedule,
    train_denoiser,
)
from .guidance import GuidanceClassifier, GuidanceTrainConfig, train_guidance
from .nets import TIME_EMBED_DIM
from .purifier import GUIDANCE_MODES, PurifierBundle, PurifyConfig, _resolve_t_star
from .rng import Rng

__all__ = [
    "STAGES",
    "METRICS_COLUMNS",
    "StageError",
    "ModelConfig",
    "EvalSettings",
    "ExperimentConfig",
    "EvalReport",
    "evaluate",
    "metrics_rows",
    "write_metrics_csv",
    "read_metrics_csv",
    "run_experiment",
    "run_sweep",
    "write_plot_data",
]

STAGES = ("train_diffusion", "train_guidance", "attack", "evaluate", "report")

METRICS_COLUMNS = [
    "experiment_id",
    "dataset",
    "guidance_mode",
    "lambda",
    "s",
    "t_star",
    "attack",
    "norm",
    "epsilon",
    "standard_acc",
    "robust_acc",
    "n_samples",
    "seed",
    "wall_clock_s",
]


class StageError(RuntimeError):
    """A pipeline stage failed; the stage name travels with the message."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


@dataclass
class ModelConfig:
    denoiser_hidden: tuple = (128, 128, 128)
    classifier_hidden: tuple = (128, 128, 128)
    noise_conditioning: bool = True
    time_dim: int = TIME_EMBED_DIM


@dataclass
class EvalSettings:
    samples: int = 512
    guidance_modes: tuple = ("full",)
    include_undefended: bool = True
    vote_count: int = 1
    record_timings: bool = False

    def validate(self) -> None:
        if self.samples < 1:
            raise ValueError("evaluation needs at least one sample")
        if self.vote_count < 1:
            raise ValueError("vote_count must be at least 1")
        for mode in self.guidance_modes:
            if mode not in GUIDANCE_MODES:
                raise ValueError(f"unknown guidance mode '{mode}'")
        if not self.guidance_modes:
            raise ValueError("at least one guidance mode is required")


def _default_stages() -> dict:
    return {stage: True for stage in STAGES}


@dataclass
class ExperimentConfig:
    seed: int = 0
    out_dir: str = "runs/exp"
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: dict = field(
        default_factory=lambda: {
            "T": 200,
            "beta_start": 1e-4,
            "beta_end": 0.02,
            "sigma_mode": "posterior",
        }
    )
    models: ModelConfig = field(default_factory=ModelConfig)
    diffusion_train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    guidance_train: GuidanceTrainConfig = field(default_factory=GuidanceTrainConfig)
    purify: PurifyConfig = field(default_factory=PurifyConfig)
    attacks: list = field(default_factory=lambda: [AttackSpec()])
    eval: EvalSettings = field(default_factory=EvalSettings)
    stages: dict = field(default_factory=_default_stages)
    denoiser_checkpoint: str | None = None
    classifier_checkpoint: str | None = None

    # -- serialization ----------------------------------------------------

    _SECTIONS = {
        "dataset": DatasetSpec,
        "models": ModelConfig,
        "diffusion_train": DiffusionTrainConfig,
        "guidance_train": GuidanceTrainConfig,
        "purify": PurifyConfig,
        "eval": EvalSettings,
    }

    def to_dict(self) -> dict:
        d = {
            "seed": self.seed,
            "out_dir": self.out_dir,
            "schedule": dict(self.schedule),
            "attacks": [dataclasses.asdict(a) for a in self.attacks],
            "stages": {stage: bool(self.stages.get(stage, False)) for stage in STAGES},
            "denoiser_checkpoint": self.denoiser_checkpoint,
            "classifier_checkpoint": self.classifier_checkpoint,
        }
        for name in self._SECTIONS:
            section = dataclasses.asdict(getattr(self, name))
            # JSON has no tuples; lists round-trip
            d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in section.items()}
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ValueError("config root must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for name, section_cls in cls._SECTIONS.items():
            if name in raw:
                section = dict(raw[name])
                field_names = {f.name for f in dataclasses.fields(section_cls)}
                bad = set(section) - field_names
                if bad:
                    raise ValueError(f"unknown keys in '{name}': {sorted(bad)}")
                for key, value in section.items():
                    if isinstance(value, list):
                        section[key] = tuple(value)
                kwargs[name] = section_cls(**section)
        if "attacks" in raw:
            kwargs["attacks"] = [AttackSpec(**a) for a in raw["attacks"]]
        if "stages" in raw:
            bad = set(raw["stages"]) - set(STAGES)
            if bad:
                raise ValueError(f"unknown stages: {sorted(bad)}")
            stages = _default_stages()
            stages.update({k: bool(v) for k, v in raw["stages"].items()})
            kwargs["stages"] = stages
        for key in ("seed", "out_dir", "schedule", "denoiser_checkpoint", "classifier_checkpoint"):
            if key in raw:
                kwargs[key] = raw[key]
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise StageError("config", f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise StageError("config", f"config is not valid JSON: {exc}") from exc
        try:
            return cls.from_dict(raw)
        except (TypeError, ValueError) as exc:
            raise StageError("config", str(exc)) from exc

    def experiment_id(self) -> str:
        """Short stable hash of everything that can influence the numbers."""
        d = self.to_dict()
        for key in ("out_dir", "stages", "denoiser_checkpoint", "classifier_checkpoint"):
            d.pop(key, None)
        d["eval"] = {k: v for k, v in d["eval"].items() if k != "record_timings"}
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def validate(self) -> None:
        self.dataset.validate()
        self.purify.validate()
        self.eval.validate()
        for spec in self.attacks:
            spec.validate()

    def denoiser_path(self) -> str:
        return self.denoiser_checkpoint or os.path.join(self.out_dir, "denoiser.json")

    def classifier_path(self) -> str:
        return self.classifier_checkpoint or os.path.join(self.out_dir, "classifier.json")


# -- evaluation -----------------------------------------------------------


@dataclass
class EvalReport:
    """Accuracy summary: top-level numbers for the primary guidance mode plus
    a per-mode breakdown, with exact correct/sample counts recorded."""

    standard_accuracy: float
    robust_accuracy: dict
    modes: dict
    attack_fairness: dict
    n_samples: int
    vote_count: int
    seed: int
    wall_clock: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _majority_vote(predict_once, x: np.ndarray, rng: Rng, votes: int) -> np.ndarray:
    """Predictions by majority over independent purification draws.

    Ties resolve to the smallest label; a single vote is the common case and
    reduces to one draw.
    """
    stacked = np.stack([predict_once(x, rng) for _ in range(votes)])
    n = x.shape[0]
    out = np.empty(n, dtype=int)
    for i in range(n):
        out[i] = np.bincount(stacked[:, i]).argmax()
    return out


def _attack_keys(attacks) -> list:
    keys, seen = [], {}
    for spec in attacks:
        base = spec.name
        count = seen.get(base, 0)
        keys.append(base if count == 0 else f"{base}#{count}")
        seen[base] = count + 1
    return keys


def evaluate(
    clf: GuidanceClassifier,
    bundle: PurifierBundle | None,
    test_x: np.ndarray,
    test_y: np.ndarray,
    attacks: list,
    settings: EvalSettings,
    seed: int,
) -> EvalReport:
    """Standard and robust accuracy on a deterministic evaluation subset.

    With a purifier supplied, clean inputs are purified before classification
    and the guidance-mode breakdown covers every mode in the settings plus an
    optional undefended row.  Classifier-only attacks ("pgd") are crafted once
    and shared across modes; end-to-end attacks ("pgd_eot") are re-crafted per
    mode and skip the undefended row, since no single adversarial set applies.
    """
    settings.validate()
    test_x = np.asarray(test_x, dtype=np.float64)
    test_y = np.asarray(test_y, dtype=int)
    if test_x.shape[0] != test_y.shape[0]:
        raise ValueError("test split rows and labels disagree")
    if clf is None:
        raise ValueError("evaluation needs a classifier")
    if bundle is not None and bundle.clf is not clf:
        raise ValueError("bundle must wrap the evaluated classifier")

    n_total = test_x.shape[0]
    n = min(settings.samples, n_total)
    if n < n_total:
        idx = Rng(seed, stream=501).choice(n_total, n)
        x_eval, y_eval = test_x[idx], test_y[idx]
    else:
        x_eval, y_eval = test_x, test_y

    clock: dict = {}

    def timed(key: str, fn):
        start = time.perf_counter()
        out = fn()
        clock[key] = time.perf_counter() - start if settings.record_timings else 0.0
        return out

    if bundle is None:
        mode_names = ["undefended"]
    else:
        mode_names = (["undefended"] if settings.include_undefended else []) + list(
            settings.guidance_modes
        )

    def predictor(mode: str, stream: int):
        if mode == "undefended":
            return lambda x, _rng: clf.predict(x, t=0), None
        mode_bundle = PurifierBundle(
            schedule=bundle.schedule,
            denoiser=bundle.denoiser,
            clf=clf,
            config=dataclasses.replace(bundle.config, guidance_mode=mode),
        )
        return (
            lambda x, rng: _majority_vote(mode_bundle.classify_purified, x, rng, settings.vote_count),
            mode_bundle,
        )

    modes: dict = {}
    bundles: dict = {}
    for m_idx, mode in enumerate(mode_names):
        predict, mode_bundle = predictor(mode, m_idx)
        bundles[mode] = mode_bundle
        rng = Rng(seed, stream=510 + m_idx)
        pred = timed(f"standard:{mode}", lambda: predict(x_eval, rng))
        correct = int(np.sum(pred == y_eval))
        modes[mode] = {
            "standard_acc": correct / n,
            "standard_correct": correct,
            "robust": {},
        }

    attack_keys = _attack_keys(attacks)
    fairness: dict = {}
    for a_idx, (key, spec) in enumerate(zip(attack_keys, attacks)):
        spec.validate()
        if spec.name == "pgd":
            fairness[key] = "shared"
            result = timed(
                f"attack:{key}",
                lambda: pgd_attack(clf, x_eval, y_eval, spec, t=0, rng=Rng(seed, stream=530 + a_idx)),
            )
            for m_idx, mode in enumerate(mode_names):
                predict, _ = predictor(mode, m_idx)
                rng = Rng(seed, stream=600 + 20 * a_idx + m_idx)
                pred = timed(f"robust:{key}:{mode}", lambda: predict(result.x_adv, rng))
                correct = int(np.sum(pred == y_eval))
                modes[mode]["robust"][key] = {"acc": correct / n, "correct": correct}
        elif spec.name == "pgd_eot":
            if bundle is None:
                raise ValueError("pgd_eot requires a purifier bundle")
            fairness[key] = "adaptive"
            adaptive_spec = dataclasses.replace(spec, seed=seed * 1009 + 77 * a_idx + spec.seed)
            for m_idx, mode in enumerate(mode_names):
                if mode == "undefended":
                    continue  # no single adversarial set applies without a defense
                mode_bundle = bundles[mode]
                result = timed(
                    f"attack:{key}:{mode}",
                    lambda: pgd_eot_attack(mode_bundle, x_eval, y_eval, adaptive_spec),
                )
                predict, _ = predictor(mode, m_idx)
                rng = Rng(seed, stream=600 + 20 * a_idx + m_idx)
                pred = timed(f"robust:{key}:{mode}", lambda: predict(result.x_adv, rng))
                correct = int(np.sum(pred == y_eval))
                modes[mode]["robust"][key] = {"acc": correct / n, "correct": correct}
        else:
            raise ValueError(f"unknown attack '{spec.name}'")

    if bundle is not None and bundle.config.guidance_mode in modes:
        primary = bundle.config.guidance_mode
    else:
        primary = mode_names[-1] if bundle is not None else "undefended"
    return EvalReport(
        standard_accuracy=modes[primary]["standard_acc"],
        robust_accuracy={k: v["acc"] for k, v in modes[primary]["robust"].items()},
        modes=modes,
        attack_fairness=fairness,
        n_samples=n,
        vote_count=settings.vote_count,
        seed=seed,
        wall_clock=clock,
    )


# -- metrics CSV ----------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_rows(config: ExperimentConfig, report: EvalReport, schedule=None) -> list:
    """Flatten a report into metrics rows: one per (mode, attack) pair plus a
    clean row per mode."""
    if schedule is None:
        schedule = build_schedule(**config.schedule)
    t_star = _resolve_t_star(config.purify, schedule)
    spec_by_key = dict(zip(_attack_keys(config.attacks), config.attacks))
    base = {
        "experiment_id": config.experiment_id(),
        "dataset": config.dataset.canonical_kind(),
        "lambda": config.guidance_train.lam,
        "s": config.purify.guidance_scale,
        "t_star": t_star,
        "n_samples": report.n_samples,
        "seed": report.seed,
    }
    rows = []
    for mode, detail in report.modes.items():
        clean_clock = report.wall_clock.get(f"standard:{mode}", 0.0)
        rows.append(
            {
                **base,
                "guidance_mode": mode,
                "attack": "none",
                "norm": None,
                "epsilon": None,
                "standard_acc": detail["standard_acc"],
                "robust_acc": None,
                "wall_clock_s": clean_clock,
            }
        )
        for key, entry in detail["robust"].items():
            spec = spec_by_key.get(key)
            clock = report.wall_clock.get(f"robust:{key}:{mode}", 0.0)
            clock += report.wall_clock.get(f"attack:{key}:{mode}", report.wall_clock.get(f"attack:{key}", 0.0))
            rows.append(
                {
                    **base,
                    "guidance_mode": mode,
                    "attack": key,
                    "norm": spec.norm if spec else None,
                    "epsilon": spec.epsilon if spec else None,
                    "standard_acc": detail["standard_acc"],
                    "robust_acc": entry["acc"],
                    "wall_clock_s": clock,
                }
            )
    return rows


def write_metrics_csv(path: str, rows: list) -> None:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=METRICS_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: _fmt(row.get(k)) for k in METRICS_COLUMNS})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def read_metrics_csv(path: str) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_plot_data(out_dir: str, rows: list) -> dict:
    """Plot-data CSVs from metrics rows: the lambda trade-off curve and the
    per-guidance-mode robust accuracy bars.  Returns written paths."""
    written = {}
    attacked = [r for r in rows if r["attack"] != "none" and r["robust_acc"] != ""]

    tradeoff: dict = {}
    for row in attacked:
        lam = float(row["lambda"])
        entry = tradeoff.setdefault(lam, {"standard": [], "robust": []})
        entry["standard"].append(float(row["standard_acc"]))
        entry["robust"].append(float(row["robust_acc"]))
    path = os.path.join(out_dir, "tradeoff.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["lambda", "standard_acc", "robust_acc"])
        for lam in sorted(tradeoff):
            entry = tradeoff[lam]
            writer.writerow(
                [
                    _fmt(lam),
                    _fmt(float(np.mean(entry["standard"]))),
                    _fmt(float(np.mean(entry["robust"]))),
                ]
            )
    written["tradeoff"] = path

    by_mode: dict = {}
    for row in attacked:
        by_mode.setdefault(row["guidance_mode"], []).append(
            (row["attack"], float(row["standard_acc"]), float(row["robust_acc"]))
        )
    path = os.path.join(out_dir, "guidance_modes.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["guidance_mode", "attack", "standard_acc", "robust_acc"])
        for mode in by_mode:
            for attack, std, rob in by_mode[mode]:
                writer.writerow([mode, attack, _fmt(std), _fmt(rob)])
    written["guidance_modes"] = path
    return written


# -- run pipeline ----------------------------------------------------------


def _stage_guard(stage: str, fn):
    try:
        return fn()
    except StageError:
        raise
    except (ValueError, KeyError, CheckpointError, TrainingDiverged, OSError) as exc:
        raise StageError(stage, str(exc)) from exc


def _write_json(path: str, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def run_experiment(config: ExperimentConfig | str) -> str:
    """Execute the enabled stages; returns the output directory.

    Stage failures raise StageError with the stage name; everything produced
    before the failure stays on disk.
    """
    if isinstance(config, str):
        config = ExperimentConfig.from_json(config)
    _stage_guard("config", config.validate)
    stages = config.stages
    out_dir = config.out_dir
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, "config.resolved.json"), config.to_dict())

    needs_models = any(stages.get(s) for s in ("attack", "evaluate"))
    if needs_models:
        if not stages.get("train_diffusion") and not os.path.exists(config.denoiser_path()):
            raise StageError("config", f"no denoiser checkpoint at {config.denoiser_path()} and training is disabled")
        if not stages.get("train_guidance") and not os.path.exists(config.classifier_path()):
            raise StageError("config", f"no classifier checkpoint at {config.classifier_path()} and training is disabled")

    data = _stage_guard("config", lambda: generate_dataset(config.dataset))
    schedule = _stage_guard("config", lambda: build_schedule(**config.schedule))

    denoiser = None
    if stages.get("train_diffusion"):
        def _train_diffusion():
            model = Denoiser(
                data.data_dim,
                Rng(config.seed, stream=601),
                hidden_dims=config.models.denoiser_hidden,
                time_dim=config.models.time_dim,
            )
            train_denoiser(schedule, model, data.train_x, config.diffusion_train)
            save_checkpoint(config.denoiser_path(), model, schedule=schedule, seed=config.seed)
            return model

        denoiser = _stage_guard("train_diffusion", _train_diffusion)
    elif needs_models:
        denoiser = _stage_guard("train_diffusion", lambda: load_checkpoint(config.denoiser_path()).model)

    clf = None
    if stages.get("train_guidance"):
        def _train_guidance():
            model = GuidanceClassifier(
                data.data_dim,
                data.class_count,
                Rng(config.seed, stream=602),
                hidden_dims=config.models.classifier_hidden,
                noise_conditioning=config.models.noise_conditioning,
                time_dim=config.models.time_dim,
                distance_measure=config.guidance_train.distance,
            )
            train_guidance(model, data.train_x, data.train_y, config.guidance_train, schedule=schedule)
            save_checkpoint(config.classifier_path(), model, seed=config.seed)
            return model

        clf = _stage_guard("train_guidance", _train_guidance)
    elif needs_models:
        clf = _stage_guard("train_guidance", lambda: load_checkpoint(config.classifier_path()).model)

    if stages.get("attack"):
        def _attack_stage():
            n_total = data.test_x.shape[0]
            n = min(config.eval.samples, n_total)
            if n < n_total:
                idx = Rng(config.seed, stream=501).choice(n_total, n)
                x_eval, y_eval = data.test_x[idx], data.test_y[idx]
            else:
                x_eval, y_eval = data.test_x, data.test_y
            for a_idx, (key, spec) in enumerate(zip(_attack_keys(config.attacks), config.attacks)):
                if spec.name != "pgd":
                    continue  # end-to-end attacks are crafted per mode at evaluate time
                result = pgd_attack(clf, x_eval, y_eval, spec, t=0, rng=Rng(config.seed, stream=530 + a_idx))
                _write_json(
                    os.path.join(out_dir, f"adversarial_{key.replace('#', '_')}.json"),
                    {
                        "attack": key,
                        "norm": spec.norm,
                        "epsilon": spec.epsilon,
                        "success_rate_undefended": result.success_rate(),
                        "x": x_eval.tolist(),
                        "x_adv": result.x_adv.tolist(),
                        "y": y_eval.tolist(),
                    },
                )

        _stage_guard("attack", _attack_stage)

    report = None
    if stages.get("evaluate"):
        def _evaluate_stage():
            purify_cfg = config.purify
            declared = config.dataset.resolved_data_range()
            if purify_cfg.clip_range is None and declared is not None:
                # image-like data: bound finished purifications to the declared range
                purify_cfg = dataclasses.replace(purify_cfg, clip_range=declared)
            bundle = PurifierBundle(schedule=schedule, denoiser=denoiser, clf=clf, config=purify_cfg)
            rep = evaluate(clf, bundle, data.test_x, data.test_y, config.attacks, config.eval, config.seed)
            _write_json(os.path.join(out_dir, "report.json"), rep.to_dict())
            write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics_rows(config, rep, schedule))
            return rep

        report = _stage_guard("evaluate", _evaluate_stage)
    else:
        # placeholder so downstream consumers can rely on the file; never
        # clobbers a report produced by an earlier evaluate invocation
        report_path = os.path.join(out_dir, "report.json")
        if not os.path.exists(report_path):
            _write_json(report_path, {})

    if stages.get("report"):
        def _report_stage():
            metrics_path = os.path.join(out_dir, "metrics.csv")
            if not os.path.exists(metrics_path):
                return
            rows = read_metrics_csv(metrics_path)
            write_plot_data(out_dir, rows)
            from . import figures

            figures.render_all(out_dir)

        _stage_guard("report", _report_stage)

    return out_dir


def run_sweep(config: ExperimentConfig, lambdas, out_dir: str | None = None) -> str:
    """Run the full pipeline per robustness weight and merge the metrics.

    Children live in lam_<value>/ subdirectories; the merged metrics feed one
    multi-row trade-off curve at the top level.
    """
    parent = out_dir or config.out_dir
    os.makedirs(parent, exist_ok=True)
    merged = []
    for lam in lambdas:
        child = dataclasses.replace(
            config,
            guidance_train=dataclasses.replace(config.guidance_train, lam=float(lam)),
            out_dir=os.path.join(parent, f"lam_{lam:g}"),
            denoiser_checkpoint=config.denoiser_checkpoint,
            classifier_checkpoint=None,
        )
        run_experiment(child)
        child_metrics = os.path.join(child.out_dir, "metrics.csv")
        if os.path.exists(child_metrics):
            merged.extend(read_metrics_csv(child_metrics))
    write_metrics_csv(
        os.path.join(parent, "metrics.csv"),
        [{k: row.get(k, "") for k in METRICS_COLUMNS} for row in merged],
    )
    rows = read_metrics_csv(os.path.join(parent, "metrics.csv"))
    write_plot_data(parent, rows)
    from . import figures

    figures.render_all(parent)
    return parent
