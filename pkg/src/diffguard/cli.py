"""Command-line entry point.

Every subcommand reads the same JSON config document; flags override config
keys (generic overrides via --set dotted.key=value).  Exit status is 0 on
success and 2 on failure, with the failing stage named in the message.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .harness import ExperimentConfig, StageError, run_experiment, run_sweep
from .purifier import PurifierBundle, purify
from .rng import Rng


def _parse_set(pairs) -> list:
    out = []
    for pair in pairs or []:
        if "=" not in pair:
            raise StageError("config", f"--set expects key=value, got '{pair}'")
        key, _, value = pair.partition("=")
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value  # bare strings stay strings
        out.append((key.strip(), parsed))
    return out


def _apply_overrides(raw: dict, args) -> dict:
    for key, value in _parse_set(getattr(args, "set", None)):
        node = raw
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise StageError("config", f"cannot descend into '{key}'")
        node[parts[-1]] = value
    if getattr(args, "out_dir", None):
        raw["out_dir"] = args.out_dir
    if getattr(args, "seed", None) is not None:
        raw["seed"] = args.seed
    return raw


def _load_config(args) -> ExperimentConfig:
    try:
        with open(args.config, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise StageError("config", f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise StageError("config", f"config is not valid JSON: {exc}") from exc
    raw = _apply_overrides(raw, args)
    try:
        return ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise StageError("config", str(exc)) from exc


def _stage_only(config: ExperimentConfig, *stages) -> ExperimentConfig:
    flags = {name: name in stages for name in config.stages}
    return dataclasses.replace(config, stages=flags)


def _cmd_stage(args, *stages) -> int:
    config = _load_config(args)
    out = run_experiment(_stage_only(config, *stages))
    print(out)
    return 0


def _cmd_purify(args) -> int:
    config = _load_config(args)
    den = load_checkpoint(config.denoiser_path())
    clf = load_checkpoint(config.classifier_path()).model
    schedule = den.schedule
    try:
        with open(args.input, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StageError("purify", f"cannot read input: {exc}") from exc
    if "x_adv" in payload:
        x = np.asarray(payload["x_adv"], dtype=np.float64)
    elif "x" in payload:
        x = np.asarray(payload["x"], dtype=np.float64)
    else:
        raise StageError("purify", "input needs an 'x' or 'x_adv' array")
    y = np.asarray(payload["y"], dtype=int) if "y" in payload else None
    rng = Rng(config.seed, stream=701)
    purify_cfg = config.purify
    declared = config.dataset.resolved_data_range()
    if purify_cfg.clip_range is None and declared is not None:
        purify_cfg = dataclasses.replace(purify_cfg, clip_range=declared)
    try:
        purified, trace = purify(schedule, den.model, clf, x, purify_cfg, rng, y_true=y)
    except ValueError as exc:
        raise StageError("purify", str(exc)) from exc
    out = {
        "x_purified": purified.tolist(),
        "labels": clf.predict(purified, t=0).tolist(),
        "trace": dataclasses.asdict(trace),
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(args.out)
    return 0


def _cmd_sweep(args) -> int:
    config = _load_config(args)
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip() != ""]
    except ValueError as exc:
        raise StageError("config", f"bad --lambdas list: {exc}") from exc
    if not lambdas:
        raise StageError("config", "--lambdas list is empty")
    out = run_sweep(config, lambdas)
    print(out)
    return 0


def _add_common(sub, seed_required=False):
    sub.add_argument("--config", required=True, help="JSON experiment config")
    sub.add_argument("--out-dir", help="override the output directory")
    sub.add_argument("--seed", type=int, required=seed_required, help="override the experiment seed")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (dotted path)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffguard", description="adversarially guided diffusion purification lab")
    subs = parser.add_subparsers(dest="command", required=True)

    sub = subs.add_parser("train-diffusion", help="train the denoiser and write its checkpoint")
    _add_common(sub)
    sub.set_defaults(func=lambda a: _cmd_stage(a, "train_diffusion"))

    sub = subs.add_parser("train-guidance", help="train the guidance classifier and write its checkpoint")
    _add_common(sub)
    sub.set_defaults(func=lambda a: _cmd_stage(a, "train_guidance"))

    sub = subs.add_parser("attack", help="craft adversarial examples against the classifier")
    _add_common(sub)
    sub.set_defaults(func=lambda a: _cmd_stage(a, "attack"))

    sub = subs.add_parser("purify", help="run the guided reverse process on stored inputs")
    _add_common(sub)
    sub.add_argument("--input", required=True, help="JSON file with an 'x' or 'x_adv' array")
    sub.add_argument("--out", required=True, help="where to write the purified JSON")
    sub.set_defaults(func=_cmd_purify)

    sub = subs.add_parser("evaluate", help="standard/robust accuracy report")
    _add_common(sub, seed_required=True)
    sub.set_defaults(func=lambda a: _cmd_stage(a, "evaluate"))

    sub = subs.add_parser("report", help="plot-data CSVs and figures from metrics")
    _add_common(sub)
    sub.set_defaults(func=lambda a: _cmd_stage(a, "report"))

    sub = subs.add_parser("sweep", help="run the pipeline across robustness weights")
    _add_common(sub)
    sub.add_argument("--lambdas", default="0,1,6", help="comma-separated robustness weights")
    sub.set_defaults(func=_cmd_sweep)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"error [checkpoint] {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
