"""Command-line interface.

Verbs: train, eval, ablate, report, synth-gen. Configuration comes from
a JSON file (--config), individual flags mirroring the config fields, or
both (flags win). Logs go to stderr; all data artifacts go to files.
Exit status is 0 only when the requested work fully succeeded.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import DatasetManifest, FeatureStore, save_feature_store, save_manifest, synth_scene
from .errors import CamlocError, ConfigError, ParseError
from .harness import (BETA_PRESETS, RunConfig, cmd_ablate, cmd_eval, cmd_train,
                      config_from_dict)
from .reports import cmd_report, write_eval_report

log = logging.getLogger("camloc")


def _beta_value(text: str) -> float:
    try:
        return float(text)
    except ValueError:
        if text in BETA_PRESETS:
            return BETA_PRESETS[text]
        choices = ", ".join(sorted(BETA_PRESETS))
        raise argparse.ArgumentTypeError(
            f"beta must be a number or one of: {choices}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON run config to start from")
    run = p.add_argument_group("run fields")
    run.add_argument("--scene")
    run.add_argument("--head", choices=("lstm", "fc"))
    run.add_argument("--hidden-size", type=int)
    run.add_argument("--feature-size", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--eval-every", type=int)
    run.add_argument("--seed", type=int)
    run.add_argument("--out-dir")
    run.add_argument("--fc-bottleneck", type=int)
    opt = p.add_argument_group("optimizer fields")
    opt.add_argument("--beta", type=_beta_value, dest="beta_loss",
                     help="loss weight, a number or a preset name "
                          f"({', '.join(sorted(BETA_PRESETS))})")
    opt.add_argument("--lr", type=float)
    opt.add_argument("--beta1", type=float)
    opt.add_argument("--beta2", type=float)
    opt.add_argument("--eps", type=float)
    opt.add_argument("--lam", type=float)
    opt.add_argument("--batch-size", type=int)
    opt.add_argument("--gamma", type=float)
    opt.add_argument("--dropout", type=float)
    synth = p.add_argument_group("synthetic dataset fields")
    synth.add_argument("--synth-seed", type=int)
    synth.add_argument("--n-train", type=int)
    synth.add_argument("--n-test", type=int)
    synth.add_argument("--extent-m", type=float)
    synth.add_argument("--noise-sigma", type=float)
    synth.add_argument("--bandwidth", type=float)
    man = p.add_argument_group("manifest dataset fields")
    man.add_argument("--train-manifest")
    man.add_argument("--test-manifest")
    man.add_argument("--feature-store")


_RUN_KEYS = ("scene", "head", "hidden_size", "feature_size", "steps",
             "eval_every", "seed", "out_dir", "fc_bottleneck")
_OPTIM_KEYS = ("beta_loss", "lr", "beta1", "beta2", "eps", "lam",
               "batch_size", "gamma", "dropout")
_SYNTH_KEYS = ("n_train", "n_test", "extent_m", "noise_sigma", "bandwidth")
_DATA_KEYS = ("train_manifest", "test_manifest", "feature_store")


def build_config(args: argparse.Namespace) -> RunConfig:
    """Config file as the base, explicitly given flags on top."""
    base: dict = {}
    if args.config:
        path = Path(args.config)
        try:
            base = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(exc.msg, path=str(path), line=exc.lineno,
                             column=exc.colno) from None
        if not isinstance(base, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    for key in _RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base[key] = value
    for key in _OPTIM_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base.setdefault("optim", {})[key] = value
    if getattr(args, "synth_seed", None) is not None:
        base.setdefault("synth", {})["seed"] = args.synth_seed
    for key in _SYNTH_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base.setdefault("synth", {})[key] = value
    for key in _DATA_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            base.setdefault("data", {})[key] = value
    return config_from_dict(base, require_lr=True)


# ---------------------------------------------------------------------------
# Verbs
# ---------------------------------------------------------------------------

def _run_train(args) -> int:
    result = cmd_train(build_config(args))
    log.info("wrote %s, %s, %s, %s", result.final_path, result.best_path,
             result.log_path, result.report_path)
    return 0


def _run_eval(args) -> int:
    config = build_config(args)
    report = cmd_eval(args.checkpoint, config, split=args.split)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent / f"eval_{args.split}.json"
    write_eval_report(report, out)
    log.info("%s split of %s: med_pos %.3f m, med_ori %.2f deg -> %s",
             args.split, report.scene, report.med_pos_m, report.med_ori_deg, out)
    return 0


def _run_ablate(args) -> int:
    config = build_config(args)
    if args.seeds:
        seeds = args.seeds
    else:
        seeds = [config.seed + i for i in range(args.n_seeds)]
    result = cmd_ablate(config, seeds=seeds, match=args.match)
    log.info("lstm won position in %d of %d seeds -> %s",
             result.lstm_wins_pos, result.n_seeds, result.out_path)
    return 0


def _run_report(args) -> int:
    result = cmd_report(args.reports, args.out_dir, figures=not args.no_figures)
    written = [result["csv"], result["json"], *result["figures"]]
    log.info("wrote %s", ", ".join(str(p) for p in written))
    return 0


def _run_synth_gen(args) -> int:
    scene = synth_scene(seed=args.seed, n_train=args.n_train, n_test=args.n_test,
                        extent_m=args.extent_m, F=args.feature_size,
                        noise_sigma=args.noise_sigma, bandwidth=args.bandwidth)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    features = {}
    for split_name, samples in (("train", scene.train), ("test", scene.test)):
        manifest = DatasetManifest(
            root=out, split=split_name,
            records=tuple((s.id, s.pose) for s in samples),
            note=f"synthetic scene seed={args.seed} extent={args.extent_m}m")
        save_manifest(manifest, out / f"{split_name}.txt")
        features.update({s.id: s.payload for s in samples})
    save_feature_store(FeatureStore(features), out / "features.clfs")
    log.info("wrote %s: train.txt (%d), test.txt (%d), features.clfs (F=%d)",
             out, len(scene.train), len(scene.test), scene.feature_size)
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="camloc",
        description="Train and evaluate grid-recurrent camera pose regressors.")
    parser.add_argument("-q", "--quiet", action="store_true",
                        help="only warnings and errors on stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    p_train = sub.add_parser("train", help="train a model per config")
    _add_config_flags(p_train)
    p_train.set_defaults(func=_run_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=("train", "test"), default="test")
    p_eval.add_argument("--out", help="report path (default: next to the checkpoint)")
    _add_config_flags(p_eval)
    p_eval.set_defaults(func=_run_eval)

    p_ablate = sub.add_parser("ablate", help="recurrent head vs FC baseline")
    p_ablate.add_argument("--seeds", type=int, nargs="+",
                          help="explicit seed list (overrides --n-seeds)")
    p_ablate.add_argument("--n-seeds", type=int, default=1,
                          help="run seeds seed..seed+N-1 (default 1)")
    p_ablate.add_argument("--match", choices=("steps", "params"), default="steps",
                          help="budget matching: same steps, or same parameter count")
    _add_config_flags(p_ablate)
    p_ablate.set_defaults(func=_run_ablate)

    p_report = sub.add_parser("report", help="aggregate eval reports")
    p_report.add_argument("reports", nargs="+", metavar="EVAL_JSON")
    p_report.add_argument("--out-dir", required=True)
    p_report.add_argument("--no-figures", action="store_true")
    p_report.set_defaults(func=_run_report)

    p_gen = sub.add_parser("synth-gen", help="write a synthetic scene to disk")
    p_gen.add_argument("--out", required=True)
    p_gen.add_argument("--seed", type=int, default=0)
    p_gen.add_argument("--n-train", type=int, default=200)
    p_gen.add_argument("--n-test", type=int, default=50)
    p_gen.add_argument("--extent-m", type=float, default=10.0)
    p_gen.add_argument("--feature-size", type=int, default=64)
    p_gen.add_argument("--noise-sigma", type=float, default=0.01)
    p_gen.add_argument("--bandwidth", type=float, default=1.25)
    p_gen.set_defaults(func=_run_synth_gen)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CamlocError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
