"""Command-line pipeline: data generation, assumption checks, training,
ablation sweeps, evaluation reports, and adaptation.

Exit codes are stable: 0 ok, 2 assumption failure, 3 I/O failure, 4
dataset-hash or compatibility mismatch, 5 training abort. Every command
writes a manifest.json plus the fully resolved config into its output
directory and never mutates its inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import AdaptConfig, adapt
from .config import ConfigError, RunConfig, resolve_config
from .datagen import (AssumptionUnsatisfiableError, build_dataset,
                      build_ground_truth, export_trajectory_csv, load_dataset,
                      save_dataset)
from .dcutil import dataclass_from_dict, dataclass_to_dict
from .evaluation import (EvalConfig, assumption_report, generator_from_dataset,
                         imagination_r2, intervention_report, quick_diag_r2,
                         r2_matrix)
from .storage import StorageError, read_container
from .training import TrainConfig, TrainingAbortError, load_checkpoint, train

EXIT_OK = 0
EXIT_ASSUMPTION = 2
EXIT_IO = 3
EXIT_MISMATCH = 4
EXIT_TRAIN_ABORT = 5

OUT_ROOT_ENV = "COMPWM_OUT_ROOT"


class MismatchError(Exception):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _out_dir(args, command: str) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUT_ROOT_ENV)
    if not root:
        raise ConfigError("no --out given and COMPWM_OUT_ROOT is not set")
    return Path(root) / command


def _write_manifest(out_dir: Path, command: str, config: RunConfig,
                    started: float, **extra) -> None:
    manifest = {
        "command": command,
        "config_hash": config.config_hash(),
        "tool_version": __version__,
        "started": started,
        "finished": time.time(),
        **extra,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2,
                                                      sort_keys=True) + "\n")
    config.echo_yaml(out_dir / "config.yaml")


def _check_dataset_hash(dataset_path: Path) -> str:
    """Verify the dataset against the hash its gen-data manifest recorded."""
    actual = _sha256(dataset_path)
    sibling = dataset_path.parent / "manifest.json"
    if sibling.exists():
        recorded = json.loads(sibling.read_text()).get("dataset_sha256")
        if recorded and recorded != actual:
            raise MismatchError(
                f"dataset {dataset_path} hash {actual[:12]} != recorded "
                f"{recorded[:12]}")
    return actual


def _check_compatibility(ckpt_path: Path, dataset) -> None:
    manifest, _ = read_container(ckpt_path)
    mc = manifest["model_config"]
    spec = dataset.spec
    pairs = [("m", spec.m), ("dims", list(spec.dims)),
             ("token_values", list(spec.values)), ("obs_dim", spec.obs_dim),
             ("action_dim", spec.action_dim)]
    for key, expected in pairs:
        if mc.get(key) != expected:
            raise MismatchError(
                f"checkpoint/{key}={mc.get(key)} incompatible with "
                f"dataset/{key}={expected}")


def cmd_gen_data(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "gen-data")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    generator = build_ground_truth(config.generator, config.seed)
    report = assumption_report(generator, n_probes=100, seed=config.seed)
    report.to_csv(out_dir / "assumptions.csv")
    dataset = build_dataset(generator, config.data.n_holdout,
                            config.data.n_per_task, config.seed)
    dataset_path = out_dir / "dataset.cwm"
    save_dataset(dataset, dataset_path)
    if args.export_csv:
        export_trajectory_csv(dataset, out_dir / "trajectories")
    _write_manifest(out_dir, "gen-data", config, started,
                    dataset_sha256=_sha256(dataset_path),
                    train_tasks=[t.label() for t in dataset.train_tasks],
                    test_tasks=[t.label() for t in dataset.test_tasks])
    print(f"dataset: {len(dataset.train_tasks)} train / "
          f"{len(dataset.test_tasks)} test tasks -> {dataset_path}")
    if not report.passed:
        print(f"assumption checks FAILED: {', '.join(report.failures())}")
        if not args.allow_failed_assumptions:
            return EXIT_ASSUMPTION
    else:
        print("assumption checks passed")
    return EXIT_OK


def cmd_check_assumptions(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "check-assumptions")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    if args.dataset:
        dataset = load_dataset(args.dataset)
        generator = generator_from_dataset(dataset)
    else:
        generator = build_ground_truth(config.generator, config.seed)
    report = assumption_report(generator, n_probes=100, seed=config.seed)
    report.to_csv(out_dir / "assumptions.csv")
    _write_manifest(out_dir, "check-assumptions", config, started)
    for row in report.rows:
        print(f"assumption {row[0]:<4} {row[1]:<44} {row[2]}")
    return EXIT_OK if report.passed else EXIT_ASSUMPTION


def _run_one_training(config: RunConfig, dataset, out_dir: Path,
                      variant: str | None = None) -> int:
    train_cfg = config.train
    if variant and variant != "full":
        train_cfg = dataclass_from_dict(TrainConfig, {
            **dataclass_to_dict(train_cfg), variant: True})
    out_dir.mkdir(parents=True, exist_ok=True)

    def eval_hook(state, step):
        return {"diag_r2": quick_diag_r2(state.model, dataset, seed=config.eval.seed)}

    result = train(dataset, train_cfg, model_config=config.model,
                   mi_schedule=config.mi, sparsity=config.sparsity,
                   out_dir=out_dir, progress=True, eval_hook=eval_hook)
    print(f"{variant or 'train'}: finished {train_cfg.total_steps} steps -> "
          f"{result.checkpoint_path}")
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "train")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset_path = Path(args.dataset)
    dataset_hash = _check_dataset_hash(dataset_path)
    dataset = load_dataset(dataset_path)
    code = _run_one_training(config, dataset, out_dir)
    _write_manifest(out_dir, "train", config, started,
                    dataset=str(dataset_path), dataset_sha256=dataset_hash)
    return code


def cmd_ablate(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "ablate")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset_path = Path(args.dataset)
    dataset_hash = _check_dataset_hash(dataset_path)
    dataset = load_dataset(dataset_path)
    for variant in ("full", "no_mi", "no_masks", "no_factorization"):
        _run_one_training(config, dataset, out_dir / variant, variant)
    _write_manifest(out_dir, "ablate", config, started,
                    dataset=str(dataset_path), dataset_sha256=dataset_hash,
                    variants=["full", "no_mi", "no_masks", "no_factorization"])
    return EXIT_OK


def cmd_eval_ident(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "eval-ident")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset = load_dataset(args.dataset)
    _check_compatibility(Path(args.checkpoint), dataset)
    state, _, _, _ = load_checkpoint(args.checkpoint)
    matrix = r2_matrix(state.model, dataset, config.eval, step=state.step)
    matrix.to_csv(out_dir / "r2_matrix.csv")
    diag, off = matrix.diag_mean(), matrix.offdiag_mean()
    ok = diag >= args.diag_bar and off <= args.offdiag_bar
    summary = (f"diagonal R2 {diag:.3f} (bar {args.diag_bar}), "
               f"off-diagonal {off:.3f} (bar {args.offdiag_bar}): "
               f"{'PASS' if ok else 'FAIL'}\n"
               f"reference: full-scale runs report diagonal > 0.9 and "
               f"off-diagonal near 0.1\n")
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    _write_manifest(out_dir, "eval-ident", config, started,
                    checkpoint=str(args.checkpoint),
                    diag_r2=diag, offdiag_r2=off)
    return EXIT_OK


def cmd_eval_imagine(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "eval-imagine")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset = load_dataset(args.dataset)
    _check_compatibility(Path(args.checkpoint), dataset)
    state, _, _, _ = load_checkpoint(args.checkpoint)
    generator = generator_from_dataset(dataset)
    tasks = dataset.test_tasks or dataset.train_tasks
    report = imagination_r2(state.model, generator, tasks, config.eval)
    report.to_csv(out_dir / "imagination.csv")
    means = report.horizon_means()
    imagined = [v for h, v in means.items() if h >= 1]
    ok = float(np.mean(imagined)) >= args.r2_bar
    summary = "\n".join([f"horizon {h}: mean R2 {v:.3f}" for h, v in means.items()])
    summary += (f"\nmean imagined-horizon R2 {np.mean(imagined):.3f} "
                f"(bar {args.r2_bar}): {'PASS' if ok else 'FAIL'}\n")
    (out_dir / "summary.txt").write_text(summary)
    print(summary, end="")
    _write_manifest(out_dir, "eval-imagine", config, started,
                    checkpoint=str(args.checkpoint))
    return EXIT_OK


def cmd_eval_intervene(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "eval-intervene")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset = load_dataset(args.dataset)
    _check_compatibility(Path(args.checkpoint), dataset)
    state, _, _, _ = load_checkpoint(args.checkpoint)
    generator = generator_from_dataset(dataset)
    path = out_dir / "intervention.csv"
    for i in range(dataset.spec.m):
        report = intervention_report(state.model, generator, dataset, i, config.eval)
        report.to_csv(path, append=i > 0)
        print(f"component {i}: mean decoded |change| {report.model_delta.mean():.4f} "
              f"(generator: {report.truth_delta.mean():.4f}, "
              f"control: {report.baseline_delta.mean():.1e})")
    _write_manifest(out_dir, "eval-intervene", config, started,
                    checkpoint=str(args.checkpoint))
    return EXIT_OK


def cmd_adapt(args, config: RunConfig) -> int:
    out_dir = _out_dir(args, "adapt")
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()
    dataset = load_dataset(args.dataset)
    _check_compatibility(Path(args.checkpoint), dataset)
    adapt_cfg = config.adapt
    if args.mode:
        adapt_cfg = dataclass_from_dict(AdaptConfig, {
            **dataclass_to_dict(adapt_cfg), "mode": args.mode})
    result = adapt(args.checkpoint, dataset, adapt_cfg, config.eval, out_dir=out_dir)
    row = result.comparison[0]
    print(f"mode {row['mode']}: imagination R2 {row['final_imagination_r2']:.3f} "
          f"(frozen baseline {row['frozen_imagination_r2']:.3f}, "
          f"{row['trainable_params']} trainable params)")
    _write_manifest(out_dir, "adapt", config, started,
                    checkpoint=str(args.checkpoint), mode=adapt_cfg.mode)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="compwm",
        description="Token-factorized world models: generate, train, evaluate")
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, help="global seed override")
    parser.add_argument("--out", help="output directory "
                                      f"(default ${OUT_ROOT_ENV}/<command>)")
    parser.add_argument("--override", action="append", default=[],
                        metavar="KEY=VALUE", help="dotted config override")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="build generator + labeled dataset")
    p.add_argument("--allow-failed-assumptions", action="store_true")
    p.add_argument("--export-csv", action="store_true")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("check-assumptions", help="numeric generator checks")
    p.add_argument("--dataset", help="check the generator of an existing dataset")
    p.set_defaults(fn=cmd_check_assumptions)

    p = sub.add_parser("train", help="train one world model")
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("ablate", help="train full plus the three ablations")
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("eval-ident", help="block identifiability R2 matrix")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--diag-bar", type=float, default=0.85)
    p.add_argument("--offdiag-bar", type=float, default=0.3)
    p.set_defaults(fn=cmd_eval_ident)

    p = sub.add_parser("eval-imagine", help="open-loop imagination R2")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--r2-bar", type=float, default=0.3)
    p.set_defaults(fn=cmd_eval_imagine)

    p = sub.add_parser("eval-intervene", help="latent intervention attribution")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(fn=cmd_eval_intervene)

    p = sub.add_parser("adapt", help="fine-tune on held-out task compositions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=["dynamics_only", "full", "frozen"])
    p.set_defaults(fn=cmd_adapt)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args.config, args.override, args.seed)
        return args.fn(args, config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except AssumptionUnsatisfiableError as e:
        print(f"assumption failure: {e}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except MismatchError as e:
        print(f"mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except TrainingAbortError as e:
        print(f"training aborted: {e}", file=sys.stderr)
        return EXIT_TRAIN_ABORT
    except (StorageError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
