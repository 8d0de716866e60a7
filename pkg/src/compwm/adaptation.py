"""Fine-tuning on new task compositions with frozen perception.

In dynamics-only mode just the task embedding table, the per-block posterior
and prior networks, and the decoding masks are trainable; the encoder,
decoders, and token tables stay bit-identical. A frozen mode (pure
evaluation) and a full mode (everything trainable) serve as baselines.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import Dataset, Task
from .dcutil import dataclass_from_dict, dataclass_to_dict
from .evaluation import EvalConfig, generator_from_dataset, imagination_r2
from .mi import MiSchedule
from .model import WorldModel
from .optim import Adam
from .sparsity import SparsityConfig
from .training import (MetricsLog, TrainConfig, TrainState, load_checkpoint,
                       metric_columns, sample_batch, train_step, _probe_batch)

GROUP_NAMES = ("encoder", "decoders", "token_tables", "task_table",
               "posteriors", "priors", "masks", "estimators")

MODES = ("dynamics_only", "full", "frozen")

TRAINABLE_BY_MODE = {
    "dynamics_only": {"task_table", "posteriors", "priors", "masks"},
    "full": set(GROUP_NAMES),
    "frozen": set(),
}


class AdaptationError(Exception):
    pass


@dataclass(frozen=True)
class AdaptConfig:
    mode: str = "dynamics_only"
    steps: int = 600
    lr: float = 1e-3
    batch_size: int = 16
    batch_length: int = 12
    sparsity_target: float = 0.35
    raise_threshold: bool = True
    eval_every: int = 200
    seed: int = 0

    def validate(self) -> None:
        if self.mode not in MODES:
            raise AdaptationError(f"unknown adaptation mode {self.mode!r}")


@dataclass
class ParameterGroups:
    members: dict[str, list[str]]
    trainable: dict[str, bool]

    def trainable_names(self) -> list[str]:
        out = []
        for group, names in self.members.items():
            if self.trainable[group]:
                out.extend(names)
        return out

    def frozen_names(self) -> list[str]:
        out = []
        for group, names in self.members.items():
            if not self.trainable[group]:
                out.extend(names)
        return out


def param_group(name: str) -> str:
    """Every parameter belongs to exactly one named group."""
    if name.startswith("encoder/"):
        return "encoder"
    if name.startswith("decoders/"):
        return "decoders"
    if name.startswith("tokens/"):
        return "token_tables"
    if name == "task_table":
        return "task_table"
    if "/posterior/" in name:
        return "posteriors"
    if "/prior/" in name:
        return "priors"
    if name.startswith("masks/"):
        return "masks"
    if name.startswith("mine/"):
        return "estimators"
    raise AdaptationError(f"parameter {name!r} belongs to no group")


def select_trainable(state: TrainState, mode: str) -> ParameterGroups:
    if mode not in MODES:
        raise AdaptationError(f"unknown adaptation mode {mode!r}")
    members: dict[str, list[str]] = {g: [] for g in GROUP_NAMES}
    all_params = dict(state.model.params)
    for est in state.estimators:
        all_params.update(est.params)
    for name in all_params:
        members[param_group(name)].append(name)
    trainable = {g: g in TRAINABLE_BY_MODE[mode] for g in GROUP_NAMES}
    return ParameterGroups(members, trainable)


@dataclass
class AdaptResult:
    state: TrainState
    metrics: MetricsLog
    comparison: list[dict]
    eval_rows: list[dict] = field(default_factory=list)


def _imagination_mean(model: WorldModel, generator, tasks: list[Task],
                      eval_cfg: EvalConfig) -> float:
    report = imagination_r2(model, generator, tasks, eval_cfg)
    imagined = [m for _, h, m, _ in report.rows if h >= 1]
    return float(np.mean(imagined))


def adapt(checkpoint_path: str | Path, new_task_dataset: Dataset,
          config: AdaptConfig, eval_cfg: EvalConfig | None = None,
          out_dir: str | Path | None = None) -> AdaptResult:
    """Fine-tune a trained checkpoint on held-out tasks and compare against
    the frozen baseline."""
    config.validate()
    eval_cfg = eval_cfg or EvalConfig(n_rollouts=128)
    state, train_cfg, mi_schedule, _ = load_checkpoint(checkpoint_path)
    tasks = new_task_dataset.test_tasks or new_task_dataset.train_tasks
    unseen = [t for t in tasks if t not in new_task_dataset.trajectories]
    if unseen:
        raise AdaptationError(f"no trajectories for tasks {unseen}")

    generator = generator_from_dataset(new_task_dataset)
    frozen_r2 = _imagination_mean(state.model, generator, tasks, eval_cfg)
    groups = select_trainable(state, config.mode)
    all_params = dict(state.model.params)
    for est in state.estimators:
        all_params.update(est.params)
    frozen_snapshot = {n: all_params[n].data.copy() for n in groups.frozen_names()}
    trainable = {n: all_params[n] for n in groups.trainable_names()}
    n_trainable = sum(p.data.size for p in trainable.values())

    adapt_train_cfg = dataclass_from_dict(TrainConfig, {
        **dataclass_to_dict(train_cfg),
        "batch_size": config.batch_size,
        "batch_length": config.batch_length,
        "total_steps": max(1, config.steps),
        "lr_model": config.lr,
        "seed": config.seed,
    })
    # estimators keep shaping the model loss from step 0 during adaptation,
    # but their own weights only move in full mode
    adapt_schedule = dataclass_from_dict(MiSchedule, {
        **dataclass_to_dict(mi_schedule),
        "maximize_after": 0, "minimize_after": 0,
        "anneal_fraction": 1e-9,
    })
    target = config.sparsity_target if config.raise_threshold else None
    if target is None:
        target = state_sparsity_target(checkpoint_path)
    adapt_sparsity = SparsityConfig(target_ratio=target, anneal_fraction=1e-9)

    model_trainable = {n: p for n, p in trainable.items() if not n.startswith("mine/")}
    mine_trainable = {n: p for n, p in trainable.items() if n.startswith("mine/")}
    state.model_opt = Adam(model_trainable, lr=config.lr) if model_trainable else None
    state.mine_opt = Adam(mine_trainable, lr=config.lr) if mine_trainable else None

    metrics = MetricsLog(metric_columns(state.model.config, state.estimators))
    eval_rows: list[dict] = []
    probe = (_probe_batch(new_task_dataset, adapt_train_cfg, tasks=tasks)
             if state.model.masks else {})
    state.step = 0
    if config.mode != "frozen":
        for step in range(config.steps):
            batch = sample_batch(new_task_dataset, adapt_train_cfg, step, tasks=tasks)
            row = train_step(state, batch, adapt_train_cfg, adapt_schedule,
                             adapt_sparsity, probe)
            metrics.append(row)
            if config.eval_every and (step + 1) % config.eval_every == 0:
                r2 = _imagination_mean(state.model, generator, tasks, eval_cfg)
                eval_rows.append({"step": step + 1, "imagination_r2": r2,
                                  "mode": config.mode})

    for name in groups.frozen_names():
        if not np.array_equal(all_params[name].data, frozen_snapshot[name]):
            raise AdaptationError(f"frozen parameter {name} changed during adapt")

    final_r2 = _imagination_mean(state.model, generator, tasks, eval_cfg)
    comparison = [{
        "mode": config.mode,
        "tasks": ",".join(t.label() for t in tasks),
        "final_imagination_r2": final_r2,
        "frozen_imagination_r2": frozen_r2,
        "trainable_params": n_trainable,
        "steps": 0 if config.mode == "frozen" else config.steps,
    }]
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        metrics.to_csv(out_dir / "adaptation_loss.csv")
        write_comparison_csv(out_dir / "adaptation_metrics.csv", comparison, eval_rows)
    return AdaptResult(state, metrics, comparison, eval_rows)


def state_sparsity_target(checkpoint_path) -> float:
    from .storage import read_container

    manifest, _ = read_container(checkpoint_path)
    return float(manifest["sparsity"]["target_ratio"])


def write_comparison_csv(path, comparison: list[dict], eval_rows: list[dict]) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["mode", "tasks", "step", "imagination_r2",
                    "frozen_imagination_r2", "trainable_params"])
        for row in comparison:
            w.writerow([row["mode"], row["tasks"], row["steps"],
                        repr(row["final_imagination_r2"]),
                        repr(row["frozen_imagination_r2"]),
                        row["trainable_params"]])
        for row in eval_rows:
            w.writerow([row["mode"], "", row["step"],
                        repr(row["imagination_r2"]), "", ""])


def count_trainable(state: TrainState, mode: str) -> int:
    groups = select_trainable(state, mode)
    all_params = dict(state.model.params)
    for est in state.estimators:
        all_params.update(est.params)
    return sum(all_params[n].data.size for n in groups.trainable_names())
