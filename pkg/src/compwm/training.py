"""Training loop: total objective, alternating estimator updates, schedules,
metrics, and bit-exact checkpoint/resume.

Each step draws its batch as a pure function of (seed, step), updates the
statistics networks on detached latents, then updates the world model on
l_total = alpha*l_rep + lambda*l_trans + beta_t*l_mi + gamma*l_spar with the
annealed coefficient beta_t and the current sparsity threshold. A gradient
audit verifies at every logged step that neither side's update ever touched
the other side's parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .datagen import Dataset, enumerate_tasks
from .dcutil import dataclass_from_dict, dataclass_to_dict
from .mi import MiBatch, MineEstimator, MiSchedule, build_estimators, mi_loss
from .model import WorldModel, WorldModelConfig
from .optim import Adam, clip_global_norm
from .rng import RngState
from .sparsity import SparsityConfig, adaptive_l1, sparsity_ratio, threshold_at
from .storage import MissingArrayError, read_container, write_container
from .tensor import NonFiniteError, Tensor

CHECKPOINT_KIND = "checkpoint"


class TrainingError(Exception):
    pass


class TrainingAbortError(TrainingError):
    def __init__(self, term: str, step: int, last_checkpoint: str | None):
        self.term = term
        self.step = step
        self.last_checkpoint = last_checkpoint
        where = last_checkpoint or "<none written>"
        super().__init__(
            f"non-finite {term} at step {step}; last good checkpoint: {where}")


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    lam: float = 1.0
    gamma: float = 1.0
    batch_size: int = 16
    batch_length: int = 12
    total_steps: int = 3000
    lr_model: float = 3e-3
    lr_mine: float = 1e-3
    seed: int = 0
    no_mi: bool = False
    no_masks: bool = False
    no_factorization: bool = False
    eval_every: int = 0
    eval_samples: int = 800
    checkpoint_every: int = 0
    grad_clip: float = 100.0
    ratio_probe_every: int = 10
    probe_sequences: int = 8
    mine_hidden: tuple[int, ...] = (32, 32)
    log_every: int = 1

    def validate(self) -> None:
        if min(self.alpha, self.lam, self.gamma) < 0:
            raise TrainingError("loss weights must be non-negative")
        if self.batch_length < 2:
            raise TrainingError("batch_length must be at least 2")
        if self.total_steps <= 0:
            raise TrainingError("total_steps must be positive")


class MetricsLog:
    """Append-only table with a fixed, documented column order."""

    def __init__(self, columns: list[str]):
        self.columns = list(columns)
        self.rows: list[list[float]] = []

    def append(self, values: dict[str, float]) -> None:
        self.rows.append([float(values.get(c, 0.0)) for c in self.columns])

    def column(self, name: str) -> np.ndarray:
        k = self.columns.index(name)
        return np.array([r[k] for r in self.rows])

    def to_csv(self, path) -> None:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(repr(v) for v in row))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        lines = Path(path).read_text().strip().split("\n")
        log = cls(lines[0].split(","))
        for line in lines[1:]:
            log.rows.append([float(v) for v in line.split(",")])
        return log


def metric_columns(model_config: WorldModelConfig,
                   estimators: list[MineEstimator]) -> list[str]:
    n_kl = model_config.m if model_config.factorized else 1
    cols = ["step", "l_total", "l_rep", "l_obs", "l_reward", "l_cont", "l_trans"]
    cols += [f"l_trans_c{k}" for k in range(n_kl)]
    cols += ["l_mi", "l_spar", "beta", "threshold"]
    cols += [f"bound_{e.name.removeprefix('mine/')}" for e in estimators]
    cols += ["ratio_obs", "ratio_reward", "ratio_cont", "grad_norm", "audit_ok"]
    return cols


@dataclass
class TrainState:
    """Everything the loop mutates, bundled for checkpointing."""

    model: WorldModel
    estimators: list[MineEstimator]
    model_opt: Adam
    mine_opt: Adam | None
    probe_cache: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    step: int = 0


def _estimator_params(estimators: list[MineEstimator]) -> dict[str, Tensor]:
    out: dict[str, Tensor] = {}
    for e in estimators:
        out.update(e.params)
    return out


def build_training(model_config: WorldModelConfig, config: TrainConfig) -> TrainState:
    """Fresh model, estimators (unless ablated away), and optimizers."""
    config.validate()
    rng = RngState(config.seed, 0)
    model = WorldModel(model_config, rng.child(7))
    if config.no_mi or config.no_factorization:
        estimators: list[MineEstimator] = []
        mine_opt = None
    else:
        history_dim = model_config.mi_history_len * (model_config.width
                                                     + model_config.action_dim)
        estimators = build_estimators(model_config.m, model_config.token_values,
                                      model_config.dims, history_dim,
                                      config.mine_hidden, rng.child(8))
        mine_opt = Adam(_estimator_params(estimators), lr=config.lr_mine)
    model_opt = Adam(model.params, lr=config.lr_model)
    return TrainState(model, estimators, model_opt, mine_opt)


def model_config_for_run(dataset: Dataset, config: TrainConfig,
                         base: WorldModelConfig | None = None) -> WorldModelConfig:
    """Derive the world-model config from the dataset spec and ablation flags."""
    spec = dataset.spec
    base = base or WorldModelConfig()
    return dataclass_from_dict(WorldModelConfig, {
        **dataclass_to_dict(base),
        "m": spec.m,
        "dims": tuple(spec.dims),
        "token_values": tuple(spec.values),
        "n_tasks": len(enumerate_tasks(spec)),
        "obs_dim": spec.obs_dim,
        "action_dim": spec.action_dim,
        "factorized": not config.no_factorization,
        "use_masks": not config.no_masks,
    })


def _task_index(dataset: Dataset) -> dict:
    return {t: k for k, t in enumerate(enumerate_tasks(dataset.spec))}


def sample_batch(dataset: Dataset, config: TrainConfig, step: int,
                 tasks=None) -> dict[str, np.ndarray]:
    """Deterministic minibatch of length-batch_length windows."""
    tasks = tasks if tasks is not None else dataset.train_tasks
    index = _task_index(dataset)
    gen = RngState(config.seed, 0).child(1000, step).generator()
    B, L = config.batch_size, config.batch_length
    obs = []
    rew = []
    act = []
    toks = []
    ids = []
    for _ in range(B):
        task = tasks[int(gen.integers(0, len(tasks)))]
        trajs = dataset.trajectories[task]
        tr = trajs[int(gen.integers(0, len(trajs)))]
        start = int(gen.integers(0, len(tr) - L + 1))
        obs.append(tr.observations[start:start + L])
        rew.append(tr.rewards[start:start + L])
        act.append(tr.actions[start:start + L])
        toks.append(list(task.values))
        ids.append(index[task])
    return {
        "observations": np.stack(obs),
        "rewards": np.stack(rew),
        "actions": np.stack(act),
        "tokens": np.array(toks, dtype=np.int64),
        "task_ids": np.array(ids, dtype=np.int64),
    }


def _probe_batch(dataset: Dataset, config: TrainConfig,
                 tasks=None) -> dict[str, np.ndarray]:
    """Held-aside sequences used only for mask-ratio measurement."""
    probe_cfg = dataclass_from_dict(TrainConfig, {
        **dataclass_to_dict(config), "batch_size": config.probe_sequences})
    return sample_batch(dataset, probe_cfg, step=-1, tasks=tasks)


def _refresh_probe_cache(state: TrainState, probe: dict[str, np.ndarray],
                         rng: RngState) -> None:
    model = state.model
    filt = model.filter_rollout(probe, rng)
    latents = np.concatenate([p.sample.data for p in filt.posteriors], axis=0)
    for name, mask in model.masks.items():
        state.probe_cache[name] = {
            "mean_abs": np.abs(latents).mean(axis=0),
            "ratio": np.array([sparsity_ratio(mask, latents)]),
        }


def _token_onehots(model_config: WorldModelConfig,
                   tokens: np.ndarray) -> list[np.ndarray]:
    return [np.eye(v)[tokens[:, i]]
            for i, v in enumerate(model_config.token_values)]


def train_step(state: TrainState, batch: dict[str, np.ndarray], config: TrainConfig,
               mi_schedule: MiSchedule, sparsity: SparsityConfig,
               probe: dict[str, np.ndarray]) -> dict[str, float]:
    """One alternating update; returns the metrics row."""
    model = state.model
    step = state.step
    rng_step = RngState(config.seed, 0).child(2000, step)
    row: dict[str, float] = {"step": float(step)}

    term = "l_rep/l_trans"
    try:
        filt = model.filter_rollout(batch, rng_step.child(0))
        beta_t = 0.0 if (config.no_mi or config.no_factorization) \
            else mi_schedule.coefficient(step, config.total_steps)
        threshold = threshold_at(min(step, config.total_steps), config.total_steps,
                                 sparsity)

        audit_ok = True
        # --- estimator side
        if state.estimators:
            term = "l_mi"
            mi_batch = MiBatch(
                token_onehots=_token_onehots(model.config, filt.mi_tokens),
                blocks=filt.mi_blocks,
                history=filt.mi_history,
            )
            l_mi, est_losses, bounds = mi_loss(
                mi_batch, state.estimators, mi_schedule, step, rng_step.child(1),
                train_estimators=state.mine_opt is not None)
            for name, value in bounds.items():
                row[f"bound_{name.removeprefix('mine/')}"] = value
            if est_losses:
                total_est = None
                for loss in est_losses.values():
                    total_est = loss if total_est is None else T.add(total_est, loss)
                T.backward(total_est)
                audit_ok &= all(p.grad is None for p in model.params.values())
                clip_global_norm(state.mine_opt.params, config.grad_clip)
                state.mine_opt.step()
                state.mine_opt.zero_grad()
        else:
            l_mi = T.constant(0.0)

        # --- sparsity side
        term = "l_spar"
        if model.masks:
            if step % config.ratio_probe_every == 0 or not state.probe_cache:
                _refresh_probe_cache(state, probe, rng_step.child(2))
            # gating decisions and penalty magnitudes both come from the
            # cached held-aside probe, not the training minibatch
            probes = {name: state.probe_cache[name]["mean_abs"][None, :]
                      for name in model.masks}
            cached_ratios = {name: float(state.probe_cache[name]["ratio"][0])
                             for name in model.masks}
            l_spar, ratios = adaptive_l1(list(model.masks.values()), probes,
                                         threshold, ratios=cached_ratios)
            row["ratio_obs"] = ratios.get("obs", 0.0)
            row["ratio_reward"] = ratios.get("reward", 0.0)
            row["ratio_cont"] = ratios.get("cont", 0.0)
        else:
            l_spar = T.constant(0.0)

        # --- model side
        term = "l_total"
        l_total = T.add(
            T.add(T.add(T.mul(T.constant(config.alpha), filt.l_rep),
                        T.mul(T.constant(config.lam), filt.l_trans)),
                  T.mul(T.constant(beta_t), l_mi)),
            T.mul(T.constant(config.gamma), l_spar))
        if not np.isfinite(l_total.data).all():
            raise NonFiniteError("l_total")
        T.backward(l_total)
        if state.estimators:
            audit_ok &= all(p.grad is None
                            for p in _estimator_params(state.estimators).values())
        grad_norm = clip_global_norm(state.model_opt.params, config.grad_clip)
        state.model_opt.step()
        # clear every grad, including params outside the optimizer's subset
        # (adaptation freezes groups by excluding them from the optimizer)
        for p in model.params.values():
            p.grad = None
        for p in _estimator_params(state.estimators).values():
            p.grad = None
    except NonFiniteError as e:
        raise TrainingAbortError(f"{term} ({e})", step, None) from e

    n_kl = len(filt.l_trans_components)
    row.update({
        "l_total": l_total.item(),
        "l_rep": filt.l_rep.item(),
        "l_obs": filt.l_obs.item(),
        "l_reward": filt.l_reward.item(),
        "l_cont": filt.l_cont.item(),
        "l_trans": filt.l_trans.item(),
        "l_mi": l_mi.item(),
        "l_spar": l_spar.item(),
        "beta": beta_t,
        "threshold": threshold,
        "grad_norm": grad_norm,
        "audit_ok": 1.0 if audit_ok else 0.0,
    })
    for k in range(n_kl):
        row[f"l_trans_c{k}"] = filt.l_trans_components[k].item()
    state.step += 1
    return row


@dataclass
class TrainResult:
    state: TrainState
    metrics: MetricsLog
    checkpoint_path: str | None


def train(dataset: Dataset, config: TrainConfig,
          model_config: WorldModelConfig | None = None,
          mi_schedule: MiSchedule | None = None,
          sparsity: SparsityConfig | None = None,
          out_dir: str | Path | None = None,
          resume_from: str | Path | None = None,
          progress: bool = False,
          eval_hook=None) -> TrainResult:
    """Run the full loop; optionally write metrics/checkpoints under out_dir."""
    mi_schedule = mi_schedule or MiSchedule()
    sparsity = sparsity or SparsityConfig()
    if resume_from is not None:
        state, config, mi_schedule, sparsity = load_checkpoint(resume_from)
        model_config = state.model.config
        start_row = state.step
    else:
        model_config = model_config_for_run(dataset, config, model_config)
        state = build_training(model_config, config)
        start_row = 0
    probe = _probe_batch(dataset, config)
    metrics = MetricsLog(metric_columns(model_config, state.estimators))
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    last_ckpt: str | None = None
    t0 = time.monotonic()
    for step in range(start_row, config.total_steps):
        batch = sample_batch(dataset, config, step)
        try:
            row = train_step(state, batch, config, mi_schedule, sparsity, probe)
        except TrainingAbortError as e:
            raise TrainingAbortError(e.term, e.step, last_ckpt) from e
        if step % config.log_every == 0:
            metrics.append(row)
        if config.eval_every and (step + 1) % config.eval_every == 0:
            extra = eval_hook(state, step + 1) if eval_hook else {}
            if progress:
                tail = "".join(f" {k}={v:.3f}" for k, v in extra.items())
                print(f"step {step + 1}/{config.total_steps} "
                      f"l_rep={row['l_rep']:.3f} l_trans={row['l_trans']:.3f}"
                      f"{tail} elapsed={time.monotonic() - t0:.0f}s", flush=True)
        if (out_dir is not None and config.checkpoint_every
                and (step + 1) % config.checkpoint_every == 0):
            last_ckpt = str(out_dir / f"checkpoint_step{step + 1:06d}.ckpt")
            save_checkpoint(state, last_ckpt, config, mi_schedule, sparsity,
                            metrics_tail=metrics.rows[-5:])
    ckpt_path = None
    if out_dir is not None:
        ckpt_path = str(out_dir / "checkpoint_final.ckpt")
        save_checkpoint(state, ckpt_path, config, mi_schedule, sparsity,
                        metrics_tail=metrics.rows[-5:])
        metrics.to_csv(out_dir / "metrics.csv")
    return TrainResult(state, metrics, ckpt_path)


def save_checkpoint(state: TrainState, path, config: TrainConfig,
                    mi_schedule: MiSchedule, sparsity: SparsityConfig,
                    metrics_tail: list | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.model.params.items():
        arrays[name] = p.data
    arrays.update(state.model_opt.state_arrays("adam/model"))
    for est in state.estimators:
        for name, p in est.params.items():
            arrays[name] = p.data
        arrays[f"{est.name}/ema"] = np.array(
            [est.ema_denominator if est.ema_denominator is not None else np.nan])
    if state.mine_opt is not None:
        arrays.update(state.mine_opt.state_arrays("adam/mine"))
    for name, cache in state.probe_cache.items():
        arrays[f"probe_cache/{name}/mean_abs"] = cache["mean_abs"]
        arrays[f"probe_cache/{name}/ratio"] = cache["ratio"]
    manifest = {
        "kind": CHECKPOINT_KIND,
        "step": state.step,
        "train_config": dataclass_to_dict(config),
        "model_config": dataclass_to_dict(state.model.config),
        "mi_schedule": dataclass_to_dict(mi_schedule),
        "sparsity": dataclass_to_dict(sparsity),
        "metrics_tail": metrics_tail or [],
    }
    write_container(path, manifest, arrays)


def load_checkpoint(path, model_config: WorldModelConfig | None = None
                    ) -> tuple[TrainState, TrainConfig, MiSchedule, SparsityConfig]:
    """Rebuild a TrainState exactly as saved; resuming from it reproduces the
    uninterrupted run bit for bit.

    A model_config different from the stored one may be supplied (for
    compatibility probing); every parameter the target model declares must
    exist in the container.
    """
    manifest, arrays = read_container(path)
    if manifest.get("kind") != CHECKPOINT_KIND:
        raise TrainingError(f"{path} is not a checkpoint container")
    config = dataclass_from_dict(TrainConfig, manifest["train_config"])
    if model_config is None:
        model_config = dataclass_from_dict(WorldModelConfig, manifest["model_config"])
    mi_schedule = dataclass_from_dict(MiSchedule, manifest["mi_schedule"])
    sparsity = dataclass_from_dict(SparsityConfig, manifest["sparsity"])
    state = build_training(model_config, config)
    missing = [n for n in state.model.params if n not in arrays]
    if missing:
        raise MissingArrayError(f"{path}: missing arrays {sorted(missing)}")
    for name, p in state.model.params.items():
        p.data = arrays[name].copy()
    state.model_opt.load_state_arrays("adam/model", arrays)
    for est in state.estimators:
        for name, p in est.params.items():
            if name not in arrays:
                raise MissingArrayError(f"{path}: missing arrays ['{name}']")
            p.data = arrays[name].copy()
        ema = float(arrays[f"{est.name}/ema"][0])
        est.ema_denominator = None if np.isnan(ema) else ema
    if state.mine_opt is not None:
        state.mine_opt.load_state_arrays("adam/mine", arrays)
    for name in state.model.masks:
        key = f"probe_cache/{name}/mean_abs"
        if key in arrays:
            state.probe_cache[name] = {
                "mean_abs": arrays[key].copy(),
                "ratio": arrays[f"probe_cache/{name}/ratio"].copy(),
            }
    state.step = int(manifest["step"])
    return state, config, mi_schedule, sparsity
