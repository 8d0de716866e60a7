"""scikit-learn style front door for the world-model learner.

The estimator fits on a trajectory Dataset and transforms trajectories into
estimated latent rows (posterior means), so the learner drops into sklearn
pipelines and model-selection tooling via the usual get_params/set_params
contract. All hyperparameters are flat constructor arguments.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .datagen import Dataset, Trajectory, enumerate_tasks
from .evaluation import EvalConfig, r2_matrix
from .mi import MiSchedule
from .model import WorldModelConfig
from .training import TrainConfig, train
from .sparsity import SparsityConfig


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a Dataset, got {type(X).__name__}")
    if not X.trajectories:
        raise ValueError("dataset has no trajectories")
    return X


def check_trajectories(X, spec) -> list[Trajectory]:
    if isinstance(X, Dataset):
        return [tr for task in X.train_tasks for tr in X.trajectories[task]]
    if isinstance(X, Trajectory):
        X = [X]
    trajs = list(X)
    if not trajs:
        raise ValueError("no trajectories to transform")
    for tr in trajs:
        if tr.observations.shape[-1] != spec.obs_dim:
            raise ValueError(
                f"trajectory obs width {tr.observations.shape[-1]} != "
                f"generator obs_dim {spec.obs_dim}")
    return trajs


class WorldModelEstimator(TransformerMixin, BaseEstimator):
    """Fit a factorized world model on a Dataset; transform trajectories to
    estimated latent rows.

    Parameters mirror the training configuration; ablation switches exist so
    baseline variants stay one get_params/set_params away.
    """

    def __init__(self, total_steps: int = 3000, batch_size: int = 16,
                 batch_length: int = 12, lr_model: float = 3e-3,
                 lr_mine: float = 1e-3, alpha: float = 1.0, lam: float = 1.0,
                 gamma: float = 1.0, beta_end: float = 0.1,
                 sparsity_target: float = 0.25, no_mi: bool = False,
                 no_masks: bool = False, no_factorization: bool = False,
                 seed: int = 0):
        self.total_steps = total_steps
        self.batch_size = batch_size
        self.batch_length = batch_length
        self.lr_model = lr_model
        self.lr_mine = lr_mine
        self.alpha = alpha
        self.lam = lam
        self.gamma = gamma
        self.beta_end = beta_end
        self.sparsity_target = sparsity_target
        self.no_mi = no_mi
        self.no_masks = no_masks
        self.no_factorization = no_factorization
        self.seed = seed

    def _configs(self):
        train_cfg = TrainConfig(
            alpha=self.alpha, lam=self.lam, gamma=self.gamma,
            batch_size=self.batch_size, batch_length=self.batch_length,
            total_steps=self.total_steps, lr_model=self.lr_model,
            lr_mine=self.lr_mine, seed=self.seed, no_mi=self.no_mi,
            no_masks=self.no_masks, no_factorization=self.no_factorization)
        mi = MiSchedule(v_end=self.beta_end)
        sparsity = SparsityConfig(target_ratio=self.sparsity_target)
        return train_cfg, mi, sparsity

    def fit(self, X: Dataset, y=None) -> "WorldModelEstimator":
        dataset = check_dataset(X)
        train_cfg, mi, sparsity = self._configs()
        result = train(dataset, train_cfg, mi_schedule=mi, sparsity=sparsity)
        self.state_ = result.state
        self.metrics_ = result.metrics
        self.spec_ = dataset.spec
        self.n_features_in_ = dataset.spec.obs_dim
        return self

    def _check_fitted(self):
        if not hasattr(self, "state_"):
            raise NotFittedError("this WorldModelEstimator is not fitted yet")

    def transform(self, X) -> np.ndarray:
        """Posterior-mean latent rows, stacked over trajectories and time."""
        self._check_fitted()
        trajs = check_trajectories(X, self.spec_)
        from .evaluation import state_means
        from .rng import RngState

        index = {t: k for k, t in enumerate(enumerate_tasks(self.spec_))}
        rows = []
        for n, tr in enumerate(trajs):
            batch = {
                "observations": tr.observations[None],
                "rewards": tr.rewards[None],
                "actions": tr.actions[None],
                "tokens": np.array(tr.task.values)[None],
                "task_ids": np.array([index[tr.task]], dtype=np.int64),
            }
            filt = self.state_.model.filter_rollout(batch, RngState(self.seed, 71).child(n))
            rows.append(np.concatenate([state_means(p) for p in filt.posteriors]))
        return np.concatenate(rows, axis=0)

    def score(self, X: Dataset, y=None) -> float:
        """Mean diagonal R^2 of the block-identifiability matrix."""
        self._check_fitted()
        dataset = check_dataset(X)
        return r2_matrix(self.state_.model, dataset,
                         EvalConfig(seed=self.seed)).diag_mean()
