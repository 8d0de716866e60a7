"""Ground-truth generator: construction, sampling, splits, assumption checks."""

import numpy as np
import pytest

from compwm.datagen import (AssumptionUnsatisfiableError, DatagenError,
                            GenerativeSpec, GroundTruthModel, InfeasibleSplitError,
                            Task, build_dataset, build_ground_truth,
                            check_mixing_rank, check_sufficient_variability,
                            conditional_independence_probe, enumerate_tasks,
                            sample_rollouts, sample_trajectory, split_tasks,
                            task_count_requirements, variability_pass_rate)
from compwm.rng import RngState


@pytest.fixture(scope="module")
def generator():
    return build_ground_truth(GenerativeSpec(), seed=3)


def test_paper_config_has_27_tasks():
    assert len(enumerate_tasks(GenerativeSpec())) == 27


def test_enumerate_small_value_sets():
    spec2 = GenerativeSpec(m=2, dims=(1, 1), values=(2, 3), obs_dim=4,
                           embed_widths=(3, 4), mixing_layers=(2,),
                           reward_components=(0,))
    tasks = enumerate_tasks(spec2)
    assert [t.values for t in tasks] == [(0, 0), (0, 1), (0, 2),
                                         (1, 0), (1, 1), (1, 2)]


def test_build_is_deterministic():
    a = build_ground_truth(GenerativeSpec(), seed=5)
    b = build_ground_truth(GenerativeSpec(), seed=5)
    assert np.array_equal(a.mixing_out, b.mixing_out)
    for ea, eb in zip(a.embeddings, b.embeddings):
        assert np.array_equal(ea, eb)


def test_trajectory_shapes_paper_config(generator):
    tr = sample_trajectory(generator, Task((0, 1, 2)), length=50, seed=9)
    assert tr.true_latents.shape == (50, 6)
    assert tr.observations.shape == (50, generator.spec.obs_dim)
    assert tr.actions.shape == (50, 3)
    assert np.array_equal(tr.actions.sum(axis=1), np.ones(50))


def test_single_step_observation_is_mixed_state(generator):
    tr = sample_trajectory(generator, Task((0, 0, 0)), length=1, seed=4)
    obs, reward = generator.mix(tr.true_latents[0])
    sigma = generator.spec.obs_noise_std
    assert np.all(np.abs(tr.observations[0] - obs) < 6 * sigma)
    assert abs(tr.rewards[0] - reward) < 6 * sigma


def test_invalid_task_rejected(generator):
    with pytest.raises(DatagenError):
        sample_trajectory(generator, Task((0, 0, 9)), length=5, seed=1)


def test_noise_scaling_shrinks_latent_spread():
    import dataclasses
    distances = []
    for sigma in (1e-1, 1e-3, 1e-6):
        spec = dataclasses.replace(GenerativeSpec(), noise_std=sigma)
        model = build_ground_truth(spec, seed=6, n_check_probes=5)
        # same initial state and action stream, two different noise streams
        rng = RngState(77, 0)
        actions = rng.child(0).one_hot(spec.action_dim, (1, 20))
        init = rng.child(9).normal((1, spec.latent_dim))
        tr1 = sample_rollouts(model, Task((0, 0, 0)), 1, 20, rng.child(1),
                              actions=actions, init_states=init)[0]
        tr2 = sample_rollouts(model, Task((0, 0, 0)), 1, 20, rng.child(2),
                              actions=actions, init_states=init)[0]
        d = np.abs(tr1.true_latents - tr2.true_latents).max()
        distances.append(d)
    assert distances[0] > distances[1] > distances[2]
    assert distances[2] < 1e-4


def test_task_counts_paper_values():
    spec = GenerativeSpec()
    assert task_count_requirements(spec, "one_by_one") == 7
    assert task_count_requirements(spec, "all_in_one") == 9
    spec1 = GenerativeSpec(m=2, dims=(1, 1), values=(2, 2), obs_dim=2,
                           embed_widths=(3, 3), mixing_layers=(2,))
    assert task_count_requirements(spec1, "one_by_one") == 3
    assert task_count_requirements(spec1, "all_in_one") == 2
    with pytest.raises(DatagenError):
        task_count_requirements(spec, "both_at_once")


def test_split_27_tasks_holdout_3():
    tasks = enumerate_tasks(GenerativeSpec())
    train, test = split_tasks(tasks, 3, seed=1)
    assert len(train) == 24 and len(test) == 3
    for te in test:
        for i, val in enumerate(te.values):
            assert any(tr.values[i] == val for tr in train)


def test_split_holdout_zero():
    tasks = enumerate_tasks(GenerativeSpec())
    train, test = split_tasks(tasks, 0, seed=1)
    assert test == [] and len(train) == 27


def test_split_deterministic():
    tasks = enumerate_tasks(GenerativeSpec())
    a = split_tasks(tasks, 3, seed=9)
    b = split_tasks(tasks, 3, seed=9)
    assert a == b


def test_split_two_by_two_exhaustive():
    # for values (2,2), any single holdout leaves all values covered
    spec = GenerativeSpec(m=2, dims=(1, 1), values=(2, 2), obs_dim=2,
                          embed_widths=(3, 3), mixing_layers=(2,))
    tasks = enumerate_tasks(spec)
    for seed in range(8):
        train, test = split_tasks(tasks, 1, seed=seed)
        for te in test:
            for i, val in enumerate(te.values):
                assert any(tr.values[i] == val for tr in train)


def test_split_infeasible():
    tasks = enumerate_tasks(GenerativeSpec())
    with pytest.raises(InfeasibleSplitError):
        split_tasks(tasks, 27, seed=0)


def test_variability_identical_embeddings_fail(generator):
    import copy
    degenerate = copy.deepcopy(generator)
    degenerate.embeddings[0][:] = degenerate.embeddings[0][0]
    s = RngState(1).normal((6,))
    a = RngState(2).one_hot(3, ())
    rep = check_sufficient_variability(degenerate, 0, s, a)
    assert not rep.passed
    assert np.allclose(rep.matrix, 0.0)


def test_variability_one_dim_two_means():
    spec = GenerativeSpec(m=2, dims=(1, 1), values=(2, 2), obs_dim=2,
                          embed_widths=(3, 3), mixing_layers=(2,))
    model = build_ground_truth(spec, seed=8, n_check_probes=5)
    rep = check_sufficient_variability(model, 0, RngState(3).normal((2,)),
                                       RngState(4).one_hot(3, ()))
    assert rep.matrix.shape == (1, 1)
    assert rep.passed == (abs(rep.matrix[0, 0]) > 1e-6)


def test_variability_paper_config_pass_rate(generator):
    rate, worst = variability_pass_rate(generator, 0, 100, seed=0)
    assert rate >= 0.95
    assert worst > 0


def test_variability_matches_finite_difference_of_log_density(generator):
    """Score difference from means must equal the finite-difference derivative
    of the exact Gaussian log density."""
    spec = generator.spec
    rng = RngState(21)
    s_prev = rng.child(0).normal((spec.latent_dim,))
    a_prev = rng.child(1).one_hot(spec.action_dim, ())
    i = 1
    rep = check_sufficient_variability(generator, i, s_prev, a_prev)
    s_probe = rng.child(2).normal((spec.dims[i],))
    eps = 1e-5

    def log_density(value, x):
        mu = generator.transition_mean(i, value, s_prev, a_prev)
        return float(-0.5 * np.sum((x - mu) ** 2) / spec.noise_std ** 2)

    for k in range(1, spec.dims[i] + 1):
        for j in range(spec.dims[i]):
            e = np.zeros(spec.dims[i])
            e[j] = eps
            fd_k = (log_density(k, s_probe + e) - log_density(k, s_probe - e)) / (2 * eps)
            fd_0 = (log_density(0, s_probe + e) - log_density(0, s_probe - e)) / (2 * eps)
            fd = fd_k - fd_0
            analytic = rep.matrix[k - 1, j]
            assert abs(analytic - fd) / (abs(analytic) + abs(fd) + 1e-12) < 1e-4


def test_mixing_rank_identity_case():
    spec = GenerativeSpec(m=2, dims=(1, 1), values=(2, 2), obs_dim=2,
                          embed_widths=(3, 3), mixing_layers=(2,))
    model = build_ground_truth(spec, seed=8, n_check_probes=2)
    model.mixing_weights = []
    model.mixing_out = np.eye(2)
    model.reward_vec = np.zeros(1)
    rep = check_mixing_rank(model, 10, seed=0)
    assert abs(rep.min_singular_value - 1.0) < 1e-6
    assert rep.passed


def test_mixing_rank_degenerate_fails():
    spec = GenerativeSpec(m=2, dims=(1, 1), values=(2, 2), obs_dim=2,
                          embed_widths=(3, 3), mixing_layers=(2,))
    model = build_ground_truth(spec, seed=8, n_check_probes=2)
    model.mixing_weights = []
    # both observation dims read only the first latent; reward reads block 0
    model.mixing_out = np.array([[1.0, 1.0], [0.0, 0.0]])
    rep = check_mixing_rank(model, 10, seed=0)
    assert not rep.passed


def test_mixing_rank_default_builder_over_seeds():
    passes = 0
    for seed in range(20):
        model = build_ground_truth(GenerativeSpec(), seed=seed, n_check_probes=5)
        rep = check_mixing_rank(model, 10, seed=seed)
        passes += int(rep.passed)
    assert passes == 20


def test_insufficient_values_unbuildable():
    spec = GenerativeSpec(values=(2, 2, 2))
    with pytest.raises(AssumptionUnsatisfiableError) as e:
        build_ground_truth(spec, seed=1, max_retries=3, n_check_probes=5)
    assert "variability" in str(e.value)


def test_conditional_independence_zero_noise(generator):
    assert conditional_independence_probe(generator, 10, seed=5)


def test_block_partition_roundtrip(generator):
    tr = sample_trajectory(generator, Task((1, 2, 0)), length=10, seed=3)
    parts = [tr.true_latents[:, lo:hi] for lo, hi in generator.spec.block_slices]
    assert np.array_equal(np.concatenate(parts, axis=1), tr.true_latents)


def test_dataset_split_invariant(generator):
    ds = build_dataset(generator, n_holdout=3, n_per_task=2, seed=2)
    assert not set(ds.test_tasks) & set(ds.train_tasks)
    for te in ds.test_tasks:
        for i, val in enumerate(te.values):
            assert any(tr.values[i] == val for tr in ds.train_tasks)
    assert len(ds.trajectories) == 27


def test_assumption_checks_pure(generator):
    s = RngState(5).normal((6,))
    a = RngState(6).one_hot(3, ())
    r1 = check_sufficient_variability(generator, 2, s, a)
    r2 = check_sufficient_variability(generator, 2, s, a)
    assert np.array_equal(r1.matrix, r2.matrix)
    assert r1.min_singular_value == r2.min_singular_value
