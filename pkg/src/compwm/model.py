"""Learnable factorized world model.

The latent state splits into one block per control token. Each block has its
own posterior network (reading the encoded observation, its token embedding,
the previous state, and the previous action) and its own prior network (the
same minus the observation), so token j can only steer block j. Decoders
read mask-gated latents plus a learned task embedding. A joint, non
factorized variant (one posterior/prior over the whole state conditioned on
all tokens at once) exists as an ablation baseline.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nets import MLP, bernoulli_logit_nll, gaussian_kl, gaussian_nll, softplus_std
from .rng import RngState
from .sparsity import GatedMask, apply_gated_mask
from .tensor import ShapeMismatchError, Tensor

MASK_NAMES = ("obs", "reward", "cont")


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class WorldModelConfig:
    m: int = 3
    dims: tuple[int, ...] = (2, 2, 2)
    token_values: tuple[int, ...] = (3, 3, 3)
    n_tasks: int = 27
    obs_dim: int = 8
    action_dim: int = 3
    h_dim: int = 24
    encoder_layers: tuple[int, ...] = (64, 64)
    decoder_layers: tuple[int, ...] = (64, 64)
    posterior_layers: tuple[int, ...] = (32,)
    prior_layers: tuple[int, ...] = (32,)
    token_embedding_dim: int = 6
    task_embedding_dim: int = 6
    min_posterior_std: float = 1e-3
    min_decoder_std: float = 1e-3
    kl_free_bits: float = 0.0
    kl_balance: float = 0.85
    mi_history_len: int = 1
    enable_continuation_head: bool = True
    factorized: bool = True
    use_masks: bool = True

    @property
    def width(self) -> int:
        return sum(self.dims)

    @property
    def block_slices(self) -> list[tuple[int, int]]:
        offs = np.cumsum((0,) + tuple(self.dims))
        return [(int(offs[i]), int(offs[i + 1])) for i in range(self.m)]

    def validate(self) -> None:
        if len(self.dims) != self.m or len(self.token_values) != self.m:
            raise ModelError("dims and token_values need one entry per component")
        if self.min_posterior_std <= 0:
            raise ModelError("min_posterior_std must be positive")
        if self.mi_history_len < 1:
            raise ModelError("mi_history_len must be at least 1")


@dataclass
class LatentState:
    """One timestep of latent beliefs.

    sample is the concatenated [batch, width] state. means/stds hold the
    distribution parameters per modelled block: m entries when factorized,
    a single joint entry otherwise. block_slices always describes the m-way
    partition used for evaluation.
    """

    sample: Tensor
    means: list[Tensor]
    stds: list[Tensor]
    noises: list[np.ndarray] = field(default_factory=list)
    block_slices: list[tuple[int, int]] = field(default_factory=list)

    def block(self, i: int) -> Tensor:
        lo, hi = self.block_slices[i]
        return T.narrow(self.sample, lo, hi)

    def block_values(self, i: int) -> np.ndarray:
        lo, hi = self.block_slices[i]
        return self.sample.data[:, lo:hi]


@dataclass
class DecodeResult:
    obs_mean: Tensor
    obs_std: Tensor
    reward_mean: Tensor
    reward_std: Tensor
    cont_logit: Tensor | None


@dataclass
class FilterResult:
    posteriors: list[LatentState]
    priors: list[LatentState]
    l_rep: Tensor
    l_obs: Tensor
    l_reward: Tensor
    l_cont: Tensor
    l_trans: Tensor
    l_trans_components: list[Tensor]
    mi_blocks: list[Tensor]            # per component, [N, dims_i], live
    mi_history: np.ndarray             # [N, history_dim], gradient-free
    mi_tokens: np.ndarray              # [N, m] integer token values


class WorldModel:
    def __init__(self, config: WorldModelConfig, rng: RngState):
        config.validate()
        self.config = config
        c = config
        self.encoder = MLP("encoder", [c.obs_dim] + list(c.encoder_layers) + [c.h_dim],
                           rng.child(1))
        self.token_tables = [
            Tensor(rng.child(2, i).normal((c.token_values[i], c.token_embedding_dim),
                                          scale=0.5), requires_grad=True)
            for i in range(c.m)
        ]
        self.task_table = Tensor(
            rng.child(3).normal((c.n_tasks, c.task_embedding_dim), scale=0.1),
            requires_grad=True)
        w = c.width
        tok = c.token_embedding_dim
        if c.factorized:
            self.posteriors = [
                MLP(f"component{i}/posterior",
                    [c.h_dim + tok + w + c.action_dim] + list(c.posterior_layers)
                    + [2 * c.dims[i]], rng.child(4, i))
                for i in range(c.m)
            ]
            self.priors = [
                MLP(f"component{i}/prior",
                    [tok + w + c.action_dim] + list(c.prior_layers) + [2 * c.dims[i]],
                    rng.child(5, i))
                for i in range(c.m)
            ]
        else:
            self.posteriors = [
                MLP("joint/posterior",
                    [c.h_dim + c.m * tok + w + c.action_dim] + list(c.posterior_layers)
                    + [2 * w], rng.child(4, 0))
            ]
            self.priors = [
                MLP("joint/prior",
                    [c.m * tok + w + c.action_dim] + list(c.prior_layers) + [2 * w],
                    rng.child(5, 0))
            ]
        dec_in = w + c.task_embedding_dim
        self.obs_decoder = MLP("decoders/obs", [dec_in] + list(c.decoder_layers)
                               + [c.obs_dim], rng.child(6))
        self.reward_decoder = MLP("decoders/reward", [dec_in] + list(c.decoder_layers)
                                  + [1], rng.child(7))
        self.obs_log_std = Tensor(np.zeros(c.obs_dim), requires_grad=True)
        self.reward_log_std = Tensor(np.zeros(1), requires_grad=True)
        if c.enable_continuation_head:
            self.cont_decoder = MLP("decoders/cont", [dec_in] + list(c.decoder_layers)
                                    + [1], rng.child(8))
        else:
            self.cont_decoder = None
        if c.use_masks:
            self.masks = {name: GatedMask(name, w) for name in MASK_NAMES}
        else:
            self.masks = {}

    @property
    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder.params)
        for i, table in enumerate(self.token_tables):
            out[f"tokens/component{i}"] = table
        out["task_table"] = self.task_table
        for net in self.posteriors + self.priors:
            out.update(net.params)
        out.update(self.obs_decoder.params)
        out.update(self.reward_decoder.params)
        out["decoders/obs/log_std_raw"] = self.obs_log_std
        out["decoders/reward/log_std_raw"] = self.reward_log_std
        if self.cont_decoder is not None:
            out.update(self.cont_decoder.params)
        for mask in self.masks.values():
            out.update(mask.params)
        return out

    def n_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def token_embed(self, i: int, values: np.ndarray) -> Tensor:
        return T.take_rows(self.token_tables[i], values)

    def task_embed(self, task_ids: np.ndarray) -> Tensor:
        return T.take_rows(self.task_table, task_ids)

    def encode(self, obs: np.ndarray) -> Tensor:
        if obs.shape[-1] != self.config.obs_dim:
            raise ShapeMismatchError(
                f"encoder: obs width {obs.shape} vs config {self.config.obs_dim}")
        return self.encoder(T.constant(obs))

    def initial_state(self, batch: int) -> LatentState:
        w = self.config.width
        zero = Tensor(np.zeros((batch, w)))
        if self.config.factorized:
            means = [Tensor(np.zeros((batch, d))) for d in self.config.dims]
            stds = [Tensor(np.ones((batch, d))) for d in self.config.dims]
        else:
            means = [Tensor(np.zeros((batch, w)))]
            stds = [Tensor(np.ones((batch, w)))]
        return LatentState(zero, means, stds, [], self.config.block_slices)

    def _dist_step(self, nets: list[MLP], head_inputs: list[Tensor],
                   rng: RngState, tag: int) -> LatentState:
        c = self.config
        means, stds, samples, noises = [], [], [], []
        for k, (net, x) in enumerate(zip(nets, head_inputs)):
            out = net(x)
            d = out.shape[-1] // 2
            mean = T.narrow(out, 0, d)
            std = softplus_std(T.narrow(out, d, 2 * d), c.min_posterior_std)
            noise = rng.child(tag, k).normal(mean.shape)
            sample = T.reparam_sample(mean, std, noise)
            means.append(mean)
            stds.append(std)
            samples.append(sample)
            noises.append(noise)
        full = samples[0] if len(samples) == 1 else T.concat(samples)
        return LatentState(full, means, stds, noises, c.block_slices)

    def posterior_step(self, h: Tensor, tokens: np.ndarray, s_prev: LatentState,
                       a_prev: np.ndarray, rng: RngState) -> LatentState:
        """q(block_i | h, token_i, s_prev, a_prev) per block, reparameterized."""
        c = self.config
        if s_prev.sample.shape[-1] != c.width:
            raise ShapeMismatchError(
                f"posterior: previous state width {s_prev.sample.shape} vs {c.width}")
        a = T.constant(a_prev)
        if c.factorized:
            inputs = [
                T.concat([h, self.token_embed(i, tokens[:, i]), s_prev.sample, a])
                for i in range(c.m)
            ]
        else:
            embeds = [self.token_embed(i, tokens[:, i]) for i in range(c.m)]
            inputs = [T.concat([h] + embeds + [s_prev.sample, a])]
        return self._dist_step(self.posteriors, inputs, rng, 11)

    def prior_step(self, tokens: np.ndarray, s_prev: LatentState,
                   a_prev: np.ndarray, rng: RngState) -> LatentState:
        """p(block_i | token_i, s_prev, a_prev) per block."""
        c = self.config
        a = T.constant(a_prev)
        if c.factorized:
            inputs = [
                T.concat([self.token_embed(i, tokens[:, i]), s_prev.sample, a])
                for i in range(c.m)
            ]
        else:
            embeds = [self.token_embed(i, tokens[:, i]) for i in range(c.m)]
            inputs = [T.concat(embeds + [s_prev.sample, a])]
        return self._dist_step(self.priors, inputs, rng, 12)

    def decode(self, sample: Tensor, z: Tensor) -> DecodeResult:
        c = self.config

        def head(dec: MLP, name: str) -> Tensor:
            gated = apply_gated_mask(self.masks[name], sample) if self.masks else sample
            return dec(T.concat([gated, z]))

        obs_mean = head(self.obs_decoder, "obs")
        obs_std = softplus_std(self.obs_log_std, c.min_decoder_std)
        reward_mean = head(self.reward_decoder, "reward")
        reward_std = softplus_std(self.reward_log_std, c.min_decoder_std)
        cont_logit = head(self.cont_decoder, "cont") if self.cont_decoder else None
        return DecodeResult(obs_mean, obs_std, reward_mean, reward_std, cont_logit)

    def filter_rollout(self, batch: dict[str, np.ndarray], rng: RngState) -> FilterResult:
        """Posterior filtering over a batch of sequences with all loss terms.

        batch keys: observations [B,T,obs], rewards [B,T], actions [B,T,A],
        tokens [B,m], task_ids [B].
        """
        c = self.config
        obs = batch["observations"]
        B, T_len = obs.shape[0], obs.shape[1]
        if T_len < 2:
            raise ModelError("need sequences of length >= 2 for transition loss")
        tokens = batch["tokens"]
        z = self.task_embed(batch["task_ids"])
        s = self.initial_state(B)
        posts: list[LatentState] = []
        priors: list[LatentState] = []
        l_obs = T.constant(0.0)
        l_reward = T.constant(0.0)
        l_cont = T.constant(0.0)
        n_dists = c.m if c.factorized else 1
        kl_comp = [T.constant(0.0) for _ in range(n_dists)]
        mi_block_tensors: list[list[Tensor]] = [[] for _ in range(c.m)]
        mi_history: list[np.ndarray] = []
        history_steps: list[tuple[np.ndarray, np.ndarray]] = []
        for t in range(T_len):
            a_prev = batch["actions"][:, t]
            h = self.encode(obs[:, t])
            post = self.posterior_step(h, tokens, s, a_prev, rng.child(20, t))
            prior = self.prior_step(tokens, s, a_prev, rng.child(21, t))
            dec = self.decode(post.sample, z)
            l_obs = T.add(l_obs, gaussian_nll(obs[:, t], dec.obs_mean, dec.obs_std))
            l_reward = T.add(l_reward, gaussian_nll(
                batch["rewards"][:, t:t + 1], dec.reward_mean, dec.reward_std))
            if dec.cont_logit is not None:
                l_cont = T.add(l_cont, bernoulli_logit_nll(
                    np.ones((B, 1)), dec.cont_logit))
            if t >= 1:
                for k in range(n_dists):
                    # balanced KL: the value is exactly KL(q || p); the
                    # balance weight only splits the gradient between the
                    # prior side (chasing the posterior) and the posterior
                    # side (staying predictable)
                    w = c.kl_balance
                    kl_dyn = gaussian_kl(post.means[k].detach(), post.stds[k].detach(),
                                         prior.means[k], prior.stds[k])
                    kl_rep = gaussian_kl(post.means[k], post.stds[k],
                                         prior.means[k].detach(), prior.stds[k].detach())
                    kl = T.add(T.mul(T.constant(w), kl_dyn),
                               T.mul(T.constant(1.0 - w), kl_rep))
                    fb = c.kl_free_bits
                    clipped = T.add(T.constant(fb),
                                    T.relu(T.sub(kl, T.constant(fb)))) if fb > 0 else kl
                    kl_comp[k] = T.add(kl_comp[k], clipped)
            # mutual-information samples: live block, gradient-free history
            history_steps.append((s.sample.data.copy(), a_prev))
            hist = _history_vector(history_steps, c.mi_history_len)
            mi_history.append(hist)
            for i in range(c.m):
                mi_block_tensors[i].append(post.block(i))
            posts.append(post)
            priors.append(prior)
            s = post
        l_trans = kl_comp[0]
        for k in range(1, n_dists):
            l_trans = T.add(l_trans, kl_comp[k])
        l_rep = T.add(T.add(l_obs, l_reward), l_cont)
        mi_cat = [_concat_rows(mi_block_tensors[i]) for i in range(c.m)]
        return FilterResult(
            posteriors=posts, priors=priors, l_rep=l_rep, l_obs=l_obs,
            l_reward=l_reward, l_cont=l_cont, l_trans=l_trans,
            l_trans_components=kl_comp, mi_blocks=mi_cat,
            mi_history=np.concatenate(mi_history, axis=0),
            mi_tokens=np.repeat(tokens[None, :, :], T_len, axis=0).reshape(-1, c.m),
        )

    def imagine_rollout(self, observations: np.ndarray, tokens: np.ndarray,
                        task_ids: np.ndarray, actions: np.ndarray, horizon: int,
                        rng: RngState) -> tuple[list[LatentState], list[np.ndarray]]:
        """Filter k observed steps, then roll the prior forward open-loop.

        observations: [B,k,obs]; actions: [B,k+horizon,A]. Returns the k+H
        latent states and the decoded observation means per step.
        """
        if horizon < 1:
            raise ModelError("horizon must be at least 1")
        k = observations.shape[1]
        if k < 1:
            raise ModelError("need at least one observed step")
        if actions.shape[1] < k + horizon:
            raise ModelError(
                f"actions cover {actions.shape[1]} steps, need {k + horizon}")
        B = observations.shape[0]
        s = self.initial_state(B)
        states: list[LatentState] = []
        for t in range(k):
            h = self.encode(observations[:, t])
            s = self.posterior_step(h, tokens, s, actions[:, t], rng.child(30, t))
            states.append(s)
        for t in range(k, k + horizon):
            s = self.prior_step(tokens, s, actions[:, t], rng.child(31, t))
            states.append(s)
        z = self.task_embed(task_ids)
        decoded = [self.decode(st.sample, z).obs_mean.data for st in states]
        return states, decoded


def _history_vector(history_steps: list[tuple[np.ndarray, np.ndarray]],
                    tau: int) -> np.ndarray:
    """Stack the last tau (state, action) pairs, zero-padded at the start."""
    B = history_steps[-1][0].shape[0]
    parts = []
    for back in range(tau):
        idx = len(history_steps) - 1 - back
        if idx >= 0:
            s, a = history_steps[idx]
            parts.append(np.concatenate([s, a], axis=-1))
        else:
            w = history_steps[0][0].shape[1] + history_steps[0][1].shape[1]
            parts.append(np.zeros((B, w)))
    return np.concatenate(parts, axis=-1)


def _concat_rows(tensors: list[Tensor]) -> Tensor:
    """Stack [B,d] tensors into [sum B, d] by summing gradients back out."""
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=0)
    offsets = np.cumsum([0] + [d.shape[0] for d in datas])

    def back(g):
        return tuple(g[offsets[k]:offsets[k + 1]] for k in range(len(tensors)))

    return T.make_node(out, tuple(tensors), back, "concat_rows")
