"""Encoder, projection head and transformer policy, built on :mod:`rlbioaug.autodiff`.

Parameters live in plain ``dict[str, Tensor]`` objects so they can be written
with :mod:`rlbioaug.checkpoint` and updated with :func:`autodiff.sgd_step`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .augment import N_ACTIONS
from .autodiff import ShapeError, Tensor
from .rng import Seed, make_rng

PAD_ACTION = N_ACTIONS  # extra row in the action embedding table


@dataclass(frozen=True)
class EncoderConfig:
    input_len: int = 128
    n_blocks: int = 3
    channels: tuple[int, ...] = (16, 32, 64)
    embedding_dim: int = 64
    projection_dim: int = 32
    kernel_size: int = 7

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != self.n_blocks:
            raise ValueError(f"channels {self.channels} must have n_blocks={self.n_blocks} entries")
        dims = (self.input_len, self.n_blocks, self.embedding_dim, self.projection_dim, self.kernel_size)
        if min(dims + self.channels) < 1:
            raise ValueError("all encoder dimensions must be >= 1")


@dataclass(frozen=True)
class PolicyConfig:
    history_len: int = 8
    token_dim: int = 32
    n_heads: int = 2
    n_actions: int = N_ACTIONS
    ff_dim: int = 64
    state_dim: int = 64

    def __post_init__(self):
        if self.token_dim % self.n_heads:
            raise ValueError(f"token_dim {self.token_dim} not divisible by n_heads {self.n_heads}")
        if self.n_actions != N_ACTIONS:
            raise ValueError(f"n_actions must be {N_ACTIONS}")
        if min(self.history_len, self.token_dim, self.n_heads, self.ff_dim, self.state_dim) < 1:
            raise ValueError("all policy dimensions must be >= 1")


@dataclass
class AgentContext:
    """Policy input for one sample: state embedding plus recent (action, reward) history."""

    state: np.ndarray
    past_actions: list[int] = field(default_factory=list)
    past_rewards: list[float] = field(default_factory=list)


def _uniform(rng, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    bound = gain * math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def param_count(params: dict[str, Tensor]) -> int:
    return int(np.sum([p.data.size for p in params.values()]))


# ---------------------------------------------------------------------------
# encoder + projector


def init_encoder(cfg: EncoderConfig, seed: Seed = 0) -> dict[str, Tensor]:
    rng = make_rng(seed, 101)
    k = cfg.kernel_size
    p = {"stem.w": _uniform(rng, (cfg.channels[0], 1, k), k)}
    c_in = cfg.channels[0]
    for i, c_out in enumerate(cfg.channels):
        p[f"block{i}.conv1"] = _uniform(rng, (c_out, c_in, k), c_in * k)
        p[f"block{i}.conv2"] = _uniform(rng, (c_out, c_out, k), c_out * k)
        p[f"block{i}.skip"] = _uniform(rng, (c_out, c_in, 1), c_in)
        c_in = c_out
    p["embed.w"] = _uniform(rng, (c_in, cfg.embedding_dim), c_in)
    p["embed.b"] = _zeros((cfg.embedding_dim,))
    return p


def init_projector(cfg: EncoderConfig, seed: Seed = 0) -> dict[str, Tensor]:
    rng = make_rng(seed, 102)
    e, d = cfg.embedding_dim, cfg.projection_dim
    return {
        "proj.w1": _uniform(rng, (e, e), e),
        "proj.b1": _zeros((e,)),
        "proj.w2": _uniform(rng, (e, d), e),
        "proj.b2": _zeros((d,)),
    }


def encode(X, params: dict[str, Tensor], cfg: EncoderConfig, stop_gradient: bool = False) -> Tensor:
    """(B, L) signals -> (B, embedding_dim) embeddings.

    Each residual block downsamples by two; features are averaged over time.
    With ``stop_gradient`` the result is detached and no graph is recorded.
    """
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ShapeError(f"encode: expected non-empty (B, L) batch, got {X.shape}")
    if X.shape[1] != cfg.input_len:
        raise ShapeError(f"encode: epoch length {X.shape[1]} != configured {cfg.input_len}")
    p = ad.frozen(params) if stop_gradient else params
    pad = cfg.kernel_size // 2
    h = ad.constant(X[:, None, :])
    h = ad.relu(ad.layer_norm(ad.conv1d(h, p["stem.w"], 1, pad), axis=1))
    for i in range(cfg.n_blocks):
        y = ad.relu(ad.layer_norm(ad.conv1d(h, p[f"block{i}.conv1"], 2, pad), axis=1))
        y = ad.layer_norm(ad.conv1d(y, p[f"block{i}.conv2"], 1, pad), axis=1)
        h = ad.relu(ad.add(y, ad.conv1d(h, p[f"block{i}.skip"], 2, 0)))
    pooled = ad.mean(h, axis=2)
    return ad.add(ad.matmul(pooled, p["embed.w"]), p["embed.b"])


def project(z: Tensor, params: dict[str, Tensor], cfg: EncoderConfig | None = None) -> Tensor:
    """Two-layer MLP followed by per-row L2 normalization."""
    z = ad.as_tensor(z)
    if z.ndim != 2 or z.shape[1] != params["proj.w1"].shape[0]:
        raise ShapeError(f"project: expected (B, {params['proj.w1'].shape[0]}), got {z.shape}")
    h = ad.relu(ad.add(ad.matmul(z, params["proj.w1"]), params["proj.b1"]))
    out = ad.add(ad.matmul(h, params["proj.w2"]), params["proj.b2"])
    return ad.l2_normalize(out, axis=1)


# ---------------------------------------------------------------------------
# policy


def init_policy(cfg: PolicyConfig, seed: Seed = 0) -> dict[str, Tensor]:
    rng = make_rng(seed, 103)
    d, f, t = cfg.token_dim, cfg.ff_dim, cfg.history_len + 1
    dh = d // cfg.n_heads
    p = {
        "state.w": _uniform(rng, (cfg.state_dim, d), cfg.state_dim),
        "state.b": _zeros((d,)),
        "action.table": _uniform(rng, (cfg.n_actions + 1, d), d),
        "reward.w": _uniform(rng, (1, d), 1),
        "reward.b": _zeros((d,)),
        "pos": _uniform(rng, (t, d), d),
        "ln1.g": Tensor(np.ones(d), requires_grad=True),
        "ln1.b": _zeros((d,)),
        "attn.out": _uniform(rng, (d, d), d),
        "ln2.g": Tensor(np.ones(d), requires_grad=True),
        "ln2.b": _zeros((d,)),
        "ff.w1": _uniform(rng, (d, f), d),
        "ff.b1": _zeros((f,)),
        "ff.w2": _uniform(rng, (f, d), f),
        "ff.b2": _zeros((d,)),
        # small output layer so the initial policy is close to uniform
        "head.w": _uniform(rng, (d, cfg.n_actions), d, gain=0.1),
        "head.b": _zeros((cfg.n_actions,)),
    }
    for h in range(cfg.n_heads):
        for name in "qkv":
            p[f"attn.{name}{h}"] = _uniform(rng, (d, dh), d)
    return p


def context_arrays(contexts: list[AgentContext], cfg: PolicyConfig):
    """Stack contexts into (states, action ids, rewards); histories are left-padded."""
    k = cfg.history_len
    states = np.stack([np.asarray(c.state, dtype=np.float64) for c in contexts])
    actions = np.full((len(contexts), k), PAD_ACTION, dtype=np.int64)
    rewards = np.zeros((len(contexts), k))
    for i, c in enumerate(contexts):
        if len(c.past_actions) != len(c.past_rewards):
            raise ValueError("past_actions and past_rewards must be aligned")
        n = len(c.past_actions)
        if n > k:
            raise ValueError(f"history of length {n} exceeds history_len {k}")
        if n:
            actions[i, k - n:] = c.past_actions
            rewards[i, k - n:] = c.past_rewards
    return states, actions, rewards


def policy_forward(contexts, params: dict[str, Tensor], cfg: PolicyConfig) -> Tensor:
    """Action probabilities (B, n_actions) for a batch of contexts.

    ``contexts`` is a list of :class:`AgentContext` or a ready
    ``(states, actions, rewards)`` triple from :func:`context_arrays`.
    """
    states, actions, rewards = (context_arrays(contexts, cfg) if isinstance(contexts, list)
                                else contexts)
    b, k = actions.shape
    if k != cfg.history_len:
        raise ShapeError(f"policy_forward: history of length {k}, configured {cfg.history_len}")
    if states.shape != (b, cfg.state_dim):
        raise ShapeError(f"policy_forward: states {states.shape}, expected ({b}, {cfg.state_dim})")
    p = params
    hist = ad.add(ad.embedding(p["action.table"], actions),
                  ad.add(ad.matmul(ad.constant(rewards[:, :, None]), p["reward.w"]), p["reward.b"]))
    state_tok = ad.add(ad.matmul(ad.constant(states[:, None, :]), p["state.w"]), p["state.b"])
    seq = ad.add(ad.concat([hist, state_tok], axis=1), p["pos"])

    h = ad.add(ad.mul(ad.layer_norm(seq, axis=-1), p["ln1.g"]), p["ln1.b"])
    dh = cfg.token_dim // cfg.n_heads
    heads = []
    for i in range(cfg.n_heads):
        q = ad.matmul(h, p[f"attn.q{i}"])
        kk = ad.matmul(h, p[f"attn.k{i}"])
        v = ad.matmul(h, p[f"attn.v{i}"])
        scores = ad.scale(ad.matmul(q, ad.transpose(kk, (0, 2, 1))), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax(scores, axis=-1), v))
    seq = ad.add(seq, ad.matmul(ad.concat(heads, axis=-1), p["attn.out"]))

    h = ad.add(ad.mul(ad.layer_norm(seq, axis=-1), p["ln2.g"]), p["ln2.b"])
    ff = ad.add(ad.matmul(ad.relu(ad.add(ad.matmul(h, p["ff.w1"]), p["ff.b1"])), p["ff.w2"]), p["ff.b2"])
    seq = ad.add(seq, ff)

    select = np.zeros((1, k + 1))
    select[0, -1] = 1.0
    last = ad.sum(ad.matmul(ad.constant(select), seq), axis=1)
    logits = ad.add(ad.matmul(last, p["head.w"]), p["head.b"])
    return ad.softmax(logits, axis=-1)
