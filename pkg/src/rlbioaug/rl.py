"""Policy-gradient update for the augmentation agent (one-step contextual bandit).

Loss: -mean(log pi(a|s) * A) - beta * gamma * mean(H(pi(.|s))), with the
advantage A = r - mean(r) over the mini-batch.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .augment import N_ACTIONS
from .autodiff import Tensor
from .rng import Seed, make_rng

log = logging.getLogger(__name__)

ENTROPY_COEF = 0.1
LOG_FLOOR = 1e-12

TRACE_COLUMNS = ("step", "beta", "mean_reward", "mean_advantage", "policy_loss", "entropy",
                 "p_mask", "p_perm", "p_crop", "p_flip", "p_warp", "chosen_action_hist")


@dataclass(frozen=True)
class ExplorationSchedule:
    beta_start: float = 1.0
    beta_end: float = 0.1
    total_steps: int = 2000
    gamma: float = ENTROPY_COEF

    def __post_init__(self):
        if self.beta_end < 0 or self.beta_start < self.beta_end:
            raise ValueError("need beta_start >= beta_end >= 0")
        if self.total_steps < 0:
            raise ValueError("total_steps must be >= 0")


def beta_at(schedule: ExplorationSchedule, step: int) -> float:
    """Linear decay from beta_start to beta_end, constant afterwards."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.total_steps == 0 or step >= schedule.total_steps:
        return schedule.beta_end
    frac = step / schedule.total_steps
    return schedule.beta_start + (schedule.beta_end - schedule.beta_start) * frac


def advantage(rewards) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("advantage of an empty batch")
    return r - r.mean()


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    if np.any(p < 0):
        raise ValueError("negative probability")
    nz = p[p > 0]
    return float(-np.sum(nz * np.log(nz)))


def top_k_sample(probs, k: int = 3, rng_seed: Seed = 0) -> int:
    """Sample among the k most probable actions after renormalizing; ties favour lower ids."""
    p = np.asarray(probs, dtype=np.float64)
    if not 1 <= k <= len(p):
        raise ValueError(f"k must be in [1, {len(p)}], got {k}")
    keep = np.argsort(-p, kind="stable")[:k]
    w = p[keep]
    if k == 1 or w.sum() <= 0:
        return int(keep[0])
    u = make_rng(rng_seed).random()
    cdf = np.cumsum(w / w.sum())
    return int(keep[min(np.searchsorted(cdf, u, side="right"), k - 1)])


@dataclass
class StepBatch:
    """Sampled actions, observed rewards and the (differentiable) probabilities they came from."""

    probs: Tensor
    chosen_actions: np.ndarray
    rewards: np.ndarray

    def __post_init__(self):
        self.chosen_actions = np.asarray(self.chosen_actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        b = self.probs.shape[0]
        if b < 1 or len(self.chosen_actions) != b or len(self.rewards) != b:
            raise ValueError("probs, chosen_actions and rewards must be aligned and non-empty")


def policy_loss(probs: Tensor, actions, advantages, beta: float, gamma: float = ENTROPY_COEF):
    """Return (loss tensor, number of chosen-action probabilities clamped at LOG_FLOOR)."""
    probs = ad.as_tensor(probs)
    actions = np.asarray(actions, dtype=np.int64)
    adv = np.asarray(advantages, dtype=np.float64)
    b, n = probs.shape
    onehot = np.zeros((b, n))
    onehot[np.arange(b), actions] = 1.0
    chosen = ad.sum(ad.mul(probs, ad.constant(onehot)), axis=1)
    low = chosen.data < LOG_FLOOR
    clamped = int(low.sum())
    if clamped:
        log.warning("policy_loss: %d chosen-action probabilities below %g clamped", clamped, LOG_FLOOR)
        chosen = ad.add(chosen, ad.constant(np.where(low, LOG_FLOOR - chosen.data, 0.0)))
    pg = ad.scale(ad.mean(ad.mul(ad.log(chosen), ad.constant(adv))), -1.0)
    # the tiny shift leaves probabilities above ~1e-284 bit-identical and keeps log finite
    ent = ad.scale(ad.sum(ad.mul(probs, ad.log(ad.add(probs, 1e-300))), axis=1), -1.0)
    loss = ad.sub(pg, ad.scale(ad.mean(ent), beta * gamma))
    return loss, clamped


def rl_step(batch: StepBatch, params: dict[str, Tensor], lr_agent: float,
            schedule: ExplorationSchedule, step: int) -> dict:
    """Backpropagate the policy loss through ``batch.probs`` and apply SGD; returns a trace row."""
    beta = beta_at(schedule, step)
    adv = advantage(batch.rewards)
    ad.zero_grad(params)
    loss, clamped = policy_loss(batch.probs, batch.chosen_actions, adv, beta, schedule.gamma)
    ad.backward(loss)
    ad.sgd_step(params, {k: p.grad for k, p in params.items()}, lr_agent)
    ad.zero_grad(params)
    p = batch.probs.data
    hist = np.bincount(batch.chosen_actions, minlength=N_ACTIONS)
    mean_p = p.mean(axis=0)
    return {
        "step": int(step),
        "beta": beta,
        "mean_reward": float(batch.rewards.mean()),
        "mean_advantage": float(adv.mean()),
        "policy_loss": float(loss.data),
        "entropy": float(np.mean([entropy(row) for row in p])),
        "p_mask": float(mean_p[0]),
        "p_perm": float(mean_p[1]),
        "p_crop": float(mean_p[2]),
        "p_flip": float(mean_p[3]),
        "p_warp": float(mean_p[4]),
        "chosen_action_hist": ";".join(str(int(c)) for c in hist),
        "clamped": clamped,
    }
