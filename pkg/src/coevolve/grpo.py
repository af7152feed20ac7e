"""Group-relative advantages and the clipped, KL-regularized policy loss."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteGradient, NonFiniteLoss
from .policy import (
    AdamState,
    PolicyParams,
    PolicySnapshot,
    TokenSequence,
    apply_update,
    as_params,
    backward,
    categorical_kl,
    forward,
    token_logprobs,
)

LOG_RATIO_CLAMP = 20.0


@dataclass
class GrpoHyper:
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    eps_norm: float = 1e-6
    lr: float = 1e-2
    group_size: int = 8
    reasoner_samples: int = 8

    def validate(self) -> list[str]:
        problems = []
        if not 0.0 < self.clip_eps < 1.0:
            problems.append("clip_eps must lie in (0, 1)")
        if not self.eps_norm > 0.0:
            problems.append("eps_norm must be positive")
        if self.kl_beta < 0.0:
            problems.append("kl_beta must be non-negative")
        if not self.lr > 0.0:
            problems.append("lr must be positive")
        if self.group_size < 2:
            problems.append("group_size must be at least 2")
        if self.reasoner_samples < 2:
            problems.append("reasoner_samples must be at least 2")
        return problems


@dataclass
class RolloutGroup:
    """G sequences sampled from one context, with rewards and advantages.

    ``mask`` restricts the admissible tokens exactly as during sampling: a
    (V,) vector for every step or a (T, V) per-step template.
    """

    context: np.ndarray
    sequences: list[TokenSequence]
    rewards: list[float]
    advantages: list[float] = field(default_factory=list)
    old_logprobs: list[float] = field(default_factory=list)
    mask: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.sequences)


def group_mask(group: RolloutGroup) -> np.ndarray | None:
    """Expand a group's (V,) or per-step (T, V) mask for the policy."""
    if group.mask is None:
        return None
    mask = np.asarray(group.mask, dtype=bool)
    if mask.ndim == 2:
        mask = np.broadcast_to(mask, (len(group),) + mask.shape)
    return mask


def normalize_advantages(rewards, eps_norm: float = 1e-6) -> list[float]:
    """``(r - mean) / (population std + eps_norm)``; all-equal rewards give zeros."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 2:
        raise ValueError("a group needs at least two rewards")
    if np.all(r == r[0]):
        return [0.0] * r.size
    return ((r - r.mean()) / (r.std() + eps_norm)).tolist()


def clipped_objective(ratio, advantage, clip_eps: float):
    """Per-item ``min(ratio*A, clip(ratio, 1-eps, 1+eps)*A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    return np.minimum(ratio * advantage, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage)


def finalize_group(group: RolloutGroup, snapshot: PolicySnapshot | PolicyParams, eps_norm: float) -> RolloutGroup:
    """Fill advantages and old log-probs (under ``snapshot``) in place."""
    group.advantages = normalize_advantages(group.rewards, eps_norm)
    contexts = np.repeat(np.atleast_2d(group.context), len(group), axis=0)
    cache = forward(as_params(snapshot), contexts, [s.tokens for s in group.sequences], group_mask(group))
    group.old_logprobs = token_logprobs(cache).sum(axis=1).tolist()
    return group


@dataclass
class _GroupTerms:
    loss: float
    kl: float
    ratios: np.ndarray
    clipped: np.ndarray


def _group_loss_and_dlogits(params, old_params, group, hyper):
    G = len(group)
    if not (len(group.rewards) == len(group.advantages) == len(group.old_logprobs) == G):
        raise ValueError("rollout group lists must all have length G")
    contexts = np.repeat(np.atleast_2d(group.context), G, axis=0)
    seqs = [s.tokens for s in group.sequences]
    mask = group_mask(group)
    cur = forward(params, contexts, seqs, mask)
    old = forward(old_params, contexts, seqs, mask)
    adv = np.asarray(group.advantages, dtype=np.float64)

    logpi = token_logprobs(cur).sum(axis=1)
    log_ratio = logpi - np.asarray(group.old_logprobs, dtype=np.float64)
    ratio = np.exp(np.clip(log_ratio, -LOG_RATIO_CLAMP, LOG_RATIO_CLAMP))
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - hyper.clip_eps, 1.0 + hyper.clip_eps) * adv
    surrogate = -np.minimum(unclipped, clipped).mean()
    # d surrogate / d logpi: zero where the clipped branch or the log-ratio clamp binds
    active = (unclipped <= clipped) & (np.abs(log_ratio) < LOG_RATIO_CLAMP)
    d_logpi = np.where(active, -unclipped / G, 0.0)

    p = np.exp(cur.logp)
    onehot = np.zeros_like(p)
    np.put_along_axis(onehot, cur.targets[..., None], 1.0, axis=-1)
    valid = cur.valid[..., None]
    dlogits = np.where(valid, (onehot - p) * d_logpi[:, None, None], 0.0)

    kl = 0.0
    if hyper.kl_beta != 0.0:
        kl_steps = categorical_kl(cur.logp, old.logp)  # (G, T)
        n_steps = int(cur.valid.sum())
        kl = float(np.where(cur.valid, kl_steps, 0.0).sum() / n_steps)
        live = p > 0
        diff = np.where(live, cur.logp, 0.0) - np.where(live & np.isfinite(old.logp), old.logp, 0.0)
        dkl = p * (diff - kl_steps[..., None]) / n_steps
        dlogits = dlogits + np.where(valid, hyper.kl_beta * dkl, 0.0)
    loss = float(surrogate + hyper.kl_beta * kl)
    return _GroupTerms(loss, kl, ratio, unclipped > clipped), dlogits, cur


def grpo_loss(params, snapshot, group: RolloutGroup, hyper: GrpoHyper) -> float:
    terms, _, _ = _group_loss_and_dlogits(as_params(params), as_params(snapshot), group, hyper)
    if not np.isfinite(terms.loss):
        raise NonFiniteLoss(f"loss is {terms.loss}")
    return terms.loss


def batch_loss(params, snapshot, groups, hyper: GrpoHyper) -> float:
    """Mean of :func:`grpo_loss` over groups."""
    return float(np.mean([grpo_loss(params, snapshot, g, hyper) for g in groups]))


def loss_and_grad(params, snapshot, groups: list[RolloutGroup], hyper: GrpoHyper):
    """Mean loss over ``groups``, its gradient, and step statistics."""
    if not groups:
        raise ValueError("empty batch")
    params, old_params = as_params(params), as_params(snapshot)
    grad = params.zeros_like()
    losses, kls, ratios, clipped = [], [], [], []
    scale = 1.0 / len(groups)
    for group in groups:
        terms, dlogits, cache = _group_loss_and_dlogits(params, old_params, group, hyper)
        g = backward(params, cache, dlogits * scale)
        for name, arr in g.tensors().items():
            getattr(grad, name).__iadd__(arr)
        losses.append(terms.loss)
        kls.append(terms.kl)
        ratios.append(terms.ratios)
        clipped.append(terms.clipped)
    loss = float(np.mean(losses))
    if not np.isfinite(loss):
        raise NonFiniteLoss(f"loss is {loss}")
    if not grad.all_finite():
        err = NonFiniteGradient("non-finite gradient")
        err.batch = groups
        raise err
    ratios, clipped = np.concatenate(ratios), np.concatenate(clipped)
    stats = {
        "loss": loss,
        "mean_ratio": float(ratios.mean()),
        "clip_fraction": float(clipped.mean()),
        "kl": float(np.mean(kls)),
    }
    return loss, grad, stats


def grpo_step(
    params: PolicyParams,
    snapshot: PolicySnapshot | PolicyParams,
    groups: list[RolloutGroup],
    hyper: GrpoHyper,
    opt_state: AdamState,
    lr: float | None = None,
) -> tuple[PolicyParams, AdamState, dict]:
    """One Adam step on the mean GRPO loss over ``groups``."""
    loss, grad, stats = loss_and_grad(params, snapshot, groups, hyper)
    new_params, new_state = apply_update(params, grad, opt_state, hyper.lr if lr is None else lr)
    rewards = np.concatenate([np.asarray(g.rewards, dtype=np.float64) for g in groups])
    advs = np.concatenate([np.asarray(g.advantages, dtype=np.float64) for g in groups])
    stats["mean_reward"] = float(rewards.mean())
    stats["mean_advantage_abs"] = float(np.abs(advs).mean())
    return new_params, new_state, stats
