"""Feedback-masked GRPO: group-normalized advantages and the clipped surrogate.

Losses here are expressed as functions of the per-token *new* log-probs of
a :class:`LossInputs` view, returning ``(value, d value / d logprob)``; the
policy module turns those coefficients into weight gradients.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RolloutGroup
from .policy import FeatureMap, PolicyParams, TokenBatch, batch_log_prob, token_batch


class StaleGroup(ValueError):
    def __init__(self, query_id: str):
        super().__init__(f"stale-group: {query_id} has no old_logprobs")


@dataclass(frozen=True)
class GrpoConfig:
    group_size: int = 8
    clip_eps: float = 0.2
    # "discard-uniform" or ("epsilon", value)
    std_guard: str | tuple[str, float] = "discard-uniform"
    inner_epochs: int = 1

    def __post_init__(self) -> None:
        if self.group_size < 2:
            raise ValueError("group_size must be >= 2")
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.std_guard != "discard-uniform":
            kind, value = self.std_guard
            if kind != "epsilon" or not value > 0:
                raise ValueError("std_guard must be 'discard-uniform' or ('epsilon', v > 0)")


@dataclass(frozen=True)
class Advantages:
    values: np.ndarray
    degenerate: bool


def compute_advantages(rewards: Sequence[float], cfg: GrpoConfig | None = None) -> Advantages:
    """(r - mean) / std with the population standard deviation.

    A group whose rewards are all equal is flagged degenerate and gets zero
    advantages; the trainer drops such groups.
    """
    cfg = cfg or GrpoConfig(group_size=max(2, len(rewards)))
    r = np.asarray(rewards, dtype=np.float64)
    mu = r.mean()
    sigma = r.std()
    if np.all(r == r[0]):
        return Advantages(np.zeros_like(r), True)
    if cfg.std_guard == "discard-uniform":
        return Advantages((r - mu) / sigma, False)
    return Advantages((r - mu) / (sigma + cfg.std_guard[1]), False)


# -- token views over groups -----------------------------------------------------

@dataclass(frozen=True)
class LossInputs:
    """Loss-bearing tokens of one or more rollout groups.

    Row arrays are aligned with ``batch``; trajectory arrays with the
    concatenation of the groups' trajectories.
    """

    batch: TokenBatch
    old_lp: np.ndarray
    adv: np.ndarray
    group_of_row: np.ndarray
    traj_adv: np.ndarray
    traj_group: np.ndarray
    traj_len: np.ndarray
    n_groups: int

    @property
    def answer(self) -> np.ndarray:
        return self.batch.answer

    @property
    def owner(self) -> np.ndarray:
        return self.batch.owner


def loss_inputs(groups: Sequence[RolloutGroup], fm: FeatureMap, pad: int = 0) -> LossInputs:
    trajs, olds, traj_adv, traj_group = [], [], [], []
    for g_idx, g in enumerate(groups):
        if g.old_logprobs is None:
            raise StaleGroup(g.query_id)
        trajs.extend(g.trajectories)
        olds.extend(g.old_logprobs)
        traj_adv.extend(g.advantages)
        traj_group.extend([g_idx] * g.size)
    batch = token_batch(trajs, fm, pad)
    traj_adv = np.asarray(traj_adv, dtype=np.float64)
    traj_group = np.asarray(traj_group, dtype=np.int64)
    old_lp = np.concatenate(olds) if olds else np.zeros(0)
    return LossInputs(
        batch=batch,
        old_lp=old_lp,
        adv=traj_adv[batch.owner] if len(batch) else np.zeros(0),
        group_of_row=traj_group[batch.owner] if len(batch) else np.zeros(0, dtype=np.int64),
        traj_adv=traj_adv,
        traj_group=traj_group,
        traj_len=np.diff(batch.offsets),
        n_groups=len(groups),
    )


def clipped_terms(ratio: np.ndarray, adv: np.ndarray, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-token min(r*A, clip(r)*A) and its derivative with respect to log r.

    Kinks get subgradient zero.
    """
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1 - eps, 1 + eps) * adv
    value = np.minimum(unclipped, clipped)
    inside = (ratio > 1 - eps) & (ratio < 1 + eps)
    active = inside | (unclipped < clipped)
    return value, np.where(active, unclipped, 0.0)


@dataclass(frozen=True)
class SurrogateResult:
    loss: float
    dlp: np.ndarray
    max_ratio: float
    mean_ratio: float


def surrogate(inputs: LossInputs, new_lp: np.ndarray, cfg: GrpoConfig) -> SurrogateResult:
    """Negated clipped objective, averaged over groups.

    Within a group the token terms are summed and divided by the group's
    total number of loss-bearing tokens; feedback tokens never appear.
    """
    if len(new_lp) == 0:
        return SurrogateResult(0.0, np.zeros(0), 1.0, 1.0)
    ratio = np.exp(new_lp - inputs.old_lp)
    value, dvalue = clipped_terms(ratio, inputs.adv, cfg.clip_eps)
    tokens_per_group = np.bincount(inputs.group_of_row, minlength=inputs.n_groups).astype(float)
    weight = 1.0 / (tokens_per_group[inputs.group_of_row] * inputs.n_groups)
    loss = -float(np.sum(weight * value))
    return SurrogateResult(loss, -weight * dvalue, float(ratio.max()), float(ratio.mean()))


def surrogate_loss_fn(inputs: LossInputs, cfg: GrpoConfig):
    def fn(lp: np.ndarray) -> tuple[float, np.ndarray]:
        res = surrogate(inputs, lp, cfg)
        return res.loss, res.dlp
    return fn


def grpo_surrogate(group: RolloutGroup, p: PolicyParams, cfg: GrpoConfig,
                   fm: FeatureMap, pad: int = 0) -> SurrogateResult:
    """Surrogate loss of a single group at parameters ``p``."""
    inputs = loss_inputs([group], fm, pad)
    return surrogate(inputs, batch_log_prob(p, inputs.batch), cfg)
