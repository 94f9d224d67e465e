"""Likelihood-preserving penalties for responses with non-negative advantage.

Three variants share one formula,

    L = 1/N_pre * sum_{i in pre} gate_i * sum_k max(0, lp_old_ik - lp_ik)

with ``N_pre`` the number of loss-bearing tokens of the preserving
responses.  ``lld`` has no gate; ``llds`` opens the gate only when the
signed sum of the per-token decreases is strictly positive; ``llds-ma``
additionally drops the final answer span from both the hinge sum and the
gate (the denominator still counts those tokens).  Gates are treated as
constants when differentiating.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import RolloutGroup, Trajectory
from .grpo import GrpoConfig, LossInputs, loss_inputs, surrogate
from .policy import FeatureMap, PolicyParams, batch_log_prob

VARIANTS = ("lld", "llds", "llds-ma")


class LogprobMisalign(ValueError):
    def __init__(self, expected: int, got: int):
        super().__init__(f"logprob-misalign: expected {expected} entries, got {got}")


@dataclass(frozen=True)
class RegConfig:
    variant: str = "llds"
    lam: float = 0.1

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValueError("lambda must be finite and >= 0")

    @property
    def gated(self) -> bool:
        return self.variant != "lld"

    @property
    def answer_masked(self) -> bool:
        return self.variant == "llds-ma"


@dataclass(frozen=True)
class TokenDrop:
    index: int
    drop: float


def preserving_set(group: RolloutGroup) -> list[int]:
    return [i for i, a in enumerate(group.advantages) if a >= 0]


def token_drops(traj: Trajectory, old_lp: Sequence[float], new_lp: Sequence[float],
                answer_masked: bool = False) -> list[TokenDrop]:
    """Masked tokens whose log-prob went down, indexed along the masked axis."""
    old = np.asarray(old_lp, dtype=np.float64)
    new = np.asarray(new_lp, dtype=np.float64)
    if len(old) != traj.n_masked or len(new) != traj.n_masked:
        raise LogprobMisalign(traj.n_masked, len(old) if len(old) != traj.n_masked else len(new))
    answer = traj.answer_positions
    out = []
    for k, pos in enumerate(traj.masked_positions):
        if answer_masked and int(pos) in answer:
            continue
        d = old[k] - new[k]
        if d > 0:
            out.append(TokenDrop(k, float(d)))
    return out


@dataclass(frozen=True)
class PenaltyResult:
    loss: float
    dlp: np.ndarray
    gates: np.ndarray


def penalty_terms(inputs: LossInputs, new_lp: np.ndarray, cfg: RegConfig) -> PenaltyResult:
    """Penalty averaged over groups, with its coefficients on the new log-probs."""
    n_traj = len(inputs.traj_adv)
    dlp = np.zeros(len(new_lp))
    gates = np.zeros(n_traj, dtype=bool)
    if len(new_lp) == 0 or inputs.n_groups == 0:
        return PenaltyResult(0.0, dlp, gates)
    preserve = inputs.traj_adv >= 0
    row_pre = preserve[inputs.owner]
    regularized = row_pre & ~inputs.answer if cfg.answer_masked else row_pre
    decrease = inputs.old_lp - new_lp
    signed = np.bincount(inputs.owner, weights=np.where(regularized, decrease, 0.0),
                         minlength=n_traj)
    gates = preserve & (signed > 0) if cfg.gated else preserve.copy()
    hinge_rows = regularized & gates[inputs.owner] & (decrease > 0)
    denom = np.bincount(inputs.traj_group, weights=np.where(preserve, inputs.traj_len, 0),
                        minlength=inputs.n_groups)
    scale = np.where(denom > 0, 1.0 / np.where(denom > 0, denom, 1.0), 0.0) / inputs.n_groups
    row_scale = scale[inputs.group_of_row]
    loss = float(np.sum(np.where(hinge_rows, decrease, 0.0) * row_scale))
    dlp = np.where(hinge_rows, -row_scale, 0.0)
    return PenaltyResult(loss, dlp, gates)


def penalty_loss_fn(inputs: LossInputs, cfg: RegConfig):
    def fn(lp: np.ndarray) -> tuple[float, np.ndarray]:
        res = penalty_terms(inputs, lp, cfg)
        return res.loss, res.dlp
    return fn


def total_loss_fn(inputs: LossInputs, grpo_cfg: GrpoConfig, reg_cfg: RegConfig):
    """GRPO surrogate plus ``lam`` times the penalty, as a token loss."""
    def fn(lp: np.ndarray) -> tuple[float, np.ndarray]:
        s = surrogate(inputs, lp, grpo_cfg)
        if reg_cfg.lam == 0:
            return s.loss, s.dlp
        r = penalty_terms(inputs, lp, reg_cfg)
        return s.loss + reg_cfg.lam * r.loss, s.dlp + reg_cfg.lam * r.dlp
    return fn


def penalty(group: RolloutGroup, p: PolicyParams, cfg: RegConfig, fm: FeatureMap,
            pad: int = 0) -> float:
    inputs = loss_inputs([group], fm, pad)
    return penalty_terms(inputs, batch_log_prob(p, inputs.batch), cfg).loss


def total_loss(group: RolloutGroup, p: PolicyParams, grpo_cfg: GrpoConfig, reg_cfg: RegConfig,
               fm: FeatureMap, pad: int = 0) -> float:
    inputs = loss_inputs([group], fm, pad)
    return total_loss_fn(inputs, grpo_cfg, reg_cfg)(batch_log_prob(p, inputs.batch))[0]
