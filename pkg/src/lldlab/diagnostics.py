"""Likelihood-displacement measurements.

Covers per-action log-likelihood change between two parameter sets, the
"reset, one update, measure" per-query probe, search and observation
metrics, a phase tagger over logged step metrics, and the gradient-
interaction decomposition of a correct action's first-order likelihood
change into contributions from correct and incorrect responses.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .core import FEEDBACK, RolloutGroup, Trajectory, Vocab
from .env import SEARCH, parse_action
from .grpo import GrpoConfig, loss_inputs, surrogate_loss_fn
from .policy import (FeatureMap, PolicyParams, batch_log_prob, batch_log_softmax,
                     log_prob, token_batch, value_and_grad)


class UniformGroup(ValueError):
    def __init__(self, query_id: str):
        super().__init__(f"uniform-group: {query_id} needs correct and incorrect responses")


class NoReference(ValueError):
    def __init__(self, query_id: str):
        super().__init__(f"no-reference: {query_id} has no correct response")


# -- per-action likelihood change ----------------------------------------------

def action_deltas(theta_old: PolicyParams, theta_fin: PolicyParams, traj: Trajectory,
                  fm: FeatureMap, pad: int = 0) -> np.ndarray:
    """Log-likelihood change of every action, both sides on the recorded context."""
    old = log_prob(theta_old, traj, fm, pad).per_token
    new = log_prob(theta_fin, traj, fm, pad).per_token
    diff = new - old
    return np.array([diff[s].sum() for s in traj.action_slices()])


def action_delta(theta_old: PolicyParams, theta_fin: PolicyParams, traj: Trajectory, t: int,
                 fm: FeatureMap, pad: int = 0) -> float:
    if not 0 <= t < traj.turn_count:
        raise IndexError(f"action {t} out of range for {traj.turn_count} actions")
    return float(action_deltas(theta_old, theta_fin, traj, fm, pad)[t])


@dataclass(frozen=True)
class LldRecord:
    deltas: tuple[float, ...]
    response_delta: float
    lld_flag: bool


def lld_record(theta_old: PolicyParams, theta_fin: PolicyParams, traj: Trajectory,
               fm: FeatureMap, threshold: float = 0.0, pad: int = 0) -> LldRecord:
    d = action_deltas(theta_old, theta_fin, traj, fm, pad)
    total = float(d.sum())
    return LldRecord(tuple(float(x) for x in d), total, total <= threshold)


# -- per-query probe -------------------------------------------------------------

def sgd_step(params: PolicyParams, group_or_groups, lr: float, cfg: GrpoConfig,
             fm: FeatureMap, pad: int = 0) -> PolicyParams:
    groups = group_or_groups if isinstance(group_or_groups, (list, tuple)) else [group_or_groups]
    inputs = loss_inputs(groups, fm, pad)
    _, grad = value_and_grad(params, inputs.batch, surrogate_loss_fn(inputs, cfg))
    return params.updated(-lr * grad)


def probe_delta_x(group: RolloutGroup, theta_init: PolicyParams, lr: float, cfg: GrpoConfig,
                  fm: FeatureMap, pad: int = 0) -> float:
    """Mean change in total log-likelihood of the correct responses after one update.

    The update starts from ``theta_init`` and uses this group alone;
    ``theta_init`` itself is never modified.
    """
    if group.degenerate or not group.correct or not group.incorrect:
        raise UniformGroup(group.query_id)
    theta_new = sgd_step(theta_init, group, lr, cfg, fm, pad)
    correct = [group.trajectories[i] for i in group.correct]
    batch = token_batch(correct, fm, pad)
    diff = batch_log_prob(theta_new, batch) - batch_log_prob(theta_init, batch)
    totals = np.bincount(batch.owner, weights=diff, minlength=len(correct))
    return float(totals.mean())


# -- search / observation metrics ----------------------------------------------------

def _is_information(seg, vocab: Vocab) -> bool:
    body = seg.token_ids[1:-1]
    return seg.kind == FEEDBACK and tuple(body) != vocab.invalid_message


def valid_search_count(traj: Trajectory, vocab: Vocab) -> int:
    """Search actions that were answered with information feedback."""
    count = 0
    segs = traj.segments
    for a, b in zip(segs, segs[1:]):
        if a.kind == "action" and b.kind == FEEDBACK and _is_information(b, vocab):
            if parse_action(a, vocab).kind == SEARCH:
                count += 1
    return count


def first_information(traj: Trajectory, vocab: Vocab) -> tuple[int, ...] | None:
    for seg in traj.feedbacks:
        if _is_information(seg, vocab):
            return tuple(seg.token_ids[1:-1])
    return None


def obs_match_ratio(group: RolloutGroup, vocab: Vocab) -> float:
    """Fraction of incorrect responses whose first retrieval matches a correct one's.

    Passages are compared as sets.  Returns nan when there is no incorrect
    response to score.
    """
    correct = group.correct
    if not correct:
        raise NoReference(group.query_id)
    refs = {frozenset(d) for i in correct
            if (d := first_information(group.trajectories[i], vocab)) is not None}
    wrong = group.incorrect
    if not wrong:
        return float("nan")
    hits = 0
    for i in wrong:
        d = first_information(group.trajectories[i], vocab)
        hits += d is not None and frozenset(d) in refs
    return hits / len(wrong)


# -- step metrics and phases -------------------------------------------------------

PHASES = ("I", "II", "III", "none")


@dataclass
class StepMetrics:
    step: int
    mean_reward: float
    mean_correct_loglik: float
    mean_entropy: float
    grad_norm: float
    max_ratio: float
    mean_ratio: float
    mean_response_length: float
    mean_valid_search: float
    frac_negative_delta_x: float
    phase: str = "none"
    # extra bookkeeping beyond the plotted quantities
    mean_correct_delta: float = 0.0
    frac_lld: float = 0.0
    preserving_decrease: float = 0.0
    degenerate_groups: int = 0
    obs_match_ratio: float = 0.0

    def __post_init__(self) -> None:
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "StepMetrics":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass(frozen=True)
class PhaseConfig:
    window: int = 20
    s0: float = 1e-3
    s1: float = 1e-2
    grad_surge: float = 2.0


def _slope(y: np.ndarray) -> float:
    x = np.arange(len(y), dtype=np.float64)
    x -= x.mean()
    return float(np.dot(x, y - y.mean()) / np.dot(x, x))


def phase_tag(history: Sequence[StepMetrics], cfg: PhaseConfig = PhaseConfig()) -> str:
    """Classify the most recent ``cfg.window`` steps.

    The likelihood slope is the least-squares slope of the per-token mean
    correct-response log-likelihood (nats per step).  A gradient surge means
    the gradient-norm slope would grow the norm by ``grad_surge`` times its
    window median over one window.
    """
    if len(history) < cfg.window:
        return "none"
    win = history[-cfg.window:]
    ll = np.array([m.mean_correct_loglik for m in win])
    gn = np.array([m.grad_norm for m in win])
    slope = _slope(ll)
    g_med = float(np.median(gn))
    g1 = cfg.grad_surge * g_med / cfg.window
    surge = g_med > 0 and _slope(gn) > g1
    if slope < -cfg.s1 or surge:
        return "III"
    if abs(slope) < cfg.s0:
        return "I"
    if -cfg.s1 <= slope <= -cfg.s0:
        return "II"
    return "none"


# -- gradient-interaction decomposition ---------------------------------------------

@dataclass
class GwhesReport:
    target: tuple[int, int]
    negative: float
    positive: float
    G: float
    p_plus: float
    p_minus: float
    p_source: str
    alpha_neg: np.ndarray = field(repr=False)
    inner_neg: np.ndarray = field(repr=False)
    alpha_pos: np.ndarray = field(repr=False)
    inner_pos: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "target": list(self.target),
            "negative": self.negative,
            "positive": self.positive,
            "G": self.G,
            "p_plus": self.p_plus,
            "p_minus": self.p_minus,
            "p_source": self.p_source,
            "pairs_negative": [[float(a), float(h)] for a, h in
                               zip(self.alpha_neg.ravel(), self.inner_neg.ravel())],
            "pairs_positive": [[float(a), float(h)] for a, h in
                               zip(self.alpha_pos.ravel(), self.inner_pos.ravel())],
        }


def gwhes_score(group: RolloutGroup, target: tuple[int, int], p: PolicyParams,
                fm: FeatureMap, p_plus: float | None = None, p_minus: float | None = None,
                pad: int = 0) -> GwhesReport:
    """Negative-minus-positive gradient interaction on the tokens of action ``target``.

    ``target = (i, t)`` picks action ``t`` of response ``i``.  Pair weights are
    inner products of prediction-error vectors ``e_y - pi(.|ctx)``; feature
    inner products use the policy's window features.  ``p_plus``/``p_minus``
    default to the mean absolute advantage over correct/incorrect responses.
    """
    i, t = target
    trajs = list(group.trajectories)
    batch = token_batch(trajs, fm, pad)
    logp = batch_log_softmax(p, batch)
    err = -np.exp(logp)
    err[np.arange(len(batch)), batch.targets] += 1.0
    phi = batch.phi
    rows = np.arange(len(batch))
    tgt = rows[(batch.owner == i) & (batch.action == t)]
    if len(tgt) == 0:
        raise IndexError(f"response {i} has no action {t}")
    correct = set(group.correct)
    pos_rows = rows[np.isin(batch.owner, sorted(correct))]
    neg_rows = rows[np.isin(batch.owner, sorted(set(range(len(trajs))) - correct))]

    def block(cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        alpha = err[tgt] @ err[cols].T
        inner = np.asarray((phi[tgt] @ phi[cols].T).todense())
        return alpha, inner

    a_neg, h_neg = block(neg_rows)
    a_pos, h_pos = block(pos_rows)
    adv = group.advantages
    source = "user"
    if p_plus is None or p_minus is None:
        source = "default-mean-abs-advantage"
        if p_plus is None:
            p_plus = float(np.mean(np.abs(adv[sorted(correct)]))) if correct else 0.0
        if p_minus is None:
            wrong = sorted(set(range(len(trajs))) - correct)
            p_minus = float(np.mean(np.abs(adv[wrong]))) if wrong else 0.0
    neg = float(p_minus * np.sum(a_neg * h_neg))
    pos = float(p_plus * np.sum(a_pos * h_pos))
    return GwhesReport((i, t), neg, pos, neg - pos, p_plus, p_minus, source,
                       a_neg, h_neg, a_pos, h_pos)


def action_rate(group: RolloutGroup, target: tuple[int, int], p: PolicyParams, cfg: GrpoConfig,
                fm: FeatureMap, pad: int = 0) -> float:
    """Exact first-order rate d/d(lr) of the target action's log-likelihood under one
    gradient-descent step on the group's surrogate loss."""
    i, t = target
    inputs = loss_inputs([group], fm, pad)
    _, grad = value_and_grad(p, inputs.batch, surrogate_loss_fn(inputs, cfg))
    traj = group.trajectories[i]
    tb = token_batch([traj], fm, pad)
    sl = traj.action_slices()[t]
    mask = np.zeros(len(tb))
    mask[sl] = 1.0
    _, g_lp = value_and_grad(p, tb, lambda lp: (float(lp[sl].sum()), mask))
    return float(-np.sum(g_lp * grad))


# -- writers -------------------------------------------------------------------------

PROBE_FIELDS = ("step", "query_id", "delta_x", "n_correct", "n_incorrect")


@dataclass(frozen=True)
class ProbeRow:
    step: int
    query_id: str
    delta_x: float
    n_correct: int
    n_incorrect: int


def write_probes(rows: Iterable[ProbeRow], out: IO[str], header: bool = True) -> None:
    w = csv.writer(out, lineterminator="\n")
    if header:
        w.writerow(PROBE_FIELDS)
    for r in rows:
        w.writerow([r.step, r.query_id, repr(float(r.delta_x)), r.n_correct, r.n_incorrect])


def read_probes(path: str | Path) -> list[ProbeRow]:
    with open(path, newline="") as fh:
        return [ProbeRow(int(r["step"]), r["query_id"], float(r["delta_x"]),
                         int(r["n_correct"]), int(r["n_incorrect"]))
                for r in csv.DictReader(fh)]


def read_metrics(path: str | Path) -> list[StepMetrics]:
    with open(path) as fh:
        return [StepMetrics.from_dict(json.loads(line)) for line in fh if line.strip()]


def finite_or(value: float, default: float = 0.0) -> float:
    return value if math.isfinite(value) else default
