"""Linear-softmax autoregressive policy over one-hot window features.

The logit vector for a context is ``W @ phi(context)`` where ``phi`` stacks
one one-hot block per window slot plus an optional one-hot turn index.
Because the model is linear in ``W``, the score of every token is available
in closed form:

    d log pi(y | c) / dW = (e_y - pi(. | c)) outer phi(c)

which is what every loss in the package is differentiated through.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import log_softmax

from .core import ACTION, Segment, Trajectory, Vocab


class NumericOverflow(FloatingPointError):
    """Raised when a forward or backward quantity stops being finite."""

    def __init__(self, where: str, position: int | None = None):
        self.position = position
        msg = "numeric-overflow" + (f" @ {position}" if position is not None else "")
        super().__init__(f"{msg} ({where})")


class TokenOutOfVocab(ValueError):
    def __init__(self, token: int):
        super().__init__(f"token-out-of-vocab: {token}")
        self.token = token


@dataclass(frozen=True)
class FeatureMap:
    vocab_size: int
    window: int = 2
    includes_turn_index: bool = True
    max_turns: int = 3

    def __post_init__(self) -> None:
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.includes_turn_index and self.max_turns < 1:
            raise ValueError("max_turns must be >= 1 when the turn index is featurized")

    @property
    def dim(self) -> int:
        return self.window * self.vocab_size + (self.max_turns if self.includes_turn_index else 0)

    @property
    def n_active(self) -> int:
        return self.window + (1 if self.includes_turn_index else 0)

    def active(self, context: Sequence[int], turn: int = 0, pad: int = 0) -> np.ndarray:
        """Indices of the non-zero (unit) feature entries for ``context``."""
        V, k = self.vocab_size, self.window
        tail = list(context[-k:]) if len(context) else []
        window = [pad] * (k - len(tail)) + tail
        idx = np.empty(self.n_active, dtype=np.int64)
        for slot, tok in enumerate(window):
            if not 0 <= tok < V:
                raise TokenOutOfVocab(tok)
            idx[slot] = slot * V + tok
        if self.includes_turn_index:
            idx[k] = k * V + min(max(turn, 0), self.max_turns - 1)
        return idx

    def to_dict(self) -> dict:
        return {"window": self.window, "includes_turn_index": self.includes_turn_index,
                "max_turns": self.max_turns}


def featurize(context: Sequence[int], fm: FeatureMap, turn: int = 0, pad: int = 0) -> np.ndarray:
    """Dense feature vector; its L2 norm is sqrt(number of active blocks)."""
    phi = np.zeros(fm.dim)
    phi[fm.active(context, turn, pad)] = 1.0
    return phi


@dataclass(frozen=True)
class PolicyParams:
    weights: np.ndarray
    version: int = 0

    def __post_init__(self) -> None:
        w = np.array(self.weights, dtype=np.float64, copy=True)
        if w.ndim != 2:
            raise ValueError("weights must be a matrix")
        if not np.all(np.isfinite(w)):
            raise NumericOverflow("non-finite weights")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @classmethod
    def zeros(cls, vocab_size: int, fm: FeatureMap) -> "PolicyParams":
        return cls(np.zeros((vocab_size, fm.dim)), 0)

    def updated(self, delta: np.ndarray) -> "PolicyParams":
        """New params ``weights + delta`` with a bumped version."""
        return PolicyParams(self.weights + delta, self.version + 1)

    def with_weights(self, weights: np.ndarray) -> "PolicyParams":
        return PolicyParams(weights, self.version + 1)


# -- batched token views ---------------------------------------------------

@dataclass(frozen=True)
class TokenBatch:
    """Loss-bearing tokens of one or more trajectories, featurized once.

    ``owner[n]`` indexes the trajectory of row ``n``; ``action[n]`` the action
    segment within that trajectory; ``answer[n]`` marks rows inside the final
    answer span.
    """

    active: np.ndarray
    targets: np.ndarray
    owner: np.ndarray
    action: np.ndarray
    answer: np.ndarray
    offsets: np.ndarray
    dim: int

    def __len__(self) -> int:
        return len(self.targets)

    @cached_property
    def phi(self) -> sp.csr_matrix:
        n, m = self.active.shape
        data = np.ones(n * m)
        indptr = np.arange(0, n * m + 1, m)
        mat = sp.csr_matrix((data, self.active.ravel(), indptr), shape=(n, self.dim))
        mat.sum_duplicates()
        return mat

    def rows(self, i: int) -> slice:
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    @property
    def n_trajectories(self) -> int:
        return len(self.offsets) - 1


def token_batch(trajectories: Sequence[Trajectory], fm: FeatureMap, pad: int = 0) -> TokenBatch:
    active, targets, owner, action, answer, offsets = [], [], [], [], [], [0]
    for i, traj in enumerate(trajectories):
        toks = traj.tokens
        turns = traj.turn_of_position
        ans = traj.answer_positions
        for pos in traj.masked_positions:
            active.append(fm.active(toks[max(0, pos - fm.window):pos], int(turns[pos]), pad))
            targets.append(toks[pos])
            owner.append(i)
            action.append(int(turns[pos]))
            answer.append(int(pos) in ans)
        offsets.append(len(targets))
    m = fm.n_active
    return TokenBatch(
        active=np.array(active, dtype=np.int64).reshape(-1, m),
        targets=np.array(targets, dtype=np.int64),
        owner=np.array(owner, dtype=np.int64),
        action=np.array(action, dtype=np.int64),
        answer=np.array(answer, dtype=bool),
        offsets=np.array(offsets, dtype=np.int64),
        dim=fm.dim,
    )


def batch_logits(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    """(n_tokens, V) logits."""
    if len(batch) == 0:
        return np.zeros((0, params.weights.shape[0]))
    return np.asarray(batch.phi @ params.weights.T)


def batch_log_softmax(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    return log_softmax(batch_logits(params, batch), axis=1)


def batch_log_prob(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    """Per-row log-probability of the recorded target token."""
    if len(batch) == 0:
        return np.zeros(0)
    logp = batch_log_softmax(params, batch)
    return logp[np.arange(len(batch)), batch.targets]


def per_trajectory(values: np.ndarray, batch: TokenBatch) -> list[np.ndarray]:
    return [values[batch.rows(i)] for i in range(batch.n_trajectories)]


@dataclass(frozen=True)
class LogProb:
    per_token: np.ndarray
    total: float


def log_prob(p: PolicyParams, t: Trajectory, fm: FeatureMap, pad: int = 0) -> LogProb:
    """Log-likelihood of the action tokens of ``t``; feedback is context only."""
    lp = batch_log_prob(p, token_batch([t], fm, pad))
    return LogProb(lp, float(lp.sum()))


def context_logits(p: PolicyParams, fm: FeatureMap, context: Sequence[int], turn: int,
                   pad: int = 0) -> np.ndarray:
    return p.weights[:, fm.active(context, turn, pad)].sum(axis=1)


def entropy(p: PolicyParams, fm: FeatureMap, context: Sequence[int], turn: int = 0,
            pad: int = 0) -> float:
    """Entropy in nats of the next-token distribution."""
    logp = log_softmax(context_logits(p, fm, context, turn, pad))
    probs = np.exp(logp)
    return float(-np.sum(np.where(probs > 0, probs * logp, 0.0)))


def batch_entropy(params: PolicyParams, batch: TokenBatch) -> np.ndarray:
    logp = batch_log_softmax(params, batch)
    probs = np.exp(logp)
    return -np.sum(np.where(probs > 0, probs * logp, 0.0), axis=1)


def sample_action(
    p: PolicyParams,
    fm: FeatureMap,
    context: Sequence[int],
    turn: int,
    rng: np.random.Generator,
    stops: Iterable[int],
    max_len: int,
    temperature: float = 1.0,
    pad: int = 0,
) -> Segment:
    """Draw one action segment token by token.

    Generation stops after emitting a stop token or ``max_len`` tokens.
    ``temperature == 0`` is greedy decoding (lowest id wins ties).  One
    uniform draw is consumed per token, also when greedy, so that runs at
    different temperatures stay aligned on the same random stream.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    stops = frozenset(stops)
    ctx = list(context)
    out: list[int] = []
    for _ in range(max_len):
        logits = context_logits(p, fm, ctx, turn, pad)
        u = rng.random()
        if temperature <= 0:
            tok = int(np.argmax(logits))
        else:
            probs = np.exp(log_softmax(logits / temperature))
            cdf = np.cumsum(probs)
            tok = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
            tok = min(tok, len(probs) - 1)
        out.append(tok)
        ctx.append(tok)
        if tok in stops:
            break
    return Segment(ACTION, tuple(out))


# -- gradients ---------------------------------------------------------------

# A token loss maps per-row new log-probs to (value, d value / d logprob).
TokenLoss = Callable[[np.ndarray], tuple[float, np.ndarray]]


def value_and_grad(params: PolicyParams, batch: TokenBatch,
                   loss: TokenLoss) -> tuple[float, np.ndarray]:
    """Loss value and its exact gradient with respect to the weight matrix."""
    V = params.weights.shape[0]
    if len(batch) == 0:
        value, _ = loss(np.zeros(0))
        return float(value), np.zeros_like(params.weights)
    logp = batch_log_softmax(params, batch)
    bad = ~np.isfinite(logp).all(axis=1)
    if bad.any():
        raise NumericOverflow("forward", int(np.flatnonzero(bad)[0]))
    rows = np.arange(len(batch))
    lp = logp[rows, batch.targets]
    value, dlp = loss(lp)
    dlp = np.asarray(dlp, dtype=np.float64)
    if not np.isfinite(value) or not np.all(np.isfinite(dlp)):
        bad = np.flatnonzero(~np.isfinite(dlp))
        raise NumericOverflow("loss", int(bad[0]) if len(bad) else None)
    # rows of (e_y - pi) scaled by dL/dlp
    coef = -np.exp(logp) * dlp[:, None]
    coef[rows, batch.targets] += dlp
    grad = np.asarray((batch.phi.T @ coef).T)
    if not np.all(np.isfinite(grad)):
        raise NumericOverflow("backward")
    assert grad.shape == (V, batch.dim)
    return float(value), grad


def grad_total_loss(params: PolicyParams, batch: TokenBatch, loss: TokenLoss) -> np.ndarray:
    return value_and_grad(params, batch, loss)[1]


def finite_difference_grad(f: Callable[[np.ndarray], float], w: np.ndarray,
                           h: float = 1e-5, entries: Sequence[tuple[int, int]] | None = None
                           ) -> np.ndarray:
    """Central differences of a scalar function of the weights."""
    grad = np.zeros_like(w)
    if entries is None:
        entries = [tuple(ix) for ix in np.ndindex(*w.shape)]
    for ix in entries:
        wp = w.copy()
        wm = w.copy()
        wp[ix] += h
        wm[ix] -= h
        grad[ix] = (f(wp) - f(wm)) / (2 * h)
    return grad


# -- checkpoints ---------------------------------------------------------------

def checkpoint_dict(vocab: Vocab, fm: FeatureMap, params: PolicyParams) -> dict:
    return {
        "vocab": list(vocab.tokens),
        "feature_map": fm.to_dict(),
        "weights": [[float(x) for x in row] for row in params.weights],
        "version": params.version,
    }


def save_checkpoint(path: str | Path, vocab: Vocab, fm: FeatureMap, params: PolicyParams) -> None:
    Path(path).write_text(json.dumps(checkpoint_dict(vocab, fm, params)))


def load_checkpoint(path: str | Path) -> tuple[Vocab, FeatureMap, PolicyParams]:
    d = json.loads(Path(path).read_text())
    vocab = Vocab(tuple(d["vocab"]))
    f = d["feature_map"]
    fm = FeatureMap(len(vocab), f["window"], f["includes_turn_index"], f.get("max_turns", 3))
    w = np.array(d["weights"], dtype=np.float64)
    if w.shape != (len(vocab), fm.dim):
        raise ValueError(f"checkpoint weights have shape {w.shape}, expected {(len(vocab), fm.dim)}")
    return vocab, fm, PolicyParams(w, int(d["version"]))


def uniform_logprob(vocab_size: int) -> float:
    return -math.log(vocab_size)


__all__ = [
    "FeatureMap", "PolicyParams", "TokenBatch", "LogProb", "NumericOverflow", "TokenOutOfVocab",
    "featurize", "token_batch", "batch_log_prob", "batch_log_softmax", "batch_entropy",
    "log_prob", "entropy", "sample_action", "value_and_grad", "grad_total_loss",
    "finite_difference_grad", "save_checkpoint", "load_checkpoint", "checkpoint_dict",
    "per_trajectory", "context_logits", "uniform_logprob",
]
