"""Token, segment, trajectory and rollout-group data model.

A trajectory is a prompt segment followed by alternating action and
feedback segments.  Only action tokens carry loss; prompt and feedback
tokens are context.  All types here are immutable once built.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np

PROMPT = "prompt"
ACTION = "action"
FEEDBACK = "feedback"
SEGMENT_KINDS = (PROMPT, ACTION, FEEDBACK)

ANSWERED = "answered"
MAX_TURNS = "max_turns"
INVALID = "invalid"
TERMINAL_REASONS = (ANSWERED, MAX_TURNS, INVALID)

PAD = "<pad>"
SEARCH_OPEN = "<search>"
SEARCH_CLOSE = "</search>"
ANSWER_OPEN = "<answer>"
ANSWER_CLOSE = "</answer>"
INFO_OPEN = "<information>"
INFO_CLOSE = "</information>"
END_OF_ACTION = "<eoa>"
NO_HIT = "<nohit>"
INVALID_MESSAGE = ("<my-previous>", "<action-is>", "<invalid>", "<retry>")

RESERVED = (
    PAD,
    SEARCH_OPEN,
    SEARCH_CLOSE,
    ANSWER_OPEN,
    ANSWER_CLOSE,
    INFO_OPEN,
    INFO_CLOSE,
    END_OF_ACTION,
    NO_HIT,
) + INVALID_MESSAGE


@dataclass(frozen=True)
class Vocab:
    """Ordered symbol alphabet; reserved symbols occupy the lowest ids."""

    tokens: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(self.tokens) < 8:
            raise ValueError("vocab must hold at least 8 tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocab tokens must be distinct")
        missing = [r for r in RESERVED if r not in self.tokens]
        if missing:
            raise ValueError(f"vocab is missing reserved tokens {missing}")

    @classmethod
    def build(cls, size: int = 64) -> "Vocab":
        n_free = size - len(RESERVED)
        if n_free < 0:
            raise ValueError(f"size must be >= {len(RESERVED)}")
        return cls(RESERVED + tuple(f"w{i}" for i in range(n_free)))

    def __len__(self) -> int:
        return len(self.tokens)

    @cached_property
    def _index(self) -> dict[str, int]:
        return {t: i for i, t in enumerate(self.tokens)}

    def id(self, token: str) -> int:
        return self._index[token]

    @property
    def pad(self) -> int:
        return self.id(PAD)

    @property
    def search_open(self) -> int:
        return self.id(SEARCH_OPEN)

    @property
    def search_close(self) -> int:
        return self.id(SEARCH_CLOSE)

    @property
    def answer_open(self) -> int:
        return self.id(ANSWER_OPEN)

    @property
    def answer_close(self) -> int:
        return self.id(ANSWER_CLOSE)

    @property
    def info_open(self) -> int:
        return self.id(INFO_OPEN)

    @property
    def info_close(self) -> int:
        return self.id(INFO_CLOSE)

    @property
    def end_of_action(self) -> int:
        return self.id(END_OF_ACTION)

    @property
    def no_hit(self) -> int:
        return self.id(NO_HIT)

    @property
    def invalid_message(self) -> tuple[int, ...]:
        return tuple(self.id(t) for t in INVALID_MESSAGE)

    @cached_property
    def reserved_ids(self) -> frozenset[int]:
        return frozenset(self.id(t) for t in RESERVED)

    @property
    def free_ids(self) -> list[int]:
        """Ids usable for entities, facts and other content symbols."""
        return [i for i in range(len(self)) if i not in self.reserved_ids]

    @property
    def stop_ids(self) -> frozenset[int]:
        return frozenset({self.search_close, self.answer_close, self.end_of_action})

    def decode(self, ids: Sequence[int]) -> list[str]:
        return [self.tokens[i] for i in ids]


@dataclass(frozen=True)
class Segment:
    kind: str
    token_ids: tuple[int, ...]
    # inclusive [lo, hi] index range inside token_ids
    answer_span: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if self.kind not in SEGMENT_KINDS:
            raise ValueError(f"unknown segment kind {self.kind!r}")
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if self.answer_span is not None:
            lo, hi = self.answer_span
            object.__setattr__(self, "answer_span", (int(lo), int(hi)))

    def __len__(self) -> int:
        return len(self.token_ids)


def _default_mask(segments: Sequence[Segment]) -> tuple[bool, ...]:
    mask: list[bool] = []
    for seg in segments:
        mask.extend([seg.kind == ACTION] * len(seg))
    return tuple(mask)


@dataclass(frozen=True)
class Trajectory:
    query_id: str
    segments: tuple[Segment, ...]
    terminal_reason: str = ANSWERED
    loss_mask: tuple[bool, ...] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))
        if self.loss_mask is None:
            object.__setattr__(self, "loss_mask", _default_mask(self.segments))
        else:
            object.__setattr__(self, "loss_mask", tuple(bool(m) for m in self.loss_mask))

    @cached_property
    def tokens(self) -> tuple[int, ...]:
        out: list[int] = []
        for seg in self.segments:
            out.extend(seg.token_ids)
        return tuple(out)

    @cached_property
    def segment_starts(self) -> tuple[int, ...]:
        starts, pos = [], 0
        for seg in self.segments:
            starts.append(pos)
            pos += len(seg)
        return tuple(starts)

    @property
    def turn_count(self) -> int:
        return sum(1 for s in self.segments if s.kind == ACTION)

    @property
    def actions(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == ACTION]

    @property
    def feedbacks(self) -> list[Segment]:
        return [s for s in self.segments if s.kind == FEEDBACK]

    @cached_property
    def masked_positions(self) -> np.ndarray:
        """Flat positions of loss-bearing tokens, in order."""
        return np.flatnonzero(np.asarray(self.loss_mask, dtype=bool))

    @cached_property
    def n_masked(self) -> int:
        return int(sum(self.loss_mask))

    @cached_property
    def turn_of_position(self) -> np.ndarray:
        """Action index owning each flat position (-1 before the first action).

        Feedback positions inherit the index of the action they answer.
        """
        out = np.full(len(self.tokens), -1, dtype=np.int64)
        turn = -1
        for seg, start in zip(self.segments, self.segment_starts):
            if seg.kind == ACTION:
                turn += 1
            out[start:start + len(seg)] = turn
        return out

    @cached_property
    def answer_positions(self) -> frozenset[int]:
        """Flat positions inside the final action's answer span."""
        acts = [(s, st) for s, st in zip(self.segments, self.segment_starts) if s.kind == ACTION]
        if not acts:
            return frozenset()
        seg, start = acts[-1]
        if seg.answer_span is None:
            return frozenset()
        lo, hi = seg.answer_span
        return frozenset(range(start + lo, start + hi + 1))

    def action_slices(self) -> list[slice]:
        """Slices into the masked-token axis, one per action segment."""
        out, offset = [], 0
        for seg in self.segments:
            if seg.kind == ACTION:
                out.append(slice(offset, offset + len(seg)))
                offset += len(seg)
        return out


def build_trajectory(query_id: str, segments: Sequence[Segment],
                     terminal_reason: str = ANSWERED) -> Trajectory:
    return Trajectory(query_id=query_id, segments=tuple(segments),
                      terminal_reason=terminal_reason)


def validate_trajectory(t: Trajectory, v: Vocab) -> list[str]:
    """Return invariant violations; an empty list means the trajectory is well formed."""
    problems: list[str] = []
    n = len(t.tokens)
    if len(t.loss_mask) != n:
        problems.append(f"mask-length {len(t.loss_mask)} != tokens {n}")
    if not t.segments or t.segments[0].kind != PROMPT:
        problems.append("first-segment-not-prompt")
    if any(s.kind == PROMPT for s in t.segments[1:]):
        problems.append("extra-prompt-segment")
    if t.terminal_reason not in TERMINAL_REASONS:
        problems.append(f"bad-terminal-reason {t.terminal_reason!r}")
    for pos, tok in enumerate(t.tokens):
        if not 0 <= tok < len(v):
            problems.append(f"token-out-of-vocab @ {pos}")
    for seg, start in zip(t.segments, t.segment_starts):
        for j in range(len(seg)):
            idx = start + j
            if idx >= len(t.loss_mask):
                break
            m = t.loss_mask[idx]
            if seg.kind == FEEDBACK and m:
                problems.append(f"mask-on-feedback @ {idx}")
            elif seg.kind == PROMPT and m:
                problems.append(f"mask-on-prompt @ {idx}")
            elif seg.kind == ACTION and not m:
                problems.append(f"mask-off-action @ {idx}")
        if seg.answer_span is not None:
            if seg.kind != ACTION:
                problems.append(f"span-on-{seg.kind}")
            else:
                lo, hi = seg.answer_span
                if not 0 <= lo <= hi < len(seg):
                    problems.append(f"span-out-of-bounds @ {start}")
    has_prompt = bool(t.segments) and t.segments[0].kind == PROMPT
    body = t.segments[1:] if has_prompt else t.segments
    for a, b in zip(body, body[1:]):
        if a.kind == b.kind:
            problems.append(f"non-alternating {a.kind}->{b.kind}")
    if body and body[-1].kind != ACTION:
        problems.append("does-not-end-with-action")
    return problems


@dataclass(frozen=True)
class RolloutGroup:
    """G trajectories for one query, with rewards, advantages and old log-probs."""

    query_id: str
    trajectories: tuple[Trajectory, ...]
    rewards: np.ndarray
    advantages: np.ndarray
    old_logprobs: tuple[np.ndarray, ...] | None = None
    params_version: int = -1
    degenerate: bool = False
    extras: dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "trajectories", tuple(self.trajectories))
        rewards = np.asarray(self.rewards, dtype=np.float64)
        advantages = np.asarray(self.advantages, dtype=np.float64)
        if not len(rewards) == len(advantages) == len(self.trajectories):
            raise ValueError("rewards, advantages and trajectories must align")
        rewards.setflags(write=False)
        advantages.setflags(write=False)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "advantages", advantages)
        if self.old_logprobs is not None:
            olds = tuple(np.asarray(lp, dtype=np.float64) for lp in self.old_logprobs)
            for traj, lp in zip(self.trajectories, olds):
                if len(lp) != traj.n_masked:
                    raise ValueError("old_logprobs must align with masked tokens")
                lp.setflags(write=False)
            object.__setattr__(self, "old_logprobs", olds)

    @property
    def size(self) -> int:
        return len(self.trajectories)

    @property
    def correct(self) -> list[int]:
        return [i for i, r in enumerate(self.rewards) if r > 0]

    @property
    def incorrect(self) -> list[int]:
        return [i for i, r in enumerate(self.rewards) if r <= 0]


# -- serialization --------------------------------------------------------

def segment_to_dict(seg: Segment) -> dict[str, Any]:
    return {
        "kind": seg.kind,
        "tokens": list(seg.token_ids),
        "answer_span": list(seg.answer_span) if seg.answer_span is not None else None,
    }


def segment_from_dict(d: dict[str, Any]) -> Segment:
    span = d.get("answer_span")
    return Segment(d["kind"], tuple(d["tokens"]), tuple(span) if span is not None else None)


def trajectory_to_dict(t: Trajectory) -> dict[str, Any]:
    d = {
        "query_id": t.query_id,
        "segments": [segment_to_dict(s) for s in t.segments],
        "terminal_reason": t.terminal_reason,
    }
    # the mask is implied by segment kinds; keep it only when it deviates
    if t.loss_mask != _default_mask(t.segments):
        d["loss_mask"] = [bool(m) for m in t.loss_mask]
    return d


def trajectory_from_dict(d: dict[str, Any]) -> Trajectory:
    segments = tuple(segment_from_dict(s) for s in d["segments"])
    mask = d.get("loss_mask")
    return Trajectory(
        query_id=d["query_id"],
        segments=segments,
        terminal_reason=d["terminal_reason"],
        loss_mask=tuple(mask) if mask is not None else None,
    )


def vocab_to_list(v: Vocab) -> list[str]:
    return list(v.tokens)


def vocab_from_list(tokens: Sequence[str]) -> Vocab:
    return Vocab(tuple(tokens))
