"""Synthetic search-then-answer QA environment.

Every task prompt is ``[entity, qualifier]``.  Searching an entity returns
three passages ``[fact, decoy1, decoy2]`` in a fixed order; the qualifier
says which passage answers the question (``q0`` the fact, ``q1``/``q2`` the
other two, ``qhop`` the fact of the bridge entity reached through a second
search).  Tasks on the same entity with different qualifiers therefore share
the correct first search while having distinct gold answers.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import (ACTION, ANSWERED, FEEDBACK, INVALID, MAX_TURNS, PROMPT, Segment,
                   Trajectory, Vocab)

SEARCH = "search"
ANSWER = "answer"
INVALID_ACTION = "invalid"

N_PASSAGES = 3
QUALIFIERS = ("q0", "q1", "q2", "qhop")


@dataclass(frozen=True)
class Corpus:
    entities: tuple[int, ...]
    entries: dict[int, int]
    hop_links: dict[int, int]
    distractors: dict[int, tuple[int, int]]
    qualifiers: tuple[int, ...]

    def passages(self, entity: int) -> tuple[int, int, int]:
        d1, d2 = self.distractors[entity]
        return (self.entries[entity], d1, d2)

    def check(self, vocab: Vocab) -> list[str]:
        problems = []
        reserved = vocab.reserved_ids
        for e in self.entities:
            toks = [e, self.entries[e], *self.distractors[e]]
            if any(t in reserved or not 0 <= t < len(vocab) for t in toks):
                problems.append(f"reserved-or-unknown token for entity {e}")
            if len(self.distractors[e]) != 2:
                problems.append(f"entity {e} needs exactly 2 distractors")
        for start in self.hop_links:
            seen, cur = {start}, start
            while cur in self.hop_links:
                cur = self.hop_links[cur]
                if cur in seen:
                    problems.append(f"hop cycle through {start}")
                    break
                seen.add(cur)
        return problems

    def to_dict(self) -> dict:
        return {
            "entities": list(self.entities),
            "entries": {str(k): v for k, v in self.entries.items()},
            "hop_links": {str(k): v for k, v in self.hop_links.items()},
            "distractors": {str(k): list(v) for k, v in self.distractors.items()},
            "qualifiers": list(self.qualifiers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Corpus":
        return cls(
            entities=tuple(d["entities"]),
            entries={int(k): int(v) for k, v in d["entries"].items()},
            hop_links={int(k): int(v) for k, v in d["hop_links"].items()},
            distractors={int(k): (int(v[0]), int(v[1])) for k, v in d["distractors"].items()},
            qualifiers=tuple(d["qualifiers"]),
        )


@dataclass(frozen=True)
class Task:
    query_id: str
    prompt: tuple[int, ...]
    gold: int
    hops: int = 1
    max_turns: int = 2

    def __post_init__(self) -> None:
        if self.hops not in (1, 2):
            raise ValueError("hops must be 1 or 2")
        if self.max_turns not in (2, 3):
            raise ValueError("max_turns must be 2 or 3")
        if self.hops == 2 and self.max_turns < 3:
            raise ValueError("two-hop tasks need max_turns=3")

    @property
    def entity(self) -> int:
        return self.prompt[0]

    def to_dict(self) -> dict:
        return {"query_id": self.query_id, "prompt": list(self.prompt), "gold": self.gold,
                "hops": self.hops, "max_turns": self.max_turns}

    @classmethod
    def from_dict(cls, d: dict) -> "Task":
        return cls(d["query_id"], tuple(d["prompt"]), int(d["gold"]), int(d["hops"]),
                   int(d["max_turns"]))


@dataclass(frozen=True)
class ParsedAction:
    kind: str
    tokens: tuple[int, ...] = ()
    segment: Segment | None = None


def parse_action(seg: Segment, vocab: Vocab) -> ParsedAction:
    """Classify an action; the earliest opening tag with a later matching close wins.

    Tag pairs must enclose at least one token.  An answer returns a copy of
    the segment with ``answer_span`` set to the enclosed (inclusive) range.
    """
    if seg.kind != ACTION:
        raise ValueError("parse_action expects an action segment")
    toks = seg.token_ids
    pairs = {vocab.search_open: (vocab.search_close, SEARCH),
             vocab.answer_open: (vocab.answer_close, ANSWER)}
    for i, tok in enumerate(toks):
        if tok not in pairs:
            continue
        close, kind = pairs[tok]
        try:
            j = toks.index(close, i + 1)
        except ValueError:
            continue
        if j == i + 1:
            continue
        inner = toks[i + 1:j]
        if kind == ANSWER:
            return ParsedAction(ANSWER, inner, Segment(ACTION, toks, (i + 1, j - 1)))
        return ParsedAction(SEARCH, inner, Segment(ACTION, toks))
    return ParsedAction(INVALID_ACTION, (), Segment(ACTION, toks))


def retrieve(c: Corpus, query: Sequence[int], vocab: Vocab) -> tuple[int, int, int]:
    for tok in query:
        if tok in c.entries:
            return c.passages(tok)
    return (vocab.no_hit,) * N_PASSAGES


@dataclass(frozen=True)
class StepResult:
    parsed: ParsedAction
    feedback: Segment | None = None
    terminal: str | None = None


def step(task: Task, turns_so_far: int, action: Segment, corpus: Corpus,
         vocab: Vocab) -> StepResult:
    """Apply one action; returns the feedback segment or a terminal reason."""
    if turns_so_far >= task.max_turns:
        raise ValueError("turn budget already exhausted")
    parsed = parse_action(action, vocab)
    if parsed.kind == ANSWER:
        return StepResult(parsed, terminal=ANSWERED)
    if turns_so_far + 1 >= task.max_turns:
        return StepResult(parsed, terminal=MAX_TURNS if parsed.kind == SEARCH else INVALID)
    if parsed.kind == SEARCH:
        docs = retrieve(corpus, parsed.tokens, vocab)
        body = (vocab.info_open, *docs, vocab.info_close)
    else:
        body = (vocab.info_open, *vocab.invalid_message, vocab.info_close)
    return StepResult(parsed, feedback=Segment(FEEDBACK, body))


def reward(t: Trajectory, task: Task) -> int:
    """Exact match: 1 iff the episode answered and the answer span equals [gold]."""
    if t.terminal_reason != ANSWERED or not t.segments:
        return 0
    final = t.segments[-1]
    if final.kind != ACTION or final.answer_span is None:
        return 0
    lo, hi = final.answer_span
    return int(list(final.token_ids[lo:hi + 1]) == [task.gold])


Actor = Callable[[tuple[int, ...], int], Segment]


def run_episode(task: Task, corpus: Corpus, vocab: Vocab, act: Actor) -> Trajectory:
    """Roll out one trajectory; ``act(context, turn)`` returns the next action."""
    segments: list[Segment] = [Segment(PROMPT, task.prompt)]
    context: list[int] = list(task.prompt)
    for turn in range(task.max_turns):
        action = act(tuple(context), turn)
        res = step(task, turn, action, corpus, vocab)
        segments.append(res.parsed.segment)
        context.extend(action.token_ids)
        if res.terminal is not None:
            return Trajectory(task.query_id, tuple(segments), res.terminal)
        segments.append(res.feedback)
        context.extend(res.feedback.token_ids)
    raise AssertionError("episode did not terminate within max_turns")


def oracle_actor(task: Task, corpus: Corpus, vocab: Vocab) -> Actor:
    """Scripted agent that reads the passages it retrieves; never peeks at the gold."""
    qualifier = task.prompt[1]
    qidx = corpus.qualifiers.index(qualifier)
    hop = QUALIFIERS[qidx] == "qhop"

    def act(context: tuple[int, ...], turn: int) -> Segment:
        if turn == 0:
            return Segment(ACTION, (vocab.search_open, task.entity, vocab.search_close))
        docs = context[-4:-1]
        if hop and turn == 1:
            return Segment(ACTION, (vocab.search_open, docs[0], vocab.search_close))
        pick = docs[0] if hop else docs[qidx]
        return Segment(ACTION, (vocab.answer_open, pick, vocab.answer_close))

    return act


# -- generation ------------------------------------------------------------------

def generate_corpus(vocab: Vocab, n_entities: int, rng: np.random.Generator,
                    n_hop_links: int | None = None) -> Corpus:
    free = list(vocab.free_ids)
    need = 2 * n_entities + len(QUALIFIERS) + 2
    if len(free) < need:
        raise ValueError(f"vocab has {len(free)} free tokens, need at least {need}")
    qualifiers = tuple(free[:len(QUALIFIERS)])
    pool = [t for t in free if t not in qualifiers]
    pool = list(rng.permutation(pool))
    entities = tuple(int(t) for t in pool[:n_entities])
    facts = [int(t) for t in pool[n_entities:2 * n_entities]]
    decoys = [int(t) for t in pool[2 * n_entities:]]
    half = max(1, len(decoys) // 2)
    first_pool, second_pool = decoys[:half], decoys[half:] or decoys[:half]
    entries = dict(zip(entities, facts))
    distractors = {
        e: (first_pool[int(rng.integers(len(first_pool)))],
            second_pool[int(rng.integers(len(second_pool)))])
        for e in entities
    }
    # acyclic links: an entity may only point at a later entity in a random order
    if n_hop_links is None:
        n_hop_links = n_entities // 4
    order = list(rng.permutation(len(entities)))
    hop_links: dict[int, int] = {}
    for a in range(min(n_hop_links, len(order) - 1)):
        src = entities[order[a]]
        dst = entities[order[int(rng.integers(a + 1, len(order)))]]
        hop_links[src] = dst
        # the bridge is discoverable: the linked entity's fact names its target
        entries[src] = dst
    return Corpus(entities, entries, hop_links, distractors, qualifiers)


def _task_id(entity: int, qualifier: str) -> str:
    return f"e{entity}-{qualifier}"


def all_single_hop_tasks(corpus: Corpus, max_turns: int = 2) -> list[Task]:
    out = []
    for e in corpus.entities:
        docs = corpus.passages(e)
        for j in range(N_PASSAGES):
            out.append(Task(_task_id(e, QUALIFIERS[j]), (e, corpus.qualifiers[j]), docs[j], 1,
                            max_turns))
    return out


def generate_tasks(corpus: Corpus, n_tasks: int, rng: np.random.Generator,
                   hops_mix: float = 0.0, prefix_share: float = 0.0,
                   max_turns: int | None = None, exclude: Sequence[str] = ()) -> list[Task]:
    """Sample distinct tasks.

    ``hops_mix`` is the fraction of two-hop tasks (which forces max_turns=3).
    ``prefix_share`` is the fraction of single-hop tasks placed in clusters of
    two or three tasks asking different qualifiers about the same entity.
    """
    if not 0 <= hops_mix <= 1 or not 0 <= prefix_share <= 1:
        raise ValueError("hops_mix and prefix_share must lie in [0, 1]")
    if max_turns is None:
        max_turns = 3 if hops_mix > 0 else 2
    if hops_mix > 0 and max_turns != 3:
        raise ValueError("mixed-hop task sets use max_turns=3")
    excluded = set(exclude)
    n_two = int(round(hops_mix * n_tasks))
    n_single = n_tasks - n_two
    n_shared = int(round(prefix_share * n_single))
    if n_shared == 1:
        n_shared = 2 if n_single >= 2 else 0
    n_plain = n_single - n_shared

    ents = [int(e) for e in rng.permutation(corpus.entities)]
    tasks: list[Task] = []
    used: set[int] = set()

    def take(pred: Callable[[int], bool]) -> int:
        for e in ents:
            if e not in used and pred(e):
                used.add(e)
                return e
        raise ValueError("not enough entities for the requested task mix")

    def add(task: Task) -> None:
        if task.query_id in excluded:
            raise ValueError(f"task {task.query_id} is excluded")
        tasks.append(task)

    for _ in range(n_two):
        e = take(lambda x: x in corpus.hop_links and _free_task(x, "qhop", excluded))
        gold = corpus.entries[corpus.hop_links[e]]
        add(Task(_task_id(e, "qhop"), (e, corpus.qualifiers[3]), gold, 2, max_turns))

    remaining = n_shared
    while remaining > 0:
        size = 2 if remaining in (2, 4) else 3
        e = take(lambda x: all(_free_task(x, QUALIFIERS[j], excluded) for j in range(size)))
        docs = corpus.passages(e)
        for j in range(size):
            add(Task(_task_id(e, QUALIFIERS[j]), (e, corpus.qualifiers[j]), docs[j], 1, max_turns))
        remaining -= size

    for _ in range(n_plain):
        e = take(lambda x: _free_task(x, "q0", excluded))
        add(Task(_task_id(e, "q0"), (e, corpus.qualifiers[0]), corpus.entries[e], 1, max_turns))

    order = rng.permutation(len(tasks))
    return [tasks[i] for i in order]


def _free_task(entity: int, qualifier: str, excluded: set[str]) -> bool:
    return _task_id(entity, qualifier) not in excluded


def shared_prefix_fraction(tasks: Sequence[Task]) -> float:
    """Fraction of single-hop tasks whose entity is shared with another task of different gold."""
    single = [t for t in tasks if t.hops == 1]
    if not single:
        return 0.0
    by_entity: dict[int, set[int]] = {}
    for t in single:
        by_entity.setdefault(t.entity, set()).add(t.gold)
    return sum(1 for t in single if len(by_entity[t.entity]) > 1) / len(single)


def save_tasks(path: str | Path, vocab: Vocab, corpus: Corpus, tasks: Sequence[Task],
               eval_tasks: Sequence[Task] = ()) -> None:
    Path(path).write_text(json.dumps({
        "vocab": list(vocab.tokens),
        "corpus": corpus.to_dict(),
        "tasks": [t.to_dict() for t in tasks],
        "eval_tasks": [t.to_dict() for t in eval_tasks],
    }, indent=1))


def load_tasks(path: str | Path) -> tuple[Vocab, Corpus, list[Task], list[Task]]:
    d = json.loads(Path(path).read_text())
    return (Vocab(tuple(d["vocab"])), Corpus.from_dict(d["corpus"]),
            [Task.from_dict(t) for t in d["tasks"]],
            [Task.from_dict(t) for t in d.get("eval_tasks", [])])
