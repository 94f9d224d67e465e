import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lldlab.core import (ACTION, FEEDBACK, PROMPT, RESERVED, RolloutGroup, Segment, Trajectory,
                         Vocab, trajectory_from_dict, trajectory_to_dict, validate_trajectory)

V = Vocab.build(32)


def simple_traj():
    return Trajectory("q1", (
        Segment(PROMPT, (20, 21)),
        Segment(ACTION, (V.search_open, 20, V.search_close)),
        Segment(FEEDBACK, (V.info_open, 22, 23, 24, V.info_close)),
        Segment(ACTION, (V.answer_open, 22, V.answer_close), (1, 1)),
    ))


def test_vocab_layout():
    assert len(V) == 32
    assert V.tokens[:len(RESERVED)] == RESERVED
    assert V.pad == 0
    assert set(V.free_ids).isdisjoint(V.reserved_ids)
    assert len(V.free_ids) == 32 - len(RESERVED)
    assert V.decode([V.search_open]) == ["<search>"]


def test_vocab_rejects_bad_alphabets():
    with pytest.raises(ValueError):
        Vocab(("a", "b"))
    with pytest.raises(ValueError):
        Vocab(RESERVED + ("x", "x"))
    with pytest.raises(ValueError):
        Vocab(tuple(f"t{i}" for i in range(20)))


def test_default_mask_covers_actions_only():
    t = simple_traj()
    assert t.loss_mask == (False,) * 2 + (True,) * 3 + (False,) * 5 + (True,) * 3
    assert t.n_masked == 6
    assert list(t.masked_positions) == [2, 3, 4, 10, 11, 12]
    assert validate_trajectory(t, V) == []


def test_turn_of_position_and_answer_positions():
    t = simple_traj()
    assert list(t.turn_of_position) == [-1, -1, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1]
    assert t.answer_positions == frozenset({11})
    assert t.action_slices() == [slice(0, 3), slice(3, 6)]
    assert t.turn_count == 2


def test_validate_flags_mask_on_feedback():
    t = simple_traj()
    mask = list(t.loss_mask)
    mask[6] = True
    bad = Trajectory("q1", t.segments, loss_mask=tuple(mask))
    assert "mask-on-feedback @ 6" in validate_trajectory(bad, V)


def test_validate_flags_structure_problems():
    t = Trajectory("q", (Segment(ACTION, (1,)), Segment(ACTION, (2,))))
    probs = validate_trajectory(t, V)
    assert "first-segment-not-prompt" in probs
    assert any(p.startswith("non-alternating") for p in probs)
    t2 = Trajectory("q", (Segment(PROMPT, (1,)), Segment(ACTION, (2,)), Segment(FEEDBACK, (3,))))
    assert "does-not-end-with-action" in validate_trajectory(t2, V)
    t3 = Trajectory("q", (Segment(PROMPT, (1,)), Segment(ACTION, (99,))))
    assert "token-out-of-vocab @ 1" in validate_trajectory(t3, V)
    t4 = Trajectory("q", (Segment(PROMPT, (1,)), Segment(ACTION, (2,), (0, 3))))
    assert any(p.startswith("span-out-of-bounds") for p in validate_trajectory(t4, V))


def test_json_round_trip():
    t = simple_traj()
    d = trajectory_to_dict(t)
    assert set(d) == {"query_id", "segments", "terminal_reason"}
    back = trajectory_from_dict(json.loads(json.dumps(d)))
    assert back == t


def test_rollout_group_arrays_are_frozen():
    t = simple_traj()
    g = RolloutGroup("q1", (t, t), [1.0, 0.0], [1.0, -1.0], (np.zeros(6), np.zeros(6)), 3)
    assert g.correct == [0] and g.incorrect == [1]
    with pytest.raises(ValueError):
        g.advantages[0] = 5.0
    with pytest.raises(ValueError):
        RolloutGroup("q1", (t,), [1.0, 0.0], [1.0, -1.0])
    with pytest.raises(ValueError):
        RolloutGroup("q1", (t,), [1.0], [0.0], (np.zeros(4),))


segment_lists = st.lists(st.tuples(st.lists(st.integers(0, 31), min_size=1, max_size=4),
                                   st.lists(st.integers(0, 31), min_size=1, max_size=4)),
                         min_size=1, max_size=3)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 31), min_size=1, max_size=3), segment_lists)
def test_mask_matches_segment_kinds(prompt, turns):
    segs = [Segment(PROMPT, tuple(prompt))]
    for i, (act, fb) in enumerate(turns):
        segs.append(Segment(ACTION, tuple(act)))
        if i < len(turns) - 1:
            segs.append(Segment(FEEDBACK, tuple(fb)))
    t = Trajectory("q", tuple(segs))
    assert validate_trajectory(t, V) == []
    assert t.n_masked == sum(len(a) for a, _ in turns)
    kinds = [s.kind for s in segs for _ in s.token_ids]
    assert all((k == ACTION) == m for k, m in zip(kinds, t.loss_mask))
