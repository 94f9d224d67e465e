import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from lldlab.core import ACTION, FEEDBACK, PROMPT, RolloutGroup, Segment, Trajectory, Vocab
from lldlab.diagnostics import (NoReference, PhaseConfig, ProbeRow, StepMetrics, UniformGroup,
                                action_delta, action_deltas, action_rate, gwhes_score,
                                lld_record, obs_match_ratio, phase_tag, probe_delta_x,
                                read_probes, sgd_step, valid_search_count, write_probes)
from lldlab.grpo import GrpoConfig, compute_advantages
from lldlab.policy import FeatureMap, PolicyParams, entropy, log_prob

N = 24
V = Vocab.build(N)
FM = FeatureMap(N, window=2, includes_turn_index=True, max_turns=2)
CFG = GrpoConfig()


def answer_traj(*inner, qid="q"):
    toks = (V.answer_open, *inner, V.answer_close)
    return Trajectory(qid, (Segment(PROMPT, (V.free_ids[1],)),
                            Segment(ACTION, toks, (1, len(inner)))))


def fresh_group(trajs, rewards, p, qid="q"):
    """Group whose old log-probs are those of ``p``, so ratios start at 1."""
    adv = compute_advantages(rewards)
    old = tuple(log_prob(p, t, FM).per_token for t in trajs)
    return RolloutGroup(qid, tuple(trajs), list(rewards), adv.values, old, p.version)


def random_params(seed, scale=0.5):
    return PolicyParams(scale * np.random.default_rng(seed).standard_normal((N, FM.dim)))


# -- per-action deltas ----------------------------------------------------------------

def test_action_delta_zero_at_same_params():
    p = random_params(0)
    t = answer_traj(V.free_ids[0])
    assert action_delta(p, p, t, 0, FM) == 0.0
    with pytest.raises(IndexError):
        action_delta(p, p, t, 1, FM)


def test_raising_sampled_logits_gives_positive_delta():
    p = random_params(1)
    t = answer_traj(V.free_ids[0])
    w = p.weights.copy()
    for tok in t.tokens[1:]:
        w[tok] += 0.1
    assert action_delta(p, p.with_weights(w), t, 0, FM) > 0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_deltas_telescope_to_masked_total(seed):
    rng = np.random.default_rng(seed)
    t = oracles.random_trajectory(rng, V, n_actions=int(rng.integers(1, 4)))
    a, b = random_params(seed), random_params(seed + 1)
    d = action_deltas(a, b, t, FM)
    total = log_prob(b, t, FM).per_token.sum() - log_prob(a, t, FM).per_token.sum()
    assert len(d) == t.turn_count
    assert abs(d.sum() - total) < 1e-9


def test_lld_record_flag():
    p = random_params(2)
    t = answer_traj(V.free_ids[0])
    w = p.weights.copy()
    w[V.answer_open] -= 1.0
    rec = lld_record(p, p.with_weights(w), t, FM)
    assert rec.lld_flag and rec.response_delta < 0
    assert lld_record(p, p, t, FM).lld_flag  # zero change sits on the threshold


# -- probe ----------------------------------------------------------------------------

def probe_group(seed=3):
    p = random_params(seed)
    g = V.free_ids[0]
    trajs = [answer_traj(g), answer_traj(V.free_ids[2]), answer_traj(V.free_ids[3])]
    return p, fresh_group(trajs, [1, 0, 0], p)


def test_probe_zero_lr():
    p, grp = probe_group()
    assert probe_delta_x(grp, p, 0.0, CFG, FM) == 0.0


def test_probe_leaves_params_untouched():
    p, grp = probe_group()
    before = p.weights.copy()
    probe_delta_x(grp, p, 0.5, CFG, FM)
    assert p.weights.tobytes() == before.tobytes()


def test_probe_uniform_group_raises():
    p, _ = probe_group()
    t = answer_traj(V.free_ids[0])
    grp = fresh_group([t, t], [1, 1], p)
    with pytest.raises(UniformGroup):
        probe_delta_x(grp, p, 0.1, CFG, FM)


def test_probe_disjoint_features_positive():
    # wrong responses use different prompts and answer tokens: nothing they push down
    # is shared with the correct response beyond the turn feature
    p = PolicyParams.zeros(N, FM)
    good = answer_traj(V.free_ids[0])
    bad = Trajectory("q", (Segment(PROMPT, (V.free_ids[4],)),
                           Segment(ACTION, (V.search_open, V.free_ids[5], V.search_close))))
    grp = fresh_group([good, bad], [1, 0], p)
    assert probe_delta_x(grp, p, 0.1, CFG, FM) > 0


@pytest.mark.parametrize("extra", [2, 3])
def test_probe_negative_for_padded_near_miss(extra):
    # the wrong answers repeat the gold token: they share the correct response's
    # opening action and put low-probability copies of its tokens in overlapping contexts
    p = PolicyParams.zeros(N, FM)
    g = V.free_ids[0]
    good = answer_traj(g)
    bad = answer_traj(*([g] * (1 + extra)))
    grp = fresh_group([good, bad, bad, bad], [1, 0, 0, 0], p)
    dx = probe_delta_x(grp, p, 0.1, CFG, FM)
    assert dx < 0
    # recompute by hand: one step, then the change of the correct response
    new = sgd_step(p, grp, 0.1, CFG, FM)
    by_hand = log_prob(new, good, FM).per_token.sum() - log_prob(p, good, FM).per_token.sum()
    assert abs(dx - by_hand) < 1e-12


# -- search metrics -------------------------------------------------------------------

def search_then_answer(query, valid=True, qid="q"):
    if valid:
        act = (V.search_open, query, V.search_close)
        docs = (V.free_ids[7], V.free_ids[8], V.free_ids[9])
        fb = (V.info_open, *docs, V.info_close)
    else:
        act = (V.free_ids[3],)
        fb = (V.info_open, *V.invalid_message, V.info_close)
    return Trajectory(qid, (Segment(PROMPT, (V.free_ids[1],)), Segment(ACTION, act),
                            Segment(FEEDBACK, fb),
                            Segment(ACTION, (V.answer_open, V.free_ids[7], V.answer_close),
                                    (1, 1))))


def test_valid_search_count():
    assert valid_search_count(search_then_answer(V.free_ids[2]), V) == 1
    assert valid_search_count(search_then_answer(V.free_ids[2], valid=False), V) == 0
    assert valid_search_count(answer_traj(V.free_ids[0]), V) == 0


def test_obs_match_ratio():
    t = search_then_answer(V.free_ids[2])
    grp = RolloutGroup("q", (t, t, search_then_answer(0, valid=False)), [1, 0, 0],
                       [1.41, -0.71, -0.71])
    assert obs_match_ratio(grp, V) == 0.5
    grp = RolloutGroup("q", (t, t), [1, 0], [1.0, -1.0])
    assert obs_match_ratio(grp, V) == 1.0
    with pytest.raises(NoReference):
        obs_match_ratio(RolloutGroup("q", (t, t), [0, 0], [0.0, 0.0]), V)
    assert math.isnan(obs_match_ratio(RolloutGroup("q", (t, t), [1, 1], [0.0, 0.0]), V))


# -- entropy / likelihood coupling ------------------------------------------------------

def test_sharpening_lowers_entropy_and_raises_likelihood():
    p = PolicyParams.zeros(N, FM)
    t = answer_traj(V.free_ids[0])
    w = p.weights.copy()
    for tok in t.tokens[1:]:
        w[tok] += 3.0
    sharp = p.with_weights(w)
    ctx = (V.free_ids[1],)
    assert entropy(sharp, FM, ctx) < entropy(p, FM, ctx)
    assert log_prob(sharp, t, FM).per_token.sum() > log_prob(p, t, FM).per_token.sum()
    assert abs(entropy(p, FM, ctx) - math.log(N)) < 1e-12


# -- phases ---------------------------------------------------------------------------

def history(ll, gn=None):
    gn = np.ones(len(ll)) if gn is None else gn
    return [StepMetrics(i, 0.0, float(a), 1.0, float(b), 1.0, 1.0, 3.0, 0.0, 0.0)
            for i, (a, b) in enumerate(zip(ll, gn))]


def test_phase_tags():
    cfg = PhaseConfig(window=20, s0=1e-3, s1=1e-2)
    x = np.arange(40)
    assert phase_tag(history(np.full(40, -1.0)), cfg) == "I"
    assert phase_tag(history(-1.0 - 5e-3 * x), cfg) == "II"
    assert phase_tag(history(-1.0 - 3e-2 * x), cfg) == "III"
    assert phase_tag(history(np.full(40, -1.0), 1.2 ** x), cfg) == "III"
    assert phase_tag(history(np.full(5, -1.0)), cfg) == "none"
    assert phase_tag(history(-1.0 + 5e-3 * x), cfg) == "none"


def test_metrics_reject_unknown_phase():
    with pytest.raises(ValueError):
        StepMetrics(0, 0, 0, 0, 0, 0, 0, 0, 0, 0, phase="IV")


def test_metrics_round_trip():
    m = history([-1.0])[0]
    import json
    assert StepMetrics.from_dict(json.loads(m.to_json())) == m


# -- gradient interaction ---------------------------------------------------------------

def test_gwhes_without_incorrect_responses():
    p = random_params(4)
    t = answer_traj(V.free_ids[0])
    grp = fresh_group([t, t], [1, 1], p)
    rep = gwhes_score(grp, (0, 0), p, FM, p_plus=1.0, p_minus=1.0)
    assert rep.negative == 0.0
    assert rep.G == -rep.positive
    assert rep.positive > 0


def test_gwhes_duplicate_negative_term():
    # an incorrect copy of the correct response makes the negative term positive
    p = random_params(5)
    t = answer_traj(V.free_ids[0])
    grp = fresh_group([t, t], [1, 0], p)
    rep = gwhes_score(grp, (0, 0), p, FM)
    assert rep.negative > 0
    assert abs(rep.negative - rep.positive) < 1e-12  # equal |advantage| on both sides
    assert rep.p_source == "default-mean-abs-advantage"


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_gwhes_first_order(seed):
    rng = np.random.default_rng(seed)
    p = random_params(seed)
    n = int(rng.integers(2, 6))
    trajs = [oracles.random_trajectory(rng, V) for _ in range(n)]
    rewards = [1] + [int(x) for x in rng.integers(0, 2, n - 1)]
    if all(rewards):
        rewards[-1] = 0
    grp = fresh_group(trajs, rewards, p)
    i = grp.correct[0]
    target = (i, int(rng.integers(0, trajs[i].turn_count)))
    rep = gwhes_score(grp, target, p, FM)
    assert abs(rep.G - (rep.negative - rep.positive)) < 1e-9
    n_tok = sum(t.n_masked for t in trajs)
    rate = action_rate(grp, target, p, CFG, FM)
    assert abs(rate + rep.G / n_tok) < 1e-9 * max(1.0, abs(rate))
    eta = 1e-6
    new = sgd_step(p, grp, eta, CFG, FM)
    fd = action_delta(p, new, trajs[i], target[1], FM) / eta
    assert abs(fd - rate) < 1e-3 * max(1.0, abs(rate))


# -- probe csv --------------------------------------------------------------------------

def test_probe_csv_round_trip(tmp_path):
    rows = [ProbeRow(20, "q1", -0.125, 2, 6), ProbeRow(20, "q2", float("nan"), 0, 8)]
    path = tmp_path / "probes.csv"
    with open(path, "w", newline="") as fh:
        write_probes(rows, fh)
    back = read_probes(path)
    assert back[0] == rows[0]
    assert back[1].query_id == "q2" and math.isnan(back[1].delta_x)
    buf = io.StringIO()
    write_probes(rows[:1], buf, header=False)
    assert buf.getvalue() == "20,q1,-0.125,2,6\n"
