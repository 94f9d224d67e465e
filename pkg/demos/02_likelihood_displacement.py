"""
When does a correct response lose likelihood?
=============================================

Two hand-built groups over the same correct answer.  In the first, the wrong
responses have nothing in common with it and one update raises its
likelihood.  In the second, the wrong responses restate the correct answer
and then pad it, so pushing them down drags the correct one down too.  The
gradient-interaction score predicts the sign before any step is taken, and the
likelihood-preserving penalty softens the drop.
"""
from lldlab.core import ACTION, PROMPT, RolloutGroup, Segment, Trajectory, Vocab
from lldlab.diagnostics import action_deltas, gwhes_score, probe_delta_x, sgd_step
from lldlab.grpo import GrpoConfig, compute_advantages, loss_inputs
from lldlab.lldreg import RegConfig, total_loss_fn
from lldlab.policy import FeatureMap, PolicyParams, log_prob, value_and_grad

v = Vocab.build(24)
fm = FeatureMap(len(v), window=2, includes_turn_index=True, max_turns=2)
p = PolicyParams.zeros(len(v), fm)
g, other = v.free_ids[0], v.free_ids[5]
prompt = Segment(PROMPT, (v.free_ids[1],))


def answer(*inner):
    toks = (v.answer_open, *inner, v.answer_close)
    return Trajectory("q", (prompt, Segment(ACTION, toks, (1, len(inner)))))


def group(trajs, rewards):
    adv = compute_advantages(rewards).values
    old = tuple(log_prob(p, t, fm).per_token for t in trajs)
    return RolloutGroup("q", tuple(trajs), rewards, adv, old, p.version)


good = answer(g)
cases = {
    "unrelated wrong answers": group([good] + [answer(other)] * 3, [1, 0, 0, 0]),
    "padded near misses": group([good] + [answer(g, g, g)] * 3, [1, 0, 0, 0]),
}
lr = 0.1
for name, grp in cases.items():
    n_tok = sum(t.n_masked for t in grp.trajectories)
    rep = gwhes_score(grp, (0, 0), p, fm)
    dx = probe_delta_x(grp, p, lr, GrpoConfig(), fm)
    print(f"{name}:")
    print(f"  negative term {rep.negative:+.4f}  positive term {rep.positive:+.4f}")
    print(f"  predicted rate -G/N = {-rep.G / n_tok:+.5f}")
    print(f"  one step at lr {lr}: change in log-lik of the correct answer {dx:+.5f}")

# the probe never moves the parameters it starts from
before = p.weights.tobytes()
probe_delta_x(cases["padded near misses"], p, lr, GrpoConfig(), fm)
print(f"\nparameters untouched by the probe: {p.weights.tobytes() == before}")

# first-order agreement: the per-action change divided by a tiny step is the rate
grp = cases["padded near misses"]
eta = 1e-4
new = sgd_step(p, grp, eta, GrpoConfig(), fm)
print(f"finite step rate {action_deltas(p, new, good, fm)[0] / eta:+.5f}")

# the penalty only acts once the correct response has lost likelihood, so it is
# shown on the second of two steps: first a plain step, then a step on the
# penalized objective with the group's old log-probs held fixed
inputs = loss_inputs([grp], fm)
first = sgd_step(p, grp, 0.5, GrpoConfig(), fm)
for lam in (0.0, 1.0, 10.0):
    fn = total_loss_fn(inputs, GrpoConfig(), RegConfig("llds", lam))
    _, grad = value_and_grad(first, inputs.batch, fn)
    second = first.updated(-0.5 * grad)
    d = log_prob(second, good, fm).per_token.sum() - log_prob(p, good, fm).per_token.sum()
    print(f"lambda {lam:5.1f}: correct answer log-lik change after two steps {d:+.4f}")
