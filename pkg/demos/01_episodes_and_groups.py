"""
Episodes, rollout groups and advantages
=======================================

A tour of the synthetic retrieval task: one scripted episode, the cloned
starting policy, and a group of sampled responses with their group-relative
advantages.  Run with ``python3 demos/01_episodes_and_groups.py``.
"""
import numpy as np

from lldlab.env import oracle_actor, run_episode
from lldlab.trainer import EnvSection, PolicySection, TrainConfig, build_lab, collect_group, \
    warm_start

# a small lab: 16 entities, most tasks sharing an entity with another task
cfg = TrainConfig(env=EnvSection(prefix_share=0.8), policy=PolicySection(window=10))
lab = build_lab(cfg)
v = lab.vocab
print(f"{len(lab.tasks)} training tasks, {len(lab.eval_tasks)} held-out, |V| = {len(v)}")


def show(traj):
    for seg in traj.segments:
        print(f"  {seg.kind:8s} {' '.join(v.decode(seg.token_ids))}")
    print(f"  -> {traj.terminal_reason}")


# the scripted agent searches for the entity, then reads the passage the
# qualifier points at
task = lab.tasks[0]
print(f"\ntask {task.query_id}: prompt {v.decode(task.prompt)}, gold {v.decode([task.gold])}")
show(run_episode(task, lab.corpus, v, oracle_actor(task, lab.corpus, v)))

# the starting policy is cloned from demonstrations that follow the protocol
# but answer with a random passage, so it searches well and answers at chance
params = warm_start(lab)
group = collect_group(task, params, lab, key=(1, 0, 0))
print(f"\nsampled group for {task.query_id}")
for t, r, a in zip(group.trajectories, group.rewards, group.advantages):
    answer = t.segments[-1].token_ids
    print(f"  reward {r:.0f}  advantage {a:+.3f}  final action {' '.join(v.decode(answer))}")

# advantages are standardized within the group; a group with one correct
# response in four gets sqrt(3) and -1/sqrt(3)
print(f"\nmean advantage {group.advantages.mean():+.1e}, "
      f"population std {group.advantages.std():.3f}, degenerate {group.degenerate}")

# groups whose responses all earn the same reward carry no signal
rates = []
for i, t in enumerate(lab.tasks[:12]):
    g = collect_group(t, params, lab, key=(1, 0, i))
    rates.append(g.rewards.mean())
print(f"per-task success over 12 tasks: {np.round(rates, 2)}")
