"""
Paired training runs with and without the penalty
=================================================

Trains the same lab twice from the same seed, once with plain GRPO and once
with the gated penalty, then compares the logged likelihood of correct
responses, the per-query probe and held-out exact match.  The same runs can be
made from the shell:

    lldlab train --config cfg.json --out runs/vanilla --lam 0
    lldlab train --config cfg.json --out runs/llds --lam 0.1
    lldlab export --run runs/llds --what likelihood,entropy,phase

Takes about twenty seconds.
"""
import json
import tempfile
from pathlib import Path

import numpy as np

from lldlab.diagnostics import read_metrics, read_probes
from lldlab.trainer import TrainConfig, train_loop

base = {
    "env": {"prefix_share": 0.8},
    "policy": {"window": 10},
    "train": {"steps": 100, "lr": 0.5, "minibatches": 4, "probe_every": 20},
}
root = Path(tempfile.mkdtemp(prefix="lldlab-demo-"))
for name, lam in (("vanilla", 0.0), ("llds", 0.1)):
    d = json.loads(json.dumps(base))
    d["reg"] = {"variant": "llds", "lambda": lam}
    res = train_loop(TrainConfig.from_dict(d), root / name)
    print(f"{name}: held-out EM {res.eval['em']:.3f}, train EM {res.eval['train_em']:.3f}")

print(f"\nrun directories under {root}")
for name in ("vanilla", "llds"):
    metrics = read_metrics(root / name / "metrics.jsonl")
    probes = read_probes(root / name / "probes.csv")
    print(f"\n{name}")
    print("  step  reward  corr-loglik  entropy  |grad|  pres-decrease  phase")
    for m in metrics[9::10]:
        print(f"  {m.step:4d}  {m.mean_reward:6.3f}  {m.mean_correct_loglik:11.3f}  "
              f"{m.mean_entropy:7.3f}  {m.grad_norm:6.3f}  {m.preserving_decrease:13.3f}  "
              f"{m.phase}")
    by_step = {}
    for r in probes:
        if np.isfinite(r.delta_x):
            by_step.setdefault(r.step, []).append(r.delta_x)
    meds = ", ".join(f"{s}: {np.median(x):+.3f}" for s, x in sorted(by_step.items()))
    print(f"  probe median by step  {meds}")
