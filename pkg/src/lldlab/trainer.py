"""Rollout collection, GRPO(+penalty) updates, probes, checkpoints and evaluation."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diagnostics as dg
from .core import ACTION, RolloutGroup, Segment, Trajectory, Vocab, trajectory_to_dict
from .env import (Corpus, QUALIFIERS, Task, all_single_hop_tasks, generate_corpus,
                  generate_tasks, oracle_actor, reward, run_episode)
from .grpo import GrpoConfig, compute_advantages, loss_inputs, surrogate
from .lldreg import RegConfig, penalty_terms, total_loss_fn
from .policy import (FeatureMap, NumericOverflow, PolicyParams, batch_entropy, batch_log_prob,
                     per_trajectory, sample_action, save_checkpoint, token_batch,
                     value_and_grad)

log = logging.getLogger(__name__)

# stream ids for seeded generators
_ROLLOUT, _PROBE, _EVAL, _WARM, _TASKS = 1, 2, 3, 4, 5


def rng_for(seed: int, stream: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream, *keys])


# -- configuration --------------------------------------------------------------

@dataclass
class EnvSection:
    vocab_size: int = 64
    entities: int = 16
    n_tasks: int = 32
    n_eval_tasks: int = 16
    hops_mix: float = 0.0
    prefix_share: float = 0.0
    max_turns: int = 2
    max_action_len: int = 4


@dataclass
class PolicySection:
    window: int = 2
    includes_turn_index: bool = True
    temperature: float = 1.0
    # behaviour-cloning warm start on protocol demonstrations with random answers
    warm_steps: int = 200
    warm_lr: float = 2.0
    warm_demos: int = 6


@dataclass
class TrainSection:
    seed: int = 0
    steps: int = 300
    queries_per_step: int = 16
    lr: float = 0.05
    optimizer: str = "sgd"
    momentum: float = 0.9
    minibatches: int = 1
    probe_every: int = 20
    probe_tasks: int = 50
    checkpoint_every: int = 50
    abort_budget: int = 5
    phase_window: int = 20
    phase_s0: float = 1e-3
    phase_s1: float = 1e-2
    phase_grad_surge: float = 2.0
    lld_threshold: float = 0.0


@dataclass
class TrainConfig:
    env: EnvSection = field(default_factory=EnvSection)
    policy: PolicySection = field(default_factory=PolicySection)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    reg: RegConfig = field(default_factory=lambda: RegConfig("llds", 0.0))
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self) -> None:
        if self.env.hops_mix > 0 and self.env.max_turns != 3:
            raise ValueError("mixed single/multi-hop training uses max_turns=3")
        if self.env.hops_mix == 0 and self.env.max_turns != 2:
            raise ValueError("single-hop training uses max_turns=2")
        if self.train.optimizer not in ("sgd", "momentum"):
            raise ValueError("optimizer must be 'sgd' or 'momentum'")
        if self.train.minibatches < 1:
            raise ValueError("minibatches must be >= 1")

    def to_dict(self) -> dict:
        grpo = asdict(self.grpo)
        if not isinstance(self.grpo.std_guard, str):
            grpo["std_guard"] = list(self.grpo.std_guard)
        return {
            "env": asdict(self.env),
            "policy": asdict(self.policy),
            "grpo": grpo,
            "reg": {"variant": self.reg.variant, "lambda": self.reg.lam},
            "train": asdict(self.train),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {"env", "policy", "grpo", "reg", "train"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config sections {sorted(unknown)}")
        grpo = dict(d.get("grpo", {}))
        if isinstance(grpo.get("std_guard"), list):
            grpo["std_guard"] = tuple(grpo["std_guard"])
        reg = dict(d.get("reg", {}))
        if "lambda" in reg:
            reg["lam"] = reg.pop("lambda")
        return cls(
            env=EnvSection(**d.get("env", {})),
            policy=PolicySection(**d.get("policy", {})),
            grpo=GrpoConfig(**grpo),
            reg=RegConfig(**reg),
            train=TrainSection(**d.get("train", {})),
        )

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, train=replace(self.train, seed=seed))

    def with_lambda(self, lam: float) -> "TrainConfig":
        return replace(self, reg=replace(self.reg, lam=lam))


def load_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_dict(json.loads(Path(path).read_text()))


# -- lab setup ----------------------------------------------------------------------

@dataclass
class Lab:
    cfg: TrainConfig
    vocab: Vocab
    corpus: Corpus
    tasks: list[Task]
    eval_tasks: list[Task]
    fm: FeatureMap

    @property
    def pad(self) -> int:
        return self.vocab.pad


def held_out_tasks(corpus: Corpus, train: Sequence[Task], n: int, rng: np.random.Generator,
                   max_turns: int, hops_mix: float = 0.0) -> list[Task]:
    taken = {t.query_id for t in train}
    pool = [t for t in all_single_hop_tasks(corpus, max_turns) if t.query_id not in taken]
    if hops_mix > 0:
        pool += [Task(f"e{e}-qhop", (e, corpus.qualifiers[3]), corpus.entries[corpus.hop_links[e]],
                      2, max_turns)
                 for e in corpus.entities if e in corpus.hop_links and f"e{e}-qhop" not in taken]
    if not pool:
        return []
    idx = rng.permutation(len(pool))[:n]
    return [pool[i] for i in sorted(idx)]


def build_lab(cfg: TrainConfig) -> Lab:
    e = cfg.env
    vocab = Vocab.build(e.vocab_size)
    rng = rng_for(cfg.train.seed, _TASKS)
    corpus = generate_corpus(vocab, e.entities, rng)
    tasks = generate_tasks(corpus, e.n_tasks, rng, e.hops_mix, e.prefix_share, e.max_turns)
    eval_tasks = held_out_tasks(corpus, tasks, e.n_eval_tasks, rng, e.max_turns, e.hops_mix)
    fm = FeatureMap(len(vocab), cfg.policy.window, cfg.policy.includes_turn_index, e.max_turns)
    return Lab(cfg, vocab, corpus, tasks, eval_tasks, fm)


def lab_from_files(cfg: TrainConfig, vocab: Vocab, corpus: Corpus, tasks: list[Task],
                   eval_tasks: list[Task]) -> Lab:
    fm = FeatureMap(len(vocab), cfg.policy.window, cfg.policy.includes_turn_index,
                    cfg.env.max_turns)
    return Lab(cfg, vocab, corpus, tasks, eval_tasks, fm)


def demonstrations(lab: Lab, rng: np.random.Generator) -> list[Trajectory]:
    """Protocol-following episodes whose answer is a uniformly random passage."""
    v = lab.vocab
    pc = lab.cfg.policy
    demo_tasks = all_single_hop_tasks(lab.corpus, lab.cfg.env.max_turns)
    if lab.cfg.env.hops_mix > 0:
        demo_tasks += [t for t in lab.tasks + lab.eval_tasks if t.hops == 2]
    out = []
    for task in demo_tasks:
        for _ in range(pc.warm_demos):
            pick = int(rng.integers(3))
            base = oracle_actor(task, lab.corpus, v)

            def act(context, turn, base=base, pick=pick, task=task):
                seg = base(context, turn)
                if seg.token_ids[0] == v.answer_open and task.hops == 1:
                    return Segment(ACTION, (v.answer_open, context[-4:-1][pick], v.answer_close))
                return seg

            out.append(run_episode(task, lab.corpus, v, act))
    return out


def warm_start(lab: Lab) -> PolicyParams:
    """Behaviour cloning on protocol demonstrations; stands in for a pretrained model."""
    params = PolicyParams.zeros(len(lab.vocab), lab.fm)
    pc = lab.cfg.policy
    if pc.warm_steps <= 0:
        return params
    demos = demonstrations(lab, rng_for(lab.cfg.train.seed, _WARM))
    batch = token_batch(demos, lab.fm, lab.pad)
    n = len(batch)

    def nll(lp):
        return -float(lp.mean()), np.full(len(lp), -1.0 / n)

    w = params.weights.copy()
    for _ in range(pc.warm_steps):
        _, g = value_and_grad(PolicyParams(w), batch, nll)
        w -= pc.warm_lr * g
    return PolicyParams(w, 0)


# -- rollouts -----------------------------------------------------------------------

def policy_actor(params: PolicyParams, lab: Lab, rng: np.random.Generator,
                 temperature: float):
    stops = lab.vocab.stop_ids

    def act(context, turn):
        return sample_action(params, lab.fm, context, turn, rng, stops,
                             lab.cfg.env.max_action_len, temperature, lab.pad)
    return act


def collect_group(task: Task, params: PolicyParams, lab: Lab, key: Sequence[int],
                  temperature: float | None = None, group_size: int | None = None
                  ) -> RolloutGroup:
    """Sample a group of responses and record rewards, advantages and old log-probs."""
    cfg = lab.cfg
    G = group_size or cfg.grpo.group_size
    tau = cfg.policy.temperature if temperature is None else temperature
    trajs = []
    for g in range(G):
        rng = rng_for(cfg.train.seed, *key, g)
        trajs.append(run_episode(task, lab.corpus, lab.vocab, policy_actor(params, lab, rng, tau)))
    rewards = [reward(t, task) for t in trajs]
    adv = compute_advantages(rewards, cfg.grpo)
    batch = token_batch(trajs, lab.fm, lab.pad)
    old = per_trajectory(batch_log_prob(params, batch), batch)
    return RolloutGroup(task.query_id, tuple(trajs), np.array(rewards, dtype=float), adv.values,
                        tuple(old), params.version, adv.degenerate)


# -- one training step -------------------------------------------------------------

@dataclass
class OptState:
    velocity: np.ndarray | None = None


@dataclass
class StepOutcome:
    params: PolicyParams
    metrics: dg.StepMetrics
    aborted: bool = False
    event: str | None = None
    opt: OptState = field(default_factory=OptState)


def _chunks(items: list, n: int) -> list[list]:
    n = max(1, min(n, len(items)))
    bounds = np.linspace(0, len(items), n + 1).round().astype(int)
    return [items[a:b] for a, b in zip(bounds, bounds[1:]) if b > a]


def _descriptive_metrics(step: int, groups: Sequence[RolloutGroup], params: PolicyParams,
                         lab: Lab) -> dict:
    trajs = [t for g in groups for t in g.trajectories]
    rewards = np.concatenate([g.rewards for g in groups]) if groups else np.zeros(0)
    batch = token_batch(trajs, lab.fm, lab.pad)
    ent = batch_entropy(params, batch) if len(batch) else np.zeros(1)
    correct_ll = []
    for g in groups:
        for i in g.correct:
            lp = g.old_logprobs[i]
            if len(lp):
                correct_ll.append(float(lp.mean()))
    obs = []
    for g in groups:
        if g.correct and g.incorrect:
            obs.append(dg.obs_match_ratio(g, lab.vocab))
    return dict(
        step=step,
        mean_reward=float(rewards.mean()) if len(rewards) else 0.0,
        mean_correct_loglik=float(np.mean(correct_ll)) if correct_ll else 0.0,
        mean_entropy=float(ent.mean()),
        mean_response_length=float(np.mean([t.n_masked for t in trajs])) if trajs else 0.0,
        mean_valid_search=float(np.mean([dg.valid_search_count(t, lab.vocab) for t in trajs]))
        if trajs else 0.0,
        obs_match_ratio=float(np.mean(obs)) if obs else 0.0,
    )


def train_step(groups: Sequence[RolloutGroup], params: PolicyParams, lab: Lab, step: int = 0,
               opt: OptState | None = None) -> StepOutcome:
    """Update on the non-degenerate groups and measure the step's likelihood displacement."""
    cfg = lab.cfg
    tc = cfg.train
    opt = opt or OptState()
    for g in groups:
        if g.params_version != params.version:
            raise ValueError(f"group {g.query_id} was sampled under version {g.params_version}, "
                             f"params are version {params.version}")
    kept = [g for g in groups if not g.degenerate]
    desc = _descriptive_metrics(step, groups, params, lab)
    grad_norms, max_ratio, ratio_sum, ratio_n = [], 1.0, 0.0, 0
    w = params.weights.copy()
    velocity = None if opt.velocity is None else opt.velocity.copy()
    mbs = [loss_inputs(mb, lab.fm, lab.pad) for mb in _chunks(kept, tc.minibatches)]
    try:
        for _ in range(cfg.grpo.inner_epochs):
            for inputs in mbs:
                current = PolicyParams(w, params.version)
                loss_fn = total_loss_fn(inputs, cfg.grpo, cfg.reg)
                _, grad = value_and_grad(current, inputs.batch, loss_fn)
                s = surrogate(inputs, batch_log_prob(current, inputs.batch), cfg.grpo)
                max_ratio = max(max_ratio, s.max_ratio)
                ratio_sum += s.mean_ratio
                ratio_n += 1
                grad_norms.append(float(np.linalg.norm(grad)))
                with np.errstate(over="ignore", invalid="ignore"):
                    if tc.optimizer == "momentum":
                        velocity = grad if velocity is None else tc.momentum * velocity + grad
                        w = w - tc.lr * velocity
                    else:
                        w = w - tc.lr * grad
                if not np.all(np.isfinite(w)):
                    raise NumericOverflow("update")
    except NumericOverflow as exc:
        log.warning("step %d aborted: %s", step, exc)
        m = dg.StepMetrics(grad_norm=0.0, max_ratio=1.0, mean_ratio=1.0,
                           frac_negative_delta_x=0.0, degenerate_groups=len(groups) - len(kept),
                           **desc)
        return StepOutcome(params, m, True, "numeric-overflow", opt)

    new = params.updated(w - params.weights) if kept else params
    correct_delta, pres_decrease = [], 0.0
    for g in kept:
        batch = token_batch(list(g.trajectories), lab.fm, lab.pad)
        new_lp = per_trajectory(batch_log_prob(new, batch), batch)
        for i in range(g.size):
            d = float(new_lp[i].sum() - g.old_logprobs[i].sum())
            if g.rewards[i] > 0:
                correct_delta.append(d)
            if g.advantages[i] >= 0:
                pres_decrease -= d
    m = dg.StepMetrics(
        grad_norm=float(np.mean(grad_norms)) if grad_norms else 0.0,
        max_ratio=max_ratio,
        mean_ratio=ratio_sum / ratio_n if ratio_n else 1.0,
        frac_negative_delta_x=0.0,
        mean_correct_delta=float(np.mean(correct_delta)) if correct_delta else 0.0,
        frac_lld=float(np.mean(np.array(correct_delta) <= tc.lld_threshold))
        if correct_delta else 0.0,
        preserving_decrease=pres_decrease,
        degenerate_groups=len(groups) - len(kept),
        **desc,
    )
    return StepOutcome(new, m, False, None, OptState(velocity))


# -- probes and evaluation -----------------------------------------------------------

def run_probes(params: PolicyParams, lab: Lab, step: int, n_tasks: int) -> list[dg.ProbeRow]:
    """Per-query probe on the first ``n_tasks`` training tasks; mixed groups only."""
    rows = []
    for idx, task in enumerate(lab.tasks[:n_tasks]):
        g = collect_group(task, params, lab, (_PROBE, step, idx))
        nc, ni = len(g.correct), len(g.incorrect)
        if g.degenerate:
            rows.append(dg.ProbeRow(step, task.query_id, float("nan"), nc, ni))
            continue
        d = dg.probe_delta_x(g, params, lab.cfg.train.lr, lab.cfg.grpo, lab.fm, lab.pad)
        rows.append(dg.ProbeRow(step, task.query_id, d, nc, ni))
    return rows


def evaluate(params: PolicyParams, lab: Lab, tasks: Sequence[Task]) -> float:
    """Greedy-decoding exact match."""
    if not tasks:
        return 0.0
    hits = 0
    for idx, task in enumerate(tasks):
        rng = rng_for(lab.cfg.train.seed, _EVAL, idx)
        traj = run_episode(task, lab.corpus, lab.vocab, policy_actor(params, lab, rng, 0.0))
        hits += reward(traj, task)
    return hits / len(tasks)


# -- the loop -----------------------------------------------------------------------

@dataclass
class RunResult:
    params: PolicyParams
    metrics: list[dg.StepMetrics]
    probes: list[dg.ProbeRow]
    eval: dict
    aborted_steps: int
    out_dir: Path | None = None


def _dump(obj) -> str:
    return json.dumps(obj)


def train_loop(cfg: TrainConfig, out_dir: str | Path | None = None,
               lab: Lab | None = None) -> RunResult:
    """Run ``cfg.train.steps`` steps, writing the run directory when ``out_dir`` is set."""
    lab = lab or build_lab(cfg)
    tc = cfg.train
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
        (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1))
        (out / "metrics.jsonl").write_text("")
        with open(out / "probes.csv", "w", newline="") as fh:
            dg.write_probes([], fh)
    params = warm_start(lab)
    if out is not None:
        save_checkpoint(out / "checkpoints" / "step-0.json", lab.vocab, lab.fm, params)

    history: list[dg.StepMetrics] = []
    probes: list[dg.ProbeRow] = []
    events: list[dict] = []
    opt = OptState()
    aborted = 0
    last_frac = 0.0
    phase_cfg = dg.PhaseConfig(tc.phase_window, tc.phase_s0, tc.phase_s1, tc.phase_grad_surge)
    n_tasks = len(lab.tasks)
    for step in range(1, tc.steps + 1):
        groups = []
        for q in range(tc.queries_per_step):
            t_idx = ((step - 1) * tc.queries_per_step + q) % n_tasks
            groups.append(collect_group(lab.tasks[t_idx], params, lab, (_ROLLOUT, step, q)))
        res = train_step(groups, params, lab, step, opt)
        if res.aborted:
            aborted += 1
            events.append({"step": step, "event": res.event})
            if out is not None:
                with open(out / "events.jsonl", "a") as fh:
                    fh.write(_dump(events[-1]) + "\n")
            if aborted >= tc.abort_budget:
                log.error("abort budget exhausted at step %d", step)
                break
            continue
        params, opt = res.params, res.opt
        m = res.metrics
        if tc.probe_every > 0 and step % tc.probe_every == 0:
            rows = run_probes(params, lab, step, tc.probe_tasks)
            probes.extend(rows)
            vals = [r.delta_x for r in rows if math.isfinite(r.delta_x)]
            last_frac = float(np.mean([v < 0 for v in vals])) if vals else 0.0
            if out is not None:
                with open(out / "probes.csv", "a", newline="") as fh:
                    dg.write_probes(rows, fh, header=False)
        m.frac_negative_delta_x = last_frac
        history.append(m)
        m.phase = dg.phase_tag(history, phase_cfg)
        if out is not None:
            with open(out / "metrics.jsonl", "a") as fh:
                fh.write(m.to_json() + "\n")
            if tc.checkpoint_every > 0 and step % tc.checkpoint_every == 0:
                save_checkpoint(out / "checkpoints" / f"step-{step}.json", lab.vocab, lab.fm,
                                params)
        log.info("step %d reward %.3f ll %.3f H %.3f |g| %.3g phase %s", step, m.mean_reward,
                 m.mean_correct_loglik, m.mean_entropy, m.grad_norm, m.phase)

    result_eval = {}
    if tc.steps > 0:
        result_eval = {"em": evaluate(params, lab, lab.eval_tasks),
                       "train_em": evaluate(params, lab, lab.tasks),
                       "n_eval_tasks": len(lab.eval_tasks),
                       "aborted_steps": aborted}
    if out is not None:
        if tc.steps > 0:
            (out / "eval.json").write_text(json.dumps(result_eval, indent=1))
            last = history[-1].step if history else 0
            final = out / "checkpoints" / f"step-{last}.json"
            if not final.exists():
                save_checkpoint(final, lab.vocab, lab.fm, params)
    return RunResult(params, history, probes, result_eval, aborted, out)


def dump_group(group: RolloutGroup) -> dict:
    return {
        "query_id": group.query_id,
        "rewards": group.rewards.tolist(),
        "advantages": group.advantages.tolist(),
        "trajectories": [trajectory_to_dict(t) for t in group.trajectories],
    }


__all__ = [
    "TrainConfig", "EnvSection", "PolicySection", "TrainSection", "Lab", "build_lab",
    "warm_start", "collect_group", "train_step", "train_loop", "run_probes", "evaluate",
    "load_config", "RunResult", "QUALIFIERS", "penalty_terms",
]
