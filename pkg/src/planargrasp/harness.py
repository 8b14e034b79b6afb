"""Experiment orchestration: config, phase training entry points, evaluation
with success rates and the grasp-pose distance metric, the three-phase
pipeline, and ablation runners.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import shapes
from .clustering import kmeans
from .dagger import DaggerConfig, distill
from .env import ACTION_DIM, EnvConfig, GraspProposal, PlanarVecEnv, synthesize_proposal
from .numerics import rng_stream
from .policies import (BasePolicy, GaussianActorCritic, HyperPolicy, MoeTeacher,
                       ObservationMask, VisionPolicy)
from .ppo import ActorCriticAgent, EnvRunner, HyperAgent, PpoConfig, train_loop
from .rewards import (RewardConfig, base_policy_reward, base_task_reward,
                      grasp_pose_distance, reward_inputs, stage1_reward,
                      stage2_reward)


@dataclass
class ExperimentConfig:
    seed: int = 0
    dataset: str = "objects.jsonl"
    out_dir: str = "runs/default"
    k: int = 4
    hidden: tuple = (256, 256, 128, 128)
    base_ppo: PpoConfig = field(default_factory=lambda: PpoConfig(iterations=600))
    hyper_ppo: PpoConfig = field(default_factory=lambda: PpoConfig(iterations=400))
    dagger: DaggerConfig = field(default_factory=lambda: DaggerConfig(iterations=300))
    rewards: RewardConfig = field(default_factory=RewardConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    eval_episodes_per_object: int = 10

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["hidden"] = list(self.hidden)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "ExperimentConfig":
        rec = dict(rec)
        for key, sub in (("base_ppo", PpoConfig), ("hyper_ppo", PpoConfig),
                         ("dagger", DaggerConfig), ("rewards", RewardConfig),
                         ("env", EnvConfig)):
            if key in rec and isinstance(rec[key], dict):
                rec[key] = sub(**rec[key])
        if "hidden" in rec:
            rec["hidden"] = tuple(rec["hidden"])
        return cls(**rec)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_record(json.load(f))

    def config_hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_record(), sort_keys=True).encode()).hexdigest()[:16]


# -- reward wiring ---------------------------------------------------------

def make_reward_fn(kind: str, cfg: RewardConfig):
    table = {"base": base_policy_reward, "stage1": stage1_reward,
             "stage2": stage2_reward,
             "task": lambda inp, c: base_task_reward(inp, c).task}
    fn = table[kind]
    return lambda env, actions: fn(reward_inputs(env, actions), cfg)


# -- dataset ---------------------------------------------------------------

def generate_dataset(seed: int, counts: dict, env_cfg: EnvConfig | None = None):
    """Objects plus validated grasp proposals; shapes without a valid
    proposal are rejected during generation."""
    env_cfg = env_cfg or EnvConfig()
    proposals: dict = {}

    def proposal_fn(shape, rng):
        proposals[shape.id] = synthesize_proposal(shape, rng, env_cfg)

    dataset = shapes.generate_objects(seed, counts, proposal_fn=proposal_fn)
    proposals = {o.id: proposals[o.id] for o in dataset.all_objects()}
    return dataset, proposals


def load_dataset(path):
    dataset, raw = shapes.load_dataset(path)
    proposals = {}
    for oid, rec in raw.items():
        if rec is None:
            raise ValueError(f"object {oid} has no stored proposal")
        proposals[oid] = GraspProposal.from_record(rec)
    return dataset, proposals


# -- training phases -------------------------------------------------------

def _make_env(objects, proposals, num_envs, seed, env_cfg):
    props = [proposals[o.id] for o in objects]
    return PlanarVecEnv(objects, props, num_envs, seed, env_cfg)


def train_base_policy(objects, proposals, object_id: int, cfg: ExperimentConfig,
                      seed: int, mask: ObservationMask | None = None,
                      reward_kind: str = "base"):
    """Phase-1 expert on a single object. The ablation variants reuse this
    with a different mask or the proposal-based reward."""
    mask = mask or ObservationMask.base()
    obj = [o for o in objects if o.id == object_id]
    if not obj:
        raise KeyError(f"object {object_id} not in the provided set")
    env = _make_env(obj, proposals, cfg.base_ppo.num_envs, seed, cfg.env)
    net = GaussianActorCritic(mask.flat_dim(cfg.env), ACTION_DIM,
                              hidden=cfg.hidden, rng=rng_stream(seed, 1))
    agent = ActorCriticAgent(net, mask)
    runner = EnvRunner(env, make_reward_fn(reward_kind, cfg.rewards), [0], seed)
    history = train_loop(agent, runner, cfg.base_ppo, seed)
    return BasePolicy(net, mask, trained_object_id=object_id), history


def train_hyper_policy(objects, proposals, bases, cfg: ExperimentConfig,
                       seed: int, stage: int, init: HyperPolicy | None = None,
                       use_residual: bool = True):
    """Phase-2 multi-task training over all objects; stage 2 resumes from the
    stage-1 parameters and switches to the loosened reward."""
    mask = ObservationMask.hyper()
    env = _make_env(objects, proposals, cfg.hyper_ppo.num_envs, seed, cfg.env)
    if init is None:
        hyper = HyperPolicy(mask.flat_dim(cfg.env), ACTION_DIM, k=len(bases),
                            hidden=cfg.hidden, rng=rng_stream(seed, 2),
                            use_residual=use_residual)
    else:
        hyper = init
    agent = HyperAgent(hyper, bases, mask)
    reward_kind = "stage1" if stage == 1 else "stage2"
    runner = EnvRunner(env, make_reward_fn(reward_kind, cfg.rewards),
                       np.arange(len(objects)), seed + stage)
    history = train_loop(agent, runner, cfg.hyper_ppo, seed + stage)
    return hyper, history


def distill_student(objects, proposals, teacher: MoeTeacher,
                    cfg: ExperimentConfig, seed: int,
                    student: VisionPolicy | None = None):
    env = _make_env(objects, proposals, cfg.dagger.num_envs, seed, cfg.env)
    if student is None:
        student = VisionPolicy(cfg.env, hidden=cfg.hidden, rng=rng_stream(seed, 3))
    runner = EnvRunner(env, make_reward_fn("task", cfg.rewards),
                       np.arange(len(objects)), seed + 7)
    history = distill(teacher, student, runner, cfg.dagger, seed)
    return student, history


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    split: str
    success_rate: float
    mean_d: float
    per_object: list            # rows: object id, category, success, D
    seed: int
    episodes_per_object: int

    def to_record(self) -> dict:
        return asdict(self)


def evaluate(action_fn, objects, proposals, episodes_per_object: int,
             seed: int, env_cfg: EnvConfig, split: str = "eval") -> EvalReport:
    """Deterministic rollouts; success and D are per-object means, then
    macro-averaged so large categories do not dominate."""
    rows = []
    for obj in objects:
        env = _make_env([obj], proposals, episodes_per_object, seed, env_cfg)
        obs = env.reset_all(np.zeros(episodes_per_object, dtype=np.intp))
        d_sum = np.zeros(episodes_per_object)
        done = np.zeros(episodes_per_object, dtype=bool)
        while not np.all(done):
            actions = action_fn(obs)
            obs, done = env.step(actions)
            d_sum += grasp_pose_distance(env.proposal_vectors(),
                                         env.current_grasp_pose())
        success = float(np.mean(env.is_success()))
        rows.append({"object_id": obj.id, "category": obj.category,
                     "success": success, "d_metric": float(np.mean(d_sum))})
    return EvalReport(
        split=split,
        success_rate=float(np.mean([r["success"] for r in rows])),
        mean_d=float(np.mean([r["d_metric"] for r in rows])),
        per_object=rows, seed=seed, episodes_per_object=episodes_per_object)


def policy_action_fn(policy):
    """Uniform deterministic-action adapter for evaluation."""
    if isinstance(policy, MoeTeacher):
        return lambda obs: policy.act(obs, deterministic=True)[0]
    if isinstance(policy, (VisionPolicy, BasePolicy)):
        return policy.act
    return policy.deterministic_action


# -- metrics / report IO ---------------------------------------------------

def write_metrics_csv(path, rows, columns) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in columns])


def write_report(path, reports: dict) -> None:
    with open(path, "w") as f:
        json.dump({name: r.to_record() for name, r in reports.items()}, f,
                  indent=2, sort_keys=True)


def report_summary(reports: dict) -> str:
    lines = ["split            success   mean_D"]
    for name, rep in sorted(reports.items()):
        lines.append(f"{name:<16} {rep.success_rate:7.3f}  {rep.mean_d:8.2f}")
    return "\n".join(lines)


# -- pipeline --------------------------------------------------------------

def run_pipeline(cfg: ExperimentConfig, log=print) -> dict:
    """cluster -> k x train-base -> hyper stage 1 -> hyper stage 2 ->
    distill -> eval. Each stage is skipped when its checkpoint already
    exists, so a failed run resumes from the last finished stage."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset, proposals = load_dataset(cfg.dataset)
    dataset.check_split_hygiene()
    paths = pipeline_paths(cfg.out_dir, cfg.k)
    manifest = {"config_hash": cfg.config_hash(), "seed": cfg.seed,
                "stages": ["cluster", "train-base", "hyper-stage1",
                           "hyper-stage2", "distill", "eval"]}

    if not os.path.exists(paths["clusters"]):
        model = kmeans([o.code for o in dataset.train],
                       [o.id for o in dataset.train], cfg.k, seed=cfg.seed)
        with open(paths["clusters"], "w") as f:
            json.dump(model.to_record(), f, indent=2)
        log(f"clustered: representatives {model.representatives}")
    with open(paths["clusters"]) as f:
        reps = json.load(f)["representatives"]

    bases = []
    for i, rep in enumerate(reps):
        path = paths["base"][i]
        if not os.path.exists(path):
            policy, history = train_base_policy(dataset.train, proposals, rep,
                                                cfg, cfg.seed + i)
            policy.save(path, cfg.hidden)
            write_metrics_csv(path + ".metrics.csv", history,
                              ("iteration", "mean_reward", "success_rate",
                               "clip_fraction", "value_loss", "entropy"))
            log(f"base {i} (object {rep}): "
                f"success {history[-1]['success_rate']:.2f}")
        bases.append(BasePolicy.load(path))

    mask = ObservationMask.hyper()
    if not os.path.exists(paths["stage1"]):
        hyper, history = train_hyper_policy(dataset.train, proposals, bases,
                                            cfg, cfg.seed, stage=1)
        hyper.save(paths["stage1"], cfg.hidden, mask, stage=1)
        write_metrics_csv(paths["stage1"] + ".metrics.csv", history,
                          ("iteration", "mean_reward", "success_rate",
                           "clip_fraction", "value_loss", "entropy"))
        log(f"stage1: success {history[-1]['success_rate']:.2f}")
    hyper, _ = HyperPolicy.load(paths["stage1"])

    if not os.path.exists(paths["stage2"]):
        hyper, history = train_hyper_policy(dataset.train, proposals, bases,
                                            cfg, cfg.seed, stage=2, init=hyper)
        hyper.save(paths["stage2"], cfg.hidden, mask, stage=2)
        write_metrics_csv(paths["stage2"] + ".metrics.csv", history,
                          ("iteration", "mean_reward", "success_rate",
                           "clip_fraction", "value_loss", "entropy"))
        log(f"stage2: success {history[-1]['success_rate']:.2f}")
    hyper, _ = HyperPolicy.load(paths["stage2"])
    teacher = MoeTeacher(hyper, bases, mask)

    if not os.path.exists(paths["student"]):
        student, history = distill_student(dataset.train, proposals, teacher,
                                           cfg, cfg.seed)
        student.save(paths["student"])
        write_metrics_csv(paths["student"] + ".metrics.csv", history,
                          ("iteration", "label_mse", "success_rate"))
        log(f"student: label mse {history[-1]['label_mse']:.4f}")
    student = VisionPolicy.load(paths["student"])

    reports = {}
    for split in ("train", "test_seen", "test_unseen"):
        objs = getattr(dataset, split)
        reports["teacher_" + split] = evaluate(
            policy_action_fn(teacher), objs, proposals,
            cfg.eval_episodes_per_object, cfg.seed, cfg.env, split)
        reports["student_" + split] = evaluate(
            policy_action_fn(student), objs, proposals,
            cfg.eval_episodes_per_object, cfg.seed, cfg.env, split)
    write_report(paths["report"], reports)
    with open(paths["manifest"], "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    log(report_summary(reports))
    return {"paths": paths, "reports": reports}


def pipeline_paths(out_dir: str, k: int) -> dict:
    return {
        "clusters": os.path.join(out_dir, "clusters.json"),
        "base": [os.path.join(out_dir, f"base_{i}.rdx") for i in range(k)],
        "stage1": os.path.join(out_dir, "hyper_stage1.rdx"),
        "stage2": os.path.join(out_dir, "hyper_stage2.rdx"),
        "student": os.path.join(out_dir, "student.rdx"),
        "report": os.path.join(out_dir, "report.json"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }


# -- ablations -------------------------------------------------------------

def run_ablations(cfg: ExperimentConfig, log=print) -> dict:
    """Trains and evaluates the three ablation variants on shared splits:
    (a) weights-only hyper-policy (no residual head), (b) full-observation
    base policies, (c) base policies trained with the proposal reward."""
    os.makedirs(cfg.out_dir, exist_ok=True)
    dataset, proposals = load_dataset(cfg.dataset)
    model = kmeans([o.code for o in dataset.train],
                   [o.id for o in dataset.train], cfg.k, seed=cfg.seed)
    reps = model.representatives

    variants = {}
    bases = {}
    for name, mask, reward_kind in (
            ("geometry_unaware", ObservationMask.base(), "base"),
            ("full_obs", ObservationMask.hyper(), "base"),
            ("full_pose_reward", ObservationMask.base(), "stage1")):
        policies = []
        for i, rep in enumerate(reps):
            policy, _ = train_base_policy(dataset.train, proposals, rep, cfg,
                                          cfg.seed + i, mask=mask,
                                          reward_kind=reward_kind)
            policies.append(policy)
        bases[name] = policies
        report = evaluate(_mean_base_action(policies), dataset.train, proposals,
                          cfg.eval_episodes_per_object, cfg.seed, cfg.env, "train")
        variants["bases_" + name] = report
        log(f"bases_{name}: success {report.success_rate:.3f}")

    for name, use_residual in (("moe_res", True), ("moe_only", False)):
        hyper, _ = train_hyper_policy(dataset.train, proposals,
                                      bases["geometry_unaware"], cfg, cfg.seed,
                                      stage=1, use_residual=use_residual)
        teacher = MoeTeacher(hyper, bases["geometry_unaware"],
                             ObservationMask.hyper())
        report = evaluate(policy_action_fn(teacher), dataset.train, proposals,
                          cfg.eval_episodes_per_object, cfg.seed, cfg.env, "train")
        variants[name] = report
        log(f"{name}: success {report.success_rate:.3f}")

    write_report(os.path.join(cfg.out_dir, "ablations.json"), variants)
    return variants


def _mean_base_action(policies):
    def fn(obs):
        return np.clip(np.mean([p.act(obs) for p in policies], axis=0), -1.0, 1.0)
    return fn
