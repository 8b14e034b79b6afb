"""Command-line entry points: gen-objects, cluster, train-base, train-hyper,
distill, eval, ablate, pipeline.
"""

from __future__ import annotations

import argparse
import json
import os

import numpy as np

from . import shapes
from .clustering import kmeans
from .harness import (ExperimentConfig, distill_student, evaluate,
                      generate_dataset, load_dataset, pipeline_paths,
                      policy_action_fn, report_summary, run_ablations,
                      run_pipeline, train_base_policy, train_hyper_policy,
                      write_metrics_csv, write_report)
from .policies import BasePolicy, HyperPolicy, MoeTeacher, ObservationMask, VisionPolicy


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    return cfg


def cmd_gen_objects(args):
    counts = {"train": args.train, "test_seen": args.test_seen,
              "test_unseen": args.test_unseen}
    dataset, proposals = generate_dataset(args.seed or 0, counts)
    shapes.save_dataset(args.out, dataset, proposals)
    print(f"wrote {len(dataset.all_objects())} objects to {args.out}")


def cmd_cluster(args):
    dataset, _ = load_dataset(args.objects)
    model = kmeans([o.code for o in dataset.train],
                   [o.id for o in dataset.train], args.k, seed=args.seed or 0)
    with open(args.out, "w") as f:
        json.dump(model.to_record(), f, indent=2)
    print(f"representatives: {model.representatives}")


def cmd_train_base(args):
    cfg = _load_config(args)
    dataset, proposals = load_dataset(cfg.dataset)
    policy, history = train_base_policy(dataset.train, proposals,
                                        args.object_id, cfg, cfg.seed)
    policy.save(args.out, cfg.hidden)
    write_metrics_csv(args.out + ".metrics.csv", history,
                      ("iteration", "mean_reward", "success_rate",
                       "clip_fraction", "value_loss", "entropy"))
    print(f"final success rate: {history[-1]['success_rate']:.3f}")


def cmd_train_hyper(args):
    cfg = _load_config(args)
    dataset, proposals = load_dataset(cfg.dataset)
    bases = [BasePolicy.load(p) for p in args.bases]
    init = None
    if args.stage == 2:
        if not args.resume:
            raise SystemExit("--stage 2 requires --resume STAGE1_CKPT")
        init, _ = HyperPolicy.load(args.resume)
    hyper, history = train_hyper_policy(dataset.train, proposals, bases, cfg,
                                        cfg.seed, stage=args.stage, init=init)
    hyper.save(args.out, cfg.hidden, ObservationMask.hyper(), stage=args.stage)
    write_metrics_csv(args.out + ".metrics.csv", history,
                      ("iteration", "mean_reward", "success_rate",
                       "clip_fraction", "value_loss", "entropy"))
    print(f"final success rate: {history[-1]['success_rate']:.3f}")


def cmd_distill(args):
    cfg = _load_config(args)
    dataset, proposals = load_dataset(cfg.dataset)
    hyper, mask = HyperPolicy.load(args.teacher)
    bases = [BasePolicy.load(p) for p in args.bases]
    teacher = MoeTeacher(hyper, bases, mask)
    student, history = distill_student(dataset.train, proposals, teacher, cfg,
                                       cfg.seed)
    student.save(args.out)
    write_metrics_csv(args.out + ".metrics.csv", history,
                      ("iteration", "label_mse", "success_rate"))
    print(f"final label mse: {history[-1]['label_mse']:.5f}")


def _load_policy(path):
    for loader in (BasePolicy.load, VisionPolicy.load):
        try:
            return loader(path)
        except ValueError:
            pass
    HyperPolicy.load(path)  # raises ValueError for unknown checkpoint kinds
    raise SystemExit("hyper checkpoints need --bases: pass the base-policy "
                     "checkpoints the hyper-policy was trained with")


def cmd_eval(args):
    cfg = _load_config(args)
    dataset, proposals = load_dataset(cfg.dataset)
    if args.bases:
        hyper, mask = HyperPolicy.load(args.ckpt)
        policy = MoeTeacher(hyper, [BasePolicy.load(p) for p in args.bases], mask)
    else:
        policy = _load_policy(args.ckpt)
    reports = {}
    for split in args.splits:
        reports[split] = evaluate(policy_action_fn(policy),
                                  getattr(dataset, split), proposals,
                                  cfg.eval_episodes_per_object, cfg.seed,
                                  cfg.env, split)
    if args.out:
        write_report(args.out, reports)
    print(report_summary(reports))


def cmd_pipeline(args):
    cfg = _load_config(args)
    run_pipeline(cfg)


def cmd_ablate(args):
    cfg = _load_config(args)
    run_ablations(cfg)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="planargrasp")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default=None):
        p.add_argument("--config", default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=out_default)

    p = sub.add_parser("gen-objects", help="generate the object dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--test-seen", type=int, default=40)
    p.add_argument("--test-unseen", type=int, default=40)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_objects)

    p = sub.add_parser("cluster", help="k-means over training-object features")
    p.add_argument("--objects", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_cluster)

    p = sub.add_parser("train-base", help="train one geometry-unaware expert")
    common(p)
    p.add_argument("--object-id", type=int, required=True)
    p.set_defaults(fn=cmd_train_base)

    p = sub.add_parser("train-hyper", help="train the residual MoE hyper-policy")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--bases", nargs="+", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train_hyper)

    p = sub.add_parser("distill", help="distill the teacher into the student")
    common(p)
    p.add_argument("--teacher", required=True)
    p.add_argument("--bases", nargs="+", required=True)
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("eval", help="evaluate a checkpoint on dataset splits")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bases", nargs="*", default=[])
    p.add_argument("--splits", nargs="+",
                   default=["train", "test_seen", "test_unseen"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("pipeline", help="run the full three-phase pipeline")
    common(p)
    p.set_defaults(fn=cmd_pipeline)

    p = sub.add_parser("ablate", help="train and evaluate ablation variants")
    common(p)
    p.set_defaults(fn=cmd_ablate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
