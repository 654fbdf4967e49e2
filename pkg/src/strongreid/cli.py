"""Command-line entry point: ``strongreid <subcommand> [--key value ...]``.

Every ExperimentConfig key is accepted as ``--key value`` and overrides the
config file given with ``--config``. Outputs go under ``--out`` or, if that
is not set, under ``$STRONGREID_OUTPUT_ROOT`` (default ``runs``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import experiments
from .config import ExperimentConfig, config_keys, load_config, parse_value, toy_config
from .data import make_benchmark, save_dataset
from .estimator import ReIDEstimator
from .evaluation import evaluate, export_embeddings
from .exceptions import ConfigurationError, SamplingError, ScheduleError, TrainingError
from .nets import build_model, describe, load_checkpoint
from .schedule import schedule_csv
from .validation import seed_streams


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=("full", "toy"), default="full",
                   help="defaults the config file and flags start from")
    group = p.add_argument_group("config overrides")
    for key in config_keys():
        group.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")


def _config_from(args) -> ExperimentConfig:
    base = toy_config() if args.preset == "toy" else ExperimentConfig()
    cfg = load_config(args.config, base) if args.config else base
    overrides = {k: parse_value(k, getattr(args, f"cfg_{k}")) for k in config_keys()
                 if getattr(args, f"cfg_{k}", None) is not None}
    return cfg.replace(**overrides) if overrides else cfg


def _out_dir(args, name: str) -> str:
    path = args.out or os.path.join(experiments.output_root(), name)
    os.makedirs(path, exist_ok=True)
    return path


def cmd_make_data(args) -> None:
    cfg = _config_from(args)
    out = _out_dir(args, "data")
    seed = seed_streams(cfg.seed)["dataset"]
    manifest = None
    for domain in args.domains.split(","):
        b = make_benchmark(cfg.num_train_ids, cfg.num_test_ids, cfg.imgs_per_id, tuple(cfg.synthetic_size),
                           domain, seed, cfg.num_cameras)
        manifest = save_dataset(b, out)
    print(manifest)


def cmd_train(args) -> None:
    cfg = _config_from(args)
    out = _out_dir(args, "train")
    _, result = experiments.train(cfg, out_dir=out)
    print(result.to_json())


def cmd_eval(args) -> None:
    cfg = _config_from(args)
    est = ReIDEstimator.load(args.checkpoint)
    domain = cfg.domain
    data = experiments.load_domain(cfg, domain)
    metric = args.metric or est.eval_metric
    q, g = est.features(data["query"]), est.features(data["gallery"])
    result = evaluate(q, g, metric, cfg.max_rank)
    result.label = f"?->{domain}"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        result.to_json(os.path.join(args.out, "eval.json"))
    if args.embeddings:
        export_embeddings(q, args.embeddings)
    print(result.to_json())


def cmd_ablate(args) -> None:
    cfg = _config_from(args)
    out = _out_dir(args, "ablation")
    rows = experiments.run_ablation(cfg, out_path=os.path.join(out, "ablation.csv"))
    for line in experiments.wide_table(rows):
        print(json.dumps(line))


def _pairs(text: str) -> list[tuple[int, int]]:
    pairs = []
    for item in text.split(","):
        a, b = item.lower().split("x")
        pairs.append((int(a), int(b)))
    return pairs


def cmd_sweep(args) -> None:
    cfg = _config_from(args)
    out = _out_dir(args, f"sweep_{args.axis}")
    rows = experiments.sweep(cfg, args.axis, _pairs(args.values), out_path=os.path.join(out, f"{args.axis}.csv"))
    for r in rows:
        print(json.dumps(r))


def cmd_dump_schedule(args) -> None:
    cfg = _config_from(args)
    text = schedule_csv(ReIDEstimator(**cfg.estimator_params()).schedule())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_inspect(args) -> None:
    if args.checkpoint:
        model, payload = load_checkpoint(args.checkpoint)
        size = tuple(payload.get("estimator_params", {}).get("image_size", (256, 128)))
    else:
        cfg = _config_from(args)
        est = ReIDEstimator(**cfg.estimator_params())
        model = build_model(est.backbone_config(), args.num_classes)
        size = tuple(cfg.image_size)
    print("\n".join(describe(model, size)))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strongreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="render a synthetic dataset with a manifest")
    p.add_argument("--out")
    p.add_argument("--domains", default="A,B", help="comma separated domain tags")
    _add_config_args(p)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="train one model and evaluate it")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--embeddings", help="also write query embeddings to this CSV")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cumulative trick ablation, same and cross domain")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="batch-size or image-size sweep")
    p.add_argument("--axis", choices=("batch_size", "image_size"), required=True)
    p.add_argument("--values", required=True, help="e.g. 8x4,16x4,32x4")
    p.add_argument("--out")
    _add_config_args(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dump-schedule", help="write the per-epoch learning rate as CSV")
    p.add_argument("--out", help="file to write (default stdout)")
    _add_config_args(p)
    p.set_defaults(func=cmd_dump_schedule)

    p = sub.add_parser("inspect", help="print layer shapes of a checkpoint or config")
    p.add_argument("--checkpoint")
    p.add_argument("--num-classes", type=int, default=751)
    _add_config_args(p)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigurationError, SamplingError, ScheduleError, TrainingError, FileNotFoundError, KeyError) as exc:
        print(f"strongreid {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
