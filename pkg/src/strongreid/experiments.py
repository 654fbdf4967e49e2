"""Training runs, the cumulative trick ablation and batch/image size sweeps."""
from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass

from .config import TRICKS, ExperimentConfig, baseline
from .data import IdentityDataset, load_manifest, make_benchmark
from .estimator import ReIDEstimator, write_log_csv
from .evaluation import EvalResult, evaluate, features_from_model
from .exceptions import ConfigurationError, SamplingError
from .validation import seed_streams

logger = logging.getLogger(__name__)

OUTPUT_ENV = "STRONGREID_OUTPUT_ROOT"

# cumulative rows, each adding one trick to the previous one
ABLATION_STEPS = (
    ("baseline", None),
    ("+warmup", "warmup"),
    ("+REA", "rea"),
    ("+LS", "label_smooth"),
    ("+stride=1", "last_stride_1"),
    ("+BNNeck", "bnneck"),
    ("+center loss", "center"),
)


def output_root() -> str:
    return os.environ.get(OUTPUT_ENV, "runs")


def load_domain(cfg: ExperimentConfig, domain: str) -> dict[str, IdentityDataset]:
    """Train/query/gallery splits for one domain, synthetic unless a manifest is set."""
    if cfg.data_manifest:
        splits = load_manifest(cfg.data_manifest, domain_tag=domain)
        missing = {"train", "query", "gallery"} - set(splits)
        if missing:
            raise ConfigurationError(f"manifest {cfg.data_manifest} has no {sorted(missing)} split for domain {domain!r}")
        return splits
    return make_benchmark(cfg.num_train_ids, cfg.num_test_ids, cfg.imgs_per_id, tuple(cfg.synthetic_size),
                          domain, seed_streams(cfg.seed)["dataset"], cfg.num_cameras)


def check_feasible(cfg: ExperimentConfig, train: IdentityDataset) -> None:
    n = train.num_identities
    if cfg.P > n:
        raise SamplingError(f"P={cfg.P} exceeds the {n} training identities (batch {cfg.P}x{cfg.K})")


def train(cfg: ExperimentConfig, data: dict[str, IdentityDataset] | None = None,
          out_dir: str | None = None) -> tuple[ReIDEstimator, EvalResult]:
    """Fit one model and evaluate it on its own domain's query/gallery split.

    With ``out_dir`` the checkpoint, training log and evaluation JSON are
    written there.
    """
    data = data or load_domain(cfg, cfg.domain)
    check_feasible(cfg, data["train"])
    est = ReIDEstimator(**cfg.estimator_params()).fit(data["train"])
    result = est.evaluate(data["query"], data["gallery"], cfg.eval_metric, cfg.max_rank)
    result.label = f"{cfg.domain}->{cfg.domain}"
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        est.save(os.path.join(out_dir, "checkpoint.pt"))
        write_log_csv(est.training_log_, os.path.join(out_dir, "train_log.csv"))
        result.to_json(os.path.join(out_dir, "eval.json"))
        with open(os.path.join(out_dir, "config.cfg"), "w") as fh:
            fh.write(cfg.to_text())
    return est, result


@dataclass
class TableRow:
    config: str
    train_domain: str
    eval_domain: str
    rank1: float
    mAP: float

    def as_dict(self) -> dict:
        return {"config": self.config, "train_domain": self.train_domain, "eval_domain": self.eval_domain,
                "rank1": self.rank1, "mAP": self.mAP}


def ablation_configs(base_cfg: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The seven cumulative configurations plus 'all tricks minus REA'."""
    cfg = baseline(base_cfg)
    out = []
    for name, trick in ABLATION_STEPS:
        if trick:
            cfg = cfg.with_tricks(**{trick: True})
        out.append((name, cfg))
    out.append(("-REA", base_cfg.with_tricks(**{t: True for t in TRICKS}).with_tricks(rea=False)))
    return out


def run_ablation(base_cfg: ExperimentConfig, data_a=None, data_b=None, out_path: str | None = None,
                 configs: list[tuple[str, ExperimentConfig]] | None = None) -> list[TableRow]:
    """Train every ablation configuration on domain A, evaluate on A and on B."""
    data_a = data_a or load_domain(base_cfg, base_cfg.domain)
    data_b = data_b or load_domain(base_cfg, base_cfg.cross_domain)
    a, b = base_cfg.domain, base_cfg.cross_domain
    rows = []
    for name, cfg in configs or ablation_configs(base_cfg):
        logger.info("ablation: training %s", name)
        est, same = train(cfg, data_a)
        cross = est.evaluate(data_b["query"], data_b["gallery"], cfg.eval_metric, cfg.max_rank)
        rows.append(TableRow(name, a, a, same.rank1, same.mAP))
        rows.append(TableRow(name, a, b, cross.rank1, cross.mAP))
    if out_path:
        write_table(rows, out_path)
    return rows


def wide_table(rows: list[TableRow]) -> list[dict]:
    """One line per config with ``r=1`` / ``mAP`` columns for each evaluation domain."""
    out: dict[str, dict] = {}
    for r in rows:
        line = out.setdefault(r.config, {"model": r.config})
        key = f"{r.train_domain}->{r.eval_domain}"
        line[f"{key} r=1"] = r.rank1
        line[f"{key} mAP"] = r.mAP
    return list(out.values())


def write_table(rows: list[TableRow], path: str) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["config", "train_domain", "eval_domain", "rank1", "mAP"],
                                lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow(r.as_dict())


def sweep(base_cfg: ExperimentConfig, axis: str, values, data=None, out_path: str | None = None) -> list[dict]:
    """Retrain with one axis changed per value.

    ``axis="batch_size"`` takes ``(P, K)`` pairs, ``axis="image_size"`` takes
    ``(height, width)`` pairs. Everything else in ``base_cfg`` is kept.
    """
    if axis not in ("batch_size", "image_size"):
        raise ConfigurationError(f"sweep axis must be 'batch_size' or 'image_size', got {axis!r}")
    data = data or load_domain(base_cfg, base_cfg.domain)
    variants = []
    for v in values:
        if len(v) != 2:
            raise ConfigurationError(f"sweep values are pairs, got {v!r}")
        if axis == "batch_size":
            cfg = base_cfg.replace(P=int(v[0]), K=int(v[1]))
            label = f"{v[0]}x{v[1]}"
        else:
            cfg = base_cfg.replace(image_size=(int(v[0]), int(v[1])))
            label = f"{v[0]}x{v[1]}"
        check_feasible(cfg, data["train"])
        variants.append((label, cfg))
    rows = []
    for label, cfg in variants:
        logger.info("sweep %s: training %s", axis, label)
        _, result = train(cfg, data)
        rows.append({axis: label, "rank1": result.rank1, "mAP": result.mAP})
    if out_path:
        with open(out_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=[axis, "rank1", "mAP"], lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return rows


def feature_metric_table(est: ReIDEstimator, query: IdentityDataset, gallery: IdentityDataset,
                         max_rank: int = 50) -> list[dict]:
    """Retrieval quality of pre-BN and post-BN features under both metrics."""
    cfg = est.augment_config()
    rows = []
    for which in ("f_t", "f_i"):
        q = features_from_model(est.model_, query, which, cfg)
        g = features_from_model(est.model_, gallery, which, cfg)
        for metric in ("euclidean", "cosine"):
            r = evaluate(q, g, metric, max_rank)
            rows.append({"feature": which, "metric": metric, "rank1": r.rank1, "mAP": r.mAP})
    return rows
