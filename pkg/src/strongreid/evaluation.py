"""Feature extraction and single-query CMC / mAP evaluation."""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from .data import AugmentConfig, IdentityDataset, preprocess_batch
from .losses import cross_distances
from .nets import ReIDNet, forward_infer


@dataclass(frozen=True)
class FeatureSet:
    features: np.ndarray
    person_ids: np.ndarray
    camera_ids: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        pids = np.asarray(self.person_ids, dtype=np.int64)
        cams = np.asarray(self.camera_ids, dtype=np.int64)
        if feats.ndim != 2:
            raise ValueError(f"features must be an M x D matrix, got shape {feats.shape}")
        if not len(feats) == len(pids) == len(cams):
            raise ValueError(f"row counts differ: {len(feats)} features, {len(pids)} ids, {len(cams)} cameras")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "person_ids", pids)
        object.__setattr__(self, "camera_ids", cams)

    def __len__(self):
        return len(self.features)


@dataclass
class EvalResult:
    cmc: np.ndarray
    mAP: float
    metric: str
    num_valid_queries: int
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def rank1(self) -> float:
        return float(self.cmc[0])

    def to_dict(self) -> dict:
        out = {"cmc": [float(c) for c in self.cmc], "mAP": float(self.mAP), "metric": self.metric,
               "num_valid_queries": int(self.num_valid_queries)}
        if self.label:
            out["label"] = self.label
        return out

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalResult":
        return cls(np.asarray(d["cmc"], dtype=np.float64), float(d["mAP"]), d["metric"],
                   int(d["num_valid_queries"]), d.get("label", ""))


def extract_features(model: ReIDNet, dataset: IdentityDataset, batch: int = 64,
                     cfg: AugmentConfig | None = None) -> FeatureSet:
    """Eval-mode retrieval features for every sample, in dataset order."""
    if len(dataset) == 0:
        raise ValueError("cannot extract features from an empty dataset")
    if cfg is None:
        cfg = AugmentConfig(target_size=dataset[0].image.shape[:2])
    was_training = model.training
    model.eval()
    chunks = []
    try:
        for i in range(0, len(dataset), batch):
            imgs = preprocess_batch((s.image for s in dataset.samples[i:i + batch]), cfg)
            chunks.append(forward_infer(model, imgs).double().numpy())
    finally:
        model.train(was_training)
    return FeatureSet(np.concatenate(chunks), dataset.person_ids, dataset.camera_ids)


def evaluate_distmat(distmat: np.ndarray, q_pids, g_pids, q_camids, g_camids,
                     max_rank: int = 50, metric: str = "euclidean") -> EvalResult:
    """CMC and mAP from a precomputed query x gallery distance matrix.

    Gallery items sharing both identity and camera with the query are
    dropped; queries left without any true match are skipped. Ties in
    distance keep gallery order.
    """
    distmat = np.asarray(distmat, dtype=np.float64)
    q_pids, g_pids = np.asarray(q_pids), np.asarray(g_pids)
    q_camids, g_camids = np.asarray(q_camids), np.asarray(g_camids)
    if max_rank < 1:
        raise ValueError(f"max_rank must be >= 1, got {max_rank}")
    if distmat.shape[1] == 0:
        raise ValueError("gallery is empty")

    all_cmc, all_ap = [], []
    for qi in range(distmat.shape[0]):
        order = np.argsort(distmat[qi], kind="stable")
        keep = ~((g_pids[order] == q_pids[qi]) & (g_camids[order] == q_camids[qi]))
        hits = (g_pids[order][keep] == q_pids[qi]).astype(np.float64)
        if not hits.any():
            continue
        first = int(np.argmax(hits))
        cmc = np.zeros(max_rank)
        cmc[first:] = 1.0
        all_cmc.append(cmc)
        precision = np.cumsum(hits) / np.arange(1, len(hits) + 1)
        all_ap.append(float((precision * hits).sum() / hits.sum()))

    if not all_cmc:
        raise ValueError("no query has a valid true match in the gallery")
    return EvalResult(np.mean(all_cmc, axis=0), float(np.mean(all_ap)), metric, len(all_cmc))


def evaluate(query: FeatureSet, gallery: FeatureSet, metric: str = "cosine", max_rank: int = 50) -> EvalResult:
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    dist = cross_distances(query.features, gallery.features, metric)
    return evaluate_distmat(dist, query.person_ids, gallery.person_ids,
                            query.camera_ids, gallery.camera_ids, max_rank, metric)


def cross_domain_eval(model: ReIDNet, query: IdentityDataset, gallery: IdentityDataset,
                      metric: str = "cosine", max_rank: int = 50, *, source: str = "",
                      cfg: AugmentConfig | None = None, batch: int = 64) -> EvalResult:
    """Evaluate a model trained on ``source`` against another domain's query/gallery."""
    target = query[0].domain_tag if len(query) else ""
    result = evaluate(extract_features(model, query, batch, cfg), extract_features(model, gallery, batch, cfg),
                      metric, max_rank)
    result.label = f"{source or '?'}->{target}"
    return result


def export_embeddings(features: FeatureSet, path) -> str:
    """CSV with ``person_id, camera_id, f0 .. f{D-1}``."""
    if len(features) == 0:
        raise ValueError("refusing to export an empty feature set")
    d = features.features.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["person_id", "camera_id", *[f"f{j}" for j in range(d)]])
        for pid, cam, row in zip(features.person_ids, features.camera_ids, features.features):
            writer.writerow([int(pid), int(cam), *[repr(float(v)) for v in row]])
    return os.fspath(path)


def load_embeddings(path) -> FeatureSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [r for r in reader]
    arr = np.array(rows, dtype=np.float64)
    return FeatureSet(arr[:, 2:], arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64))


def features_from_model(model: ReIDNet, dataset: IdentityDataset, which: str = "f_i",
                        cfg: AugmentConfig | None = None, batch: int = 64) -> FeatureSet:
    """Either the pre-BN (``f_t``) or post-BN (``f_i``) eval-mode features."""
    if which == "f_i":
        return extract_features(model, dataset, batch, cfg)
    if which != "f_t":
        raise ValueError(f"which must be 'f_t' or 'f_i', got {which!r}")
    if cfg is None:
        cfg = AugmentConfig(target_size=dataset[0].image.shape[:2])
    was_training = model.training
    model.eval()
    chunks = []
    try:
        with torch.no_grad():
            for i in range(0, len(dataset), batch):
                imgs = preprocess_batch((s.image for s in dataset.samples[i:i + batch]), cfg)
                x = torch.from_numpy(imgs).permute(0, 3, 1, 2)
                chunks.append(model.pool(model.backbone(x)).flatten(1).double().numpy())
    finally:
        model.train(was_training)
    return FeatureSet(np.concatenate(chunks), dataset.person_ids, dataset.camera_ids)
