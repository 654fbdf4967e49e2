"""sklearn-compatible estimator wrapping the full training pipeline.

``ReIDEstimator.fit`` trains a backbone with ID + triplet (+ center) loss on
P x K batches; ``transform`` maps images to retrieval embeddings. Every
training trick is a constructor flag, so ``get_params`` / ``set_params`` /
``sklearn.base.clone`` work for ablations and sweeps.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import AugmentConfig, IdentityDataset, ReIDSample, augment_batch, iter_epoch, preprocess_batch
from .evaluation import EvalResult, FeatureSet, evaluate, extract_features
from .exceptions import ConfigurationError, SamplingError, TrainingError
from .losses import (ClassCenters, LossToggles, center_loss, id_loss, total_loss, triplet_loss,
                     update_centers)
from .nets import BackboneConfig, build_model, forward_infer, forward_train, load_checkpoint, save_checkpoint
from .schedule import LRSchedule, lr_at
from .validation import check_images, check_labels, seed_streams

logger = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "iter", "id", "tri", "cen", "total", "active_fraction", "lr")


@dataclass(frozen=True)
class TrainLogRecord:
    epoch: int
    iter: int
    id: float
    tri: float
    cen: float
    total: float
    active_fraction: float
    lr: float


def write_log_csv(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in records:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in asdict(r).items()})


def read_log_csv(path) -> list[TrainLogRecord]:
    with open(path, newline="") as fh:
        return [TrainLogRecord(int(r["epoch"]), int(r["iter"]), *(float(r[k]) for k in LOG_FIELDS[2:]))
                for r in csv.DictReader(fh)]


class ReIDEstimator(TransformerMixin, BaseEstimator):
    """Person ReID embedding model with independently switchable tricks.

    Parameters
    ----------
    warmup, rea, label_smooth, last_stride_1, bnneck, center : bool
        The six training tricks. All ``False`` gives the standard baseline:
        constant-then-decayed learning rate, no random erasing, plain cross
        entropy, last stride 2, one shared feature with a biased classifier
        and no center loss.
    image_size : (int, int)
        Network input (height, width); images are resized to it.
    P, K : int
        Identities per batch and images per identity.
    base_lr, total_epochs, decay_epochs, decay_factor, warmup_epochs :
        Adam learning-rate schedule, see :class:`strongreid.schedule.LRSchedule`.
    epsilon, margin, beta, center_lr :
        Label smoothing strength, triplet margin, center loss weight and the
        step size of the separate center update.
    eval_metric : {"cosine", "euclidean"}
        Metric used by :meth:`evaluate`.
    seed : int
        Master seed; sampler, augmentation and weight init use derived streams.
    """

    def __init__(self, *, arch="tiny_cnn", feature_dim=64, pretrained=False, image_size=(256, 128),
                 P=16, K=4, base_lr=3.5e-4, total_epochs=120, decay_epochs=(40, 70), decay_factor=0.1,
                 warmup_epochs=10, warmup=True, rea=True, label_smooth=True, last_stride_1=True,
                 bnneck=True, center=True, epsilon=0.1, margin=0.3, beta=0.0005, center_lr=0.5,
                 pad=10, flip_prob=0.5, rea_prob=0.5, rea_fill="mean", triplet_mining="batch_hard",
                 weight_decay=0.0, eval_metric="cosine", seed=0, verbose=False):
        self.arch = arch
        self.feature_dim = feature_dim
        self.pretrained = pretrained
        self.image_size = image_size
        self.P = P
        self.K = K
        self.base_lr = base_lr
        self.total_epochs = total_epochs
        self.decay_epochs = decay_epochs
        self.decay_factor = decay_factor
        self.warmup_epochs = warmup_epochs
        self.warmup = warmup
        self.rea = rea
        self.label_smooth = label_smooth
        self.last_stride_1 = last_stride_1
        self.bnneck = bnneck
        self.center = center
        self.epsilon = epsilon
        self.margin = margin
        self.beta = beta
        self.center_lr = center_lr
        self.pad = pad
        self.flip_prob = flip_prob
        self.rea_prob = rea_prob
        self.rea_fill = rea_fill
        self.triplet_mining = triplet_mining
        self.weight_decay = weight_decay
        self.eval_metric = eval_metric
        self.seed = seed
        self.verbose = verbose

    # -- derived configuration -------------------------------------------------

    def schedule(self) -> LRSchedule:
        return LRSchedule(base_lr=self.base_lr, warmup_epochs=self.warmup_epochs if self.warmup else 0,
                          decay_epochs=tuple(self.decay_epochs), decay_factor=self.decay_factor,
                          total_epochs=self.total_epochs)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(target_size=tuple(self.image_size), pad=self.pad, flip_prob=self.flip_prob,
                             rea_prob=self.rea_prob, rea_fill=self.rea_fill)

    def backbone_config(self) -> BackboneConfig:
        dim = 2048 if self.arch == "resnet50" else self.feature_dim
        return BackboneConfig(arch=self.arch, last_stride=1 if self.last_stride_1 else 2,
                              feature_dim=dim, pretrained=self.pretrained, bnneck=self.bnneck)

    @property
    def effective_epsilon(self) -> float:
        return self.epsilon if self.label_smooth else 0.0

    def _validate_params(self):
        if self.P < 2 and self.K < 2:
            raise ConfigurationError("a P x K batch needs at least 2 images")
        if self.P < 2:
            raise ConfigurationError(f"triplet loss needs P >= 2 identities per batch, got P={self.P}")
        if self.K < 2:
            raise ConfigurationError(f"triplet loss needs K >= 2 images per identity, got K={self.K}")
        if self.eval_metric not in ("cosine", "euclidean"):
            raise ConfigurationError(f"eval_metric must be 'cosine' or 'euclidean', got {self.eval_metric!r}")
        self.schedule()
        self.augment_config()
        self.backbone_config()

    # -- fitting ---------------------------------------------------------------

    def _as_dataset(self, X, y=None, camera_ids=None) -> IdentityDataset:
        if isinstance(X, IdentityDataset):
            return X
        X = check_images(X)
        y = check_labels(y, len(X))
        cams = np.zeros(len(X), dtype=np.int64) if camera_ids is None else check_labels(camera_ids, len(X))
        return IdentityDataset(tuple(ReIDSample(img, int(p), int(c)) for img, p, c in zip(X, y, cams)), "train")

    def fit(self, X, y=None, camera_ids=None):
        """Train on images ``X`` (``n x H x W x 3`` in [0, 1]) with identities ``y``.

        ``X`` may also be an :class:`IdentityDataset`, in which case ``y`` is
        ignored.
        """
        self._validate_params()
        dataset = self._as_dataset(X, y, camera_ids)
        self.classes_ = np.unique(dataset.person_ids)
        if len(self.classes_) < 2:
            raise ConfigurationError("training needs at least 2 identities")
        if self.P > len(self.classes_):
            raise SamplingError(f"P={self.P} exceeds the {len(self.classes_)} training identities")
        label_of = {int(c): i for i, c in enumerate(self.classes_)}
        encoded = np.array([label_of[int(p)] for p in dataset.person_ids], dtype=np.int64)

        streams = seed_streams(self.seed)
        sampler_rng = np.random.default_rng(streams["sampler"])
        augment_rng = np.random.default_rng(streams["augment"])
        torch.manual_seed(streams["init"])
        self.model_ = build_model(self.backbone_config(), len(self.classes_))
        self.centers_ = ClassCenters.zeros(len(self.classes_), self.model_.feature_dim) if self.center else None

        schedule = self.schedule()
        aug = self.augment_config()
        toggles = LossToggles(id=True, triplet=True, center=self.center)
        optimizer = torch.optim.Adam(self.model_.parameters(), lr=lr_at(schedule, 1), weight_decay=self.weight_decay)
        self.training_log_: list[TrainLogRecord] = []
        self.model_.train()

        step = 0
        for epoch in range(1, schedule.total_epochs + 1):
            lr = lr_at(schedule, epoch)
            for group in optimizer.param_groups:
                group["lr"] = lr
            for batch in iter_epoch(dataset, self.P, self.K, sampler_rng):
                images = augment_batch(batch.images, aug, augment_rng, erase=self.rea)
                labels = torch.from_numpy(encoded[batch.indices])
                bundle = forward_train(self.model_, images)
                l_id = id_loss(bundle.logits, labels, self.effective_epsilon)
                l_tri, active = triplet_loss(bundle.f_t, labels, self.margin, self.triplet_mining)
                l_cen = center_loss(bundle.f_t, labels, self.centers_) if self.center else 0.0
                report = total_loss(l_id, l_tri, l_cen, self.beta, toggles, active)
                if not math.isfinite(report.total):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, iteration {step}: "
                                        f"id={report.id_loss} tri={report.triplet_loss} cen={report.center_loss}")
                optimizer.zero_grad()
                report.tensor.backward()
                optimizer.step()
                if self.center:
                    self.centers_ = update_centers(self.centers_, bundle.f_t, labels, self.center_lr)
                self.training_log_.append(TrainLogRecord(epoch, step, report.id_loss, report.triplet_loss,
                                                         report.center_loss, report.total,
                                                         report.active_triplet_fraction, lr))
                step += 1
            if self.verbose:
                last = self.training_log_[-1]
                logger.info("epoch %d lr %.2e id %.4f tri %.4f total %.4f", epoch, lr, last.id, last.tri, last.total)
        self.model_.eval()
        return self

    # -- inference -------------------------------------------------------------

    def transform(self, X) -> np.ndarray:
        """Retrieval embeddings (``f_i`` with BNNeck, pooled ``f`` without)."""
        check_is_fitted(self, "model_")
        if isinstance(X, IdentityDataset):
            return extract_features(self.model_, X, cfg=self.augment_config()).features
        X = check_images(X)
        out = [forward_infer(self.model_, preprocess_batch(X[i:i + 64], self.augment_config())).double().numpy()
               for i in range(0, len(X), 64)]
        return np.concatenate(out)

    def predict(self, X) -> np.ndarray:
        """Most likely training identity for each image."""
        feats = torch.from_numpy(self.transform(X)).to(self.model_.classifier.weight.dtype)
        with torch.no_grad():
            logits = self.model_.classifier(feats)
        return self.classes_[logits.argmax(dim=1).numpy()]

    def features(self, dataset: IdentityDataset) -> FeatureSet:
        check_is_fitted(self, "model_")
        return extract_features(self.model_, dataset, cfg=self.augment_config())

    def evaluate(self, query: IdentityDataset, gallery: IdentityDataset, metric: str | None = None,
                 max_rank: int = 50) -> EvalResult:
        return evaluate(self.features(query), self.features(gallery), metric or self.eval_metric, max_rank)

    def score(self, query: IdentityDataset, gallery: IdentityDataset) -> float:
        """mAP of the query set against the gallery."""
        return self.evaluate(query, gallery).mAP

    # -- persistence -----------------------------------------------------------

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        params = {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()}
        save_checkpoint(path, self.model_, estimator_params=params,
                        classes=torch.from_numpy(self.classes_),
                        centers=None if self.centers_ is None else self.centers_.centers)

    @classmethod
    def load(cls, path) -> "ReIDEstimator":
        model, payload = load_checkpoint(path)
        params = dict(payload["estimator_params"])
        for key in ("image_size", "decay_epochs"):
            params[key] = tuple(params[key])
        est = cls(**params)
        est.model_ = model
        est.classes_ = payload["classes"].numpy()
        est.centers_ = None if payload.get("centers") is None else ClassCenters(payload["centers"])
        est.training_log_ = []
        return est
