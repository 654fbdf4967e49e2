"""Training objectives: label-smoothed ID loss, batch-hard triplet, center loss.

All losses are written in torch so they can be backpropagated; they accept
numpy arrays too and then keep the input dtype (float64 stays float64).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F

from .exceptions import ConfigurationError


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = 0.1
    margin: float = 0.3
    beta: float = 0.0005
    num_classes: int = 0
    triplet_metric: Literal["euclidean"] = "euclidean"
    triplet_mining: Literal["batch_hard", "all"] = "batch_hard"

    def __post_init__(self):
        if not 0.0 <= self.epsilon < 1.0:
            raise ConfigurationError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.margin < 0:
            raise ConfigurationError(f"margin must be >= 0, got {self.margin}")
        if self.beta < 0:
            raise ConfigurationError(f"beta must be >= 0, got {self.beta}")
        if self.triplet_metric != "euclidean":
            raise ConfigurationError(f"triplet_metric must be 'euclidean', got {self.triplet_metric!r}")
        if self.triplet_mining not in ("batch_hard", "all"):
            raise ConfigurationError(f"triplet_mining must be 'batch_hard' or 'all', got {self.triplet_mining!r}")


@dataclass(frozen=True)
class LossToggles:
    id: bool = True
    triplet: bool = True
    center: bool = True


@dataclass
class LossReport:
    id_loss: float
    triplet_loss: float
    center_loss: float
    total: float
    active_triplet_fraction: float = 0.0
    tensor: torch.Tensor | None = None

    def as_row(self) -> dict[str, float]:
        return {"id": self.id_loss, "tri": self.triplet_loss, "cen": self.center_loss,
                "total": self.total, "active_fraction": self.active_triplet_fraction}


@dataclass
class ClassCenters:
    centers: torch.Tensor

    @classmethod
    def zeros(cls, num_classes: int, dim: int, dtype=torch.float32) -> "ClassCenters":
        return cls(torch.zeros(num_classes, dim, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.centers.shape[0]


def _tensor(x, dtype=None) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    arr = np.asarray(x)
    if dtype is None and arr.dtype.kind in "iu":
        return torch.as_tensor(arr, dtype=torch.long)
    return torch.as_tensor(arr, dtype=dtype)


def smooth_labels(y: int, num_classes: int, epsilon: float) -> np.ndarray:
    """Target distribution with ``1 - (N-1)/N * eps`` on the true class."""
    if not 0 <= y < num_classes:
        raise ValueError(f"label {y} outside [0, {num_classes})")
    q = np.full(num_classes, epsilon / num_classes)
    q[y] = 1.0 - (num_classes - 1) / num_classes * epsilon
    return q


def _smoothed_targets(labels: torch.Tensor, num_classes: int, epsilon: float, dtype) -> torch.Tensor:
    q = torch.full((labels.shape[0], num_classes), epsilon / num_classes, dtype=dtype, device=labels.device)
    q.scatter_(1, labels[:, None], 1.0 - (num_classes - 1) / num_classes * epsilon)
    return q


def id_loss(logits, labels, epsilon: float = 0.0) -> torch.Tensor:
    """Cross entropy against label-smoothed targets, averaged over the batch."""
    logits = _tensor(logits)
    labels = _tensor(labels).long()
    n = logits.shape[1]
    if labels.numel() and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"labels must lie in [0, {n})")
    q = _smoothed_targets(labels, n, epsilon, logits.dtype)
    return -(q * F.log_softmax(logits, dim=1)).sum(dim=1).mean()


def cross_distances(a, b, metric: str = "euclidean"):
    """Distance matrix between the rows of ``a`` and the rows of ``b``.

    Works on numpy arrays (returns numpy) and torch tensors (differentiable).
    """
    if metric not in ("euclidean", "cosine"):
        raise ConfigurationError(f"unknown metric {metric!r}")
    as_numpy = not isinstance(a, torch.Tensor)
    ta, tb = _tensor(a), _tensor(b)
    if ta.ndim != 2 or tb.ndim != 2 or ta.shape[1] != tb.shape[1] or ta.shape[1] < 1:
        raise ValueError(f"expected two (n, D) matrices with D >= 1, got {tuple(ta.shape)} and {tuple(tb.shape)}")
    if metric == "euclidean":
        rows = []
        # row blocks bound the (block, n_b, D) difference tensor
        step = max(1, 2**22 // max(1, tb.shape[0] * tb.shape[1]))
        for i in range(0, ta.shape[0], step):
            diff = ta[i:i + step, None, :] - tb[None, :, :]
            sq = (diff * diff).sum(dim=-1)
            rows.append(torch.sqrt(sq.clamp_min(1e-24)) * (sq > 1e-24))
        dist = torch.cat(rows) if rows else ta.new_zeros((0, tb.shape[0]))
    else:
        na, nb = ta.norm(dim=1), tb.norm(dim=1)
        if (na == 0).any() or (nb == 0).any():
            raise ValueError("cosine distance is undefined for zero-norm vectors")
        dist = 1.0 - (ta @ tb.T) / (na[:, None] * nb[None, :])
    return dist.detach().numpy() if as_numpy else dist


def pairwise_distances(features, metric: str = "euclidean"):
    """Symmetric ``B x B`` distances between the rows of ``features``."""
    return cross_distances(features, features, metric)


def _check_triplet_batch(labels: torch.Tensor):
    uniq, counts = torch.unique(labels, return_counts=True)
    if uniq.numel() < 2:
        raise ValueError("triplet loss needs at least 2 identities in the batch")
    if counts.max() < 2:
        raise ValueError("triplet loss needs at least one identity with 2 or more samples")


def triplet_loss(features, labels, margin: float = 0.3,
                 mining: Literal["batch_hard", "all"] = "batch_hard") -> tuple[torch.Tensor, float]:
    """Hinge ``[d_p - d_n + margin]_+`` over Euclidean feature distances.

    ``batch_hard`` uses, per anchor, the farthest same-label sample and the
    nearest other-label sample, then averages over anchors that own at least
    one positive. ``all`` averages the hinge over every valid triplet.
    Returns the loss and the fraction of anchors (or triplets) whose hinge is
    active.
    """
    f = _tensor(features)
    labels = _tensor(labels).long()
    _check_triplet_batch(labels)
    dist = pairwise_distances(f, "euclidean")
    same = labels[:, None] == labels[None, :]
    eye = torch.eye(len(labels), dtype=torch.bool)
    pos_mask = same & ~eye
    neg_mask = ~same

    if mining == "batch_hard":
        has_pos = pos_mask.any(dim=1)
        d_p = torch.where(pos_mask, dist, torch.full_like(dist, -torch.inf)).amax(dim=1)
        d_n = torch.where(neg_mask, dist, torch.full_like(dist, torch.inf)).amin(dim=1)
        hinge = F.relu(d_p - d_n + margin)[has_pos]
    elif mining == "all":
        # (a, p, n) cube: d[a, p] - d[a, n]
        valid = pos_mask[:, :, None] & neg_mask[:, None, :]
        hinge = F.relu(dist[:, :, None] - dist[:, None, :] + margin)[valid]
    else:
        raise ConfigurationError(f"unknown mining strategy {mining!r}")
    active = float((hinge > 0).double().mean()) if hinge.numel() else 0.0
    return hinge.mean(), active


def _check_center_labels(labels: torch.Tensor, centers: ClassCenters):
    if labels.numel() and (labels.min() < 0 or labels.max() >= centers.num_classes):
        raise KeyError(f"labels outside [0, {centers.num_classes}) have no center")


def center_loss(features, labels, centers: ClassCenters) -> torch.Tensor:
    """``0.5 * sum_j ||f_j - c_{y_j}||^2`` summed over the batch.

    Centers are treated as constants here; they move through
    :func:`update_centers`.
    """
    f = _tensor(features)
    labels = _tensor(labels).long()
    _check_center_labels(labels, centers)
    c = centers.centers.detach().to(f.dtype)[labels]
    return 0.5 * ((f - c) ** 2).sum()


def update_centers(centers: ClassCenters, features, labels, center_lr: float = 0.5) -> ClassCenters:
    """Move each center seen in the batch toward its batch-mean feature."""
    f = _tensor(features).detach()
    labels = _tensor(labels).long()
    _check_center_labels(labels, centers)
    new = centers.centers.detach().clone()
    for y in torch.unique(labels):
        mean = f[labels == y].mean(dim=0).to(new.dtype)
        new[y] += center_lr * (mean - new[y])
    return ClassCenters(new)


def _scalar(x) -> float:
    return float(x.detach()) if isinstance(x, torch.Tensor) else float(x)


def total_loss(id_value, tri_value, cen_value, beta: float,
               flags: LossToggles = LossToggles(), active_fraction: float = 0.0) -> LossReport:
    """Weighted sum ``id + tri + beta * cen``; disabled parts contribute 0.

    When any input is a tensor the differentiable sum is kept in
    ``LossReport.tensor``.
    """
    parts = []
    if flags.id:
        parts.append(id_value)
    if flags.triplet:
        parts.append(tri_value)
    if flags.center:
        parts.append(beta * cen_value)
    total = sum(parts) if parts else 0.0
    tensor = total if isinstance(total, torch.Tensor) else None
    return LossReport(
        id_loss=_scalar(id_value) if flags.id else 0.0,
        triplet_loss=_scalar(tri_value) if flags.triplet else 0.0,
        center_loss=_scalar(cen_value) if flags.center else 0.0,
        total=_scalar(total),
        active_triplet_fraction=active_fraction if flags.triplet else 0.0,
        tensor=tensor,
    )
