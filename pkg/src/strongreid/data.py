"""Datasets, synthetic identities, P x K sampling and image augmentation.

Images are ``H x W x 3`` float32 arrays with values in ``[0, 1]`` until they
are normalized. Every random operation takes an explicit
``numpy.random.Generator`` so that results are reproducible per sample.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Iterator, Literal, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .exceptions import ConfigurationError, SamplingError

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

SPLITS = ("train", "query", "gallery")


@dataclass(frozen=True)
class ReIDSample:
    image: np.ndarray
    person_id: int
    camera_id: int
    domain_tag: str = "A"


@dataclass(frozen=True)
class IdentityDataset:
    """An ordered, immutable collection of samples belonging to one split."""

    samples: tuple[ReIDSample, ...]
    split: str = "train"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ConfigurationError(f"split must be one of {SPLITS}, got {self.split!r}")
        object.__setattr__(self, "samples", tuple(self.samples))

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, idx: int) -> ReIDSample:
        return self.samples[idx]

    def __iter__(self) -> Iterator[ReIDSample]:
        return iter(self.samples)

    @cached_property
    def images(self) -> np.ndarray:
        arr = np.stack([s.image for s in self.samples]).astype(np.float32, copy=False)
        arr.setflags(write=False)
        return arr

    @cached_property
    def person_ids(self) -> np.ndarray:
        return np.array([s.person_id for s in self.samples], dtype=np.int64)

    @cached_property
    def camera_ids(self) -> np.ndarray:
        return np.array([s.camera_id for s in self.samples], dtype=np.int64)

    @property
    def domain_tags(self) -> list[str]:
        return [s.domain_tag for s in self.samples]

    @property
    def num_identities(self) -> int:
        return int(np.unique(self.person_ids).size) if self.samples else 0

    def indices_by_identity(self) -> dict[int, np.ndarray]:
        pids = self.person_ids
        return {int(p): np.flatnonzero(pids == p) for p in np.unique(pids)}


@dataclass(frozen=True)
class PKBatch:
    images: np.ndarray
    labels: np.ndarray
    P: int
    K: int
    indices: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.P * self.K


@dataclass(frozen=True)
class AugmentConfig:
    """Training/eval preprocessing parameters.

    Defaults are the standard person ReID pipeline: 256x128 input, 10 pixel
    zero padding, horizontal flips at 0.5, ImageNet statistics and random
    erasing with probability 0.5.
    """

    target_size: tuple[int, int] = (256, 128)
    pad: int = 10
    flip_prob: float = 0.5
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    rea_prob: float = 0.5
    rea_area_range: tuple[float, float] = (0.02, 0.4)
    rea_aspect_range: tuple[float, float] = (0.3, 3.33)
    rea_fill: Literal["mean", "random"] = "mean"
    rea_max_attempts: int = 100

    def __post_init__(self):
        h, w = self.target_size
        if h < 1 or w < 1:
            raise ConfigurationError(f"target_size must be positive, got {self.target_size}")
        if self.pad < 0:
            raise ConfigurationError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigurationError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not 0.0 <= self.rea_prob <= 1.0:
            raise ConfigurationError(f"rea_prob must lie in [0, 1], got {self.rea_prob}")
        s_l, s_h = self.rea_area_range
        if not 0.0 < s_l < s_h < 1.0:
            raise ConfigurationError(f"rea_area_range must satisfy 0 < s_l < s_h < 1, got {self.rea_area_range}")
        r_1, r_2 = self.rea_aspect_range
        if not 0.0 < r_1 <= r_2:
            raise ConfigurationError(f"rea_aspect_range must satisfy 0 < r_1 <= r_2, got {self.rea_aspect_range}")
        if self.rea_fill not in ("mean", "random"):
            raise ConfigurationError(f"rea_fill must be 'mean' or 'random', got {self.rea_fill!r}")
        if len(self.mean) != 3 or len(self.std) != 3 or min(self.std) <= 0:
            raise ConfigurationError("mean and std need three entries with std > 0")
        if self.rea_max_attempts < 1:
            raise ConfigurationError("rea_max_attempts must be >= 1")


# ---------------------------------------------------------------------------
# synthetic identities
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DomainStyle:
    """Global appearance of a domain.

    Only style changes between domains; the identities themselves (colors,
    patterns, body shape) are driven by the generator seed alone.
    """

    tag: str = "A"
    hue_shift: float = 0.0          # radians, rotation around the gray axis
    background: tuple[float, float, float] = (0.45, 0.45, 0.45)
    contrast: float = 1.0
    noise: float = 0.03
    occlusion_prob: float = 0.2


DOMAINS = {
    "A": DomainStyle(tag="A"),
    "B": DomainStyle(tag="B", hue_shift=1.2, background=(0.2, 0.3, 0.55), contrast=0.8),
}

# coarse palette so identities share colors and must be told apart by combinations
_PALETTE = np.array([
    [0.85, 0.15, 0.15], [0.15, 0.65, 0.2], [0.15, 0.3, 0.85], [0.9, 0.8, 0.15],
    [0.9, 0.9, 0.9], [0.1, 0.1, 0.1], [0.6, 0.3, 0.7], [0.95, 0.55, 0.1],
    [0.1, 0.7, 0.75], [0.55, 0.35, 0.2],
], dtype=np.float64)
_SKIN = np.array([0.87, 0.7, 0.55])


def _identity_signature(rng: np.random.Generator) -> dict:
    upper, lower, accent = rng.choice(len(_PALETTE), size=3, replace=False)
    return {
        "upper": np.clip(_PALETTE[upper] + rng.normal(0, 0.04, 3), 0, 1),
        "lower": np.clip(_PALETTE[lower] + rng.normal(0, 0.04, 3), 0, 1),
        "accent": _PALETTE[accent],
        "pattern": int(rng.integers(0, 4)),
        "waist": float(rng.uniform(0.45, 0.6)),
        "width": float(rng.uniform(0.45, 0.7)),
        "bag": bool(rng.random() < 0.4),
    }


def _hue_rotation(theta: float) -> np.ndarray:
    # Rodrigues rotation about the (1, 1, 1) gray axis
    k = np.ones(3) / math.sqrt(3.0)
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * kx @ kx


def _render(sig: dict, h: int, w: int, cam_gain: np.ndarray, rng: np.random.Generator):
    """Draw one person; returns (rgb, mask) before domain styling."""
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    yn, xn = ys / h, xs / w
    dy, dx = rng.uniform(-0.06, 0.06, 2)
    scale = rng.uniform(0.9, 1.05)
    cy = (yn - 0.5 - dy) / scale + 0.5
    cx = (xn - 0.5 - dx) / scale + 0.5

    rgb = np.zeros((h, w, 3))
    mask = np.zeros((h, w), dtype=bool)
    half = sig["width"] / 2

    head = ((cy - 0.1) / 0.08) ** 2 + ((cx - 0.5) / 0.13) ** 2 <= 1.0
    body = (cy >= 0.18) & (cy < sig["waist"]) & (np.abs(cx - 0.5) <= half)
    legs = (cy >= sig["waist"]) & (cy <= 0.97) & (np.abs(cx - 0.5) <= half * 0.8) & (np.abs(cx - 0.5) >= 0.03)

    upper = np.broadcast_to(sig["upper"], (h, w, 3)).copy()
    pattern = sig["pattern"]
    if pattern == 1:
        stripe = (np.floor(cy * 24) % 2) == 0
    elif pattern == 2:
        stripe = (np.floor(cx * 10) % 2) == 0
    elif pattern == 3:
        stripe = ((np.floor(cy * 16) + np.floor(cx * 8)) % 2) == 0
    else:
        stripe = np.zeros((h, w), dtype=bool)
    upper[stripe] = sig["accent"]

    rgb[body] = upper[body]
    rgb[legs] = sig["lower"]
    rgb[head] = _SKIN
    mask |= body | legs | head
    if sig["bag"]:
        bag = (cy >= 0.3) & (cy < 0.5) & (cx - 0.5 > half) & (cx - 0.5 <= half + 0.15)
        rgb[bag] = sig["accent"] * 0.7
        mask |= bag

    rgb = rgb * cam_gain * rng.uniform(0.85, 1.15)
    return rgb, mask


def _apply_style(rgb, mask, style: DomainStyle, rng: np.random.Generator, occlude: bool):
    h, w = mask.shape
    bg = np.asarray(style.background) + rng.normal(0, 0.05, 3)
    bg_img = np.broadcast_to(bg, (h, w, 3)) + rng.normal(0, 0.04, (h, w, 1)) * np.linspace(0.5, 1.5, h)[:, None, None]
    out = np.where(mask[..., None], rgb, bg_img)
    if occlude:
        oh = int(rng.integers(h // 5, h // 2))
        ow = int(rng.integers(w // 3, w))
        oy = int(rng.integers(0, h - oh + 1))
        ox = int(rng.integers(0, w - ow + 1))
        out[oy:oy + oh, ox:ox + ow] = rng.uniform(0, 1, 3)
    if style.hue_shift:
        out = out @ _hue_rotation(style.hue_shift).T
    out = (out - 0.5) * style.contrast + 0.5
    out = out + rng.normal(0, style.noise, out.shape)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _as_style(domain_params) -> DomainStyle:
    if domain_params is None:
        return DOMAINS["A"]
    if isinstance(domain_params, DomainStyle):
        return domain_params
    if isinstance(domain_params, str):
        if domain_params not in DOMAINS:
            raise ConfigurationError(f"unknown domain {domain_params!r}; known: {sorted(DOMAINS)}")
        return DOMAINS[domain_params]
    return DomainStyle(**dict(domain_params))


def generate_synthetic(num_ids: int, imgs_per_id: int, image_size: tuple[int, int] = (64, 32),
                       domain_params=None, seed: int = 0, *, split: str = "train",
                       id_offset: int = 0, num_cameras: int = 2) -> IdentityDataset:
    """Render a procedurally generated identity dataset.

    Each identity gets a fixed appearance (clothing colors, pattern, body
    shape, optional bag) and each image adds translation, scale, brightness,
    noise and a camera-specific color gain. ``domain_params`` (a
    ``DomainStyle``, a key of ``DOMAINS`` or a mapping of ``DomainStyle``
    fields) changes only the global style, so two domains built from the same
    seed contain the same people.
    """
    if num_ids < 2 or imgs_per_id < 2:
        raise ConfigurationError(f"need num_ids >= 2 and imgs_per_id >= 2, got {num_ids}, {imgs_per_id}")
    h, w = image_size
    if h < 8 or w < 8:
        raise ConfigurationError(f"image_size must be at least 8x8, got {image_size}")
    if num_cameras < 1:
        raise ConfigurationError("num_cameras must be >= 1")
    style = _as_style(domain_params)

    cam_rng = np.random.default_rng([seed, 0xCA])
    cam_gains = 1.0 + cam_rng.normal(0, 0.08, (num_cameras, 3))

    samples = []
    for i in range(num_ids):
        pid = id_offset + i
        sig = _identity_signature(np.random.default_rng([seed, 1, pid]))
        for j in range(imgs_per_id):
            geo_rng = np.random.default_rng([seed, 2, pid, j])
            cam = j % num_cameras
            rgb, mask = _render(sig, h, w, cam_gains[cam], geo_rng)
            style_rng = np.random.default_rng([seed, 3, pid, j])
            occlude = bool(style_rng.random() < style.occlusion_prob)
            img = _apply_style(rgb, mask, style, style_rng, occlude)
            samples.append(ReIDSample(img, pid, cam, style.tag))
    return IdentityDataset(tuple(samples), split=split)


def split_query_gallery(dataset: IdentityDataset) -> tuple[IdentityDataset, IdentityDataset]:
    """First image of every (identity, camera) pair goes to the query set."""
    seen = set()
    query, gallery = [], []
    for s in dataset:
        key = (s.person_id, s.camera_id)
        if key in seen:
            gallery.append(s)
        else:
            seen.add(key)
            query.append(s)
    return IdentityDataset(tuple(query), "query"), IdentityDataset(tuple(gallery), "gallery")


def make_benchmark(num_train_ids: int = 20, num_test_ids: int = 20, imgs_per_id: int = 10,
                   image_size: tuple[int, int] = (64, 32), domain_params=None, seed: int = 0,
                   num_cameras: int = 2) -> dict[str, IdentityDataset]:
    """Train split plus a query/gallery split over disjoint, unseen identities."""
    train = generate_synthetic(num_train_ids, imgs_per_id, image_size, domain_params, seed,
                               split="train", num_cameras=num_cameras)
    test = generate_synthetic(num_test_ids, imgs_per_id, image_size, domain_params, seed,
                              split="gallery", id_offset=num_train_ids, num_cameras=num_cameras)
    query, gallery = split_query_gallery(test)
    return {"train": train, "query": query, "gallery": gallery}


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def pk_sample(dataset: IdentityDataset, P: int, K: int, rng: np.random.Generator) -> PKBatch:
    """Draw P distinct identities with K images each.

    Identities owning fewer than K images are sampled with replacement so the
    batch always holds exactly ``P * K`` images.
    """
    if P < 1 or K < 1:
        raise SamplingError(f"P and K must be >= 1, got P={P}, K={K}")
    by_id = dataset.indices_by_identity()
    if P > len(by_id):
        raise SamplingError(f"P={P} exceeds the {len(by_id)} identities in the dataset")
    pids = np.array(sorted(by_id))
    chosen = rng.choice(pids, size=P, replace=False)
    idx = []
    for pid in chosen:
        pool = by_id[int(pid)]
        idx.append(rng.choice(pool, size=K, replace=pool.size < K))
    indices = np.concatenate(idx)
    return PKBatch(dataset.images[indices], dataset.person_ids[indices], P, K, indices)


def iter_epoch(dataset: IdentityDataset, P: int, K: int, rng: np.random.Generator) -> Iterator[PKBatch]:
    """One epoch is ceil(len(dataset) / (P*K)) independently drawn batches."""
    for _ in range(math.ceil(len(dataset) / (P * K))):
        yield pk_sample(dataset, P, K, rng)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

def _image_of(sample) -> np.ndarray:
    img = sample.image if isinstance(sample, ReIDSample) else sample
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got shape {img.shape}")
    return img


def resize(image: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if image.shape[:2] == tuple(size):
        return image.copy()
    t = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False, antialias=True)
    return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return ((image - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)).astype(np.float32)


def denormalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    return (image * np.asarray(std, dtype=np.float32) + np.asarray(mean, dtype=np.float32)).astype(np.float32)


def sample_erase_region(height: int, width: int, cfg: AugmentConfig,
                        rng: np.random.Generator) -> tuple[int, int, int, int] | None:
    """Pick a rectangle ``(y, x, h, w)`` to erase, or None after too many misses.

    The area ratio and aspect ratio (h / w) are checked on the rounded integer
    rectangle, so an accepted region always satisfies the configured ranges.
    """
    area = height * width
    s_l, s_h = cfg.rea_area_range
    r_1, r_2 = cfg.rea_aspect_range
    for _ in range(cfg.rea_max_attempts):
        target = rng.uniform(s_l, s_h) * area
        aspect = rng.uniform(r_1, r_2)
        h_e = int(round(math.sqrt(target * aspect)))
        w_e = int(round(math.sqrt(target / aspect)))
        y_e = int(rng.integers(0, height))
        x_e = int(rng.integers(0, width))
        if h_e < 1 or w_e < 1 or x_e + w_e > width or y_e + h_e > height:
            continue
        if not (s_l <= h_e * w_e / area <= s_h and r_1 <= h_e / w_e <= r_2):
            continue
        return y_e, x_e, h_e, w_e
    return None


def random_erase(image: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Occlude a random rectangle with probability ``cfg.rea_prob``.

    With ``rea_fill="mean"`` the region takes the per-channel mean of the
    input image; ``"random"`` draws standard normal values, which matches the
    scale of a normalized image.
    """
    image = _image_of(image)
    out = image.copy()
    if rng.random() >= cfg.rea_prob:
        return out
    region = sample_erase_region(image.shape[0], image.shape[1], cfg, rng)
    if region is None:
        return out
    y, x, h, w = region
    if cfg.rea_fill == "mean":
        out[y:y + h, x:x + w] = image.mean(axis=(0, 1))
    else:
        out[y:y + h, x:x + w] = rng.standard_normal((h, w, 3)).astype(np.float32)
    return out


def augment_train(sample, cfg: AugmentConfig, rng: np.random.Generator, *, erase: bool = True) -> np.ndarray:
    """resize -> zero pad -> random crop -> flip -> normalize -> random erase."""
    img = resize(_image_of(sample), cfg.target_size)
    th, tw = cfg.target_size
    if cfg.pad:
        p = cfg.pad
        img = np.pad(img, ((p, p), (p, p), (0, 0)), mode="constant")
        oy = int(rng.integers(0, 2 * p + 1))
        ox = int(rng.integers(0, 2 * p + 1))
        img = img[oy:oy + th, ox:ox + tw]
    if rng.random() < cfg.flip_prob:
        img = img[:, ::-1]
    img = normalize(np.ascontiguousarray(img), cfg.mean, cfg.std)
    if erase:
        img = random_erase(img, cfg, rng)
    return img


def preprocess_eval(sample, cfg: AugmentConfig) -> np.ndarray:
    return normalize(resize(_image_of(sample), cfg.target_size), cfg.mean, cfg.std)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, *, erase: bool = True) -> np.ndarray:
    seeds = rng.integers(0, 2**63 - 1, size=len(images))
    return np.stack([augment_train(img, cfg, np.random.default_rng(s), erase=erase)
                     for img, s in zip(images, seeds)])


def preprocess_batch(images: Iterable[np.ndarray], cfg: AugmentConfig) -> np.ndarray:
    return np.stack([preprocess_eval(img, cfg) for img in images])


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------

MANIFEST_FIELDS = ("path", "person_id", "camera_id", "split", "domain_tag")


def save_dataset(datasets: dict[str, IdentityDataset] | Iterable[IdentityDataset], root: str | os.PathLike,
                 manifest_name: str = "manifest.csv") -> str:
    """Write PNG images plus a CSV manifest; returns the manifest path.

    An existing manifest in ``root`` is appended to, so several domains can
    share one directory.
    """
    if isinstance(datasets, dict):
        datasets = datasets.values()
    os.makedirs(root, exist_ok=True)
    manifest = os.path.join(root, manifest_name)
    new = not os.path.exists(manifest)
    with open(manifest, "a", newline="") as fh:
        writer = csv.writer(fh)
        if new:
            writer.writerow(MANIFEST_FIELDS)
        for ds in datasets:
            folder = os.path.join(root, ds.split)
            os.makedirs(folder, exist_ok=True)
            for i, s in enumerate(ds):
                rel = os.path.join(ds.split, f"{s.domain_tag}_{s.person_id:05d}_c{s.camera_id}_{i:05d}.png")
                px = np.clip(np.round(s.image * 255.0), 0, 255).astype(np.uint8)
                Image.fromarray(px).save(os.path.join(root, rel))
                writer.writerow([rel, s.person_id, s.camera_id, ds.split, s.domain_tag])
    return manifest


def load_image(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_manifest(manifest: str | os.PathLike, domain_tag: str | None = None) -> dict[str, IdentityDataset]:
    """Read a manifest into one dataset per split, optionally filtered by domain."""
    root = os.path.dirname(os.path.abspath(manifest))
    buckets: dict[str, list[ReIDSample]] = {s: [] for s in SPLITS}
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            if domain_tag is not None and row["domain_tag"] != domain_tag:
                continue
            if row["split"] not in buckets:
                raise ConfigurationError(f"unknown split {row['split']!r} in {manifest}")
            img = load_image(os.path.join(root, row["path"]))
            buckets[row["split"]].append(
                ReIDSample(img, int(row["person_id"]), int(row["camera_id"]), row["domain_tag"]))
    return {split: IdentityDataset(tuple(items), split) for split, items in buckets.items() if items}
