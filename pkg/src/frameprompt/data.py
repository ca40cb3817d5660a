"""Datasets and their IO.

An ImageDataset owns float64 images (n, C, H, W), int64 labels and a string
id. Raw images live in [0,1]; standardize() shifts to zero-mean/unit-std per
channel using statistics that are recorded on the dataset so the mapping is
invertible and reusable on held-out splits.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import BadMagicError, DataError, TruncatedFileError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

# 8 anchor colors reused cyclically by the synthetic modes
PALETTE = np.array([
    [0.95, 0.15, 0.15], [0.15, 0.80, 0.20], [0.20, 0.25, 0.95],
    [0.90, 0.85, 0.10], [0.85, 0.15, 0.85], [0.10, 0.85, 0.85],
    [0.95, 0.55, 0.10], [0.55, 0.30, 0.90],
], dtype=np.float64)

PATTERNS = ("h_stripes", "v_stripes", "checker", "blob")


@dataclass
class ImageDataset:
    id: str
    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "full"
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n,C,H,W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(f"{self.labels.shape[0] if self.labels.ndim else 0} labels "
                            f"for {self.images.shape[0]} images")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels outside [0,{self.class_count})")

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def standardized(self) -> bool:
        return self.mean is not None

    def standardize(self, mean: np.ndarray, std: np.ndarray) -> "ImageDataset":
        if self.standardized:
            raise DataError(f"dataset {self.id} is already standardized")
        imgs = (self.images - mean[None, :, None, None]) / std[None, :, None, None]
        return replace(self, images=imgs, mean=mean.copy(), std=std.copy())

    def destandardize(self) -> "ImageDataset":
        if not self.standardized:
            raise DataError(f"dataset {self.id} is not standardized")
        imgs = self.images * self.std[None, :, None, None] + self.mean[None, :, None, None]
        return replace(self, images=imgs, mean=None, std=None)

    def channel_stats(self) -> tuple[np.ndarray, np.ndarray]:
        if len(self) == 0:
            raise DataError("cannot compute statistics of an empty dataset")
        mean = self.images.mean(axis=(0, 2, 3))
        std = self.images.std(axis=(0, 2, 3))
        std = np.where(std < 1e-8, 1.0, std)
        return mean, std


def _read_idx(path: str, expect_magic: int):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFileError(f"{path}: too short for a magic number")
    magic = struct.unpack(">i", blob[:4])[0]
    if magic != expect_magic:
        raise BadMagicError(f"{path}: magic {magic:#010x}, expected {expect_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise TruncatedFileError(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}i", blob[4:header])
    count = int(np.prod(dims))
    if len(blob) < header + count:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - header} bytes, "
                                 f"dims promise {count}")
    return np.frombuffer(blob, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path: str, labels_path: str, dataset_id: str) -> ImageDataset:
    """Big-endian IDX pair. Grayscale images are replicated to 3 channels and
    scaled by 1/255, so byte 255 maps to exactly 1.0."""
    raw = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if raw.shape[0] != labels.shape[0]:
        raise DataError(f"{raw.shape[0]} images but {labels.shape[0]} labels")
    imgs = raw.astype(np.float64) / 255.0
    imgs = np.repeat(imgs[:, None, :, :], 3, axis=1)
    classes = int(labels.max()) + 1 if len(labels) else 0
    return ImageDataset(dataset_id, imgs, labels, classes)


@dataclass(frozen=True)
class SyntheticSpec:
    modes: int
    classes_per_mode: int
    samples_per_class: int
    jitter: float = 0.05
    seed: int = 0
    size: int = 32
    id: str = ""

    def dataset_id(self) -> str:
        if self.id:
            return self.id
        return (f"modemix-m{self.modes}c{self.classes_per_mode}"
                f"n{self.samples_per_class}j{self.jitter}s{self.seed}")


def _pattern_field(kind: str, size: int, freq: float, phase: float) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if kind == "h_stripes":
        return 0.5 * (1 + np.sin(2 * np.pi * freq * yy / size + phase))
    if kind == "v_stripes":
        return 0.5 * (1 + np.sin(2 * np.pi * freq * xx / size + phase))
    if kind == "checker":
        return 0.5 * (1 + np.sin(2 * np.pi * freq * yy / size + phase)
                      * np.sin(2 * np.pi * freq * xx / size + phase))
    if kind == "blob":
        cy = size / 2 + (size / 4) * np.sin(phase)
        cx = size / 2 + (size / 4) * np.cos(phase)
        r2 = (yy - cy) ** 2 + (xx - cx) ** 2
        return np.exp(-r2 / (2 * (size / (2 + freq)) ** 2))
    raise DataError(f"unknown pattern {kind}")


def generate_modemix(spec: SyntheticSpec) -> ImageDataset:
    """Mixture-of-modes synthetic images.

    Each mode pairs an anchor color with a pattern family; classes within a
    mode get distinct frequency/phase. Labels are mode-major: mode m, class c
    within the mode gives label m * classes_per_mode + c. jitter=0 degenerates
    to identical images per class."""
    if not 1 <= spec.modes <= len(PALETTE):
        raise DataError(f"modes must be in [1,{len(PALETTE)}], got {spec.modes}")
    if spec.classes_per_mode < 1 or spec.samples_per_class < 1:
        raise DataError("classes_per_mode and samples_per_class must be >= 1")
    if spec.jitter < 0:
        raise DataError(f"jitter must be >= 0, got {spec.jitter}")
    rng = np.random.default_rng(spec.seed)
    size = spec.size
    images, labels = [], []
    for m in range(spec.modes):
        color = PALETTE[m]
        kind = PATTERNS[m % len(PATTERNS)]
        for c in range(spec.classes_per_mode):
            freq = 2.0 + 1.7 * c + 0.3 * m
            phase = 0.9 * c + 2.1 * m
            base = _pattern_field(kind, size, freq, phase)
            img = 0.15 + 0.7 * base[None, :, :] * color[:, None, None]
            label = m * spec.classes_per_mode + c
            for _ in range(spec.samples_per_class):
                noisy = img + spec.jitter * rng.standard_normal((3, size, size))
                images.append(np.clip(noisy, 0.0, 1.0))
                labels.append(label)
    return ImageDataset(spec.dataset_id(), np.stack(images), np.asarray(labels),
                        spec.modes * spec.classes_per_mode)


def split_dataset(dataset: ImageDataset, fractions, seed: int):
    """Stratified (train, val, test) split with train-split standardization.

    Per-class counts follow the fractions within one sample (largest
    remainder); a zero fraction yields an empty split. Statistics come from
    the train split alone and are applied to all three."""
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,):
        raise DataError(f"need 3 fractions, got {fr.shape}")
    if fr.min() < 0:
        raise DataError(f"fractions must be nonnegative: {fractions}")
    if abs(fr.sum() - 1.0) > 1e-9:
        raise DataError(f"fractions sum to {fr.sum()!r}, not 1")
    if dataset.standardized:
        raise DataError("split expects raw (unstandardized) input")
    rng = np.random.default_rng(seed)
    buckets: list[list[int]] = [[], [], []]
    for cls in range(dataset.class_count):
        members = np.flatnonzero(dataset.labels == cls)
        if len(members) < 3:
            raise DataError(f"class {cls} has only {len(members)} samples; "
                            f"need at least 3 to split")
        members = rng.permutation(members)
        quota = fr * len(members)
        take = np.floor(quota).astype(np.int64)
        rem = quota - take
        short = len(members) - take.sum()
        for slot in np.argsort(-rem, kind="stable")[:short]:
            take[slot] += 1
        take[fr == 0] = 0
        # floor+remainder cannot overfill, but a zeroed slot can leave a gap
        gap = len(members) - take.sum()
        if gap:
            take[np.argmax(fr)] += gap
        offs = np.cumsum(take)
        buckets[0].extend(members[: offs[0]])
        buckets[1].extend(members[offs[0]: offs[1]])
        buckets[2].extend(members[offs[1]: offs[2]])
    names = ("train", "val", "test")
    parts = []
    for i, name in enumerate(names):
        ids = np.asarray(sorted(buckets[i]), dtype=np.int64)
        parts.append(ImageDataset(f"{dataset.id}/{name}", dataset.images[ids],
                                  dataset.labels[ids], dataset.class_count, split=name))
    if len(parts[0]) == 0:
        raise DataError("train split is empty; cannot compute statistics")
    mean, std = parts[0].channel_stats()
    return tuple(p.standardize(mean, std) for p in parts)


def load_descriptor(path: str) -> ImageDataset:
    """Dataset descriptor json: {"kind": "synthetic"|"idx", ...}."""
    with open(path) as fh:
        try:
            desc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid json at line {e.lineno}") from e
    kind = desc.get("kind")
    if kind == "synthetic":
        fields = {k: desc[k] for k in ("modes", "classes_per_mode", "samples_per_class",
                                       "jitter", "seed", "size", "id") if k in desc}
        return generate_modemix(SyntheticSpec(**fields))
    if kind == "idx":
        for key in ("images", "labels", "id"):
            if key not in desc:
                raise DataError(f"{path}: idx descriptor missing {key!r}")
        return load_idx(desc["images"], desc["labels"], desc["id"])
    raise DataError(f"{path}: unknown dataset kind {kind!r}")
