"""In-distribution / OOD data: seeded generators, IDX and CSV files, splits."""

from __future__ import annotations

import csv
import io
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from m2d.autodiff import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (N, d) or (N, H, W, C)
    labels: np.ndarray | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
            if self.labels.shape[0] != self.features.shape[0]:
                raise DataError(f"{self.features.shape[0]} samples but {self.labels.shape[0]} labels")
            if self.labels.size and self.labels.min() < 0:
                raise DataError("labels must be non-negative class indices")
        if not np.all(np.isfinite(self.features)):
            raise DataError("features must be finite")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def name(self) -> str:
        return self.provenance.get("name", "data")

    @property
    def num_classes(self) -> int:
        return 0 if self.labels is None or not self.labels.size else int(self.labels.max()) + 1

    def subset(self, idx: np.ndarray, split: str) -> "Dataset":
        labels = None if self.labels is None else self.labels[idx]
        return Dataset(self.features[idx], labels, {**self.provenance, "split": split})


# ---------------------------------------------------------------------------
# synthetic generators


def gen_blobs(num_classes: int, n_per_class: int, centers, spread: float, seed: int) -> Dataset:
    """Isotropic Gaussian clusters, ``n_per_class`` points around each center."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.shape[0] != num_classes:
        raise DataError(f"{num_classes} classes but {centers.shape[0]} centers")
    if not spread > 0:
        raise DataError(f"spread must be positive, got {spread}")
    if len(np.unique(centers, axis=0)) != num_classes:
        raise DataError("centers must be distinct")
    rng = make_rng(seed)
    noise = rng.standard_normal((num_classes, n_per_class, centers.shape[1]))
    feats = (centers[:, None, :] + spread * noise).reshape(-1, centers.shape[1])
    labels = np.repeat(np.arange(num_classes), n_per_class)
    return Dataset(feats, labels, {"name": "blobs", "seed": seed, "spread": spread})


def gen_ood_blob(center, n: int, spread: float, seed: int, in_centers=None) -> Dataset:
    """Unlabelled Gaussian blob used as OOD data."""
    center = np.asarray(center, dtype=np.float64).reshape(-1)
    if not spread > 0:
        raise DataError(f"spread must be positive, got {spread}")
    if in_centers is not None and np.any(np.all(np.asarray(in_centers) == center, axis=1)):
        raise DataError("OOD center coincides with an in-distribution center")
    rng = make_rng(seed)
    feats = center + spread * rng.standard_normal((n, center.size))
    return Dataset(feats, None, {"name": "far_blob", "seed": seed, "spread": spread})


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, magic: int) -> tuple[tuple[int, ...], bytes]:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: bad magic (file too short)")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise DataError(f"{path}: bad magic {found:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    body = raw[header:]
    if len(body) != math.prod(dims):
        raise DataError(f"{path}: truncated or oversized payload ({len(body)} bytes for dims {dims})")
    return dims, body


def load_idx(images_path, labels_path=None, name: str = "idx") -> Dataset:
    """Unsigned-byte IDX images (N, rows, cols) scaled to [0, 1] as (N, rows, cols, 1)."""
    dims, body = _read_idx(images_path, IDX_IMAGES_MAGIC)
    images = np.frombuffer(body, dtype=np.uint8).reshape(dims).astype(np.float64) / 255.0
    labels = None
    if labels_path is not None:
        (n,), lbody = _read_idx(labels_path, IDX_LABELS_MAGIC)
        if n != dims[0]:
            raise DataError(f"{dims[0]} images but {n} labels")
        labels = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return Dataset(images[..., None], labels, {"name": name, "source": str(images_path)})


def write_idx(images: np.ndarray, labels: np.ndarray | None, images_path, labels_path=None) -> None:
    images = np.asarray(images)
    if images.ndim != 3 or images.dtype != np.uint8:
        raise DataError("IDX images must be a uint8 array of shape (N, rows, cols)")
    Path(images_path).write_bytes(struct.pack(">4I", IDX_IMAGES_MAGIC, *images.shape) + images.tobytes())
    if labels is not None:
        labels = np.asarray(labels, dtype=np.uint8)
        Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, labels.size) + labels.tobytes())


# ---------------------------------------------------------------------------
# CSV


def load_csv(path, labelled: bool = True, name: str | None = None) -> Dataset:
    """Header row, float feature columns, optional final integer label column."""
    text = Path(path).read_text(encoding="utf-8")
    if not text.strip():
        return Dataset(np.zeros((0, 0)), np.zeros(0, dtype=np.int64) if labelled else None, {"name": name or Path(path).stem})
    rows = list(csv.reader(io.StringIO(text)))
    header, body = rows[0], [r for r in rows[1:] if r]
    try:
        if labelled:
            feats = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64)
            labels = np.array([int(r[-1]) for r in body], dtype=np.int64)
        else:
            feats = np.array([[float(v) for v in r] for r in body], dtype=np.float64)
            labels = None
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    width = len(header) - (1 if labelled else 0)
    feats = feats.reshape(len(body), width)
    return Dataset(feats, labels, {"name": name or Path(path).stem})


def to_csv(d: Dataset) -> str:
    feats = d.features.reshape(len(d), -1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = [f"x{i}" for i in range(feats.shape[1])]
    w.writerow(cols + (["label"] if d.labels is not None else []))
    for i in range(len(d)):
        row = [repr(float(v)) for v in feats[i]]
        if d.labels is not None:
            row.append(str(int(d.labels[i])))
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# normalisation and splitting


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    scale: np.ndarray
    clamped: tuple[int, ...]  # zero-variance dimensions whose scale was set to 1

    def apply(self, d: Dataset) -> Dataset:
        if d.provenance.get("normalized"):
            raise DataError(f"dataset {d.name!r} is already normalized")
        shape = d.features.shape
        flat = d.features.reshape(shape[0], -1)
        out = ((flat - self.mean) / self.scale).reshape(shape)
        prov = {**d.provenance, "normalized": True, "normalization": self.describe()}
        return Dataset(out, d.labels, prov)

    def describe(self) -> dict:
        return {"fitted_on": "train", "clamped_dims": list(self.clamped), "dims": int(self.mean.size)}


def fit_normalization(train: Dataset) -> Normalization:
    if len(train) == 0:
        raise DataError("cannot normalize from an empty training set")
    flat = train.features.reshape(len(train), -1)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    # no numerical spread: the column is constant up to rounding
    zero = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    scale = np.where(zero, 1.0, std)
    mean = np.where(zero, flat[0], mean)
    return Normalization(mean, scale, tuple(int(i) for i in np.flatnonzero(zero)))


def normalize(train: Dataset, *others: Dataset) -> list[Dataset]:
    """Standardise every dataset with statistics computed on ``train`` only.

    Constant columns keep scale 1 and are flagged in the provenance.
    """
    norm = fit_normalization(train)
    return [norm.apply(d) for d in (train, *others)]


@dataclass(frozen=True)
class SplitPlan:
    train: float = 0.6
    fit: float = 0.2
    test: float = 0.2
    detector_subset_size: int = 100

    def __post_init__(self):
        fr = (self.train, self.fit, self.test)
        if any(f <= 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
            raise DataError(f"split fractions must be positive and sum to 1, got {fr}")
        if self.detector_subset_size < 1:
            raise DataError("detector_subset_size must be >= 1")


def _stratified_order(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices ordered so that every prefix is class-balanced to within one."""
    keys = np.empty(labels.size)
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        perm = rng.permutation(idx)
        keys[perm] = (np.arange(perm.size) + 0.5) / perm.size
    tiebreak = rng.random(labels.size)
    return np.lexsort((tiebreak, keys))


def split(d: Dataset, plan: SplitPlan, seed: int) -> dict[str, Dataset]:
    """Disjoint seeded train/fit/test splits plus ``detector_subset`` drawn from train."""
    n = len(d)
    rng = make_rng(seed)
    labels = d.labels if d.labels is not None else np.zeros(n, dtype=np.int64)
    order = _stratified_order(labels, rng)
    n_train = int(round(plan.train * n))
    n_fit = int(round(plan.fit * n))
    if n_train + n_fit > n:
        n_fit = n - n_train
    if plan.detector_subset_size > n_train:
        raise DataError(f"detector subset ({plan.detector_subset_size}) larger than train split ({n_train})")
    idx = {
        "train": order[:n_train],
        "fit": order[n_train : n_train + n_fit],
        "test": order[n_train + n_fit :],
    }
    # prefix of the stratified train order stays balanced
    idx["detector_subset"] = idx["train"][: plan.detector_subset_size]
    return {k: d.subset(np.sort(v), k) for k, v in idx.items()}


# ---------------------------------------------------------------------------
# small real-image corpora


def digits_images() -> tuple[np.ndarray, np.ndarray]:
    """Bundled 8x8 handwritten digits as uint8 images and labels."""
    from sklearn.datasets import load_digits

    d = load_digits()
    images = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
    return images, d.target.astype(np.uint8)


def photo_patches(n: int, seed: int, size: int = 8) -> np.ndarray:
    """Random grayscale patches from the bundled sample photographs, block-averaged to size x size."""
    from sklearn.datasets import load_sample_images

    photos = [im.astype(np.float64).mean(axis=2) for im in load_sample_images().images]
    rng = make_rng(seed)
    out = np.empty((n, size, size), dtype=np.uint8)
    block = 4
    span = size * block
    for i in range(n):
        img = photos[int(rng.integers(len(photos)))]
        r = int(rng.integers(img.shape[0] - span))
        c = int(rng.integers(img.shape[1] - span))
        patch = img[r : r + span, c : c + span].reshape(size, block, size, block).mean(axis=(1, 3))
        out[i] = np.clip(np.round(patch), 0, 255).astype(np.uint8)
    return out


def write_image_corpora(directory, n_ood: int = 600, seed: int = 0) -> dict[str, Path]:
    """Write digits (in-distribution) and photo patches (OOD) as IDX files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    images, labels = digits_images()
    paths = {
        "in_images": directory / "digits-images.idx3-ubyte",
        "in_labels": directory / "digits-labels.idx1-ubyte",
        "ood_images": directory / "photos-images.idx3-ubyte",
    }
    write_idx(images, labels, paths["in_images"], paths["in_labels"])
    write_idx(photo_patches(n_ood, seed), None, paths["ood_images"])
    return paths


def with_name(d: Dataset, name: str) -> Dataset:
    return replace(d, provenance={**d.provenance, "name": name})
