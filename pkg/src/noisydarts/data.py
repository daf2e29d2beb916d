"""Datasets: synthetic blob images, IDX and CIFAR-10 binary readers, splits.

Images are kept as float64 arrays of shape ``(N, C, H, W)`` in ``[0, 1]``;
per-channel normalization constants are computed on the training part and
applied on demand.
"""
from __future__ import annotations

import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .searchspace import Genotype

__all__ = [
    "DatasetSplit", "DataFormatError", "seeded_permutation", "stratified_halves",
    "synthetic_blobs", "synthetic_gratings", "read_idx", "write_idx", "read_cifar_binary", "write_cifar_binary",
    "load_dataset", "subset", "area_downscale", "BenchLookup", "bench_query",
    "canonical_genotype_key",
]

CIFAR_RECORD = 3073


class DataFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte where parsing failed."""

    def __init__(self, msg: str, path: str = "", offset: int = -1):
        where = f" at byte {offset}" if offset >= 0 else ""
        super().__init__(f"{path}: {msg}{where}" if path else f"{msg}{where}")
        self.path, self.offset = path, offset


@dataclass(frozen=True)
class DatasetSplit:
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    # sample identities (indices into the original pool), used for disjointness checks
    train_ids: np.ndarray = field(default=None)
    val_ids: np.ndarray = field(default=None)

    def __post_init__(self):
        for part in ("train", "val", "test"):
            x, y = getattr(self, part + "_x"), getattr(self, part + "_y")
            if x.ndim != 4 or len(x) != len(y):
                raise ValueError(f"{part}: expected (N,C,H,W) images with N labels, got {x.shape} / {y.shape}")
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{part}: label out of range [0, {self.num_classes})")
        if self.mean is None:
            pool = self.train_x if len(self.train_x) else self.val_x
            mean = pool.mean(axis=(0, 2, 3)) if len(pool) else np.zeros(self.channels)
            std = pool.std(axis=(0, 2, 3)) if len(pool) else np.ones(self.channels)
            object.__setattr__(self, "mean", mean)
            object.__setattr__(self, "std", np.where(std > 1e-12, std, 1.0))
        if self.train_ids is None:
            object.__setattr__(self, "train_ids", np.arange(len(self.train_y)))
        if self.val_ids is None:
            object.__setattr__(self, "val_ids", np.arange(len(self.val_y)) + len(self.train_y))

    @property
    def channels(self) -> int:
        return self.train_x.shape[1]

    @property
    def image_size(self) -> int:
        return self.train_x.shape[2]

    def normalize(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None, None]) / self.std[:, None, None]

    def denormalize(self, x: np.ndarray) -> np.ndarray:
        return x * self.std[:, None, None] + self.mean[:, None, None]

    def part(self, name: str, normalized: bool = True) -> tuple[np.ndarray, np.ndarray]:
        x, y = getattr(self, name + "_x"), getattr(self, name + "_y")
        return (self.normalize(x) if normalized else x), y


def seeded_permutation(n: int, seed: int) -> np.ndarray:
    """Fisher-Yates shuffle of ``range(n)`` driven by ``default_rng(seed).random``."""
    perm = np.arange(n)
    u = np.random.default_rng(seed).random(max(n - 1, 0))
    for step, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[step] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def stratified_halves(y: np.ndarray, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Split positions of ``y`` into two halves with equal per-class counts where possible."""
    first, second = [], []
    for c in range(num_classes):
        idx = np.flatnonzero(y == c)
        h = (len(idx) + 1) // 2
        first.append(idx[:h])
        second.append(idx[h:])
    a = np.sort(np.concatenate(first)) if first else np.zeros(0, int)
    b = np.sort(np.concatenate(second)) if second else np.zeros(0, int)
    return a.astype(int), b.astype(int)


# --- synthetic ----------------------------------------------------------------

def synthetic_blobs(num_classes: int = 10, n_samples: int = 1000, image_size: int = 16,
                    channels: int = 3, seed: int = 0, blobs: int = 3, jitter: float = 0.08,
                    pixel_noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Images of Gaussian blobs; each class has its own blob layout and colors.

    Labels cycle through the classes so counts are balanced. Blob centers
    are jittered per sample, amplitudes vary, and pixel noise is added.
    """
    if num_classes < 1 or n_samples < 0:
        raise ValueError("need num_classes >= 1 and n_samples >= 0")
    proto_rng = np.random.default_rng([seed, 0])
    centers = proto_rng.uniform(0.15, 0.85, (num_classes, blobs, 2))
    colors = proto_rng.uniform(0.0, 1.0, (num_classes, blobs, channels))
    widths = proto_rng.uniform(0.08, 0.2, (num_classes, blobs))
    rng = np.random.default_rng([seed, 1])
    y = np.arange(n_samples) % num_classes
    grid = (np.arange(image_size) + 0.5) / image_size
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    x = np.zeros((n_samples, channels, image_size, image_size))
    for i in range(n_samples):
        c = y[i]
        img = np.zeros((channels, image_size, image_size))
        for b in range(blobs):
            cy, cx = centers[c, b] + jitter * rng.standard_normal(2)
            amp = rng.uniform(0.6, 1.0)
            bump = np.exp(-((gy - cy) ** 2 + (gx - cx) ** 2) / (2 * widths[c, b] ** 2))
            img += amp * colors[c, b][:, None, None] * bump
        img += pixel_noise * rng.standard_normal(img.shape)
        x[i] = np.clip(img, 0.0, 1.0)
    return x, y


def synthetic_gratings(num_classes: int = 10, n_samples: int = 1000, image_size: int = 16,
                       channels: int = 3, seed: int = 0, pixel_noise: float = 0.1,
                       orientations: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Oriented sinusoidal gratings with random phase; class = (orientation, frequency).

    Class ``c`` uses orientation ``pi * (c % orientations) / orientations`` and
    ``2 + 2 * (c // orientations)`` cycles per image. Phase, contrast and the
    per-channel tint are drawn per sample, so no pixel template identifies a
    class and local filtering is needed.
    """
    if num_classes < 1 or n_samples < 0:
        raise ValueError("need num_classes >= 1 and n_samples >= 0")
    rng = np.random.default_rng([seed, 2])
    y = np.arange(n_samples) % num_classes
    grid = np.arange(image_size) / image_size
    gy, gx = np.meshgrid(grid, grid, indexing="ij")
    x = np.empty((n_samples, channels, image_size, image_size))
    for i in range(n_samples):
        c = y[i]
        theta = np.pi * (c % orientations) / orientations + 0.05 * rng.standard_normal()
        cycles = 2.0 + 2.0 * (c // orientations)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = np.sin(2 * np.pi * cycles * (np.cos(theta) * gx + np.sin(theta) * gy) + phase)
        tint = rng.uniform(0.5, 1.0, channels)
        img = 0.5 + rng.uniform(0.2, 0.45) * tint[:, None, None] * wave
        img += pixel_noise * rng.standard_normal(img.shape)
        x[i] = np.clip(img, 0.0, 1.0)
    return x, y


# --- file formats ---------------------------------------------------------------

_IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path: str) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise DataFormatError("file shorter than the 4-byte magic", str(path), len(raw))
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code not in _IDX_DTYPES:
        raise DataFormatError(f"bad IDX magic 0x{raw[:4].hex()}", str(path), 0)
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated dimension header", str(path), len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    dt = np.dtype(_IDX_DTYPES[dtype_code])
    need = header + int(np.prod(dims)) * dt.itemsize
    if len(raw) < need:
        raise DataFormatError(f"truncated payload: expected {need} bytes, got {len(raw)}", str(path), len(raw))
    if len(raw) > need:
        raise DataFormatError(f"trailing garbage after {need} bytes", str(path), need)
    return np.frombuffer(raw, dtype=dt, count=int(np.prod(dims)), offset=header).reshape(dims)


def write_idx(path: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    codes = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}
    if arr.dtype not in codes:
        raise ValueError("write_idx supports uint8/int8 arrays")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">HBB", 0, codes[arr.dtype], arr.ndim))
        fh.write(struct.pack(">" + "I" * arr.ndim, *arr.shape))
        fh.write(arr.tobytes())


def read_cifar_binary(path: str, num_classes: int = 10) -> tuple[np.ndarray, np.ndarray]:
    raw = _read_bytes(path)
    if len(raw) % CIFAR_RECORD:
        cut = len(raw) - len(raw) % CIFAR_RECORD
        raise DataFormatError(f"truncated record ({len(raw) % CIFAR_RECORD} of {CIFAR_RECORD} bytes)",
                              str(path), cut)
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(int)
    bad = np.flatnonzero(labels >= num_classes)
    if len(bad):
        raise DataFormatError(f"label {labels[bad[0]]} out of range [0, {num_classes})",
                              str(path), int(bad[0]) * CIFAR_RECORD)
    return rec[:, 1:].reshape(-1, 3, 32, 32), labels


def write_cifar_binary(path: str, images: np.ndarray, labels: Sequence[int]) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), 3072)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    with open(path, "wb") as fh:
        fh.write(rec.tobytes())


def _to_nchw(images: np.ndarray) -> np.ndarray:
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[:, None]
    elif x.ndim == 4 and x.shape[-1] in (1, 3) and x.shape[1] not in (1, 3):
        x = x.transpose(0, 3, 1, 2)
    if x.dtype == np.uint8:
        return x.astype(np.float64) / 255.0
    return x.astype(np.float64)


# --- splitting ------------------------------------------------------------------

def _make_split(pool_x, pool_y, test_x, test_y, num_classes, seed) -> DatasetSplit:
    perm = seeded_permutation(len(pool_y), seed)
    px, py = pool_x[perm], pool_y[perm]
    a, b = stratified_halves(py, num_classes)
    tperm = seeded_permutation(len(test_y), seed + 1)
    return DatasetSplit(px[a], py[a], px[b], py[b], test_x[tperm], test_y[tperm], num_classes,
                        train_ids=perm[a], val_ids=perm[b])


def load_dataset(source: str, seed: int = 0, **options) -> DatasetSplit:
    """Load and split a dataset.

    ``source`` is ``synthetic`` (options: pattern, num_classes, n_samples,
    n_test, image_size, channels, data_seed, pixel_noise, plus blobs/jitter or
    orientations), ``idx``
    (train_images, train_labels, test_images, test_labels) or ``cifar10``
    (train_files, test_files). The training pool is shuffled with ``seed`` and
    split into equal-capacity train/val halves, class by class.
    """
    if source == "synthetic":
        k = int(options.get("num_classes", 10))
        n = int(options.get("n_samples", 1000))
        n_test = int(options.get("n_test", n // 2))
        pattern = options.get("pattern", "blobs")
        if pattern == "blobs":
            gen, keys = synthetic_blobs, ("image_size", "channels", "blobs", "jitter", "pixel_noise")
        elif pattern == "gratings":
            gen, keys = synthetic_gratings, ("image_size", "channels", "pixel_noise", "orientations")
        else:
            raise ValueError(f"unknown synthetic pattern {pattern!r}; expected blobs or gratings")
        kw = {key: options[key] for key in keys if key in options}
        x, y = gen(k, n + n_test, seed=int(options.get("data_seed", 0)), **kw)
        # interleaved labels: take the pool and test from disjoint ranges
        return _make_split(x[:n], y[:n], x[n:], y[n:], k, seed)
    if source == "idx":
        k = int(options.get("num_classes", 10))
        tr_x = _to_nchw(read_idx(options["train_images"]))
        tr_y = read_idx(options["train_labels"]).astype(int)
        te_x = _to_nchw(read_idx(options["test_images"]))
        te_y = read_idx(options["test_labels"]).astype(int)
        for name, lab, imgs in (("train", tr_y, tr_x), ("test", te_y, te_x)):
            if len(lab) != len(imgs):
                raise DataFormatError(f"{name}: {len(imgs)} images but {len(lab)} labels")
            if len(lab) and (lab.min() < 0 or lab.max() >= k):
                raise DataFormatError(f"{name}: label out of range [0, {k})")
        return _make_split(tr_x, tr_y, te_x, te_y, k, seed)
    if source == "cifar10":
        parts = []
        for key in ("train_files", "test_files"):
            files = options[key]
            files = [files] if isinstance(files, (str, os.PathLike)) else list(files)
            xs, ys = zip(*(read_cifar_binary(f) for f in files))
            parts.append((_to_nchw(np.concatenate(xs)), np.concatenate(ys)))
        (tr_x, tr_y), (te_x, te_y) = parts
        return _make_split(tr_x, tr_y, te_x, te_y, 10, seed)
    raise ValueError(f"unknown dataset source {source!r}; expected synthetic, idx or cifar10")


def area_downscale(x: np.ndarray, size: int) -> np.ndarray:
    """Average-pool ``(N, C, H, W)`` images to ``size x size``; H, W must be multiples."""
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ValueError(f"cannot area-downscale {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    return x.reshape(n, c, size, fh, size, fw).mean(axis=(3, 5))


def subset(split: DatasetSplit, per_class: int, image_size: int | None = None,
           test_per_class: int | None = None) -> DatasetSplit:
    """Class-balanced subsample: ``per_class`` of each class in train and in val.

    Keeps the first samples of each class in existing order. The test part
    is limited to ``test_per_class`` per class when given.
    """
    def pick(y, count, part):
        if count is None:
            return np.arange(len(y))
        keep = []
        for c in range(split.num_classes):
            idx = np.flatnonzero(y == c)
            if len(idx) < count:
                raise ValueError(f"class {c} has only {len(idx)} samples in {part}, need {count}")
            keep.append(idx[:count])
        return np.sort(np.concatenate(keep))

    a = pick(split.train_y, per_class, "train")
    b = pick(split.val_y, per_class, "val")
    t = pick(split.test_y, test_per_class, "test")
    xs = [split.train_x[a], split.val_x[b], split.test_x[t]]
    if image_size is not None and image_size != split.image_size:
        xs = [area_downscale(x, image_size) for x in xs]
    return DatasetSplit(xs[0], split.train_y[a], xs[1], split.val_y[b], xs[2], split.test_y[t],
                        split.num_classes, train_ids=split.train_ids[a], val_ids=split.val_ids[b])


# --- benchmark lookup -------------------------------------------------------------

def canonical_genotype_key(genotype: Genotype | str | Mapping) -> str:
    """Canonical string for a genotype, an arch string, or a genotype JSON/dict."""
    if isinstance(genotype, Genotype):
        return genotype.canonical()
    if isinstance(genotype, Mapping):
        return Genotype.from_dict(genotype).canonical()
    text = str(genotype).strip()
    if text.startswith("{"):
        return Genotype.from_json(text).canonical()
    return Genotype.from_arch_string(text).canonical()


class BenchLookup:
    """Tabular accuracies keyed by canonical genotype string."""

    def __init__(self, entries: Mapping[str, Mapping[str, float]] | None = None):
        self.entries: dict[str, dict[str, float]] = {}
        for key, rec in (entries or {}).items():
            self.insert(key, rec)

    def insert(self, genotype, record: Mapping[str, float]) -> None:
        rec = {}
        for k, v in record.items():
            v = float(v)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"accuracy {k}={v} outside [0, 100]")
            rec[k] = v
        self.entries[canonical_genotype_key(genotype)] = rec

    def __len__(self) -> int:
        return len(self.entries)

    @classmethod
    def from_json(cls, text: str) -> "BenchLookup":
        try:
            doc = json.loads(text)
            rows = doc["entries"]
            out = cls()
            for row in rows:
                row = dict(row)
                key = row.pop("genotype")
                out.insert(key, row)
        except (ValueError, KeyError, TypeError) as exc:
            raise DataFormatError(f"malformed benchmark lookup: {exc}") from exc
        return out

    @classmethod
    def load(cls, path: str) -> "BenchLookup":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def to_json(self) -> str:
        rows = [{"genotype": k, **v} for k, v in sorted(self.entries.items())]
        return json.dumps({"entries": rows}, indent=2)


def bench_query(lookup: BenchLookup, genotype) -> dict[str, float] | None:
    rec = lookup.entries.get(canonical_genotype_key(genotype))
    return dict(rec) if rec is not None else None
