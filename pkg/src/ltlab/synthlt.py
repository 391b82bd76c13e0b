"""Synthetic long-tailed glyph datasets, shot splits and the LTDS file format."""

from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .ndgrad import rotate90

__all__ = [
    "LongTailDataset",
    "ShotSplit",
    "GlyphCapacityError",
    "DatasetFileError",
    "BadMagicError",
    "VersionMismatchError",
    "TruncatedFileError",
    "LabelRangeError",
    "make_longtail_counts",
    "glyph_prototypes",
    "generate_glyph_dataset",
    "balanced_counts",
    "shot_split",
    "save_dataset_file",
    "load_dataset_file",
]


class GlyphCapacityError(ValueError):
    """More classes requested than distinct glyphs fit on the grid."""


class DatasetFileError(ValueError):
    pass


class BadMagicError(DatasetFileError):
    pass


class VersionMismatchError(DatasetFileError):
    pass


class TruncatedFileError(DatasetFileError):
    pass


class LabelRangeError(DatasetFileError):
    pass


@dataclass(frozen=True, eq=False)
class LongTailDataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_counts: np.ndarray  # (C,) int64

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        counts = np.ascontiguousarray(self.class_counts, dtype=np.int64)
        if images.ndim != 3:
            raise ValueError(f"images must be N x H x W, got {images.shape}")
        if labels.shape != (images.shape[0],):
            raise ValueError("labels and images disagree in length")
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("class_counts must be a non-empty 1-D array")
        if labels.size and (labels.min() < 0 or labels.max() >= counts.size):
            raise LabelRangeError("label out of range")
        if not np.array_equal(np.bincount(labels, minlength=counts.size), counts):
            raise ValueError("label histogram does not match class_counts")
        for arr in (images, labels, counts):
            arr.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "class_counts", counts)

    @property
    def num_classes(self):
        return int(self.class_counts.size)

    @property
    def total(self):
        return int(self.labels.size)

    @property
    def image_size(self):
        return tuple(self.images.shape[1:])

    def indices_by_class(self):
        """List of index arrays, one per class, in ascending index order."""
        order = np.argsort(self.labels, kind="stable")
        bounds = np.concatenate([[0], np.cumsum(self.class_counts)])
        return [order[bounds[c]:bounds[c + 1]] for c in range(self.num_classes)]

    def __eq__(self, other):
        if not isinstance(other, LongTailDataset):
            return NotImplemented
        return (
            self.images.shape == other.images.shape
            and np.array_equal(self.class_counts, other.class_counts)
            and np.array_equal(self.labels, other.labels)
            and self.images.tobytes() == other.images.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True)
class ShotSplit:
    many: frozenset
    medium: frozenset
    low: frozenset
    thresholds: tuple = (100, 20)
    num_classes: int = field(default=0)

    def group_of(self, c):
        if c in self.many:
            return "many"
        if c in self.low:
            return "low"
        return "medium"

    def as_dict(self):
        return {"many": sorted(self.many), "medium": sorted(self.medium), "low": sorted(self.low)}


def make_longtail_counts(num_classes, n_max, n_min):
    """Deterministic power-law class counts from ``n_max`` down to ``n_min``.

    Class c (0-based rank) gets ``round(n_max * (c+1) ** -gamma)`` with gamma
    chosen so the last class lands on ``n_min``.
    """
    if num_classes < 1:
        raise ValueError("need at least one class")
    if n_min < 1 or n_max < n_min:
        raise ValueError(f"invalid bounds: n_max={n_max}, n_min={n_min}")
    if num_classes == 1:
        return np.array([n_max], dtype=np.int64)
    gamma = math.log(n_max / n_min) / math.log(num_classes)
    ranks = np.arange(1, num_classes + 1, dtype=np.float64)
    counts = np.round(n_max * ranks ** (-gamma))
    counts = np.clip(counts, n_min, n_max).astype(np.int64)
    counts[0], counts[-1] = n_max, n_min
    return counts


def balanced_counts(num_classes, per_class):
    return np.full(num_classes, per_class, dtype=np.int64)


# ---------------------------------------------------------------------------
# glyphs
#
# A glyph is a 2 x 2 arrangement of parts, one per quadrant. Each part is an
# oriented bar or an L-shaped corner drawn inside the quadrant, so the same
# part vocabulary is shared by every class and a class is identified by its
# tuple of four part ids.

PARTS = ("bar_h", "bar_v", "bar_d", "bar_a", "corner_tl", "corner_tr", "corner_br", "corner_bl")
# where each part goes under one counter-clockwise quarter-turn
_PART_CCW = {"bar_h": "bar_v", "bar_v": "bar_h", "bar_d": "bar_a", "bar_a": "bar_d",
             "corner_tl": "corner_bl", "corner_bl": "corner_br",
             "corner_br": "corner_tr", "corner_tr": "corner_tl"}
# quadrant order: top-left, top-right, bottom-left, bottom-right
_QUAD_CCW = {0: 2, 1: 0, 2: 3, 3: 1}
MIN_PART_DISTANCE = 2


def _draw_part(cell, part):
    n = cell.shape[0]
    lo, hi = 1, n - 2
    mid = n // 2
    r = np.arange(lo, hi + 1)
    if part == "bar_h":
        cell[mid, lo:hi + 1] = 1.0
    elif part == "bar_v":
        cell[lo:hi + 1, mid] = 1.0
    elif part == "bar_d":
        cell[r, r] = 1.0
    elif part == "bar_a":
        cell[r, hi + lo - r] = 1.0
    else:
        corner = part.split("_")[1]
        row = lo if corner[0] == "t" else hi
        col = lo if corner[1] == "l" else hi
        cell[row, lo:hi + 1] = 1.0
        cell[lo:hi + 1, col] = 1.0
    return cell


def render_glyph(code, image_size):
    """Draw the 4-part ``code`` (part indices, quadrant order TL, TR, BL, BR)."""
    g = np.zeros((image_size, image_size), dtype=np.float32)
    h = image_size // 2
    origins = [(0, 0), (0, image_size - h), (image_size - h, 0), (image_size - h, image_size - h)]
    for (r0, c0), p in zip(origins, code):
        _draw_part(g[r0:r0 + h, c0:c0 + h], PARTS[p])
    return g


def _rotate_code(code):
    out = [0] * 4
    for q, p in enumerate(code):
        out[_QUAD_CCW[q]] = PARTS.index(_PART_CCW[PARTS[p]])
    return tuple(out)


def _code_rotations(code):
    rots = [tuple(code)]
    for _ in range(3):
        rots.append(_rotate_code(rots[-1]))
    return rots


@lru_cache(maxsize=None)
def _glyph_codes(image_size):
    """Accepted part codes, in a fixed pseudo-random order.

    A code is kept when its four rotations are distinct, none of them is a
    rotation of an already kept code, and it differs from every kept code in
    at least ``MIN_PART_DISTANCE`` quadrants.
    """
    all_codes = list(itertools.product(range(len(PARTS)), repeat=4))
    order = np.random.Generator(np.random.PCG64(20200716)).permutation(len(all_codes))
    kept, taken = [], set()
    for i in order:
        code = all_codes[i]
        rots = _code_rotations(code)
        if len(set(rots)) < 4 or any(r in taken for r in rots):
            continue
        if any(sum(a != b for a, b in zip(code, k)) < MIN_PART_DISTANCE for k in kept):
            continue
        kept.append(code)
        taken.update(rots)
    return tuple(kept)


def glyph_prototypes(num_classes, image_size):
    """Return ``num_classes`` prototypes whose quarter-turn rotations are all distinct.

    No prototype equals a 90/180/270 degree rotation of itself or of any
    other prototype.
    """
    if image_size < 8:
        raise ValueError("image_size must be >= 8")
    codes = _glyph_codes(image_size)
    if num_classes > len(codes):
        raise GlyphCapacityError(
            f"only {len(codes)} distinct glyphs fit on a {image_size}x{image_size} grid, "
            f"{num_classes} requested")
    protos = np.stack([render_glyph(codes[c], image_size) for c in range(num_classes)])
    keys = {rotate90(p[None], k)[0].tobytes() for p in protos for k in range(4)}
    if len(keys) != 4 * num_classes:
        raise GlyphCapacityError(f"glyph rotations collide on a {image_size}x{image_size} grid")
    return protos


def generate_glyph_dataset(counts, image_size, noise_sd, seed, contrast=1.0, background=0.0):
    """Sample ``counts[c]`` noisy copies of glyph prototype c for each class.

    Prototype pixels are ``background`` off-stroke and ``background + contrast``
    on-stroke.
    """
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0 or np.any(counts < 1):
        raise ValueError("counts must be a non-empty vector of positive integers")
    if noise_sd < 0:
        raise ValueError("noise_sd must be non-negative")
    if not 0.0 <= background <= background + contrast <= 1.0 or contrast <= 0:
        raise ValueError("need 0 <= background < background + contrast <= 1")
    protos = background + contrast * glyph_prototypes(counts.size, image_size)
    labels = np.repeat(np.arange(counts.size), counts)
    images = protos[labels].astype(np.float64)
    if noise_sd > 0:
        rng = np.random.Generator(np.random.PCG64(seed))
        images = images + rng.normal(0.0, noise_sd, size=images.shape)
        np.clip(images, 0.0, 1.0, out=images)
    return LongTailDataset(images.astype(np.float32), labels, counts)


def shot_split(counts, t_many=100, t_low=20):
    if not t_many > t_low >= 1:
        raise ValueError(f"need t_many > t_low >= 1, got ({t_many}, {t_low})")
    counts = np.asarray(counts)
    many = frozenset(int(c) for c in np.flatnonzero(counts >= t_many))
    low = frozenset(int(c) for c in np.flatnonzero(counts <= t_low))
    medium = frozenset(range(counts.size)) - many - low
    return ShotSplit(many, medium, low, (t_many, t_low), int(counts.size))


# ---------------------------------------------------------------------------
# LTDS file format

LTDS_MAGIC = b"LTDS"
LTDS_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def save_dataset_file(dataset, path):
    n, h, w = dataset.images.shape
    c = dataset.num_classes
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(LTDS_MAGIC, LTDS_VERSION, c, n, h, w))
        fh.write(dataset.class_counts.astype("<u4").tobytes())
        fh.write(dataset.labels.astype("<u4").tobytes())
        fh.write(dataset.images.astype("<f4").tobytes())


def load_dataset_file(path):
    buf = Path(path).read_bytes()
    if len(buf) < 4 or buf[:4] != LTDS_MAGIC:
        raise BadMagicError("bad magic")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError("truncated header")
    _, version, c, n, h, w = _HEADER.unpack_from(buf)
    if version != LTDS_VERSION:
        raise VersionMismatchError(f"unsupported version {version}")
    need = _HEADER.size + 4 * c + 4 * n + 4 * n * h * w
    if len(buf) < need:
        raise TruncatedFileError(f"truncated payload: {len(buf)} of {need} bytes")
    if len(buf) > need:
        raise DatasetFileError("trailing bytes after payload")
    pos = _HEADER.size
    counts = np.frombuffer(buf, "<u4", c, pos).astype(np.int64)
    pos += 4 * c
    labels = np.frombuffer(buf, "<u4", n, pos).astype(np.int64)
    pos += 4 * n
    images = np.frombuffer(buf, "<f4", n * h * w, pos).reshape(n, h, w)
    if n and labels.max() >= c:
        raise LabelRangeError(f"label out of range: {int(labels.max())} >= {c}")
    return LongTailDataset(images.astype(np.float32), labels, counts)
