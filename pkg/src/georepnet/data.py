"""Synthetic RGB-D phase dataset with confusable class pairs.

Classes (0,1), (2,3), (4,5) and (6,7) share one RGB archetype per pair: two
textured blobs at random positions on a textured background. Within a pair
the RGB draw is identical and only the depth layout differs. The even class
has both blobs raised above a smooth background surface; the odd class has
one of them (picked by a coin drawn independently of the class) lying flush
with it. Class 8 is recognisable from RGB alone (a coloured bar).

Every random draw that shapes the RGB image happens before any depth draw,
so two classes of a pair rendered from equal generator states produce
byte-identical RGB.
"""

import json
import math
import os
import zlib
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .config import canonical_json
from .errors import DataError, FormatError, UsageError
from .tensorfile import decode_tensor, encode_tensor

GENERATOR_VERSION = 1
NUM_CLASSES = 9
CONFUSABLE_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7))
PAIR_CLASSES = tuple(c for pair in CONFUSABLE_PAIRS for c in pair)

TABLE_TRAIN_COUNTS = (81, 504, 444, 21, 405, 333, 303, 2628, 2361)
TABLE_TEST_COUNTS = (9, 57, 51, 3, 48, 39, 36, 294, 264)

# blob colour archetypes, one per pair
PAIR_COLOURS = np.array(
    [
        [0.85, 0.25, 0.25],
        [0.25, 0.75, 0.30],
        [0.25, 0.35, 0.85],
        [0.80, 0.75, 0.20],
    ]
)
BAR_COLOUR = np.array([0.70, 0.30, 0.80])

RAISE = 0.35
DEPTH_NOISE = 0.01
MIN_DEPTH = 1e-3
MANIFEST = "manifest.json"


def scaled_counts(counts, scale):
    """Scale per-class counts, rounding halves up (``40.5 -> 41``)."""
    s = Fraction(str(scale))
    if s < 0:
        raise UsageError("scale must be nonnegative")
    return [int(math.floor(Fraction(c) * s + Fraction(1, 2))) for c in counts]


DEFAULT_TRAIN_COUNTS = tuple(scaled_counts(TABLE_TRAIN_COUNTS, "0.1"))
DEFAULT_TEST_COUNTS = tuple(scaled_counts(TABLE_TEST_COUNTS, "0.1"))


@dataclass
class SampleRecord:
    rgb: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (H, W) in (0, 1]
    label: int


def _grid(size):
    h, w = size
    yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
    return yy / h, xx / w


def _smooth_field(rng, size, terms=3):
    """Sum of a few random low-frequency cosines, roughly in [-1, 1]."""
    yy, xx = _grid(size)
    field = np.zeros(size)
    for _ in range(terms):
        fy, fx = rng.uniform(0.3, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return field / terms


def _blob_mask(centre, radius, size):
    yy, xx = _grid(size)
    r2 = ((yy - centre[0]) ** 2 + (xx - centre[1]) ** 2) / radius**2
    # soft-edged disk
    return np.clip(1.5 - r2, 0.0, 1.0) ** 2 * (r2 < 1.5)


def _place_blobs(rng):
    radius = rng.uniform(0.13, 0.18, size=2)
    while True:
        centres = rng.uniform(0.22, 0.78, size=(2, 2))
        if np.linalg.norm(centres[0] - centres[1]) > 1.35 * radius.sum():
            return centres, radius


def _render_rgb(rng, pair, size):
    rgb = 0.45 + 0.1 * _smooth_field(rng, size)[None] + 0.05 * rng.uniform(-1, 1, size=(3, 1, 1))
    rgb = rgb + 0.04 * rng.standard_normal((3,) + tuple(size))
    if pair is None:
        return rgb, None
    centres, radius = _place_blobs(rng)
    masks = []
    for c, r in zip(centres, radius):
        m = _blob_mask(c, r, size)
        tint = PAIR_COLOURS[pair] + 0.06 * rng.uniform(-1, 1, size=3)
        texture = 1.0 + 0.12 * rng.standard_normal(size)
        rgb = rgb * (1 - m) + m * tint[:, None, None] * texture
        masks.append(m)
    return rgb, masks


def _render_bar(rng, rgb, size):
    horizontal = rng.random() < 0.5
    start = rng.uniform(0.3, 0.6)
    thick = rng.uniform(0.12, 0.2)
    yy, xx = _grid(size)
    coord = yy if horizontal else xx
    m = ((coord > start) & (coord < start + thick)).astype(float)
    tint = BAR_COLOUR + 0.06 * rng.uniform(-1, 1, size=3)
    return rgb * (1 - m) + m * tint[:, None, None], m


def generate_sample(class_id, rng, size=(64, 64)):
    """Render one :class:`SampleRecord` of class ``class_id`` from generator ``rng``."""
    if not isinstance(class_id, (int, np.integer)) or not 0 <= class_id < NUM_CLASSES:
        raise UsageError(f"class id must be an int in 0..{NUM_CLASSES - 1}, got {class_id!r}")
    size = tuple(int(s) for s in size)
    class_id = int(class_id)
    pair = class_id // 2 if class_id < 8 else None
    rgb, masks = _render_rgb(rng, pair, size)
    if class_id == 8:
        rgb, bar = _render_bar(rng, rgb, size)

    # depth draws start here
    depth = 0.65 + 0.08 * _smooth_field(rng, size, terms=2)
    if class_id == 8:
        depth = depth - rng.uniform(0.1, 0.3) * bar
    else:
        flush = int(rng.integers(2))
        for i, m in enumerate(masks):
            if class_id % 2 == 0 or i != flush:
                depth = depth - RAISE * m
    depth = depth + DEPTH_NOISE * rng.standard_normal(size)
    return SampleRecord(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32),
        depth=np.clip(depth, MIN_DEPTH, 1.0).astype(np.float32),
        label=class_id,
    )


def sample_rng(seed, split, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(split.encode()), int(index)]))


def expand_labels(counts):
    return [c for c, n in enumerate(counts) for _ in range(n)]


def _validate_counts(counts):
    counts = [int(c) for c in counts]
    if len(counts) != NUM_CLASSES or any(c < 0 for c in counts):
        raise UsageError(f"need {NUM_CLASSES} nonnegative counts, got {counts}")
    return counts


def generate_dataset(counts, seed, out_dir, split="train", size=(64, 64)):
    """Write one TensorFile per sample plus ``manifest.json``; return the manifest dict."""
    counts = _validate_counts(counts)
    os.makedirs(out_dir, exist_ok=True)
    files = []
    for index, label in enumerate(expand_labels(counts)):
        rec = generate_sample(label, sample_rng(seed, split, index), size)
        name = f"{split}_{index:05d}.grtf"
        stacked = np.concatenate([rec.rgb, rec.depth[None]], axis=0)
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(encode_tensor(stacked))
        files.append({"label": label, "path": name})
    manifest = {
        "counts": counts,
        "files": files,
        "seed": int(seed),
        "size": list(size),
        "split": split,
        "version": GENERATOR_VERSION,
    }
    with open(os.path.join(out_dir, MANIFEST), "w", encoding="utf-8") as fh:
        fh.write(canonical_json(manifest))
    return manifest


def read_manifest(data_dir):
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise DataError(f"no {MANIFEST} in {data_dir}")
    with open(path, encoding="utf-8") as fh:
        manifest = json.load(fh)
    files = manifest.get("files", [])
    if sum(manifest.get("counts", [])) != len(files):
        raise DataError(f"manifest counts sum to {sum(manifest['counts'])} but list {len(files)} files")
    if expand_labels(manifest["counts"]) != sorted(f["label"] for f in files):
        raise DataError("manifest labels disagree with its per-class counts")
    return manifest


def _load_record(data_dir, entry, index):
    path = os.path.join(data_dir, entry["path"])
    if not os.path.exists(path):
        raise DataError(f"sample {index}: missing file {entry['path']}", index=index)
    with open(path, "rb") as fh:
        try:
            arr, _ = decode_tensor(fh.read())
        except FormatError as exc:
            raise DataError(f"sample {index}: {exc}", index=index) from exc
    if arr.ndim != 3 or arr.shape[0] != 4:
        raise DataError(f"sample {index}: expected (4, H, W), got {arr.shape}", index=index)
    rgb, depth = arr[:3], arr[3]
    if not np.all(np.isfinite(arr)):
        raise DataError(f"sample {index}: non-finite values", index=index)
    if rgb.min() < 0 or rgb.max() > 1:
        raise DataError(f"sample {index}: rgb outside [0, 1]", index=index)
    if depth.min() <= 0 or depth.max() > 1:
        raise DataError(f"sample {index}: depth outside (0, 1]", index=index)
    label = entry["label"]
    if not 0 <= label < NUM_CLASSES:
        raise DataError(f"sample {index}: label {label} out of range", index=index)
    return SampleRecord(rgb=rgb, depth=depth, label=int(label))


def load_dataset(data_dir, shuffle_seed=None):
    """Yield validated samples in manifest order, or in a seeded permutation of it."""
    manifest = read_manifest(data_dir)
    order = np.arange(len(manifest["files"]))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(order)
    for index in order:
        yield _load_record(data_dir, manifest["files"][index], int(index))


class ArrayDataset:
    """In-memory stacked arrays ``rgb (N,3,H,W)``, ``depth (N,1,H,W)``, ``labels (N,)``."""

    def __init__(self, rgb, depth, labels):
        self.rgb = np.asarray(rgb, dtype=np.float32)
        self.depth = np.asarray(depth, dtype=np.float32)
        self.labels = np.asarray(labels, dtype=np.int64)
        if not (len(self.rgb) == len(self.depth) == len(self.labels)):
            raise DataError("rgb, depth and labels disagree in length")

    def __len__(self):
        return len(self.labels)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls(np.zeros((0, 3, 1, 1)), np.zeros((0, 1, 1, 1)), np.zeros(0))
        return cls(
            np.stack([r.rgb for r in records]),
            np.stack([r.depth[None] for r in records]),
            [r.label for r in records],
        )

    @classmethod
    def load(cls, data_dir):
        return cls.from_records(load_dataset(data_dir))

    @classmethod
    def synthesize(cls, counts, seed, split="train", size=(64, 64)):
        """Same samples as :func:`generate_dataset` without touching the disk."""
        counts = _validate_counts(counts)
        return cls.from_records(
            generate_sample(label, sample_rng(seed, split, i), size)
            for i, label in enumerate(expand_labels(counts))
        )

    def subset(self, idx):
        return ArrayDataset(self.rgb[idx], self.depth[idx], self.labels[idx])
