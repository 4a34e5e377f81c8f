"""Datasets: IDX ingestion, synthetic fixtures, corruption, batching.

Images are always [N, C, H, W] float32 in [0,1]; labels are int64.
The procedural digit corpus (``digits_dataset``) renders 28x28 ten-class
digit images from glyph bitmaps under random affine distortion. It stands
in for MNIST-style data in environments without the real IDX files and is
written/read through the same IDX code path.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


class DataError(RuntimeError):
    pass


class IdxFormatError(DataError):
    pass


IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    images: np.ndarray  # [N,C,H,W] float32 in [0,1]
    labels: np.ndarray  # [N] int64 in [0, num_classes)
    num_classes: int = 10
    split: str = ""
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be [N,C,H,W], got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataError(
                f"{self.images.shape[0]} images but {self.labels.shape} labels")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values outside [0,1]")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0,{self.num_classes})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, idx, split=None):
        return LabeledDataset(self.images[idx], self.labels[idx],
                              self.num_classes, split or self.split,
                              dict(self.provenance))


# -- IDX binary format -------------------------------------------------------


def load_idx(images_path, labels_path):
    """Read an MNIST-style IDX image/label file pair (big-endian)."""
    with open(images_path, "rb") as f:
        head = f.read(16)
        if len(head) < 16:
            raise IdxFormatError(f"{images_path}: truncated header")
        magic, n, rows, cols = struct.unpack(">IIII", head)
        if magic != IDX_IMAGES_MAGIC:
            raise IdxFormatError(
                f"{images_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_IMAGES_MAGIC:08x}")
        raw = f.read(n * rows * cols)
    if len(raw) != n * rows * cols:
        raise IdxFormatError(f"{images_path}: truncated pixel data")

    with open(labels_path, "rb") as f:
        head = f.read(8)
        if len(head) < 8:
            raise IdxFormatError(f"{labels_path}: truncated header")
        magic, nl = struct.unpack(">II", head)
        if magic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad magic 0x{magic:08x}, "
                f"expected 0x{IDX_LABELS_MAGIC:08x}")
        lraw = f.read(nl)
    if len(lraw) != nl:
        raise IdxFormatError(f"{labels_path}: truncated label data")
    if nl != n:
        raise IdxFormatError(
            f"count mismatch: {n} images vs {nl} labels")

    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lraw, dtype=np.uint8).astype(np.int64)
    prov = {
        "images_file": str(images_path),
        "labels_file": str(labels_path),
        "images_sha256": hashlib.sha256(raw).hexdigest(),
        "labels_sha256": hashlib.sha256(lraw).hexdigest(),
    }
    return LabeledDataset(images.astype(np.float32) / 255.0, labels,
                          num_classes=int(labels.max()) + 1 if n else 10,
                          provenance=prov)


def write_idx(dataset, images_path, labels_path):
    """Write a single-channel dataset as an IDX pair (inverse of load_idx)."""
    imgs = dataset.images
    if imgs.shape[1] != 1:
        raise DataError("IDX writer supports single-channel images only")
    n, _, rows, cols = imgs.shape
    pixels = np.round(imgs[:, 0] * 255.0).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


# -- synthetic fixtures ------------------------------------------------------


def synth_dataset(kind, n, seed=0):
    """Deterministic micro-datasets for tests."""
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng([seed, 0x5D])
    if kind == "two-gaussians-2d":
        # linearly separable by construction at the default separation
        labels = rng.integers(0, 2, n)
        centers = np.where(labels[:, None] == 0, 0.3, 0.7)
        pts = centers + rng.normal(0, 0.06, (n, 2))
        pts = np.clip(pts, 0.0, 1.0)
        images = pts.reshape(n, 1, 1, 2).astype(np.float32)
        return LabeledDataset(images, labels, num_classes=2,
                              provenance={"synth": kind, "seed": seed})
    if kind == "striped-4x4-images":
        labels = rng.integers(0, 2, n)
        images = np.full((n, 1, 4, 4), 0.1, dtype=np.float32)
        images[labels == 0, :, ::2, :] = 0.9   # horizontal stripes
        images[labels == 1, :, :, ::2] = 0.9   # vertical stripes
        return LabeledDataset(images, labels, num_classes=2,
                              provenance={"synth": kind, "seed": seed})
    raise DataError(f"unknown synthetic dataset kind {kind!r}")


# 5x7 digit glyphs, one string per row
_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit):
    return np.array([[float(ch) for ch in row] for row in _GLYPHS[digit]],
                    dtype=np.float64)


def _render_digit(digit, rng):
    base = np.zeros((28, 28))
    glyph = ndimage.zoom(_glyph_array(digit), (20 / 7, 14 / 5), order=1)
    glyph = np.clip(glyph, 0, 1)
    base[4:4 + glyph.shape[0], 7:7 + glyph.shape[1]] = glyph

    theta = rng.uniform(-0.25, 0.25)
    sx, sy = rng.uniform(0.85, 1.15, 2)
    shear = rng.uniform(-0.15, 0.15)
    rot = np.array([[np.cos(theta), -np.sin(theta)],
                    [np.sin(theta), np.cos(theta)]])
    mat = rot @ np.array([[1.0 / sy, shear], [0.0, 1.0 / sx]])
    center = np.array([13.5, 13.5])
    offset = center - mat @ center + rng.uniform(-2.5, 2.5, 2)
    img = ndimage.affine_transform(base, mat, offset=offset, order=1)
    img = ndimage.gaussian_filter(img, rng.uniform(0.3, 0.55))
    img *= rng.uniform(0.9, 1.0) / max(img.max(), 1e-6)
    # push stroke interiors and background toward saturation (smoothstep),
    # leaving thin antialiased edges: high-contrast, mostly-binary pixels
    t = np.clip((img - 0.2) / 0.45, 0.0, 1.0)
    img = t * t * (3.0 - 2.0 * t)
    return np.clip(img, 0.0, 1.0)


def digits_dataset(n, seed=0, split=""):
    """Procedural 28x28 ten-class digit images (MNIST-style stand-in)."""
    if n <= 0:
        raise DataError("n must be positive")
    rng = np.random.default_rng([seed, 0xD161])
    labels = rng.integers(0, 10, n)
    images = np.empty((n, 1, 28, 28), dtype=np.float32)
    for i in range(n):
        images[i, 0] = _render_digit(int(labels[i]), rng)
    return LabeledDataset(images, labels, num_classes=10, split=split,
                          provenance={"synth": "digits", "seed": seed})


# -- corruption --------------------------------------------------------------

CORRUPTION_KINDS = ("gaussian_noise", "shot_noise", "impulse_noise",
                    "gaussian_blur", "contrast", "brightness")

# per-kind severity schedules, index 0 = severity 1 (monotone in strength)
_SEVERITY = {
    "gaussian_noise": [0.04, 0.08, 0.12, 0.18, 0.26],
    "shot_noise": [60.0, 25.0, 12.0, 5.0, 3.0],
    "impulse_noise": [0.01, 0.03, 0.06, 0.10, 0.17],
    "gaussian_blur": [0.4, 0.6, 0.9, 1.3, 1.8],
    "contrast": [0.75, 0.60, 0.45, 0.30, 0.20],
    "brightness": [0.05, 0.09, 0.14, 0.20, 0.26],
}


@dataclass
class CorruptionSpec:
    kind: str
    severity: int
    seed: int = 0

    def __post_init__(self):
        if self.kind not in CORRUPTION_KINDS:
            raise DataError(f"unknown corruption kind {self.kind!r}")
        if not 0 <= self.severity <= 5:
            raise DataError(f"severity must be in 0..5, got {self.severity}")


def corrupt(dataset, spec):
    """Apply a corruption; labels unchanged, pixels re-clamped to [0,1].

    Severity 0 is the identity.
    """
    if spec.severity == 0:
        return dataset.subset(np.arange(len(dataset)))
    x = dataset.images.astype(np.float64)
    rng = np.random.default_rng([spec.seed, spec.severity,
                                 CORRUPTION_KINDS.index(spec.kind)])
    p = _SEVERITY[spec.kind][spec.severity - 1]
    if spec.kind == "gaussian_noise":
        x = x + rng.normal(0, p, x.shape)
    elif spec.kind == "shot_noise":
        x = rng.poisson(x * p) / p
    elif spec.kind == "impulse_noise":
        mask = rng.random(x.shape)
        x = np.where(mask < p / 2, 0.0, np.where(mask > 1 - p / 2, 1.0, x))
    elif spec.kind == "gaussian_blur":
        x = ndimage.gaussian_filter(x, sigma=(0, 0, p, p))
    elif spec.kind == "contrast":
        x = (x - 0.5) * p + 0.5
    elif spec.kind == "brightness":
        x = x + p
    out = np.clip(x, 0.0, 1.0).astype(np.float32)
    prov = dict(dataset.provenance)
    prov["corruption"] = {"kind": spec.kind, "severity": spec.severity,
                          "seed": spec.seed}
    return LabeledDataset(out, dataset.labels.copy(), dataset.num_classes,
                          dataset.split, prov)


# -- batching ----------------------------------------------------------------


def batches(dataset, m, shuffle=False, seed=0):
    """Yield (images, labels) covering every example exactly once.

    The final short batch is kept. The permutation is a pure function of
    ``seed``, so two epochs with the same seed see identical sequences.
    """
    if m <= 0:
        raise DataError("batch size must be positive")
    n = len(dataset)
    order = np.arange(n)
    if shuffle:
        seq = [seed] if isinstance(seed, int) else list(seed)
        np.random.default_rng([*seq, 0xBA7C4]).shuffle(order)
    for i in range(0, n, m):
        idx = order[i:i + m]
        yield dataset.images[idx], dataset.labels[idx]
