"""Synthetic shapes detection data: generation, on-disk format, loading, augmentation.

On-disk layout of a dataset directory::

    images/<sample_id>.rgb   raw 64x64x3 uint8, row-major HWC
    annotations.txt          sample_id class_id x1 y1 x2 y2   (fractions, 6 decimals)
    manifest.txt             sample_id image_file checksum    (CRC-32, hex)

Class ids: 1 circle, 2 square, 3 triangle (0 is reserved for background).
"""
from __future__ import annotations

import os
import zlib
from dataclasses import dataclass, field

import numpy as np

CLASSES = ("circle", "square", "triangle")
CANVAS = 64
# (probability, side range in pixels); side 12 gives area 144, the small/medium boundary
SIZE_MIX = ((0.4, (6, 11)), (0.4, (13, 29)), (0.2, (30, 44)))


class DatasetError(OSError):
    pass


class CorruptSampleError(DatasetError):
    def __init__(self, sample_id, msg):
        super().__init__(f"sample {sample_id}: {msg}")
        self.sample_id = sample_id


@dataclass
class ShapesSample:
    sample_id: str
    image: np.ndarray  # (3, H, W) float64 in [0, 1]
    boxes: np.ndarray  # (n, 4) corner form, fractions
    labels: np.ndarray  # (n,) class ids, 1-based

    def copy(self):
        return ShapesSample(self.sample_id, self.image.copy(), self.boxes.copy(), self.labels.copy())


@dataclass
class ManifestEntry:
    sample_id: str
    image_file: str
    checksum: str
    pixel_sum: int = 0


@dataclass
class Manifest:
    path: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


# --- rendering -----------------------------------------------------------------

def shape_mask(cls, x0, y0, side, n=CANVAS):
    """Boolean mask of a shape inscribed in the square [x0, x0+side) x [y0, y0+side)."""
    yy, xx = np.mgrid[0:n, 0:n] + 0.5
    u = (xx - x0) / side  # in [0, 1] across the shape's square
    v = (yy - y0) / side
    inside = (u >= 0) & (u <= 1) & (v >= 0) & (v <= 1)
    if cls == 1:
        return inside & ((u - 0.5) ** 2 + (v - 0.5) ** 2 <= 0.25)
    if cls == 2:
        return inside
    # apex-up isoceles triangle
    return inside & (np.abs(u - 0.5) <= v / 2)


def mask_box(mask):
    ys, xs = np.nonzero(mask)
    return np.array([xs.min(), ys.min(), xs.max() + 1, ys.max() + 1], dtype=np.float64) / mask.shape[0]


def _background(rng, n=CANVAS):
    base = rng.uniform(0.1, 0.9, size=3)
    coarse = rng.normal(0, 0.12, size=(3, 8, 8))
    img = base[:, None, None] + resize_bilinear(coarse, n) + rng.normal(0, 0.03, size=(3, n, n))
    return np.clip(img, 0, 1), base


def _pick_side(rng):
    r, acc = rng.random(), 0.0
    for p, (lo, hi) in SIZE_MIX:
        acc += p
        if r < acc:
            return int(rng.integers(lo, hi + 1))
    lo, hi = SIZE_MIX[-1][1]
    return int(rng.integers(lo, hi + 1))


def render_sample(rng, sample_id="", n=CANVAS):
    img, base = _background(rng, n)
    boxes, labels, taken = [], [], []
    count = int(rng.integers(1, 7))
    drawn = [(int(rng.integers(1, len(CLASSES) + 1)), _pick_side(rng)) for _ in range(count)]
    # largest first so big shapes still find room
    for cls, side in sorted(drawn, key=lambda cs: -cs[1]):
        for _attempt in range(50):
            x0 = int(rng.integers(0, n - side + 1))
            y0 = int(rng.integers(0, n - side + 1))
            # 1px gap so shapes never touch or occlude each other
            if all(x0 + side + 1 <= a or a2 + 1 <= x0 or y0 + side + 1 <= b or b2 + 1 <= y0
                   for a, b, a2, b2 in taken):
                break
        else:
            continue
        mask = shape_mask(cls, x0, y0, side, n)
        if not mask.any():
            continue
        while True:
            color = rng.uniform(0, 1, size=3)
            if np.abs(color - base).sum() > 0.6:
                break
        img[:, mask] = np.clip(color[:, None] + rng.normal(0, 0.03, size=(3, int(mask.sum()))), 0, 1)
        taken.append((x0, y0, x0 + side, y0 + side))
        boxes.append(mask_box(mask))
        labels.append(cls)
    if not boxes:  # every placement failed; cannot happen on an empty canvas
        raise RuntimeError("no shape placed")
    pixels = np.round(img.transpose(1, 2, 0) * 255).astype(np.uint8)
    return pixels, np.array(boxes), np.array(labels, dtype=np.int64)


def _checksum(raw: bytes):
    return f"{zlib.crc32(raw):08x}"


def generate_dataset(n, seed, path):
    """Render ``n`` samples deterministically from ``seed`` into directory ``path``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    try:
        os.makedirs(os.path.join(path, "images"), exist_ok=True)
        manifest = Manifest(os.path.join(path, "manifest.txt"))
        ann_lines = []
        for i in range(n):
            sid = f"{i:06d}"
            pixels, boxes, labels = render_sample(rng, sid)
            raw = pixels.tobytes()
            fname = f"images/{sid}.rgb"
            with open(os.path.join(path, fname), "wb") as fh:
                fh.write(raw)
            manifest.entries.append(ManifestEntry(sid, fname, _checksum(raw), int(pixels.sum(dtype=np.int64))))
            for c, b in zip(labels, boxes):
                ann_lines.append(f"{sid} {c} {b[0]:.6f} {b[1]:.6f} {b[2]:.6f} {b[3]:.6f}\n")
        with open(os.path.join(path, "annotations.txt"), "w", encoding="utf-8") as fh:
            fh.writelines(ann_lines)
        with open(manifest.path, "w", encoding="utf-8") as fh:
            for e in manifest.entries:
                fh.write(f"{e.sample_id} {e.image_file} {e.checksum}\n")
    except OSError as exc:
        raise DatasetError(f"cannot write dataset to {path}: {exc}") from exc
    return manifest


# --- loading -------------------------------------------------------------------

def read_annotations(path):
    """``{sample_id: (boxes (n,4), labels (n,))}`` from an annotation file."""
    acc = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if not parts:
                continue
            sid, cls, coords = parts[0], int(parts[1]), [float(v) for v in parts[2:6]]
            acc.setdefault(sid, ([], []))
            acc[sid][0].append(coords)
            acc[sid][1].append(cls)
    return {k: (np.array(b, dtype=np.float64).reshape(-1, 4), np.array(c, dtype=np.int64))
            for k, (b, c) in acc.items()}


def read_manifest(path):
    entries = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if parts:
                entries.append(ManifestEntry(parts[0], parts[1], parts[2]))
    return Manifest(path, entries)


class ShapesDataset:
    """Lazy view over a generated dataset directory, in manifest order."""

    def __init__(self, path):
        self.path = path
        mpath = os.path.join(path, "manifest.txt")
        if not os.path.exists(mpath):
            raise DatasetError(f"no manifest at {mpath}")
        self.manifest = read_manifest(mpath)
        self.annotations = read_annotations(os.path.join(path, "annotations.txt"))

    def __len__(self):
        return len(self.manifest.entries)

    def raw_pixels(self, i):
        e = self.manifest.entries[i]
        fpath = os.path.join(self.path, e.image_file)
        try:
            with open(fpath, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError as exc:
            raise DatasetError(f"sample {e.sample_id}: missing image file {fpath}") from exc
        if _checksum(raw) != e.checksum or len(raw) != CANVAS * CANVAS * 3:
            raise CorruptSampleError(e.sample_id, "checksum mismatch")
        return np.frombuffer(raw, dtype=np.uint8).reshape(CANVAS, CANVAS, 3)

    def __getitem__(self, i) -> ShapesSample:
        e = self.manifest.entries[i]
        pixels = self.raw_pixels(i)
        boxes, labels = self.annotations.get(e.sample_id, (np.zeros((0, 4)), np.zeros(0, np.int64)))
        image = pixels.transpose(2, 0, 1).astype(np.float64) / 255.0
        return ShapesSample(e.sample_id, image, boxes.copy(), labels.copy())

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]

    def ground_truth(self):
        """``{sample_id: (boxes, labels)}`` for evaluation."""
        return {e.sample_id: self.annotations.get(e.sample_id, (np.zeros((0, 4)), np.zeros(0, np.int64)))
                for e in self.manifest.entries}


def load_dataset(path):
    return ShapesDataset(path)


# --- augmentation --------------------------------------------------------------

def hflip(sample: ShapesSample) -> ShapesSample:
    boxes = sample.boxes.copy()
    boxes[:, [0, 2]] = 1.0 - sample.boxes[:, [2, 0]]
    return ShapesSample(sample.sample_id, sample.image[:, :, ::-1].copy(), boxes, sample.labels.copy())


def resize_bilinear(img, out):
    """Resize (C, H, W) to (C, out, out), sampling at pixel centers."""
    C, H, W = img.shape

    def axis(n_in):
        pos = (np.arange(out) + 0.5) * n_in / out - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(H)
    x0, x1, fx = axis(W)
    top = img[:, y0][:, :, x0] * (1 - fx) + img[:, y0][:, :, x1] * fx
    bot = img[:, y1][:, :, x0] * (1 - fx) + img[:, y1][:, :, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def crop(sample: ShapesSample, x0, y0, side, min_keep=0.1):
    """Crop the pixel square at (x0, y0) and rescale back to the canvas.

    Boxes whose center falls outside the crop, or that keep under
    ``min_keep`` of their area, are dropped. Returns None if none survive.
    """
    n = sample.image.shape[1]
    fx0, fy0, fs = x0 / n, y0 / n, side / n
    cx = (sample.boxes[:, 0] + sample.boxes[:, 2]) / 2
    cy = (sample.boxes[:, 1] + sample.boxes[:, 3]) / 2
    keep = (cx > fx0) & (cx < fx0 + fs) & (cy > fy0) & (cy < fy0 + fs)
    clipped = np.stack([
        np.clip(sample.boxes[:, 0], fx0, fx0 + fs), np.clip(sample.boxes[:, 1], fy0, fy0 + fs),
        np.clip(sample.boxes[:, 2], fx0, fx0 + fs), np.clip(sample.boxes[:, 3], fy0, fy0 + fs),
    ], axis=1) if len(sample.boxes) else sample.boxes.copy()
    area = lambda b: (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])  # noqa: E731
    if len(sample.boxes):
        keep &= area(clipped) >= min_keep * area(sample.boxes)
        keep &= (clipped[:, 2] > clipped[:, 0]) & (clipped[:, 3] > clipped[:, 1])
    if not keep.any():
        return None
    boxes = (clipped[keep] - [fx0, fy0, fx0, fy0]) / fs
    patch = sample.image[:, y0:y0 + side, x0:x0 + side]
    image = patch.copy() if side == n else resize_bilinear(patch, n)
    return ShapesSample(sample.sample_id, image, np.clip(boxes, 0.0, 1.0), sample.labels[keep].copy())


def augment(sample: ShapesSample, rng, p_flip=0.5, min_scale=0.5, tries=50) -> ShapesSample:
    """Random horizontal flip, then a random square crop of scale in [min_scale, 1]."""
    out = hflip(sample) if rng.random() < p_flip else sample.copy()
    n = out.image.shape[1]
    for _ in range(tries):
        side = int(round(rng.uniform(min_scale, 1.0) * n))
        x0 = int(rng.integers(0, n - side + 1))
        y0 = int(rng.integers(0, n - side + 1))
        cropped = crop(out, x0, y0, side)
        if cropped is not None:
            return cropped
    return out
