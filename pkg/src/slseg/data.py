"""Synthetic segmentation tasks and P5 graymap I/O.

Each sample is a background (class 0) with random axis-aligned rectangles
of classes ``1..C-1``.  Pixel intensity is a class-specific level plus
Gaussian noise.  An optional vertical ambiguity band replaces the labels
under it with a coin flip between classes 0 and 1, rendered with
overlapping intensity distributions, so no classifier is error-free there.
"""
import os
import re
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

IGNORE_INDEX = 255


@dataclass
class SegSample:
    image: np.ndarray       # [C_in, H, W] in [0, 1]
    labels: np.ndarray      # [H, W] uint8
    ambiguity: np.ndarray   # [H, W] bool, ground-truth band mask


@dataclass
class SyntheticTaskSpec:
    height: int = 16
    width: int = 16
    class_count: int = 3
    shape_density: float = 0.35
    noise: float = 0.05
    band_width: int = 0
    band_noise: float = 0.08
    band_separation: float = 0.04
    in_channels: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.class_count < 2:
            raise ValueError("class_count must be >= 2")
        if self.noise < 0 or self.band_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.band_width < 0 or self.band_width > self.width:
            raise ValueError(f"band width {self.band_width} does not fit in image width {self.width}")
        if self.class_count > 255:
            raise ValueError("at most 255 classes fit in a graymap label file")

    def class_levels(self):
        C = self.class_count
        return (np.arange(C) + 1.0) / (C + 1.0)


def _draw_sample(spec, rng):
    H, W, C = spec.height, spec.width, spec.class_count
    labels = np.zeros((H, W), dtype=np.uint8)
    n_rects = max(1, int(round(spec.shape_density * H * W / max(1.0, (H / 3) * (W / 3)))))
    for r in range(n_rects):
        h = int(rng.integers(max(2, H // 6), max(3, H // 2) + 1))
        w = int(rng.integers(max(2, W // 6), max(3, W // 2) + 1))
        top = int(rng.integers(0, H - h + 1))
        left = int(rng.integers(0, W - w + 1))
        # the first rectangle forces a second class into the image
        cls = 1 + (r % (C - 1)) if r == 0 else int(rng.integers(1, C))
        labels[top:top + h, left:left + w] = cls
    levels = spec.class_levels()
    image = levels[labels] + spec.noise * rng.standard_normal((H, W))
    amb = np.zeros((H, W), dtype=bool)
    if spec.band_width > 0:
        left = int(rng.integers(0, W - spec.band_width + 1))
        amb[:, left:left + spec.band_width] = True
        n = int(amb.sum())
        coin = rng.integers(0, 2, size=n).astype(np.uint8)
        mid = 0.5 * (levels[0] + levels[1])
        sign = np.where(coin == 1, 1.0, -1.0)
        labels[amb] = coin
        image[amb] = mid + spec.band_separation * sign + spec.band_noise * rng.standard_normal(n)
    image = np.clip(image, 0.0, 1.0)
    image = np.repeat(image[None], spec.in_channels, axis=0)
    return SegSample(image, labels, amb)


def generate_dataset(spec, n):
    """``n`` samples, reproducible from ``spec.seed`` (one child seed per sample)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    children = np.random.SeedSequence(spec.seed).spawn(n)
    return [_draw_sample(spec, np.random.default_rng(s)) for s in children]


def stack_samples(samples):
    """Return ``(images [N,C,H,W], labels [N,H,W] int64, ambiguity [N,H,W])``."""
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.labels for s in samples]).astype(np.int64)
    amb = np.stack([s.ambiguity for s in samples])
    return images, labels, amb


# ---------------------------------------------------------------------- PGM

_WS = b" \t\r\n\v\f"


def _parse_header(raw):
    if raw[:2] != b"P5":
        if raw[:2] in (b"P1", b"P2", b"P3", b"P4", b"P6"):
            raise FormatError(f"unsupported netpbm variant {raw[:2].decode()}; only binary P5 is read", 0)
        raise FormatError("not a P5 graymap (bad magic)", 0)
    if len(raw) < 3 or raw[2] not in _WS:
        raise FormatError("expected whitespace after magic", 2)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and (raw[pos] in _WS or raw[pos] == ord("#")):
            if raw[pos] == ord("#"):
                while pos < len(raw) and raw[pos] not in b"\r\n":
                    pos += 1
            else:
                pos += 1
        tok_start = pos
        while pos < len(raw) and raw[pos] not in _WS and raw[pos] != ord("#"):
            pos += 1
        tok = raw[tok_start:pos]
        if not tok:
            raise FormatError("truncated header", tok_start)
        if not re.fullmatch(rb"[0-9]+", tok):
            raise FormatError(f"non-numeric header field {tok!r}", tok_start)
        fields.append((int(tok), tok_start))
    if pos >= len(raw) or raw[pos] not in _WS:
        raise FormatError("expected a single whitespace byte before the raster", pos)
    (width, _), (height, _), (maxval, mpos) = fields
    if maxval != 255:
        raise FormatError(f"maxval {maxval} unsupported (need 255)", mpos)
    if width < 1 or height < 1:
        raise FormatError("image dimensions must be positive", fields[0][1])
    return width, height, pos + 1


def read_pgm(path):
    """Read a binary P5 graymap (maxval 255) into a uint8 [H, W] array."""
    with open(path, "rb") as fh:
        raw = fh.read()
    width, height, start = _parse_header(raw)
    need = width * height
    if len(raw) - start < need:
        raise FormatError(f"truncated raster: need {need} bytes, found {len(raw) - start}", len(raw))
    if len(raw) - start > need:
        raise FormatError("trailing bytes after raster", start + need)
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(height, width).copy()


def write_pgm(path, arr):
    arr = np.asarray(arr)
    if arr.ndim != 2:
        raise ValueError(f"graymap must be 2-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("graymap values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(arr).tobytes())


def to_gray(values):
    """Map [0, 1] reals to uint8 gray levels."""
    return np.clip(np.rint(np.asarray(values) * 255.0), 0, 255).astype(np.uint8)


def read_label_map(path):
    return read_pgm(path).astype(np.int64)


def write_label_map(path, labels):
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() > 255:
        raise ValueError("label values must lie in [0, 255]")
    write_pgm(path, labels.astype(np.uint8))


# ----------------------------------------------------------- dataset layout


def save_dataset(root, samples, class_count):
    """Write ``images/NNNN.pgm``, ``labels/NNNN.pgm``, ``ambiguity/NNNN.pgm`` and ``manifest.txt``."""
    for sub in ("images", "labels", "ambiguity"):
        os.makedirs(os.path.join(root, sub), exist_ok=True)
    lines = []
    for i, s in enumerate(samples):
        if s.image.shape[0] != 1:
            raise ValueError("only single-channel images can be stored as graymaps")
        name = f"{i:04d}.pgm"
        write_pgm(os.path.join(root, "images", name), to_gray(s.image[0]))
        write_label_map(os.path.join(root, "labels", name), s.labels)
        write_pgm(os.path.join(root, "ambiguity", name), s.ambiguity.astype(np.uint8) * 255)
        h, w = s.labels.shape
        lines.append(f"{i} {h} {w} {class_count}\n")
    with open(os.path.join(root, "manifest.txt"), "w", newline="\n") as fh:
        fh.writelines(lines)


def load_dataset(root):
    """Return ``(samples, class_count)``; images come back scaled to [0, 1]."""
    path = os.path.join(root, "manifest.txt")
    with open(path) as fh:
        rows = [ln.split() for ln in fh if ln.strip()]
    if not rows:
        raise FormatError(f"empty manifest {path}")
    samples, classes = [], set()
    for row in rows:
        if len(row) != 4:
            raise FormatError(f"manifest line needs 4 fields, got {row}")
        idx, h, w, c = (int(v) for v in row)
        name = f"{idx:04d}.pgm"
        img = read_pgm(os.path.join(root, "images", name))
        lab = read_label_map(os.path.join(root, "labels", name))
        if img.shape != (h, w) or lab.shape != (h, w):
            raise FormatError(f"sample {idx}: size disagrees with manifest")
        amb_path = os.path.join(root, "ambiguity", name)
        amb = read_pgm(amb_path) > 0 if os.path.exists(amb_path) else np.zeros((h, w), dtype=bool)
        samples.append(SegSample(img[None].astype(np.float64) / 255.0, lab.astype(np.uint8), amb))
        classes.add(c)
    if len(classes) != 1:
        raise FormatError(f"inconsistent class counts in manifest: {sorted(classes)}")
    return samples, classes.pop()
