"""Synthetic shape datasets with exact segmentation masks, plus folder ingestion.

Eight shape families (triangle, square, disk, cross, ring, star, L, T)
rendered at random rotation, scale and position over cluttered backgrounds.
Object, clutter and background colors are drawn from the same distribution,
so class evidence is geometric structure rather than color statistics.
Each sample carries the exact rasterized footprint of its object as a
ground-truth mask; the object never touches the image border.

Generation is pure in (spec, seed): sample k of class c in split s is
rendered from its own derived random stream, so splits are disjoint and
rendering order is irrelevant.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import netpbm
from .errors import ContractViolation, FormatError
from .rng import Rng, derive_seed

log = logging.getLogger(__name__)

SHAPE_FAMILIES = ("triangle", "square", "disk", "cross", "ring", "star", "ell", "tee")

BORDER_MARGIN = 2          # object footprint keeps this many pixels off every edge
COLOR_SEPARATION = 0.45    # min RGB distance between object and background


@dataclass(frozen=True)
class SyntheticSpec:
    classes: int = 8
    train_per_class: int = 250
    val_per_class: int = 63
    image_size: int = 64
    clutter: float = 6.0          # expected clutter blob count per image
    noise: float = 0.06           # uniform pixel noise amplitude
    rotation_range: tuple[float, float] = (0.0, 360.0)
    scale_range: tuple[float, float] = (0.5, 1.0)
    seed: int = 0

    def validate(self) -> None:
        if not (1 <= self.classes <= len(SHAPE_FAMILIES)):
            raise ContractViolation(f"classes must be 1..{len(SHAPE_FAMILIES)}")
        lo, hi = self.scale_range
        if not (0 < lo <= hi <= 1.0):
            raise ContractViolation(f"scale range {self.scale_range} must lie in (0, 1]")
        max_r = self.image_size / 2 - BORDER_MARGIN - 1
        if lo * max_r < 3:
            raise ContractViolation("shapes would be smaller than 3 px; infeasible pose range")


@dataclass
class Sample:
    image: np.ndarray            # (H, W, 3) float64 in [0, 1]
    label: int
    mask: np.ndarray | None      # (H, W) uint8 {0, 1}, None for folder data without masks


@dataclass
class Dataset:
    samples: list[Sample]
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def by_class(self) -> list[list[int]]:
        buckets: list[list[int]] = [[] for _ in range(self.class_count)]
        for idx, s in enumerate(self.samples):
            buckets[s.label].append(idx)
        return buckets

    def has_masks(self) -> bool:
        return all(s.mask is not None for s in self.samples)


# ---------------------------------------------------------------------------
# shape geometry: canonical outlines inside the unit disk

def _polygon(name: str) -> np.ndarray:
    # every vertex stays inside the unit disk so radius_px bounds the footprint
    if name == "triangle":
        ang = np.deg2rad([90.0, 210.0, 330.0])
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    if name == "square":
        s = 0.7
        return np.array([(-s, -s), (s, -s), (s, s), (-s, s)])
    if name == "cross":
        w, l = 0.3, 0.95
        return np.array([
            (-w, -l), (w, -l), (w, -w), (l, -w), (l, w), (w, w),
            (w, l), (-w, l), (-w, w), (-l, w), (-l, -w), (-w, -w),
        ])
    if name == "star":
        pts = []
        for k in range(10):
            r = 1.0 if k % 2 == 0 else 0.4
            a = math.pi / 2 + k * math.pi / 5
            pts.append((r * math.cos(a), r * math.sin(a)))
        return np.array(pts)
    if name == "ell":
        return np.array([(-0.63, -0.7), (-0.11, -0.7), (-0.11, 0.33),
                         (0.63, 0.33), (0.63, 0.7), (-0.63, 0.7)])
    if name == "tee":
        return np.array([(-0.7, -0.7), (0.7, -0.7), (0.7, -0.26),
                         (0.26, -0.26), (0.26, 0.7), (-0.26, 0.7), (-0.26, -0.26),
                         (-0.7, -0.26)])
    raise KeyError(name)


def _inside_polygon(u: np.ndarray, v: np.ndarray, verts: np.ndarray) -> np.ndarray:
    """Even-odd rule point-in-polygon, vectorized over the pixel grid."""
    inside = np.zeros(u.shape, dtype=bool)
    n = len(verts)
    for a in range(n):
        x1, y1 = verts[a]
        x2, y2 = verts[(a + 1) % n]
        if y1 == y2:
            continue  # horizontal edge never crosses the test ray
        spans = (y1 > v) != (y2 > v)
        lhs = (u - x1) * (y2 - y1)
        rhs = (x2 - x1) * (v - y1)
        inside ^= spans & ((lhs < rhs) if y2 > y1 else (lhs > rhs))
    return inside


def _shape_footprint(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Inside-test for canonical shapes on rotated/scaled local coords."""
    if name == "disk":
        return u * u + v * v <= 0.85 ** 2
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 0.9 ** 2) & (r2 >= 0.45 ** 2)
    return _inside_polygon(u, v, _polygon(name))


def _render_shape(name: str, size: int, center, radius_px: float, angle: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")
    dx = (xs - center[0]) / radius_px
    dy = (ys - center[1]) / radius_px
    ca, sa = math.cos(-angle), math.sin(-angle)
    u = ca * dx - sa * dy
    v = sa * dx + ca * dy
    return _shape_footprint(name, u, v)


def _pick_colors(rng: Rng):
    bg = rng.uniform(0.05, 0.95, (3,))
    for _ in range(100):
        fg = rng.uniform(0.05, 0.95, (3,))
        if np.linalg.norm(fg - bg) >= COLOR_SEPARATION:
            return bg, fg
    return bg, 1.0 - bg


def _clutter_color(rng: Rng, bg: np.ndarray) -> np.ndarray:
    # same distribution as object colors, so color never identifies the class
    for _ in range(100):
        c = rng.uniform(0.05, 0.95, (3,))
        if np.linalg.norm(c - bg) >= COLOR_SEPARATION:
            return c
    return 1.0 - bg


def render_sample(spec: SyntheticSpec, label: int, sample_rng: Rng) -> Sample:
    """One image: background, clutter blobs, the class shape, pixel noise."""
    size = spec.image_size
    bg, fg = _pick_colors(sample_rng)
    image = np.empty((size, size, 3))
    image[:] = bg
    ys, xs = np.meshgrid(np.arange(size) + 0.5, np.arange(size) + 0.5, indexing="ij")

    n_clutter = int(sample_rng.uniform(0.5 * spec.clutter, 1.5 * spec.clutter + 1e-9))
    for _ in range(n_clutter):
        cx = sample_rng.uniform(0, size)
        cy = sample_rng.uniform(0, size)
        r = sample_rng.uniform(2.0, 6.0)
        color = _clutter_color(sample_rng, bg)
        if sample_rng.randint(0, 2) == 0:
            blob = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        else:
            blob = (np.abs(xs - cx) <= r) & (np.abs(ys - cy) <= r)
        image[blob] = color

    max_r = size / 2 - BORDER_MARGIN - 1
    lo, hi = spec.scale_range
    radius = max_r * sample_rng.uniform(lo, hi)
    a0, a1 = spec.rotation_range
    angle = math.radians(sample_rng.uniform(a0, a1))
    cx = sample_rng.uniform(radius + BORDER_MARGIN, size - radius - BORDER_MARGIN)
    cy = sample_rng.uniform(radius + BORDER_MARGIN, size - radius - BORDER_MARGIN)
    mask = _render_shape(SHAPE_FAMILIES[label], size, (cx, cy), radius, angle)
    image[mask] = fg

    if spec.noise > 0:
        image += sample_rng.uniform(-spec.noise, spec.noise, image.shape)
        np.clip(image, 0.0, 1.0, out=image)
    return Sample(image=image, label=label, mask=mask.astype(np.uint8))


_SPLIT_IDS = {"train": 1, "val": 2}


def generate(spec: SyntheticSpec) -> tuple[Dataset, Dataset]:
    """Render (train, val) splits with exact per-class counts."""
    spec.validate()
    class_names = list(SHAPE_FAMILIES[: spec.classes])
    splits = {}
    for split, per_class in (("train", spec.train_per_class), ("val", spec.val_per_class)):
        samples = []
        for label in range(spec.classes):
            for k in range(per_class):
                srng = Rng(derive_seed(spec.seed, _SPLIT_IDS[split], label, k))
                samples.append(render_sample(spec, label, srng))
        splits[split] = Dataset(samples, class_names)
    return splits["train"], splits["val"]


def downsample_mask(mask: np.ndarray, N: int) -> np.ndarray:
    """Block-average an (H, H) binary mask to (N, N); threshold at >= 0.5."""
    H, W = mask.shape
    if H != W or H % N != 0:
        raise ContractViolation(f"mask side {mask.shape} must be square and divisible by {N}")
    b = H // N
    blocks = mask.astype(np.float64).reshape(N, b, N, b).mean(axis=(1, 3))
    return (blocks >= 0.5).astype(np.uint8)


# ---------------------------------------------------------------------------
# on-disk layout

def write_split(root, split: str, dataset: Dataset) -> list[tuple[str, str, int]]:
    """Write `<root>/<split>/<class>/NNNN.ppm` (+ .mask.pgm); manifest rows back."""
    from pathlib import Path

    rows = []
    counters = [0] * dataset.class_count
    for s in dataset.samples:
        cls = dataset.class_names[s.label]
        d = Path(root) / split / cls
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{counters[s.label]:04d}"
        counters[s.label] += 1
        img_path = d / f"{stem}.ppm"
        netpbm.write_ppm(img_path, s.image)
        if s.mask is not None:
            netpbm.write_pgm(d / f"{stem}.mask.pgm", s.mask * 255)
        rows.append((split, str(img_path.relative_to(root)), s.label))
    return rows


def write_dataset(root, train: Dataset, val: Dataset) -> None:
    from pathlib import Path

    rows = write_split(root, "train", train) + write_split(root, "val", val)
    with open(Path(root) / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "path", "class_index"])
        w.writerows(rows)


def _bilinear_resize(img: np.ndarray, out_size: int) -> np.ndarray:
    """Plain bilinear resample of (H, W, C) float to (out, out, C)."""
    H, W = img.shape[:2]
    if H == out_size and W == out_size:
        return img
    ys = (np.arange(out_size) + 0.5) * H / out_size - 0.5
    xs = (np.arange(out_size) + 0.5) * W / out_size - 0.5
    y0 = np.clip(np.floor(ys).astype(int), 0, H - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, W - 1)
    y1 = np.clip(y0 + 1, 0, H - 1)
    x1 = np.clip(x0 + 1, 0, W - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bot = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bot * wy


def load_folder(path, image_size: int = 64) -> Dataset:
    """Load one split directory laid out as `<path>/<class-name>/*.ppm`.

    Class indices follow sorted class-name order unless a labels.csv with
    (path, class_index) rows overrides them.  Masks named *.mask.pgm are
    picked up when present; non-image files are skipped with a warning.
    """
    from pathlib import Path

    root = Path(path)
    if not root.is_dir():
        raise ContractViolation(f"{root} is not a directory")
    overrides = {}
    labels_csv = root / "labels.csv"
    if labels_csv.exists():
        with open(labels_csv, newline="") as fh:
            for row in csv.reader(fh):
                if len(row) >= 2 and row[1].strip().lstrip("-").isdigit():
                    overrides[row[0].strip()] = int(row[1])

    class_dirs = sorted(d for d in root.iterdir() if d.is_dir())
    if not class_dirs:
        raise ContractViolation(f"{root} contains no class directories")
    class_names = [d.name for d in class_dirs]
    samples = []
    for label, d in enumerate(class_dirs):
        files = sorted(d.iterdir())
        count = 0
        for f in files:
            if f.name.endswith(".mask.pgm"):
                continue
            if f.suffix != ".ppm":
                if f.is_file():
                    log.warning("skipping non-image file %s", f)
                continue
            img = netpbm.read_ppm(f).astype(np.float64) / 255.0
            img = _bilinear_resize(img, image_size)
            mask_file = f.with_name(f.stem + ".mask.pgm")
            mask = None
            if mask_file.exists():
                m = netpbm.read_pgm(mask_file)
                mask = (m >= 128).astype(np.uint8)
            lbl = overrides.get(str(f.relative_to(root)), label)
            samples.append(Sample(image=img, label=lbl, mask=mask))
            count += 1
        if count == 0:
            raise ContractViolation(f"class folder {d} has no .ppm images")
    return Dataset(samples, class_names)
