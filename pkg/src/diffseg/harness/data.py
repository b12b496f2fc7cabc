"""Synthetic shapes data, ground-truth records and the on-disk dataset format.

On disk a dataset directory holds::

    meta.json            category names and thing flags
    images/00000.png     RGB images
    annotations.jsonl    one JSON record per image

Masks inside records use row-major run-length encoding (see :func:`rle_encode`).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from ..criterion import Target
from ..metrics import IGNORE
from ..sampler import Instance, Segment, SegmentationResult

SHAPES = ("circle", "square", "triangle")
BACKGROUNDS = ("stripes", "checker")
CATEGORIES = [
    {"id": 0, "name": "circle", "isthing": 1},
    {"id": 1, "name": "square", "isthing": 1},
    {"id": 2, "name": "triangle", "isthing": 1},
    {"id": 3, "name": "stripes", "isthing": 0},
    {"id": 4, "name": "checker", "isthing": 0},
]
VOID_FRACTION = (0.02, 0.10)
PIXEL_MEAN, PIXEL_STD = 127.5, 64.0


class DataError(ValueError):
    pass


@dataclass
class GTObject:
    category: int
    mask: np.ndarray  # H x W bool
    is_thing: bool


@dataclass
class GroundTruth:
    objects: list[GTObject] = field(default_factory=list)
    height: int = 0
    width: int = 0

    def semantic_map(self) -> np.ndarray:
        sem = np.full((self.height, self.width), IGNORE, dtype=np.int32)
        for o in self.objects:
            sem[o.mask] = o.category
        return sem

    def panoptic(self) -> SegmentationResult:
        label_map = np.zeros((self.height, self.width), dtype=np.int32)
        segments = []
        for i, o in enumerate(self.objects, start=1):
            label_map[o.mask] = i
            segments.append(Segment(i, o.category, o.is_thing))
        return SegmentationResult("panoptic", label_map=label_map, segments=segments)

    def instances(self) -> SegmentationResult:
        return SegmentationResult(
            "instance", instances=[Instance(o.mask, o.category, 1.0) for o in self.objects if o.is_thing])

    def semantic(self) -> SegmentationResult:
        return SegmentationResult("semantic", semantic=self.semantic_map())

    def as_result(self, task: str) -> SegmentationResult:
        return {"panoptic": self.panoptic, "instance": self.instances, "semantic": self.semantic}[task]()


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 uint8
    gt: GroundTruth
    name: str = ""


# ---------------------------------------------------------------- RLE

def rle_encode(mask: np.ndarray) -> dict:
    """Row-major run lengths, alternating background/foreground, starting with background.

    A mask whose first pixel is foreground starts with a zero count.
    """
    flat = np.asarray(mask, dtype=bool).ravel()
    if flat.size == 0:
        return {"size": list(mask.shape), "counts": []}
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat[0]:
        counts = [0] + counts
    return {"size": [int(s) for s in mask.shape], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if (counts < 0).any() or counts.sum() != h * w:
        raise DataError(f"RLE counts sum to {int(counts.sum())}, expected {h * w}")
    values = np.arange(len(counts)) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


# ---------------------------------------------------------------- synthetic shapes

def _shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    if kind == "circle":
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r ** 2
    if kind == "square":
        s = r * 0.9
        return (np.abs(yy - cy) <= s) & (np.abs(xx - cx) <= s)
    # upright isosceles triangle with apex at the top
    top, bottom = cy - r, cy + r * 0.8
    half = (yy - top) / (bottom - top) * r * 1.05
    return (yy >= top) & (yy <= bottom) & (np.abs(xx - cx) <= half)


def _texture(kind: str, size: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    c1 = rng.uniform(40, 215, 3)
    c2 = np.clip(c1 + rng.choice([-1, 1], 3) * rng.uniform(25, 45, 3), 0, 255)
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        period = rng.integers(6, 11)
        phase = rng.integers(0, period)
        pattern = ((xx + yy + phase) // (period // 2)) % 2 == 0
    else:
        cell = rng.integers(4, 8)
        oy, ox = rng.integers(0, cell, 2)
        pattern = (((yy + oy) // cell) + ((xx + ox) // cell)) % 2 == 0
    img = np.where(pattern[..., None], c1, c2)
    return img, np.stack([c1, c2])


def _void_frame(size: int, rng: np.random.Generator) -> np.ndarray:
    lo, hi = VOID_FRACTION
    while True:
        t, b, l, r = rng.integers(0, 4, 4)
        void = np.zeros((size, size), dtype=bool)
        void[:t] = True
        void[size - b:] = True
        void[:, :l] = True
        void[:, size - r:] = True
        if lo <= void.mean() <= hi:
            return void


def _shape_color(bg_colors: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    while True:
        c = rng.uniform(0, 255, 3)
        if np.min(np.linalg.norm(bg_colors - c, axis=1)) > 90:
            return c


def make_image(size: int, rng: np.random.Generator) -> Sample:
    bg = int(rng.integers(0, len(BACKGROUNDS)))
    img, bg_colors = _texture(BACKGROUNDS[bg], size, rng)
    void = _void_frame(size, rng)
    n_shapes = int(rng.integers(1, 7))
    placed: list[tuple[int, np.ndarray]] = []  # (category, full mask) in painting order
    scale = size / 64
    for _ in range(n_shapes):
        for _attempt in range(50):
            cat = int(rng.integers(0, len(SHAPES)))
            r = rng.uniform(6, 13) * scale
            cy, cx = rng.uniform(r + 3, size - r - 3, 2)
            full = _shape_mask(SHAPES[cat], cy, cx, r, size)
            trial = placed + [(cat, full)]
            vis = _visible(trial, void)
            if all(v.sum() >= max(30 * scale ** 2, 0.4 * f.sum()) for v, (_, f) in zip(vis, trial)):
                placed = trial
                break
    colors = [_shape_color(bg_colors, rng) for _ in placed]
    for (cat, full), col in zip(placed, colors):
        img[full] = col
    img = np.clip(img + rng.normal(0, 4, img.shape), 0, 255).astype(np.uint8)
    vis = _visible(placed, void)
    objects = [GTObject(cat, v, True) for (cat, _), v in zip(placed, vis)]
    covered = np.zeros((size, size), dtype=bool)
    for v in vis:
        covered |= v
    stuff = ~covered & ~void
    objects.append(GTObject(len(SHAPES) + bg, stuff, False))
    return Sample(img, GroundTruth(objects, size, size))


def _visible(placed, void):
    out = []
    for i, (_, full) in enumerate(placed):
        m = full & ~void
        for _, later in placed[i + 1:]:
            m = m & ~later
        out.append(m)
    return out


def gen_shapes(n_images: int, size: int = 64, seed: int = 0) -> list[Sample]:
    """Deterministic synthetic dataset; image ``i`` depends only on ``(seed, i)``."""
    out = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        s = make_image(size, rng)
        s.name = f"{i:05d}"
        out.append(s)
    return out


# ---------------------------------------------------------------- disk format

def gt_to_record(gt: GroundTruth) -> dict:
    return {
        "height": gt.height,
        "width": gt.width,
        "objects": [{"category": o.category, "is_thing": bool(o.is_thing), "rle": rle_encode(o.mask)} for o in gt.objects],
    }


def gt_from_record(rec: dict) -> GroundTruth:
    h, w = int(rec["height"]), int(rec["width"])
    objs = []
    for o in rec["objects"]:
        mask = rle_decode(o["rle"])
        if mask.shape != (h, w):
            raise DataError(f"mask size {mask.shape} != image size {(h, w)}")
        objs.append(GTObject(int(o["category"]), mask, bool(o["is_thing"])))
    return GroundTruth(objs, h, w)


def save_dataset(samples: list[Sample], root, categories=CATEGORIES) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "meta.json").write_text(json.dumps({"categories": categories}, indent=1))
    with open(root / "annotations.jsonl", "w") as fh:
        for i, s in enumerate(samples):
            name = s.name or f"{i:05d}"
            Image.fromarray(s.image).save(root / "images" / f"{name}.png")
            rec = {"file": f"images/{name}.png", **gt_to_record(s.gt)}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset(root) -> list[Sample]:
    root = Path(root)
    ann = root / "annotations.jsonl"
    if not ann.exists():
        raise DataError(f"{ann}: no such annotations file")
    out = []
    with open(ann) as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                img = np.asarray(Image.open(root / rec["file"]).convert("RGB"))
                gt = gt_from_record(rec)
            except (json.JSONDecodeError, KeyError, OSError, DataError) as e:
                raise DataError(f"{ann}:{line_no}: {e}") from None
            out.append(Sample(img, gt, Path(rec["file"]).stem))
    return out


def load_categories(root) -> list[dict]:
    path = Path(root) / "meta.json"
    if not path.exists():
        return CATEGORIES
    return json.loads(path.read_text())["categories"]


# ---------------------------------------------------------------- tensors

def image_tensor(img: np.ndarray) -> torch.Tensor:
    return (torch.from_numpy(np.array(img)).permute(2, 0, 1).float() - PIXEL_MEAN) / PIXEL_STD


def downsample_mask(mask: np.ndarray, factor: int = 4) -> np.ndarray:
    """Area-average by ``factor`` and keep cells at least half covered; never empties a non-empty mask."""
    h, w = mask.shape
    frac = mask.reshape(h // factor, factor, w // factor, factor).mean((1, 3))
    out = frac >= 0.5
    if not out.any() and frac.max() > 0:
        out = frac == frac.max()
    return out


def make_target(gt: GroundTruth, factor: int = 4) -> Target:
    if not gt.objects:
        return Target(torch.zeros(0, dtype=torch.long), torch.zeros(0, gt.height // factor, gt.width // factor))
    labels = torch.tensor([o.category for o in gt.objects], dtype=torch.long)
    masks = torch.from_numpy(np.stack([downsample_mask(o.mask, factor) for o in gt.objects])).float()
    return Target(labels, masks)


def augment(sample: Sample, rng: np.random.Generator, flip: bool, jitter: float, min_area: int = 16) -> Sample:
    """Random horizontal flip and +-``jitter`` rescale with crop/pad back to the original size."""
    img = sample.image
    masks = [o.mask for o in sample.gt.objects]
    h, w = img.shape[:2]
    if flip and rng.random() < 0.5:
        img = img[:, ::-1]
        masks = [m[:, ::-1] for m in masks]
    if jitter > 0:
        s = rng.uniform(1 - jitter, 1 + jitter)
        nh, nw = max(1, int(round(h * s))), max(1, int(round(w * s)))
        t = torch.from_numpy(np.array(img)).permute(2, 0, 1)[None].float()
        t = F.interpolate(t, size=(nh, nw), mode="bilinear", align_corners=False)
        big = np.clip(t[0].permute(1, 2, 0).numpy(), 0, 255).astype(np.uint8)
        mt = torch.from_numpy(np.stack([np.ascontiguousarray(m) for m in masks]).astype(np.float32))[None] if masks else None
        mbig = F.interpolate(mt, size=(nh, nw), mode="nearest")[0].numpy() > 0.5 if masks else []
        canvas = np.full((h, w, 3), 128, dtype=np.uint8)
        mcanvas = np.zeros((len(masks), h, w), dtype=bool)
        oy = int(rng.integers(0, abs(nh - h) + 1))
        ox = int(rng.integers(0, abs(nw - w) + 1))
        if nh >= h:
            src_y, dst_y = slice(oy, oy + h), slice(0, h)
        else:
            src_y, dst_y = slice(0, nh), slice(oy, oy + nh)
        if nw >= w:
            src_x, dst_x = slice(ox, ox + w), slice(0, w)
        else:
            src_x, dst_x = slice(0, nw), slice(ox, ox + nw)
        canvas[dst_y, dst_x] = big[src_y, src_x]
        for i in range(len(masks)):
            mcanvas[i][dst_y, dst_x] = mbig[i][src_y, src_x]
        img, masks = canvas, list(mcanvas)
    objs = [GTObject(o.category, np.ascontiguousarray(m), o.is_thing)
            for o, m in zip(sample.gt.objects, masks) if m.sum() >= min_area]
    return Sample(np.ascontiguousarray(img), GroundTruth(objs, h, w), sample.name)
