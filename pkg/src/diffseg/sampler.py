"""Inference from noise, and conversion of raw predictions into task outputs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .decoder import Prediction, run_decoder
from .pixel_module import extract_features
from .schedule import Schedule, ddim_step, time_pairs

VOID = 0  # panoptic segment id for unlabeled pixels


@dataclass
class SegMeta:
    size: tuple[int, int]  # output H, W
    num_classes: int
    thing_classes: tuple[int, ...]
    object_threshold: float = 0.8
    overlap_threshold: float = 0.5
    topk: int = 100

    @property
    def stuff_classes(self) -> tuple[int, ...]:
        return tuple(c for c in range(self.num_classes) if c not in self.thing_classes)


@dataclass
class Segment:
    id: int
    category: int
    is_thing: bool


@dataclass
class Instance:
    mask: np.ndarray  # H x W bool
    category: int
    score: float


@dataclass
class SegmentationResult:
    task: str
    label_map: np.ndarray | None = None  # panoptic segment ids, VOID = 0
    segments: list[Segment] = field(default_factory=list)
    instances: list[Instance] = field(default_factory=list)
    semantic: np.ndarray | None = None


@torch.no_grad()
def infer(image: torch.Tensor, model, steps: int, rng: np.random.Generator, sched: Schedule,
          num_masks: int = 100, init_noise: str = "clamp"):
    """Denoise ``num_masks`` random masks into predictions.

    Returns ``(trajectory, final)``: the final-layer Prediction of every step
    and the last of them. Features are extracted once and reused across
    steps. ``rng`` is one generator for the batch or one per image.

    The decoder always sees the state clamped to [-b, b], the range it was
    trained on; the DDIM state itself is not clamped, so its implied noise
    keeps unit scale between steps. ``init_noise`` is ``"clamp"`` (start
    from unit noise) or ``"scale"`` (start from noise times b).
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if image.ndim == 3:
        image = image[None]
    b = sched.b
    pyr = extract_features(image, model.pixel)
    B = image.shape[0]
    h, w = pyr.f_pixel.shape[-2:]
    if isinstance(rng, (list, tuple)):
        if len(rng) != B:
            raise ValueError(f"got {len(rng)} generators for {B} images")
        noise = np.stack([r.standard_normal((num_masks, h, w)) for r in rng])
    else:
        noise = rng.standard_normal((B, num_masks, h, w))
    noise = torch.from_numpy(noise).to(pyr.f_pixel.dtype)
    if init_noise == "clamp":
        m_t = noise
    elif init_noise == "scale":
        m_t = noise * b
    else:
        raise ValueError(f"unknown init_noise {init_noise!r}")
    trajectory = []
    for t_now, t_next in time_pairs(steps, sched.T):
        pred = run_decoder(pyr, m_t.clamp(-b, b), t_now, model.decoder, b)[-1]
        trajectory.append(pred)
        x0 = (2 * pred.mask_logits.sigmoid() - 1) * b
        m_t = ddim_step(m_t, x0, t_now, t_next, sched)
    return trajectory, trajectory[-1]


def _upsampled_probs(pred: Prediction, size) -> np.ndarray:
    logits = pred.mask_logits
    if logits.ndim != 3:
        raise ValueError("postprocessing expects a single-image Prediction (N x h x w)")
    if tuple(logits.shape[-2:]) != tuple(size):
        logits = F.interpolate(logits[None].double(), size=tuple(size), mode="bilinear", align_corners=False)[0]
    return logits.double().sigmoid().cpu().numpy()


def _class_probs(pred: Prediction) -> np.ndarray:
    return pred.class_logits.double().softmax(-1).cpu().numpy()


def postprocess_panoptic(pred: Prediction, meta: SegMeta) -> SegmentationResult:
    """Confidence-filtered per-pixel argmax; stuff segments of one class are merged."""
    probs = _class_probs(pred)
    masks = _upsampled_probs(pred, meta.size)
    K = meta.num_classes
    scores, labels = probs.max(-1), probs.argmax(-1)
    keep = np.flatnonzero((labels != K) & (scores > meta.object_threshold))
    label_map = np.full(meta.size, VOID, dtype=np.int32)
    result = SegmentationResult("panoptic", label_map=label_map)
    if keep.size == 0:
        return result
    cur_masks = masks[keep]
    winner = (scores[keep][:, None, None] * cur_masks).argmax(0)
    stuff_ids: dict[int, int] = {}
    next_id = 1
    for k, n in enumerate(keep):
        cls = int(labels[n])
        is_thing = cls in meta.thing_classes
        won = winner == k
        mask_area = int(won.sum())
        original_area = int((cur_masks[k] >= 0.5).sum())
        seg = won & (cur_masks[k] >= 0.5)
        if mask_area == 0 or original_area == 0 or not seg.any():
            continue
        if mask_area / original_area < meta.overlap_threshold:
            continue
        if not is_thing and cls in stuff_ids:
            label_map[seg] = stuff_ids[cls]
            continue
        label_map[seg] = next_id
        result.segments.append(Segment(next_id, cls, is_thing))
        if not is_thing:
            stuff_ids[cls] = next_id
        next_id += 1
    return result


def postprocess_instance(pred: Prediction, meta: SegMeta) -> SegmentationResult:
    """Class prob (best thing class) times mean mask prob inside the 0.5-binarized mask; top-k."""
    probs = _class_probs(pred)
    masks = _upsampled_probs(pred, meta.size)
    things = np.asarray(meta.thing_classes, dtype=np.int64)
    thing_probs = probs[:, things]
    cls = things[thing_probs.argmax(-1)]
    cls_score = thing_probs.max(-1)
    binary = masks > 0.5
    area = binary.sum((1, 2))
    mask_score = np.where(area > 0, (masks * binary).sum((1, 2)) / np.maximum(area, 1), 0.0)
    conf = cls_score * mask_score
    order = sorted(range(len(conf)), key=lambda i: (-conf[i], i))
    instances = [Instance(binary[i], int(cls[i]), float(conf[i])) for i in order if area[i] > 0 and conf[i] > 0]
    return SegmentationResult("instance", instances=instances[: meta.topk])


def postprocess_semantic(pred: Prediction, meta: SegMeta) -> SegmentationResult:
    probs = _class_probs(pred)[:, : meta.num_classes]
    masks = _upsampled_probs(pred, meta.size)
    scores = np.einsum("nc,nhw->chw", probs, masks)
    return SegmentationResult("semantic", semantic=scores.argmax(0).astype(np.int32))


POSTPROCESS = {
    "panoptic": postprocess_panoptic,
    "instance": postprocess_instance,
    "semantic": postprocess_semantic,
}
