"""Overlay renderings and strips of a mask under increasing corruption."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ..mask_codec import BINARY, MaskSet, corrupt, encode
from ..sampler import SegmentationResult
from ..schedule import Schedule

GAP = 2


def palette(n: int, seed: int = 3) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return rng.integers(40, 256, size=(max(n, 1), 3)).astype(np.uint8)


def overlay(image: np.ndarray, result: SegmentationResult, alpha: float = 0.55) -> np.ndarray:
    """Blend colored masks over ``image``; output has the input's size."""
    img = image.astype(np.float64).copy()
    h, w = img.shape[:2]
    layers: list[tuple[np.ndarray, int]] = []
    if result.task == "panoptic":
        layers = [(result.label_map == s.id, s.id) for s in result.segments]
    elif result.task == "instance":
        layers = [(inst.mask, i + 1) for i, inst in enumerate(result.instances)]
    elif result.task == "semantic":
        layers = [(result.semantic == c, c + 1) for c in np.unique(result.semantic)]
    colors = palette(max([k for _, k in layers], default=0) + 1)
    for mask, key in layers:
        if mask.shape != (h, w):
            raise ValueError(f"mask {mask.shape} does not match image {(h, w)}")
        img[mask] = (1 - alpha) * img[mask] + alpha * colors[key]
    return np.clip(img, 0, 255).astype(np.uint8)


def render_mask(values: np.ndarray, b: float) -> np.ndarray:
    """Map ``[-b, b]`` to 8-bit gray."""
    return np.clip(np.rint((np.asarray(values, dtype=np.float64) + b) / (2 * b) * 255), 0, 255).astype(np.uint8)


def diffusion_panels(mask: np.ndarray, sched: Schedule, rng: np.random.Generator,
                     encoding: str = "binary") -> tuple[list[int], list[np.ndarray]]:
    """Gray renderings of ``mask`` corrupted at t = 0, T/4, T/2, 3T/4, T."""
    T = sched.T
    ts = [0, T // 4, T // 2, 3 * T // 4, T]
    enc = encode(MaskSet(torch.from_numpy(np.asarray(mask, dtype=np.float64))[None], BINARY), sched.b, encoding, rng)
    panels = []
    for t in ts:
        data = enc.data if t == 0 else corrupt(enc, t, sched, rng).data
        panels.append(render_mask(data[0].numpy(), sched.b))
    return ts, panels


def strip(panels: list[np.ndarray]) -> np.ndarray:
    h = panels[0].shape[0]
    gap = np.full((h, GAP), 255, dtype=np.uint8)
    parts = []
    for i, p in enumerate(panels):
        if i:
            parts.append(gap)
        parts.append(p)
    return np.concatenate(parts, axis=1)


def lag1_autocorrelation(panel: np.ndarray) -> float:
    """Mean of horizontal and vertical lag-1 Pearson correlations."""
    x = panel.astype(np.float64)
    x = x - x.mean()
    var = (x * x).mean()
    if var == 0:
        return 1.0
    rh = (x[:, 1:] * x[:, :-1]).mean() / var
    rv = (x[1:] * x[:-1]).mean() / var
    return float((rh + rv) / 2)


def visualize(image: np.ndarray, outputs, mode: str, path, sched: Schedule | None = None,
              rng: np.random.Generator | None = None, encoding: str = "binary") -> Path:
    """Write an overlay (``outputs`` is a SegmentationResult) or a diffusion strip
    (``outputs`` is a binary mask) to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if mode == "overlay":
        Image.fromarray(overlay(image, outputs)).save(path)
    elif mode == "diffusion":
        if sched is None:
            raise ValueError("diffusion mode needs a schedule")
        _, panels = diffusion_panels(outputs, sched, rng or np.random.default_rng(0), encoding)
        Image.fromarray(strip(panels)).save(path)
    else:
        raise ValueError(f"unknown visualization mode {mode!r}")
    return path
