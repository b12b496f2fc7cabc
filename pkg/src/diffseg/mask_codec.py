"""Moving ground-truth masks into and out of the diffusion domain.

A :class:`MaskSet` walks a one-way state machine::

    binary --encode_*--> encoded --corrupt--> noisy

Encoded and noisy values always lie in ``[-b, b]``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .schedule import Schedule, q_sample

BINARY, ENCODED, NOISY = "binary", "encoded", "noisy"
PAD_AREA_RANGE = (0.05, 0.30)


class TooManyObjects(ValueError):
    pass


class InvalidState(ValueError):
    pass


@dataclass
class MaskSet:
    data: torch.Tensor  # N x H x W
    state: str
    b: float | None = None

    def __post_init__(self):
        if self.state not in (BINARY, ENCODED, NOISY):
            raise InvalidState(f"unknown mask state {self.state!r}")
        if self.data.ndim != 3:
            raise ValueError(f"mask data must be N x H x W, got {tuple(self.data.shape)}")
        if self.state != BINARY and (self.b is None or self.b <= 0):
            raise ValueError("encoded/noisy masks need a positive scale factor b")

    @property
    def n(self) -> int:
        return self.data.shape[0]


def _require(m: MaskSet, state: str):
    if m.state != state:
        raise InvalidState(f"expected a {state} MaskSet, got {m.state}")


def random_rectangle(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """One axis-aligned rectangle covering 5-30% of an ``h x w`` grid."""
    lo, hi = PAD_AREA_RANGE
    total = h * w
    while True:
        area = rng.uniform(lo, hi) * total
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        rh = int(round(np.sqrt(area * aspect)))
        rw = int(round(np.sqrt(area / aspect)))
        if not (1 <= rh <= h and 1 <= rw <= w):
            continue
        if lo <= rh * rw / total <= hi:
            break
    y = int(rng.integers(0, h - rh + 1))
    x = int(rng.integers(0, w - rw + 1))
    out = np.zeros((h, w), dtype=np.float32)
    out[y:y + rh, x:x + rw] = 1.0
    return out


def pad_masks(gt, n: int, rng: np.random.Generator, size: tuple[int, int] | None = None) -> MaskSet:
    """Stack ground-truth masks in order and fill up to ``n`` rows with random rectangles."""
    gt = [torch.as_tensor(m, dtype=torch.float32) for m in gt]
    if len(gt) > n:
        raise TooManyObjects(f"{len(gt)} ground-truth masks exceed N={n}")
    if gt:
        h, w = gt[0].shape
        if any(tuple(m.shape) != (h, w) for m in gt):
            raise ValueError("all ground-truth masks must share one shape")
    elif size is None:
        raise ValueError("size is required when there are no ground-truth masks")
    else:
        h, w = size
    pads = [torch.from_numpy(random_rectangle(h, w, rng)) for _ in range(n - len(gt))]
    data = torch.stack(gt + pads) if gt or pads else torch.zeros(0, h, w)
    return MaskSet(data, BINARY)


def _check_binary_values(m: MaskSet):
    d = m.data
    if not bool(((d == 0) | (d == 1)).all()):
        raise InvalidState("binary MaskSet holds values other than 0 and 1")


def encode_binary(m: MaskSet, b: float) -> MaskSet:
    _require(m, BINARY)
    _check_binary_values(m)
    return MaskSet((m.data * 2 - 1) * b, ENCODED, b)


def encode_shuffle(m: MaskSet, b: float, rng: np.random.Generator) -> MaskSet:
    """Object pixels drawn from U[0.5, 1], background from U[0, 0.5), then mapped to [-b, b]."""
    _require(m, BINARY)
    _check_binary_values(m)
    u = rng.random(tuple(m.data.shape))
    obj = m.data.numpy() > 0
    # float64 keeps the background strictly below 0.5 before the cast
    v = np.where(obj, 0.5 + 0.5 * u, 0.5 * u)
    enc = torch.from_numpy((v * 2 - 1) * b).to(m.data.dtype)
    return MaskSet(enc, ENCODED, b)


def encode(m: MaskSet, b: float, encoding: str, rng: np.random.Generator) -> MaskSet:
    if encoding == "binary":
        return encode_binary(m, b)
    if encoding == "shuffle":
        return encode_shuffle(m, b, rng)
    raise ValueError(f"unknown encoding {encoding!r}")


def corrupt(m: MaskSet, t: int, sched: Schedule, rng: np.random.Generator) -> MaskSet:
    _require(m, ENCODED)
    if not 1 <= t <= sched.T:
        raise ValueError(f"corruption timestep {t} outside [1, {sched.T}]")
    eps = torch.from_numpy(rng.standard_normal(tuple(m.data.shape))).to(m.data.dtype)
    noisy = q_sample(m.data, int(t), eps, sched).clamp(-m.b, m.b)
    return MaskSet(noisy, NOISY, m.b)


def attention_mask(m, size: tuple[int, int]) -> torch.Tensor:
    """Boolean ``... x N x h x w`` map: bilinear resize, then ``> 0``.

    Accepts a noisy :class:`MaskSet` or a raw tensor of mask logits. A row
    that comes out all-false is replaced by all-true.
    """
    data = m.data if isinstance(m, MaskSet) else m
    if data.ndim < 3:
        raise ValueError("attention_mask needs at least N x H x W input")
    lead = data.shape[:-2]
    flat = data.reshape(-1, 1, *data.shape[-2:])
    if tuple(flat.shape[-2:]) != tuple(size):
        flat = F.interpolate(flat, size=tuple(size), mode="bilinear", align_corners=False)
    att = (flat > 0).reshape(*lead, *size)
    empty = ~att.flatten(-2).any(-1)
    return att | empty[..., None, None]
