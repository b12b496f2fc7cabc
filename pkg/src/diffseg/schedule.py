"""Diffusion timetable, forward corruption and the deterministic DDIM update."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

COSINE_OFFSET = 0.008


@dataclass(frozen=True)
class Schedule:
    """Cumulative signal-retention table indexed by ``t = 0..T``.

    ``alpha_bar[0] == 1`` (clean data) and ``alpha_bar[T]`` is close to zero.
    ``b`` is the half-width of the encoded mask range.
    """

    T: int
    alpha_bar: np.ndarray
    b: float = 0.1

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if self.b <= 0:
            raise ValueError(f"scale factor b must be positive, got {self.b}")
        if self.alpha_bar.shape != (self.T + 1,):
            raise ValueError("alpha_bar must have length T + 1")

    def abar(self, t: int) -> float:
        """alpha_bar at ``t``; ``t == -1`` is the virtual step past the clean end."""
        if t == -1:
            return 1.0
        if not 0 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [0, {self.T}]")
        return float(self.alpha_bar[t])


def cosine_alpha_bar(t, T: int, s: float = COSINE_OFFSET):
    f = np.cos((np.asarray(t, dtype=np.float64) / T + s) / (1 + s) * math.pi / 2) ** 2
    f0 = math.cos(s / (1 + s) * math.pi / 2) ** 2
    return f / f0


def make_schedule(T: int = 1000, kind: str = "cosine", b: float = 0.1) -> Schedule:
    if T <= 0:
        raise ValueError(f"T must be positive, got {T}")
    if kind != "cosine":
        raise ValueError(f"unknown schedule kind {kind!r}")
    abar = cosine_alpha_bar(np.arange(T + 1), T)
    # cos(pi/2) rounds to ~1e-33 rather than 0; keep the table inside (0, 1]
    abar = np.clip(abar, 1e-12, 1.0)
    abar[0] = 1.0
    return Schedule(T=T, alpha_bar=abar, b=b)


def _check_t(t: int, sched: Schedule, low: int = 0):
    if not low <= t <= sched.T:
        raise ValueError(f"timestep {t} outside [{low}, {sched.T}]")


def q_sample(x0, t, eps, sched: Schedule):
    """Forward corruption ``sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps``.

    ``t`` is an int, or a 1-D tensor/array of per-sample timesteps broadcast
    along the leading axis. No clamping is applied here.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    if isinstance(t, (int, np.integer)):
        _check_t(int(t), sched)
        a = sched.abar(int(t))
        return math.sqrt(a) * x0 + math.sqrt(1.0 - a) * eps
    t_arr = np.asarray(t.cpu() if torch.is_tensor(t) else t, dtype=np.int64)
    if t_arr.ndim != 1 or t_arr.shape[0] != x0.shape[0]:
        raise ValueError("per-sample timesteps must be 1-D with one entry per leading row")
    if t_arr.min() < 0 or t_arr.max() > sched.T:
        raise ValueError(f"timesteps outside [0, {sched.T}]")
    a = sched.alpha_bar[t_arr].reshape((-1,) + (1,) * (x0.ndim - 1))
    if torch.is_tensor(x0):
        a = torch.as_tensor(a, dtype=x0.dtype, device=x0.device)
        return a.sqrt() * x0 + (1 - a).sqrt() * eps
    return np.sqrt(a) * x0 + np.sqrt(1 - a) * eps


def time_pairs(steps: int, T: int) -> list[tuple[int, int]]:
    """Evenly spaced ``(t_now, t_next)`` pairs from ``T`` down to ``-1``.

    ``steps + 1`` grid points give exactly ``steps`` pairs, so ``steps=1`` is
    one full denoise ``(T, -1)``.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if steps > T + 1:
        raise ValueError(f"steps must be <= T + 1 ({T + 1}), got {steps}")
    grid = np.rint(np.linspace(T, -1, steps + 1)).astype(int).tolist()
    return list(zip(grid[:-1], grid[1:]))


def ddim_step(m_t, m_pred, t_now: int, t_next: int, sched: Schedule):
    """Deterministic (eta = 0) reverse update from ``t_now`` to ``t_next``."""
    if tuple(m_t.shape) != tuple(m_pred.shape):
        raise ValueError("m_t and m_pred must have equal shapes")
    if t_next >= t_now:
        raise ValueError(f"t_next ({t_next}) must be smaller than t_now ({t_now})")
    _check_t(t_now, sched)
    if t_next < -1:
        raise ValueError(f"t_next must be >= -1, got {t_next}")
    if t_next == -1:
        return m_pred * 1.0
    a_now = sched.abar(t_now)
    a_next = sched.abar(t_next)
    if a_now >= 1.0:
        # t_now == 0 carries no noise to estimate
        return m_pred * 1.0
    eps_hat = (m_t - math.sqrt(a_now) * m_pred) / math.sqrt(1.0 - a_now)
    return math.sqrt(a_next) * m_pred + math.sqrt(1.0 - a_next) * eps_hat
