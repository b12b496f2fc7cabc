"""Masked-attention decoder that turns noisy masks into mask/class predictions.

There are no learnable queries: the per-mask features entering the first
layer are pixel embeddings pooled under the (normalized) noisy masks, and
the first attention mask is the noisy masks thresholded at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn
import torch.nn.functional as F

from .mask_codec import MaskSet, attention_mask
from .pixel_module import PyramidFeatures

NORM_EPS = 1e-6


@dataclass
class Prediction:
    mask_logits: torch.Tensor  # B x N x h x w (stride 4)
    class_logits: torch.Tensor  # B x N x (K + 1), last column is "no object"


@dataclass
class DecoderState:
    mask_features: torch.Tensor  # B x N x C
    attention: torch.Tensor  # B x N x h x w, True = may attend
    layer_index: int


def _noisy_tensor(m) -> tuple[torch.Tensor, float | None]:
    if isinstance(m, MaskSet):
        return m.data, m.b
    return m, None


def resize_masks(m: torch.Tensor, size) -> torch.Tensor:
    if tuple(m.shape[-2:]) == tuple(size):
        return m
    lead = m.shape[:-2]
    out = F.interpolate(m.reshape(-1, 1, *m.shape[-2:]), size=tuple(size), mode="bilinear", align_corners=False)
    return out.reshape(*lead, *size)


def init_mask_features(f_pixel: torch.Tensor, m_noisy, b: float | None = None) -> torch.Tensor:
    """Weighted spatial average of pixel embeddings under each noisy mask.

    ``f_pixel`` is ``[B x] C x h x w``; ``m_noisy`` is ``[B x] N x H x W``
    (a noisy MaskSet or a tensor, resized to ``h x w`` if needed). Returns
    ``[B x] N x C``.
    """
    m, mb = _noisy_tensor(m_noisy)
    b = mb if b is None else b
    if b is None:
        raise ValueError("scale factor b is required for raw tensors")
    single = f_pixel.ndim == 3
    if single:
        f_pixel, m = f_pixel.unsqueeze(0), m.unsqueeze(0)
    m = resize_masks(m.to(f_pixel.dtype), f_pixel.shape[-2:])
    w = (m.clamp(-b, b) + b) / (2 * b)
    w = w / (w.flatten(-2).sum(-1)[..., None, None] + NORM_EPS)
    out = torch.einsum("bnhw,bchw->bnc", w, f_pixel)
    return out[0] if single else out


def sine_embedding(x: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = x.to(torch.float64)[..., None] * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


def position_encoding(h: int, w: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """2-D sine encoding, ``(h*w) x dim``; half the channels per axis."""
    ys = (torch.arange(h, dtype=torch.float64) + 0.5) / h * 2 * math.pi
    xs = (torch.arange(w, dtype=torch.float64) + 0.5) / w * 2 * math.pi
    ey = sine_embedding(ys, dim // 2, max_period=100.0)
    ex = sine_embedding(xs, dim - dim // 2, max_period=100.0)
    pos = torch.cat([ey[:, None, :].expand(h, w, -1), ex[None, :, :].expand(h, w, -1)], dim=-1)
    return pos.reshape(h * w, dim).to(dtype)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, q, k, v, allow=None):
        B, Nq, C = q.shape
        Nk = k.shape[1]
        h = self.heads
        q = self.q(q).reshape(B, Nq, h, C // h).transpose(1, 2)
        k = self.k(k).reshape(B, Nk, h, C // h).transpose(1, 2)
        v = self.v(v).reshape(B, Nk, h, C // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(C // h)
        if allow is not None:
            logits = logits.masked_fill(~allow[:, None], float("-inf"))
        attn = logits.softmax(-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Nq, C)
        return self.out(out)


class DecoderLayer(nn.Module):
    """Pre-norm masked cross-attention, self-attention and FFN, each residual."""

    def __init__(self, dim: int, heads: int = 8, ffn_mult: int = 4):
        super().__init__()
        self.norm_cross = nn.LayerNorm(dim)
        self.cross = Attention(dim, heads)
        self.norm_self = nn.LayerNorm(dim)
        self.self_attn = Attention(dim, heads)
        self.norm_ffn = nn.LayerNorm(dim)
        self.ffn = nn.Sequential(nn.Linear(dim, ffn_mult * dim), nn.ReLU(), nn.Linear(ffn_mult * dim, dim))

    def forward(self, x, memory, pos, temb, allow):
        y = self.norm_cross(x) + temb
        x = x + self.cross(y, memory + pos, memory, allow)
        n = self.norm_self(x)
        q = n + temb
        x = x + self.self_attn(q, q, n)
        return x + self.ffn(self.norm_ffn(x))


class DiffusionDecoder(nn.Module):
    def __init__(self, dim: int = 64, num_classes: int = 5, num_layers: int = 3, heads: int = 8, T: int = 1000):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        self.T = T
        self.layers = nn.ModuleList(DecoderLayer(dim, heads) for _ in range(num_layers))
        self.time_mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))
        self.out_norm = nn.LayerNorm(dim)
        self.class_head = nn.Linear(dim, num_classes + 1)
        self.mask_mlp = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim))

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    def time_embedding(self, t, batch: int, dtype) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
        if t.numel() == 1:
            t = t.expand(batch)
        # scale so the full range spans the sinusoid periods like a 0..1000 index
        emb = sine_embedding(t * (1000.0 / self.T), self.dim).to(dtype)
        return self.time_mlp(emb)[:, None, :]


def decoder_layer(state: DecoderState, level_features: torch.Tensor, t, decoder: DiffusionDecoder) -> torch.Tensor:
    """Apply layer ``state.layer_index`` and return the updated ``B x N x C`` features."""
    x = state.mask_features
    single = x.ndim == 2
    allow = state.attention
    if single:
        x, allow, level_features = x[None], allow[None], level_features[None]
    B, N, C = x.shape
    _, Cf, h, w = level_features.shape
    if Cf != C:
        raise ValueError(f"feature channels {Cf} != mask feature channels {C}")
    if tuple(allow.shape) != (B, N, h, w):
        raise ValueError(f"attention mask {tuple(allow.shape)} does not match {(B, N, h, w)}")
    memory = level_features.flatten(2).transpose(1, 2)
    pos = position_encoding(h, w, C, dtype=memory.dtype)[None]
    temb = decoder.time_embedding(t, B, x.dtype)
    out = decoder.layers[state.layer_index](x, memory, pos, temb, allow.flatten(2))
    return out[0] if single else out


def predict(mask_features: torch.Tensor, f_pixel: torch.Tensor, decoder: DiffusionDecoder) -> Prediction:
    """Class logits from a linear head; mask logits as ``<MLP(feature), f_pixel>``."""
    single = mask_features.ndim == 2
    if single:
        mask_features, f_pixel = mask_features[None], f_pixel[None]
    x = decoder.out_norm(mask_features)
    cls = decoder.class_head(x)
    emb = decoder.mask_mlp(x)
    masks = torch.einsum("bnc,bchw->bnhw", emb, f_pixel)
    if single:
        return Prediction(masks[0], cls[0])
    return Prediction(masks, cls)


def run_decoder(pyr: PyramidFeatures, m_noisy, t, decoder: DiffusionDecoder, b: float | None = None) -> list[Prediction]:
    """One Prediction per decoder layer; the last one is the model output.

    ``m_noisy`` is ``B x N x H x W`` (or a single-image noisy MaskSet);
    ``t`` is an int or one timestep per image.
    """
    m, mb = _noisy_tensor(m_noisy)
    b = mb if b is None else b
    if m.ndim == 3:
        m = m[None]
    m = m.to(pyr.f_pixel.dtype)
    levels = pyr.levels
    x = init_mask_features(pyr.f_pixel, m, b)
    allow = attention_mask(m, levels[0].shape[-2:])
    preds = []
    for i in range(decoder.num_layers):
        level = levels[i % 3]
        x = decoder_layer(DecoderState(x, allow, i), level, t, decoder)
        pred = predict(x, pyr.f_pixel, decoder)
        preds.append(pred)
        nxt = levels[(i + 1) % 3]
        allow = attention_mask(pred.mask_logits.detach(), nxt.shape[-2:])
    return preds
