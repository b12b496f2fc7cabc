from __future__ import annotations

from torch import nn

from .decoder import DiffusionDecoder
from .pixel_module import PixelModule


class SegModel(nn.Module):
    """Pixel module plus diffusion decoder; the unit that gets checkpointed."""

    def __init__(self, dim: int = 64, num_classes: int = 5, num_layers: int = 3, heads: int = 8,
                 T: int = 1000, widths=(32, 48, 64, 96, 128, 128)):
        super().__init__()
        self.pixel = PixelModule(dim, widths)
        self.decoder = DiffusionDecoder(dim, num_classes, num_layers, heads, T)

    @classmethod
    def from_config(cls, cfg) -> "SegModel":
        return cls(dim=cfg.dim, num_classes=cfg.num_classes, num_layers=cfg.num_layers,
                   heads=cfg.heads, T=cfg.T, widths=tuple(cfg.backbone_widths))
