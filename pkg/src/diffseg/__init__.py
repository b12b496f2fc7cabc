"""Universal image segmentation by denoising noisy masks with a masked-attention decoder."""

__version__ = "0.1.0"
