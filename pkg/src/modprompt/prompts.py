"""Input-space adaptation: static visual prompts and the encoder-decoder translator.

Every strategy starts at the identity: static prompts are zero (or w=1, b=0)
and the translator's output layer is zero, so the adapted image equals the
input before any training.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Image

STATIC_KINDS = ("fixed", "random", "padding", "weight_map", "weight_map_v2")
TRANSLATOR_VARIANTS = ("MB", "RES")


class _RangeClamp(torch.autograd.Function):
    """Clamp to [0, 1]. Gradient passes inside the range, and outside it only
    when a descent step would move the value back toward the range."""

    @staticmethod
    def forward(ctx, x):
        ctx.save_for_backward(x)
        return x.clamp(0.0, 1.0)

    @staticmethod
    def backward(ctx, grad):
        (x,) = ctx.saved_tensors
        blocked = ((x > 1.0) & (grad < 0)) | ((x < 0.0) & (grad > 0))
        return grad.masked_fill(blocked, 0.0)


def compose(image: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    if image.shape != residual.shape:
        raise ValueError(f"shape mismatch: image {tuple(image.shape)} vs residual {tuple(residual.shape)}")
    return _RangeClamp.apply(image + residual)


class StaticPrompt(nn.Module):
    """Input-independent prompt. Images are N x C x H x W tensors."""

    def __init__(self, kind: str, patch_size: int, image_shape, seed: int = 0):
        super().__init__()
        if kind not in STATIC_KINDS:
            raise ValueError(f"unknown prompt kind {kind!r}; expected one of {STATIC_KINDS}")
        c, h, w = image_shape
        if kind in ("fixed", "random", "padding") and not 0 < patch_size <= min(h, w):
            raise ValueError(f"patch_size {patch_size} must be in (0, {min(h, w)}]")
        self.kind = kind
        self.patch_size = int(patch_size)
        self.image_shape = (c, h, w)
        self.seed = int(seed)
        if kind in ("fixed", "random"):
            self.values = nn.Parameter(torch.zeros(c, patch_size, patch_size))
        elif kind == "padding":
            self.values = nn.Parameter(torch.zeros(c, h, w))
            frame = torch.ones(h, w)
            frame[patch_size:h - patch_size, patch_size:w - patch_size] = 0.0
            self.register_buffer("frame", frame, persistent=False)
        elif kind == "weight_map":
            self.values = nn.Parameter(torch.zeros(c, h, w))
        else:
            self.scale = nn.Parameter(torch.ones(c, h, w))
            self.shift = nn.Parameter(torch.zeros(c, h, w))

    def placements(self, n: int, step: int) -> np.ndarray:
        """Per-image (y, x) patch corners for a training step; a pure function of (seed, step)."""
        _, h, w = self.image_shape
        rng = np.random.default_rng([self.seed, step])
        return np.stack(
            [rng.integers(0, h - self.patch_size + 1, n), rng.integers(0, w - self.patch_size + 1, n)],
            axis=-1,
        )

    def forward(self, x: torch.Tensor, placements=None) -> torch.Tensor:
        if tuple(x.shape[1:]) != self.image_shape:
            raise ValueError(f"prompt built for {self.image_shape}, got images {tuple(x.shape[1:])}")
        if self.kind == "weight_map_v2":
            return _RangeClamp.apply(self.scale * x + self.shift)
        if self.kind == "weight_map":
            return compose(x, self.values.expand_as(x))
        if self.kind == "padding":
            return compose(x, (self.values * self.frame).expand_as(x))
        p = self.patch_size
        if self.kind == "fixed" or placements is None:
            delta = F.pad(self.values, (0, x.shape[3] - p, 0, x.shape[2] - p))
            return compose(x, delta.expand_as(x))
        deltas = [
            F.pad(self.values, (int(c), x.shape[3] - p - int(c), int(r), x.shape[2] - p - int(r)))
            for r, c in placements
        ]
        return compose(x, torch.stack(deltas))


def init_prompt(kind: str, patch_size: int, image_shape, seed: int = 0) -> StaticPrompt:
    return StaticPrompt(kind, patch_size, image_shape, seed)


def apply_static(image: Image, prompt: StaticPrompt, mode: str = "eval", step: int = 0) -> Image:
    """Apply a prompt to one ``Image``; ``train`` mode samples random placements."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = torch.as_tensor(image.pixels).permute(2, 0, 1)[None]
    placements = prompt.placements(1, step) if mode == "train" and prompt.kind == "random" else None
    with torch.no_grad():
        out = prompt(x, placements)[0].permute(1, 2, 0).numpy()
    return Image(out, image.modality)


# -- encoder-decoder translator -----------------------------------------------


def _norm(c):
    return nn.GroupNorm(min(4, c), c)


class SeparableBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.depthwise = nn.Conv2d(cin, cin, 3, stride=stride, padding=1, groups=cin, bias=False)
        self.pointwise = nn.Conv2d(cin, cout, 1, bias=False)
        self.norm = _norm(cout)

    def forward(self, x):
        return F.silu(self.norm(self.pointwise(self.depthwise(x))))


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)

    def forward(self, x):
        y = F.silu(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return F.silu(y + (x if self.skip is None else self.skip(x)))


class Translator(nn.Module):
    """U-Net: a full-resolution stem, three stride-2 encoder stages, three
    upsampling decoder stages with skip concatenation, and a zero-initialized
    1x1 output producing an image-shaped residual."""

    configs = {
        "MB": (SeparableBlock, (8, 16, 32)),
        "RES": (ResidualBlock, (16, 32, 64)),
    }

    def __init__(self, variant: str = "MB", channels: int = 3):
        super().__init__()
        if variant not in self.configs:
            raise ValueError(f"unknown translator variant {variant!r}; expected one of {TRANSLATOR_VARIANTS}")
        self.variant = variant
        block, (w0, w1, w2) = self.configs[variant]
        self.stem = nn.Sequential(nn.Conv2d(channels, w0, 3, padding=1, bias=False), _norm(w0), nn.SiLU())
        self.down1 = block(w0, w1, stride=2)
        self.down2 = block(w1, w2, stride=2)
        self.down3 = block(w2, w2, stride=2)
        self.up3 = block(w2 + w2, w2)
        self.up2 = block(w2 + w1, w1)
        self.up1 = nn.Sequential(nn.Conv2d(w1 + w0, w0, 3, padding=1, bias=False), _norm(w0), nn.SiLU())
        self.out = nn.Conv2d(w0, channels, 1)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    @staticmethod
    def _up(x, skip):
        return torch.cat([F.interpolate(x, size=skip.shape[-2:], mode="nearest"), skip], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s0 = self.stem(x - 0.5)
        s1 = self.down1(s0)
        s2 = self.down2(s1)
        s3 = self.down3(s2)
        y = self.up3(self._up(s3, s2))
        y = self.up2(self._up(y, s1))
        y = self.up1(self._up(y, s0))
        return self.out(y)


def init_translator(variant: str = "MB", seed: int = 0, channels: int = 3) -> Translator:
    gen_state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return Translator(variant, channels)
    finally:
        torch.random.set_rng_state(gen_state)


def translate(image: torch.Tensor, params: Translator) -> torch.Tensor:
    """Residual for a batch (N x C x H x W) or a single C x H x W image."""
    if image.dim() == 3:
        return params(image[None])[0]
    return params(image)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())
