"""Small open-vocabulary dense detector.

Each cell of a stride-8 feature grid is projected into the text-embedding space
and scored against the K category embeddings by cosine similarity, scaled by a
learnable temperature. A separate branch regresses the four side distances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .boxes import Detection, iou
from .data import GroundTruth

BOX_WEIGHT = 2.0
CENTER_RADIUS = 1.5
BACKGROUND = -1


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1, groups=8):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False)
        self.norm = nn.GroupNorm(min(groups, cout), cout)

    def forward(self, x):
        return F.silu(self.norm(self.conv(x)))


class Backbone(nn.Module):
    widths = (16, 32, 64, 64)
    strides = (2, 2, 2, 1)

    def __init__(self):
        super().__init__()
        cin = 3
        for i, (w, s) in enumerate(zip(self.widths, self.strides)):
            self.add_module(f"block{i}", ConvBlock(cin, w, stride=s))
            cin = w
        self.out_channels = cin
        self.stride = int(np.prod(self.strides))

    def forward(self, x):
        x = (x - 0.5) / 0.25
        for i in range(len(self.widths)):
            x = getattr(self, f"block{i}")(x)
        return x


class Head(nn.Module):
    def __init__(self, in_channels: int, embed_dim: int, stride: int):
        super().__init__()
        self.cls_conv = ConvBlock(in_channels, in_channels)
        self.embed = nn.Conv2d(in_channels, embed_dim, 1)
        self.reg_conv = ConvBlock(in_channels, in_channels)
        self.reg_out = nn.Conv2d(in_channels, 4, 1)
        self.logit_scale = nn.Parameter(torch.tensor(10.0))
        self.logit_bias = nn.Parameter(torch.tensor(-4.0))
        self.stride = stride
        nn.init.normal_(self.reg_out.weight, std=0.01)
        nn.init.constant_(self.reg_out.bias, float(np.log(2.0)))

    def forward(self, feats, embeddings):
        region = F.normalize(self.embed(self.cls_conv(feats)), dim=1)
        logits = torch.einsum("ndhw,kd->nhwk", region, embeddings)
        logits = self.logit_scale * logits + self.logit_bias
        raw = self.reg_out(self.reg_conv(feats)).permute(0, 2, 3, 1)
        offsets = torch.exp(raw.clamp(max=8.0)) * self.stride
        return logits, offsets


@dataclass
class RawPredictions:
    logits: torch.Tensor  # N x Gh x Gw x K
    offsets: torch.Tensor  # N x Gh x Gw x 4, (left, top, right, bottom) in pixels
    stride: int

    def __getitem__(self, i) -> RawPredictions:
        return RawPredictions(self.logits[i : i + 1], self.offsets[i : i + 1], self.stride)


@dataclass
class LossBreakdown:
    classification: torch.Tensor
    box: torch.Tensor
    total: torch.Tensor


class Detector(nn.Module):
    def __init__(self, embed_dim: int = 32):
        super().__init__()
        self.backbone = Backbone()
        self.head = Head(self.backbone.out_channels, embed_dim, self.backbone.stride)
        self.embed_dim = embed_dim

    @property
    def stride(self) -> int:
        return self.backbone.stride

    def forward(self, images: torch.Tensor, embeddings: torch.Tensor) -> RawPredictions:
        if embeddings.shape[-1] != self.embed_dim:
            raise ValueError(
                f"embedding dim {embeddings.shape[-1]} does not match projection dim {self.embed_dim}"
            )
        if images.dim() == 3:
            images = images.unsqueeze(0)
        logits, offsets = self.head(self.backbone(images), embeddings)
        return RawPredictions(logits, offsets, self.stride)


def cell_centers(grid, stride) -> np.ndarray:
    """Gh x Gw x 2 array of (x, y) cell centers in pixels."""
    gh, gw = grid
    ys = (np.arange(gh) + 0.5) * stride
    xs = (np.arange(gw) + 0.5) * stride
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1)


def assign_targets(gt: GroundTruth, grid, image_size, vocab, radius: float = CENTER_RADIUS):
    """Center-sampling assignment.

    Returns ``labels`` (Gh x Gw, category index or -1) and ``targets``
    (Gh x Gw x 4 side distances l, t, r, b from the cell center). Cells
    claimed by several boxes go to the box with the smallest area.
    """
    gh, gw = grid
    stride = image_size[0] / gh
    centers = cell_centers(grid, stride)
    labels = np.full((gh, gw), BACKGROUND, dtype=np.int64)
    targets = np.zeros((gh, gw, 4), dtype=np.float64)
    best_area = np.full((gh, gw), np.inf)
    cx, cy = centers[..., 0], centers[..., 1]
    for box, name in zip(gt.boxes, gt.categories):
        x1, y1, x2, y2 = box
        bx, by = (x1 + x2) / 2, (y1 + y2) / 2
        ltrb = np.stack([cx - x1, cy - y1, x2 - cx, y2 - cy], axis=-1)
        inside = ltrb.min(axis=-1) > 0
        near = (np.abs(cx - bx) < radius * stride) & (np.abs(cy - by) < radius * stride)
        area = (x2 - x1) * (y2 - y1)
        take = inside & near & (area < best_area)
        labels[take] = vocab.index(name)
        targets[take] = ltrb[take]
        best_area[take] = area
    return labels, targets


def loss_from_targets(raw: RawPredictions, labels: torch.Tensor, targets: torch.Tensor,
                      box_weight: float = BOX_WEIGHT) -> LossBreakdown:
    """Batched loss. ``labels`` is N x Gh x Gw, ``targets`` N x Gh x Gw x 4."""
    logits = raw.logits
    if not torch.isfinite(logits).all():
        raise FloatingPointError("non-finite logits")
    K = logits.shape[-1]
    pos = labels >= 0
    onehot = F.one_hot(labels.clamp(min=0), K).to(logits.dtype) * pos.unsqueeze(-1)
    cls = F.binary_cross_entropy_with_logits(logits, onehot, reduction="mean")
    if pos.any():
        p = raw.offsets[pos]
        t = targets[pos].to(p.dtype)
        inter_w = torch.minimum(p[:, 0], t[:, 0]) + torch.minimum(p[:, 2], t[:, 2])
        inter_h = torch.minimum(p[:, 1], t[:, 1]) + torch.minimum(p[:, 3], t[:, 3])
        inter = inter_w * inter_h
        area_p = (p[:, 0] + p[:, 2]) * (p[:, 1] + p[:, 3])
        area_t = (t[:, 0] + t[:, 2]) * (t[:, 1] + t[:, 3])
        box = (1.0 - inter / (area_p + area_t - inter)).mean()
    else:
        box = logits.new_zeros(())
    return LossBreakdown(cls, box, cls + box_weight * box)


def detection_loss(raw: RawPredictions, gt: GroundTruth, vocab, image_size=None,
                   box_weight: float = BOX_WEIGHT) -> LossBreakdown:
    """Loss of a single image's predictions against its ground truth."""
    grid = tuple(raw.logits.shape[1:3])
    if image_size is None:
        image_size = (grid[0] * raw.stride, grid[1] * raw.stride)
    labels, targets = assign_targets(gt, grid, image_size, list(vocab))
    return loss_from_targets(
        raw, torch.as_tensor(labels)[None], torch.as_tensor(targets)[None], box_weight
    )


def nms(dets: list[Detection], iou_thr: float) -> list[Detection]:
    """Class-wise greedy suppression of anything with IoU > iou_thr to a kept box."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    kept: list[Detection] = []
    for i in order:
        d = dets[i]
        if all(k.category != d.category or iou(k.box, d.box) <= iou_thr for k in kept):
            kept.append(d)
    return kept


def decode(raw: RawPredictions, score_threshold: float = 0.05, nms_iou: float = 0.5,
           max_detections: int = 100, image_size=None) -> list[Detection]:
    logits = raw.logits.detach()
    offsets = raw.offsets.detach()
    if logits.dim() == 4:
        logits, offsets = logits[0], offsets[0]
    gh, gw, _ = logits.shape
    scores, cats = torch.sigmoid(logits.double()).max(dim=-1)
    keep = (scores >= score_threshold).numpy()
    if not keep.any():
        return []
    centers = cell_centers((gh, gw), raw.stride)[keep]
    off = offsets.double().numpy()[keep]
    boxes = np.stack(
        [centers[:, 0] - off[:, 0], centers[:, 1] - off[:, 1],
         centers[:, 0] + off[:, 2], centers[:, 1] + off[:, 3]], axis=-1
    )
    if image_size is None:
        image_size = (gh * raw.stride, gw * raw.stride)
    boxes[:, [0, 2]] = boxes[:, [0, 2]].clip(0, image_size[1])
    boxes[:, [1, 3]] = boxes[:, [1, 3]].clip(0, image_size[0])
    dets = [
        Detection([float(v) for v in b], int(c), float(s))
        for b, c, s in zip(boxes, cats.numpy()[keep], scores.numpy()[keep])
    ]
    return nms(dets, nms_iou)[:max_detections]
