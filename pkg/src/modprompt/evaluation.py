"""COCO-style AP (101-point interpolation) and zero-shot retention checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import Detection, iou

IOU_THRESHOLDS = (0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95)
RECALL_POINTS = np.arange(101) / 100.0
AP_FIELDS = ("ap50", "ap75", "ap")

__all__ = [
    "iou", "MatchResult", "APReport", "match_image", "greedy_match", "match_detections", "average_precision",
    "pr_curve", "evaluate", "evaluate_detections", "retention",
]


@dataclass
class MatchResult:
    """Flags for every detection, ordered by descending score across the dataset."""

    scores: np.ndarray
    flags: np.ndarray  # bool, True = TP
    matched: np.ndarray  # gt index within its image, -1 if unmatched
    image_index: np.ndarray
    category: np.ndarray
    num_gt: np.ndarray  # per image


def _sort_key(d: Detection):
    return (-d.score, d.category, tuple(d.box))


def match_image(dets: list[Detection], gt_boxes, gt_cats, iou_thr: float):
    """Greedy matching within one image.

    Detections are visited by descending score; each takes the unmatched
    same-category gt with the highest IoU >= iou_thr (lower index on ties).
    Returns (sorted detections, TP flags, matched gt indices).
    """
    dets = sorted(dets, key=_sort_key)
    ious = [[iou(d.box, b) for b in gt_boxes] for d in dets]
    flags, matched = greedy_match(ious, [d.category for d in dets], gt_cats, iou_thr)
    return dets, flags, matched


def greedy_match(ious, det_cats, gt_cats, iou_thr: float):
    """Greedy matching of already score-sorted detections against an IoU matrix."""
    taken = [False] * len(gt_cats)
    flags, matched = [], []
    for row, cat in zip(ious, det_cats):
        best, best_iou = -1, -1.0
        for j, (v, c) in enumerate(zip(row, gt_cats)):
            if taken[j] or c != cat:
                continue
            if v >= iou_thr and v > best_iou:
                best, best_iou = j, v
        if best >= 0:
            taken[best] = True
        flags.append(best >= 0)
        matched.append(best)
    return flags, matched


def _gt_indices(gt, vocab):
    return [vocab.index(c) for c in gt.categories]


def match_detections(dets_per_image, gts_per_image, iou_thr: float, vocab) -> MatchResult:
    scores, flags, matched, img_idx, cats = [], [], [], [], []
    for i, (dets, gt) in enumerate(zip(dets_per_image, gts_per_image)):
        ds, fl, mt = match_image(dets, gt.boxes, _gt_indices(gt, vocab), iou_thr)
        scores += [d.score for d in ds]
        cats += [d.category for d in ds]
        flags += fl
        matched += mt
        img_idx += [i] * len(ds)
    scores = np.asarray(scores, dtype=np.float64)
    img_idx = np.asarray(img_idx, dtype=np.int64)
    # stable: ties keep (image, within-image) order, which is itself input-order independent
    order = np.argsort(-scores, kind="mergesort")
    return MatchResult(
        scores[order],
        np.asarray(flags, dtype=bool)[order],
        np.asarray(matched, dtype=np.int64)[order],
        img_idx[order],
        np.asarray(cats, dtype=np.int64)[order],
        np.asarray([len(g.boxes) for g in gts_per_image], dtype=np.int64),
    )


def pr_curve(flags, num_gt: int):
    """Raw recall/precision per rank and the interpolated precision at the 101 recall points."""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1] if len(precision) else precision
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.zeros(len(RECALL_POINTS))
    valid = idx < len(envelope)
    interp[valid] = envelope[idx[valid]]
    return recall, precision, interp


def average_precision(flags, num_gt: int) -> float | None:
    """101-point interpolated AP; ``None`` when the category has no ground truth."""
    if num_gt == 0:
        return None
    return float(pr_curve(flags, num_gt)[2].mean())


@dataclass
class APReport:
    ap50: float
    ap75: float
    ap: float
    per_category: dict = field(default_factory=dict)  # name -> {ap50, ap75, ap, num_gt, num_detections}
    num_detections: int = 0
    num_images: int = 0

    def to_flat(self) -> dict:
        d = {"ap50": self.ap50, "ap75": self.ap75, "ap": self.ap,
             "num_detections": self.num_detections, "num_images": self.num_images}
        for name, vals in self.per_category.items():
            for k, v in vals.items():
                d[f"per_category.{name}.{k}"] = v
        return d

    @classmethod
    def from_flat(cls, d: dict) -> APReport:
        per = {}
        for k, v in d.items():
            if k.startswith("per_category."):
                _, name, fld = k.split(".", 2)
                per.setdefault(name, {})[fld] = v
        return cls(d["ap50"], d["ap75"], d["ap"], per, d.get("num_detections", 0), d.get("num_images", 0))


def evaluate_detections(dets_per_image, gts_per_image, vocab) -> APReport:
    vocab = list(vocab)
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truth cover different numbers of images")
    if not gts_per_image:
        raise ValueError("cannot evaluate an empty dataset")
    per_thr = [match_detections(dets_per_image, gts_per_image, t, vocab) for t in IOU_THRESHOLDS]
    gt_counts = np.zeros(len(vocab), dtype=np.int64)
    for gt in gts_per_image:
        for k in _gt_indices(gt, vocab):
            gt_counts[k] += 1
    per_category = {}
    for k, name in enumerate(vocab):
        if gt_counts[k] == 0:
            continue
        aps = [average_precision(m.flags[m.category == k], int(gt_counts[k])) for m in per_thr]
        per_category[name] = {
            "ap50": aps[0],
            "ap75": aps[IOU_THRESHOLDS.index(0.75)],
            "ap": float(np.mean(aps)),
            "num_gt": int(gt_counts[k]),
            "num_detections": int((per_thr[0].category == k).sum()),
        }
    summary = {f: float(np.mean([v[f] for v in per_category.values()])) if per_category else 0.0
               for f in AP_FIELDS}
    return APReport(**summary, per_category=per_category,
                    num_detections=int(len(per_thr[0].scores)), num_images=len(gts_per_image))


def evaluate(predict, dataset, vocab) -> APReport:
    """Run ``predict(image) -> list[Detection]`` over (Image, GroundTruth) pairs."""
    dataset = list(dataset)
    if not dataset:
        raise ValueError("cannot evaluate an empty dataset")
    dets = [predict(img) for img, _ in dataset]
    return evaluate_detections(dets, [gt for _, gt in dataset], vocab)


def report_delta(a: APReport, b: APReport) -> dict:
    """Field-wise a - b over the flat numeric AP fields."""
    fa, fb = a.to_flat(), b.to_flat()
    return {k: fa[k] - fb[k] for k in fa if k in fb and ("ap" in k.split(".")[-1])}


def retention(adapted, source_dataset, zeroshot, images=None) -> dict:
    """Compare an adapted pipeline with the zero-shot one on the source modality.

    ``adapted`` and ``zeroshot`` are ``Pipeline`` objects. When the adapted
    pipeline shares the zero-shot detector (a prompt strategy), it is also
    evaluated with prompt and residuals switched off, which must reproduce
    the zero-shot report exactly.
    """
    from .pipeline import state_hash

    dataset = list(source_dataset)
    vocab = zeroshot.vocab
    gts = [gt for _, gt in dataset]
    if images is None:
        import torch

        images = torch.stack([torch.as_tensor(img.pixels).permute(2, 0, 1) for img, _ in dataset])

    def run(pipe, **kw):
        return evaluate_detections(pipe.predict_batch(images, **kw), gts, vocab)

    zs = run(zeroshot, use_prompt=False, use_residual=False)
    ad = run(adapted)
    out = {"zeroshot": zs.to_flat(), "adapted": ad.to_flat(), "delta": report_delta(ad, zs)}
    za, aa = zeroshot.arrays(), adapted.arrays()
    frozen_keys = ("backbone.", "head.", "embed.base")
    same_detector = state_hash(za, frozen_keys) == state_hash(aa, frozen_keys)
    out["detector_frozen"] = same_detector
    if same_detector:
        off = run(adapted, use_prompt=False, use_residual=False)
        out["prompt_disabled"] = off.to_flat()
        out["disabled_delta"] = report_delta(off, zs)
        out["disabled_matches_zeroshot"] = off.to_flat() == zs.to_flat()
    return out
