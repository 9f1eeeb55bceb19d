"""Detection metrics: greedy matching, AP, mAP@0.5, mAP@0.5:0.95.

Detections from all images are pooled and sorted by confidence (ties
broken by image index, then detection index, so reports reproduce).
Each detection greedily claims the unmatched ground truth in its image
with the highest IoU at or above the threshold; matching is one-to-one.
AP is the area under the continuous precision envelope.  An instance
with no ground truth and no detections scores a vacuous 1.0; detections
against an empty image set score 0.0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import Annotation, BBox, Detection, iou
from .model import Model
from .postprocess import DEFAULT_IOU_THRESH, postprocess
from .tensor import Tensor, no_grad

__all__ = [
    "IOU_THRESHOLDS",
    "EVAL_CONF_THRESH",
    "MAX_PR_SAMPLES",
    "EvalReport",
    "average_precision",
    "evaluate",
    "match_detections",
    "write_report",
]

# 0.5 through 0.95 in steps of 0.05
IOU_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

# evaluation keeps almost everything and lets the PR curve sort it out
EVAL_CONF_THRESH = 0.001

# cap on stored PR points so reports stay readable
MAX_PR_SAMPLES = 25


def match_detections(dets_per_image, gts_per_image, iou_thresh: float):
    """Pool, sort, and greedily match; returns (tp_flags, n_gt).

    ``dets_per_image`` holds Detection lists; ``gts_per_image`` holds
    corner-form pixel BBox lists.  Both are assumed single-class.
    ``tp_flags`` follows the pooled sort order.
    """
    if len(dets_per_image) != len(gts_per_image):
        raise ValueError("detection and ground-truth image counts differ")
    pooled = [
        (img_i, det_i, d)
        for img_i, dets in enumerate(dets_per_image)
        for det_i, d in enumerate(dets)
    ]
    pooled.sort(key=lambda r: (-r[2].confidence, r[0], r[1]))
    taken = [set() for _ in gts_per_image]
    flags = []
    for img_i, _det_i, det in pooled:
        gts = gts_per_image[img_i]
        best_iou, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if j in taken[img_i]:
                continue
            ov = iou(det.box, gt)
            if ov >= iou_thresh and ov > best_iou:
                best_iou, best_j = ov, j
        if best_j >= 0:
            taken[img_i].add(best_j)
            flags.append(1)
        else:
            flags.append(0)
    n_gt = sum(len(g) for g in gts_per_image)
    return flags, n_gt


def _pr_curve(flags, n_gt):
    tp = np.cumsum(flags)
    fp = np.cumsum([1 - f for f in flags])
    recall = tp / n_gt
    precision = tp / np.maximum(tp + fp, 1)
    return recall, precision


def _envelope_area(recall, precision) -> float:
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision(dets_per_image, gts_per_image, iou_thresh: float) -> float:
    """AP of one class over a set of images; see module docstring."""
    flags, n_gt = match_detections(dets_per_image, gts_per_image, iou_thresh)
    if n_gt == 0:
        return 1.0 if not flags else 0.0
    if not flags:
        return 0.0
    recall, precision = _pr_curve(flags, n_gt)
    return _envelope_area(recall, precision)


@dataclass(frozen=True)
class EvalReport:
    """Per-class APs, the two mAP summaries, PR samples, and 0.5-IoU counts."""

    ap: dict  # {class_id: {iou_thresh: ap}}
    map50: float
    map50_95: float
    pr_samples: list  # evenly sampled (recall, precision) points at IoU 0.5
    tp: int
    fp: int
    fn: int
    n_images: int
    n_gt: int

    def __post_init__(self):
        for v in (self.map50, self.map50_95):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"metric out of [0,1]: {v}")
        for r, p in self.pr_samples:
            if not (0.0 <= r <= 1.0 and 0.0 <= p <= 1.0):
                raise ValueError(f"PR sample out of [0,1]: ({r}, {p})")
        if self.tp + self.fn != self.n_gt:
            raise ValueError("TP + FN must equal the ground-truth count")

    def to_json_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "ap": {
                str(c): {f"{t:.2f}": v for t, v in per.items()}
                for c, per in self.ap.items()
            },
            "counts": {"tp": self.tp, "fp": self.fp, "fn": self.fn},
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "pr_samples": [[float(r), float(p)] for r, p in self.pr_samples],
        }

    def to_text(self) -> str:
        lines = [
            f"images: {self.n_images}",
            f"ground_truths: {self.n_gt}",
            f"map50: {self.map50:.6f}",
            f"map50_95: {self.map50_95:.6f}",
            f"tp: {self.tp}",
            f"fp: {self.fp}",
            f"fn: {self.fn}",
            "",
            "class  iou   ap",
        ]
        for c in sorted(self.ap):
            for t in IOU_THRESHOLDS:
                lines.append(f"{c:>5}  {t:.2f}  {self.ap[c][t]:.6f}")
        lines.append("")
        lines.append("recall  precision")
        for r, p in self.pr_samples:
            lines.append(f"{r:.4f}  {p:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(model: Model, dataset, thresholds=IOU_THRESHOLDS,
             conf_thresh: float = EVAL_CONF_THRESH,
             nms_iou: float = DEFAULT_IOU_THRESH,
             batch_size: int = 16) -> EvalReport:
    """Run the model over (image, annotations) pairs and score it.

    ``dataset`` is a sequence of (image [3,S,S] in [0,1], Tensor or plain
    array, list of Annotation).  Deterministic for a fixed model and dataset.
    """
    dataset = [
        (img.data if isinstance(img, Tensor) else np.asarray(img), anns)
        for img, anns in dataset
    ]
    if not dataset:
        raise ValueError("evaluate needs a non-empty dataset")
    S = model.cfg.input_size
    nc = model.cfg.num_classes

    all_dets: list[list[Detection]] = []
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            chunk = dataset[start:start + batch_size]
            images = np.stack([img for img, _ in chunk])
            preds = model(Tensor(images))
            all_dets.extend(postprocess(preds, model.cfg, conf_thresh, nms_iou))

    gts_by_class: dict[int, list] = {c: [] for c in range(nc)}
    dets_by_class: dict[int, list] = {c: [] for c in range(nc)}
    for (img, anns), dets in zip(dataset, all_dets):
        for c in range(nc):
            gts_by_class[c].append([
                a.box.to_pixels(S).to_corner() for a in anns if a.class_id == c
            ])
            dets_by_class[c].append([d for d in dets if d.class_id == c])

    ap: dict[int, dict[float, float]] = {}
    for c in range(nc):
        ap[c] = {
            t: average_precision(dets_by_class[c], gts_by_class[c], t)
            for t in thresholds
        }
    aps50 = [ap[c][thresholds[0]] for c in range(nc)]
    map50 = float(np.mean(aps50))
    map50_95 = float(np.mean([np.mean(list(ap[c].values())) for c in range(nc)]))

    # pool the per-class TP/FP streams by confidence for one overall PR curve
    tp = fp = 0
    pooled = []
    for c in range(nc):
        flags, _ = match_detections(dets_by_class[c], gts_by_class[c], thresholds[0])
        tp += sum(flags)
        fp += len(flags) - sum(flags)
        keys = sorted(
            (-d.confidence, img_i, det_i)
            for img_i, dets in enumerate(dets_by_class[c])
            for det_i, d in enumerate(dets)
        )
        pooled.extend(key + (c, flag) for key, flag in zip(keys, flags))
    pooled.sort()
    n_gt = sum(len(g) for per in gts_by_class.values() for g in per)
    pr_samples: list[tuple[float, float]] = []
    if n_gt and pooled:
        recall, precision = _pr_curve([row[-1] for row in pooled], n_gt)
        n = len(recall)
        idx = np.unique(np.linspace(0, n - 1, min(n, MAX_PR_SAMPLES)).round().astype(int))
        pr_samples = [(float(recall[i]), float(precision[i])) for i in idx]
    return EvalReport(
        ap=ap,
        map50=map50,
        map50_95=map50_95,
        pr_samples=pr_samples,
        tp=tp,
        fp=fp,
        fn=n_gt - tp,
        n_images=len(dataset),
        n_gt=n_gt,
    )


def write_report(report: EvalReport, out_dir) -> tuple:
    """Emit the text and JSON forms side by side; returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "eval_report.txt"
    js = out_dir / "eval_report.json"
    txt.write_text(report.to_text())
    js.write_text(json.dumps(report.to_json_dict(), indent=2) + "\n")
    return txt, js
