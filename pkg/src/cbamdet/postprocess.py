"""Raw predictions to detections: decode, threshold, per-class NMS.

Decoding mirrors the loss exactly: xy = (2*sig(t_xy) - 0.5 + grid)*stride,
wh = (2*sig(t_wh))^2 * anchor, confidence = sig(obj) * sig(class).  Every
(cell, anchor, class) whose confidence clears the threshold becomes one
candidate; boxes are clamped to the image and zero-extent leftovers are
dropped.  NMS is greedy and per class: keep the most confident remaining
detection, discard same-class boxes overlapping it above the IoU
threshold; equal confidences resolve to the earlier input index.
"""

from __future__ import annotations

import math

import numpy as np

from .boxes import BBox, Detection, iou_matrix
from .model import STRIDES, ModelConfig, RawPredictions
from .tensor import _sigmoid_values

__all__ = [
    "DEFAULT_CONF_THRESH",
    "DEFAULT_IOU_THRESH",
    "decode",
    "encode_box",
    "nms",
    "postprocess",
]

DEFAULT_CONF_THRESH = 0.25
DEFAULT_IOU_THRESH = 0.45


def decode(preds: RawPredictions, cfg: ModelConfig,
           conf_thresh: float = DEFAULT_CONF_THRESH) -> list:
    """Per-image detection lists, deterministic scale-major order."""
    if not (0.0 <= conf_thresh < 1.0):
        raise ValueError(f"conf_thresh must be in [0,1), got {conf_thresh}")
    S = cfg.input_size
    batch = preds[0].shape[0]
    out: list[list[Detection]] = [[] for _ in range(batch)]
    for pred, stride, anchors in zip(preds, STRIDES, cfg.anchors):
        data = np.asarray(pred.data, dtype=np.float64)
        B, A, H, W, _ = data.shape
        sig = _sigmoid_values(data)
        gx = np.arange(W).reshape(1, 1, 1, W)
        gy = np.arange(H).reshape(1, 1, H, 1)
        cx = (2.0 * sig[..., 0] - 0.5 + gx) * stride
        cy = (2.0 * sig[..., 1] - 0.5 + gy) * stride
        anchor_arr = np.asarray(anchors, dtype=np.float64)  # [A,2]
        w = (2.0 * sig[..., 2]) ** 2 * anchor_arr[:, 0].reshape(1, A, 1, 1)
        h = (2.0 * sig[..., 3]) ** 2 * anchor_arr[:, 1].reshape(1, A, 1, 1)
        conf = sig[..., 4:5] * sig[..., 5:]  # [B,A,H,W,nc]
        for b, a, i, j, c in np.argwhere(conf >= conf_thresh):
            x1 = min(max(cx[b, a, i, j] - w[b, a, i, j] / 2.0, 0.0), float(S))
            y1 = min(max(cy[b, a, i, j] - h[b, a, i, j] / 2.0, 0.0), float(S))
            x2 = min(max(cx[b, a, i, j] + w[b, a, i, j] / 2.0, 0.0), float(S))
            y2 = min(max(cy[b, a, i, j] + h[b, a, i, j] / 2.0, 0.0), float(S))
            if x2 <= x1 or y2 <= y1:
                continue
            out[b].append(Detection(
                class_id=int(c),
                box=BBox.from_corner(x1, y1, x2, y2, normalized=False),
                confidence=float(conf[b, a, i, j, c]),
            ))
    return out


def encode_box(cx: float, cy: float, w: float, h: float, gx: int, gy: int,
               stride: int, anchor_wh) -> tuple:
    """Inverse of the decode arithmetic: pixel box -> (tx, ty, tw, th).

    Only defined for boxes the parameterization can reach: center offset
    inside (-0.5, 1.5) cells and 0 < wh < 4*anchor.
    """
    aw, ah = float(anchor_wh[0]), float(anchor_wh[1])

    def logit(p):
        if not 0.0 < p < 1.0:
            raise ValueError(f"value {p} is outside the representable range")
        return math.log(p / (1.0 - p))

    tx = logit((cx / stride - gx + 0.5) / 2.0)
    ty = logit((cy / stride - gy + 0.5) / 2.0)
    tw = logit(math.sqrt(w / aw) / 2.0)
    th = logit(math.sqrt(h / ah) / 2.0)
    return tx, ty, tw, th


def nms(dets: list, iou_thresh: float = DEFAULT_IOU_THRESH) -> list:
    """Greedy per-class suppression; see module docstring for tie rules."""
    if not (0.0 < iou_thresh < 1.0):
        raise ValueError(f"iou_thresh must be in (0,1), got {iou_thresh}")
    if not dets:
        return []
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    corners = np.array(
        [[d.box.x1, d.box.y1, d.box.x2, d.box.y2] for d in dets], dtype=np.float64
    )
    overlap = iou_matrix(corners, corners)
    alive = [True] * len(dets)
    keep = []
    for pos, i in enumerate(order):
        if not alive[i]:
            continue
        keep.append(i)
        for j in order[pos + 1:]:
            if alive[j] and dets[j].class_id == dets[i].class_id and overlap[i, j] > iou_thresh:
                alive[j] = False
    return [dets[i] for i in keep]


def postprocess(preds: RawPredictions, cfg: ModelConfig,
                conf_thresh: float = DEFAULT_CONF_THRESH,
                iou_thresh: float = DEFAULT_IOU_THRESH) -> list:
    """Decode then suppress, per image."""
    return [nms(dets, iou_thresh) for dets in decode(preds, cfg, conf_thresh)]
