"""Composite detection loss: box regression, objectness, classification.

Box loss is one minus complete IoU, averaged over every assigned slot
across all three scales.  Objectness is binary cross entropy on raw logits
over every slot of every scale (hard 0/1 targets, single mean).  Class
loss is binary cross entropy of assigned class logits against one-hot
rows.  Predicted boxes are decoded inside the loss, in pixel units, with
the same offset and anchor arithmetic the inference decoder uses, so the
two cannot drift apart.
"""

from __future__ import annotations

import math

import numpy as np

from .assign import ScaleAssignment, build_targets
from .model import STRIDES, ModelConfig, RawPredictions
from .tensor import (
    Tensor,
    add,
    assert_finite,
    atan,
    bce_with_logits,
    concat,
    div,
    maximum,
    minimum,
    mul,
    relu,
    reshape,
    sigmoid,
    slice_axis,
    sub,
    take_rows,
    tensor,
    tmean,
)

__all__ = ["BOX_WEIGHT", "OBJ_WEIGHT", "CLS_WEIGHT", "ciou_tensor", "detection_loss"]

BOX_WEIGHT = 0.05
OBJ_WEIGHT = 1.0
CLS_WEIGHT = 0.5


def ciou_tensor(pred: Tensor, target: np.ndarray) -> Tensor:
    """Complete IoU of [n,4] center-form boxes, differentiable in ``pred``.

    All terms are differentiated, the aspect coupling alpha included, so
    the backward pass agrees with finite differences of the forward pass.
    The coupled term is computed as v^2/(1-IoU+v); its denominator only
    vanishes for a perfect prediction, where the term and its gradient are
    exactly zero, handled by masking.  Targets must have strictly positive
    extents.
    """
    t = np.asarray(target, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[1] != 4 or t.shape != pred.shape:
        raise ValueError(f"expected matching [n,4] boxes, got {pred.shape} and {t.shape}")
    if np.any(t[:, 2:] <= 0.0):
        raise ValueError("target boxes must have positive width and height")

    px = slice_axis(pred, 1, 0, 1)
    py = slice_axis(pred, 1, 1, 2)
    pw = slice_axis(pred, 1, 2, 3)
    ph = slice_axis(pred, 1, 3, 4)
    half_w, half_h = mul(pw, 0.5), mul(ph, 0.5)
    px1, px2 = sub(px, half_w), add(px, half_w)
    py1, py2 = sub(py, half_h), add(py, half_h)
    tx1, tx2 = t[:, 0:1] - t[:, 2:3] / 2.0, t[:, 0:1] + t[:, 2:3] / 2.0
    ty1, ty2 = t[:, 1:2] - t[:, 3:4] / 2.0, t[:, 1:2] + t[:, 3:4] / 2.0

    iw = relu(sub(minimum(px2, tensor(tx2)), maximum(px1, tensor(tx1))))
    ih = relu(sub(minimum(py2, tensor(ty2)), maximum(py1, tensor(ty1))))
    inter = mul(iw, ih)
    area_p = mul(pw, ph)
    area_t = t[:, 2:3] * t[:, 3:4]
    union = sub(add(area_p, tensor(area_t)), inter)
    iou = mul(inter, _reciprocal(union))

    cw = sub(maximum(px2, tensor(tx2)), minimum(px1, tensor(tx1)))
    ch = sub(maximum(py2, tensor(ty2)), minimum(py1, tensor(ty1)))
    c2 = add(mul(cw, cw), mul(ch, ch))
    dx = sub(px, tensor(t[:, 0:1]))
    dy = sub(py, tensor(t[:, 1:2]))
    rho2 = add(mul(dx, dx), mul(dy, dy))
    center_term = mul(rho2, _reciprocal(c2))

    angle = sub(atan(mul(pw, _reciprocal(ph))), tensor(np.arctan(t[:, 2:3] / t[:, 3:4])))
    v = mul(mul(angle, angle), 4.0 / math.pi**2)
    denom = add(sub(1.0, iou), v)
    # denom == 0 forces v == 0, so the masked entries contribute exactly 0
    mask = (denom.data == 0.0).astype(np.float64)
    aspect_term = div(mul(v, v), add(denom, tensor(mask)))

    out = sub(sub(iou, center_term), aspect_term)
    return reshape(out, (pred.shape[0],))


def _reciprocal(t: Tensor) -> Tensor:
    return div(1.0, t)


def detection_loss(
    preds: RawPredictions,
    batch_annotations,
    cfg: ModelConfig,
    box_weight: float = BOX_WEIGHT,
    obj_weight: float = OBJ_WEIGHT,
    cls_weight: float = CLS_WEIGHT,
):
    """Weighted sum of the three parts; returns (scalar Tensor, float parts)."""
    assignments = build_targets(batch_annotations, cfg)
    nc = cfg.num_classes
    per = 5 + nc

    ciou_parts = []
    cls_logit_parts = []
    cls_target_parts = []
    obj_logit_parts = []
    obj_target_parts = []

    for pred, assign, stride, anchors in zip(preds, assignments, STRIDES, cfg.anchors):
        B, A, H, W, _ = pred.shape
        flat = reshape(pred, (B * A * H * W, per))

        obj_logit_parts.append(reshape(slice_axis(flat, 1, 4, 5), (B * A * H * W,)))
        obj_t = np.zeros((B, A, H, W))
        if len(assign):
            obj_t[assign.image_idx, assign.anchor_idx, assign.gy, assign.gx] = 1.0
        obj_target_parts.append(obj_t.reshape(-1))

        if not len(assign):
            continue
        rows = ((assign.image_idx * A + assign.anchor_idx) * H + assign.gy) * W + assign.gx
        picked = take_rows(flat, rows)
        txy = slice_axis(picked, 1, 0, 2)
        twh = slice_axis(picked, 1, 2, 4)
        grid_xy = np.stack([assign.gx, assign.gy], axis=1).astype(np.float64)
        pxy = mul(add(sub(mul(sigmoid(txy), 2.0), 0.5), tensor(grid_xy)), float(stride))
        half = mul(sigmoid(twh), 2.0)
        pwh = mul(mul(half, half), tensor(assign.anchor_wh))
        pbox = concat([pxy, pwh], axis=1)
        ciou_parts.append(ciou_tensor(pbox, assign.tbox))

        cls_logit_parts.append(slice_axis(picked, 1, 5, per))
        one_hot = np.zeros((len(assign), nc))
        one_hot[np.arange(len(assign)), assign.tcls] = 1.0
        cls_target_parts.append(one_hot)

    obj_logits = concat(obj_logit_parts, axis=0)
    obj_targets = np.concatenate(obj_target_parts)
    obj_loss = tmean(bce_with_logits(obj_logits, tensor(obj_targets)))

    if ciou_parts:
        all_ciou = concat(ciou_parts, axis=0)
        box_loss = tmean(sub(1.0, all_ciou))
        cls_loss = tmean(
            bce_with_logits(
                concat(cls_logit_parts, axis=0),
                tensor(np.concatenate(cls_target_parts, axis=0)),
            )
        )
    else:
        box_loss = tensor([0.0])
        cls_loss = tensor([0.0])

    box_loss = assert_finite(box_loss, "box_loss")
    obj_loss = assert_finite(obj_loss, "obj_loss")
    cls_loss = assert_finite(cls_loss, "cls_loss")

    total = add(
        add(mul(box_loss, box_weight), mul(obj_loss, obj_weight)),
        mul(cls_loss, cls_weight),
    )
    parts = {
        "box": box_loss.data.item(),
        "obj": obj_loss.data.item(),
        "cls": cls_loss.data.item(),
        "total": total.data.item(),
    }
    return total, parts
