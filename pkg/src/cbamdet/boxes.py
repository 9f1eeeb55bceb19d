"""Axis-aligned boxes, annotations, detections, and overlap measures.

Boxes carry their representation with them: center (cx,cy,w,h) or corner
(x1,y1,x2,y2) form, in normalized image fractions or pixels.  Conversions
are explicit; mixing units in a binary measure raises rather than
producing a silently wrong overlap.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = ["BBox", "Annotation", "Detection", "iou", "ciou", "iou_matrix"]

CENTER = "center"
CORNER = "corner"


@dataclass(frozen=True)
class BBox:
    """One box, tagged with form and units."""

    c0: float
    c1: float
    c2: float
    c3: float
    form: str = CENTER
    normalized: bool = True

    def __post_init__(self):
        if self.form not in (CENTER, CORNER):
            raise ValueError(f"unknown box form {self.form!r}")

    @classmethod
    def from_center(cls, cx, cy, w, h, normalized=True) -> "BBox":
        return cls(float(cx), float(cy), float(w), float(h), CENTER, normalized)

    @classmethod
    def from_corner(cls, x1, y1, x2, y2, normalized=True) -> "BBox":
        return cls(float(x1), float(y1), float(x2), float(y2), CORNER, normalized)

    # center-form accessors
    @property
    def cx(self) -> float:
        return self.c0 if self.form == CENTER else (self.c0 + self.c2) / 2.0

    @property
    def cy(self) -> float:
        return self.c1 if self.form == CENTER else (self.c1 + self.c3) / 2.0

    @property
    def w(self) -> float:
        return self.c2 if self.form == CENTER else self.c2 - self.c0

    @property
    def h(self) -> float:
        return self.c3 if self.form == CENTER else self.c3 - self.c1

    # corner-form accessors
    @property
    def x1(self) -> float:
        return self.c0 if self.form == CORNER else self.c0 - self.c2 / 2.0

    @property
    def y1(self) -> float:
        return self.c1 if self.form == CORNER else self.c1 - self.c3 / 2.0

    @property
    def x2(self) -> float:
        return self.c2 if self.form == CORNER else self.c0 + self.c2 / 2.0

    @property
    def y2(self) -> float:
        return self.c3 if self.form == CORNER else self.c1 + self.c3 / 2.0

    @property
    def area(self) -> float:
        return max(0.0, self.w) * max(0.0, self.h)

    def to_corner(self) -> "BBox":
        if self.form == CORNER:
            return self
        return BBox(self.x1, self.y1, self.x2, self.y2, CORNER, self.normalized)

    def to_center(self) -> "BBox":
        if self.form == CENTER:
            return self
        return BBox(self.cx, self.cy, self.w, self.h, CENTER, self.normalized)

    def to_pixels(self, image_size: int) -> "BBox":
        if not self.normalized:
            return self
        s = float(image_size)
        return BBox(self.c0 * s, self.c1 * s, self.c2 * s, self.c3 * s, self.form, False)

    def to_normalized(self, image_size: int) -> "BBox":
        if self.normalized:
            return self
        s = float(image_size)
        return BBox(self.c0 / s, self.c1 / s, self.c2 / s, self.c3 / s, self.form, True)


@dataclass(frozen=True)
class Annotation:
    """Ground truth: class index plus a normalized center-form box."""

    class_id: int
    box: BBox

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError(f"class_id must be non-negative, got {self.class_id}")
        b = self.box
        if b.form != CENTER or not b.normalized:
            raise ValueError("annotation boxes must be center-form and normalized")
        if not (0.0 < b.w <= 1.0 and 0.0 < b.h <= 1.0):
            raise ValueError(f"annotation size out of (0,1]: w={b.w} h={b.h}")
        if not (0.0 <= b.cx <= 1.0 and 0.0 <= b.cy <= 1.0):
            raise ValueError(f"annotation center out of [0,1]: cx={b.cx} cy={b.cy}")


@dataclass(frozen=True)
class Detection:
    """Model output: class index, corner-form pixel box, confidence."""

    class_id: int
    box: BBox
    confidence: float

    def __post_init__(self):
        if not (0.0 <= self.confidence <= 1.0):
            raise ValueError(f"confidence out of [0,1]: {self.confidence}")


def _check_same_units(a: BBox, b: BBox) -> None:
    if a.normalized != b.normalized:
        raise ValueError("cannot compare a normalized box with a pixel box")


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union in [0,1]; zero-area boxes overlap nothing."""
    _check_same_units(a, b)
    a, b = a.to_corner(), b.to_corner()
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def ciou(a: BBox, b: BBox) -> float:
    """Complete IoU: overlap minus center-distance and aspect penalties.

    Equals 1 exactly when the boxes coincide; can go negative for distant
    boxes but stays above -1.5 (the distance term is below 1, the aspect
    term below 0.5).
    """
    _check_same_units(a, b)
    if a.w <= 0.0 or a.h <= 0.0 or b.w <= 0.0 or b.h <= 0.0:
        raise ValueError(f"ciou needs positive box areas, got {a.w}x{a.h} and {b.w}x{b.h}")
    plain = iou(a, b)
    ac, bc = a.to_corner(), b.to_corner()
    cw = max(ac.x2, bc.x2) - min(ac.x1, bc.x1)
    ch = max(ac.y2, bc.y2) - min(ac.y1, bc.y1)
    c2 = cw * cw + ch * ch
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    v = (4.0 / math.pi**2) * (math.atan(a.w / a.h) - math.atan(b.w / b.h)) ** 2
    if v == 0.0:
        alpha = 0.0
    else:
        alpha = v / (1.0 - plain + v)
    center_term = rho2 / c2 if c2 > 0.0 else 0.0
    return plain - center_term - alpha * v


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of corner-form [n,4] against [m,4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix1 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy1 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix2 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix2 - ix1, 0.0, None) * np.clip(iy2 - iy1, 0.0, None)
    area_a = np.clip(a[:, 2] - a[:, 0], 0.0, None) * np.clip(a[:, 3] - a[:, 1], 0.0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0.0, None) * np.clip(b[:, 3] - b[:, 1], 0.0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out
