"""Anchor assignment: which grid cells and anchor slots own each ground truth.

A ground truth box matches an anchor when their width and height ratios are
both within a factor of 4 (checked as one max-ratio test).  Each match is
placed in the cell holding the box center and in up to two neighbouring
cells, one horizontal and one vertical, on whichever side the center is
closer to; a center exactly on the cell midline gets no neighbour on that
axis.  Neighbours outside the grid are dropped.  A ground truth may match
several anchors and several scales at once, and two ground truths may claim
the same slot; all matches are kept, in a deterministic order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import Annotation
from .model import STRIDES, ModelConfig

__all__ = ["RATIO_LIMIT", "ScaleAssignment", "build_targets"]

RATIO_LIMIT = 4.0


@dataclass(frozen=True)
class ScaleAssignment:
    """Matched slots for one prediction scale, parallel arrays of length n.

    ``tbox`` is the matched ground truth in pixel center form (cx,cy,w,h);
    ``anchor_wh`` is the matched anchor in pixels.
    """

    image_idx: np.ndarray
    anchor_idx: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    tbox: np.ndarray
    tcls: np.ndarray
    anchor_wh: np.ndarray

    def __post_init__(self):
        n = len(self.image_idx)
        for name in ("anchor_idx", "gy", "gx", "tcls"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} length does not match image_idx")
        if self.tbox.shape != (n, 4) or self.anchor_wh.shape != (n, 2):
            raise ValueError("tbox must be [n,4] and anchor_wh [n,2]")

    def __len__(self) -> int:
        return len(self.image_idx)


def _empty_assignment() -> ScaleAssignment:
    zi = np.zeros(0, dtype=np.int64)
    return ScaleAssignment(zi, zi.copy(), zi.copy(), zi.copy(),
                           np.zeros((0, 4)), zi.copy(), np.zeros((0, 2)))


def build_targets(batch_annotations, cfg: ModelConfig):
    """Assign each annotation to anchor slots on all three scales.

    ``batch_annotations`` is a list (one entry per image) of Annotation
    lists.  Returns one ScaleAssignment per scale, ordered scale-major,
    then by image, annotation, anchor, and center-cell-first.
    """
    S = cfg.input_size
    out = []
    for stride, anchors in zip(STRIDES, cfg.anchors):
        grid = S // stride
        rows: list[tuple] = []
        for img_i, anns in enumerate(batch_annotations):
            for ann in anns:
                if not isinstance(ann, Annotation):
                    raise TypeError(f"expected Annotation, got {type(ann).__name__}")
                b = ann.box
                cx, cy = b.cx * S, b.cy * S
                bw, bh = b.w * S, b.h * S
                fx, fy = cx / stride, cy / stride
                for ai, (aw, ah) in enumerate(anchors):
                    ratio = max(bw / aw, aw / bw, bh / ah, ah / bh)
                    if ratio >= RATIO_LIMIT:
                        continue
                    for gx_c, gy_c in _cells(fx, fy, grid):
                        rows.append((img_i, ai, gy_c, gx_c, cx, cy, bw, bh,
                                     ann.class_id, aw, ah))
        if not rows:
            out.append(_empty_assignment())
            continue
        arr = np.array(rows, dtype=np.float64)
        out.append(ScaleAssignment(
            image_idx=arr[:, 0].astype(np.int64),
            anchor_idx=arr[:, 1].astype(np.int64),
            gy=arr[:, 2].astype(np.int64),
            gx=arr[:, 3].astype(np.int64),
            tbox=np.ascontiguousarray(arr[:, 4:8]),
            tcls=arr[:, 8].astype(np.int64),
            anchor_wh=np.ascontiguousarray(arr[:, 9:11]),
        ))
    return tuple(out)


def _cells(fx: float, fy: float, grid: int):
    """Center cell plus closer-side neighbours, in bounds, deduplicated."""
    gx0, gy0 = int(fx), int(fy)
    cx_cell = (min(gx0, grid - 1), min(gy0, grid - 1))
    cells = [cx_cell]
    rx, ry = fx - gx0, fy - gy0
    if rx < 0.5 and gx0 - 1 >= 0:
        cells.append((gx0 - 1, cx_cell[1]))
    elif rx > 0.5 and gx0 + 1 < grid:
        cells.append((gx0 + 1, cx_cell[1]))
    if ry < 0.5 and gy0 - 1 >= 0:
        cells.append((cx_cell[0], gy0 - 1))
    elif ry > 0.5 and gy0 + 1 < grid:
        cells.append((cx_cell[0], gy0 + 1))
    seen = set()
    unique = []
    for c in cells:
        if c not in seen:
            seen.add(c)
            unique.append(c)
    return unique
