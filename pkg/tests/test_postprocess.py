"""Decode and NMS against scalar re-computation and brute-force suppression."""

import math

import numpy as np
import pytest

from cbamdet.boxes import BBox, Detection, iou
from cbamdet.model import ModelConfig, RawPredictions
from cbamdet.postprocess import decode, encode_box, nms, postprocess
from cbamdet.tensor import Tensor


def _cfg(**kw):
    base = dict(num_classes=1, input_size=64, widths=(4, 8, 16))
    base.update(kw)
    return ModelConfig(**base)


def _pred_arrays(cfg, batch=1, fill=None, seed=None):
    arrays = []
    for s in (8, 16, 32):
        g = cfg.input_size // s
        shape = (batch, 3, g, g, 5 + cfg.num_classes)
        if seed is not None:
            arrays.append(np.random.default_rng(seed + s).normal(0.0, 2.0, shape))
        else:
            arrays.append(np.full(shape, 0.0 if fill is None else fill))
    return arrays


def _as_preds(arrays):
    return RawPredictions(tuple(Tensor(a) for a in arrays))


def test_silent_logits_decode_to_nothing():
    cfg = _cfg()
    arrays = _pred_arrays(cfg)
    for a in arrays:
        a[..., 4] = -1000.0
    out = decode(_as_preds(arrays), cfg, conf_thresh=0.001)
    assert out == [[]]


def test_neutral_logits_sit_on_cell_centers():
    cfg = _cfg()
    arrays = _pred_arrays(cfg)
    for a in arrays:
        a[..., 4] = -1000.0
    # one live slot: scale 0 (stride 8), anchor 1, row 2, col 5
    arrays[0][0, 1, 2, 5, :] = 0.0
    arrays[0][0, 1, 2, 5, 4] = 10.0
    arrays[0][0, 1, 2, 5, 5] = 10.0
    (dets,) = decode(_as_preds(arrays), cfg, conf_thresh=0.5)
    assert len(dets) == 1
    d = dets[0]
    aw, ah = cfg.anchors[0][1]
    assert d.box.cx == pytest.approx((5 + 0.5) * 8)
    assert d.box.cy == pytest.approx((2 + 0.5) * 8)
    assert d.box.w == pytest.approx(aw)
    assert d.box.h == pytest.approx(ah)
    sig10 = 1.0 / (1.0 + math.exp(-10.0))
    assert d.confidence == pytest.approx(sig10 * sig10, abs=1e-12)


def test_decode_matches_scalar_oracle():
    cfg = _cfg(num_classes=2)
    arrays = _pred_arrays(cfg, batch=2, seed=80)
    got = decode(_as_preds(arrays), cfg, conf_thresh=0.3)

    def sig(x):
        return 1.0 / (1.0 + math.exp(-x))

    want = [[], []]
    S = cfg.input_size
    for a, stride, anchors in zip(arrays, (8, 16, 32), cfg.anchors):
        B, A, H, W, _ = a.shape
        for b in range(B):
            for ai in range(A):
                for gy in range(H):
                    for gx in range(W):
                        raw = a[b, ai, gy, gx]
                        obj = sig(raw[4])
                        for c in range(2):
                            conf = obj * sig(raw[5 + c])
                            if conf < 0.3:
                                continue
                            cx = (2 * sig(raw[0]) - 0.5 + gx) * stride
                            cy = (2 * sig(raw[1]) - 0.5 + gy) * stride
                            w = (2 * sig(raw[2])) ** 2 * anchors[ai][0]
                            h = (2 * sig(raw[3])) ** 2 * anchors[ai][1]
                            x1 = min(max(cx - w / 2, 0.0), S)
                            y1 = min(max(cy - h / 2, 0.0), S)
                            x2 = min(max(cx + w / 2, 0.0), S)
                            y2 = min(max(cy + h / 2, 0.0), S)
                            if x2 <= x1 or y2 <= y1:
                                continue
                            want[b].append((c, x1, y1, x2, y2, conf))
    for b in range(2):
        assert len(got[b]) == len(want[b])
        got_rows = sorted(
            (d.class_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2, d.confidence)
            for d in got[b]
        )
        for g, w in zip(got_rows, sorted(want[b])):
            assert g[0] == w[0]
            np.testing.assert_allclose(g[1:], w[1:], atol=1e-9)


def test_boxes_clamp_to_image():
    cfg = _cfg()
    arrays = _pred_arrays(cfg)
    for a in arrays:
        a[..., 4] = -1000.0
    # corner cell pushed further into the corner with a huge box
    arrays[2][0, 2, 0, 0, 0:2] = -8.0  # decoded offset -> about -0.5 cells
    arrays[2][0, 2, 0, 0, 2:4] = 8.0  # nearly 4x anchor
    arrays[2][0, 2, 0, 0, 4] = 10.0
    arrays[2][0, 2, 0, 0, 5] = 10.0
    (dets,) = decode(_as_preds(arrays), cfg, conf_thresh=0.5)
    assert len(dets) == 1
    b = dets[0].box
    assert b.x1 == 0.0 and b.y1 == 0.0
    assert b.x2 <= 64.0 and b.y2 <= 64.0 and b.x2 > 0.0


def test_decode_thresh_validation():
    cfg = _cfg()
    with pytest.raises(ValueError):
        decode(_as_preds(_pred_arrays(cfg)), cfg, conf_thresh=1.0)


def test_encode_decode_round_trip():
    rng = np.random.default_rng(81)
    for _ in range(100):
        stride = int(rng.choice([8, 16, 32]))
        anchor = rng.uniform(4.0, 40.0, 2)
        gx, gy = int(rng.integers(0, 8)), int(rng.integers(0, 8))
        cx = (gx + rng.uniform(-0.45, 1.45)) * stride
        cy = (gy + rng.uniform(-0.45, 1.45)) * stride
        w = anchor[0] * rng.uniform(0.05, 3.9)
        h = anchor[1] * rng.uniform(0.05, 3.9)
        tx, ty, tw, th = encode_box(cx, cy, w, h, gx, gy, stride, anchor)

        def sig(x):
            return 1.0 / (1.0 + math.exp(-x))

        assert (2 * sig(tx) - 0.5 + gx) * stride == pytest.approx(cx, abs=1e-6)
        assert (2 * sig(ty) - 0.5 + gy) * stride == pytest.approx(cy, abs=1e-6)
        assert (2 * sig(tw)) ** 2 * anchor[0] == pytest.approx(w, abs=1e-6)
        assert (2 * sig(th)) ** 2 * anchor[1] == pytest.approx(h, abs=1e-6)


def test_encode_rejects_unreachable():
    with pytest.raises(ValueError):
        encode_box(100.0, 8.0, 8.0, 8.0, 0, 0, 8, (8.0, 8.0))  # offset > 1.5 cells
    with pytest.raises(ValueError):
        encode_box(4.0, 4.0, 33.0, 8.0, 0, 0, 8, (8.0, 8.0))  # w > 4*anchor


def _det(x1, y1, x2, y2, conf, cls=0):
    return Detection(cls, BBox.from_corner(x1, y1, x2, y2, normalized=False), conf)


def test_nms_trivia():
    d = _det(0, 0, 10, 10, 0.9)
    assert nms([d], 0.5) == [d]
    assert nms([], 0.5) == []
    twin_hi, twin_lo = _det(0, 0, 10, 10, 0.9), _det(0, 0, 10, 10, 0.8)
    assert nms([twin_lo, twin_hi], 0.5) == [twin_hi]


def test_nms_worked_example():
    b1 = _det(0, 0, 10, 10, 0.9)
    b2 = _det(1, 1, 11, 11, 0.8)
    b3 = _det(20, 20, 30, 30, 0.7)
    assert iou(b1.box, b2.box) == pytest.approx(81.0 / 119.0)
    assert nms([b1, b2, b3], 0.5) == [b1, b3]


def test_nms_tie_keeps_lower_index():
    a = _det(0, 0, 10, 10, 0.8)
    b = _det(0.5, 0.5, 10.5, 10.5, 0.8)
    assert nms([a, b], 0.5) == [a]
    assert nms([b, a], 0.5) == [b]


def test_nms_is_per_class():
    a = _det(0, 0, 10, 10, 0.9, cls=0)
    b = _det(0, 0, 10, 10, 0.8, cls=1)
    assert nms([a, b], 0.5) == [a, b]


def test_nms_threshold_is_strict():
    a = _det(0, 0, 4, 4, 0.9)
    b = _det(0, 0, 4, 2, 0.8)  # IoU exactly 0.5
    assert iou(a.box, b.box) == 0.5
    assert nms([a, b], 0.5) == [a, b]
    assert nms([a, b], 0.49) == [a]


def test_nms_validation():
    with pytest.raises(ValueError):
        nms([_det(0, 0, 1, 1, 0.5)], 0.0)
    with pytest.raises(ValueError):
        nms([_det(0, 0, 1, 1, 0.5)], 1.0)


def _nms_bruteforce(dets, thresh):
    """Same rules, written as plain loops over Detection pairs."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    out = []
    dead = set()
    for i in order:
        if i in dead:
            continue
        out.append(dets[i])
        for j in order:
            if j in dead or j == i or dets[j].class_id != dets[i].class_id:
                continue
            if dets[j].confidence > dets[i].confidence:
                continue
            if iou(dets[i].box, dets[j].box) > thresh:
                dead.add(j)
    return out


def test_nms_matches_bruteforce():
    rng = np.random.default_rng(82)
    for trial in range(30):
        n = int(rng.integers(1, 200))
        dets = []
        for _ in range(n):
            x, y = rng.uniform(0, 50, 2)
            w, h = rng.uniform(2, 25, 2)
            conf = round(float(rng.uniform(0.05, 1.0)), 2)  # force ties
            dets.append(_det(x, y, x + w, y + h, conf, cls=int(rng.integers(0, 2))))
        assert nms(dets, 0.45) == _nms_bruteforce(dets, 0.45)


def test_nms_output_pairwise_overlap_bound():
    rng = np.random.default_rng(83)
    dets = []
    for _ in range(120):
        x, y = rng.uniform(0, 40, 2)
        w, h = rng.uniform(2, 20, 2)
        dets.append(_det(x, y, x + w, y + h, float(rng.uniform(0, 1))))
    kept = nms(dets, 0.45)
    assert all(d in dets for d in kept)
    for i, a in enumerate(kept):
        for b in kept[i + 1:]:
            if a.class_id == b.class_id:
                assert iou(a.box, b.box) <= 0.45


def test_postprocess_composes():
    cfg = _cfg()
    arrays = _pred_arrays(cfg, batch=2, seed=84)
    out = postprocess(_as_preds(arrays), cfg, conf_thresh=0.3, iou_thresh=0.45)
    assert len(out) == 2
    raw = decode(_as_preds(arrays), cfg, conf_thresh=0.3)
    for img_dets, img_raw in zip(out, raw):
        assert img_dets == nms(img_raw, 0.45)
