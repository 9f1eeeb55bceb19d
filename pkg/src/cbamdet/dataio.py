"""Dataset plumbing: label files, splits, synthetic scenes, image IO.

Labels are normalized-coordinate text, one object per line.  The synthetic
generator paints dark bird glyphs over a sea background so that a small
model can overfit a handful of images end to end.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .assign import RATIO_LIMIT
from .boxes import Annotation, BBox
from .model import default_anchors
from .tensor import Tensor

LABEL_DECIMALS = 6
SPLIT_NAMES = ("train", "val", "test")
SPLIT_FRACTIONS = (0.8, 0.16, 0.04)
PAD_VALUE = 114.0 / 255.0
IMAGE_SUFFIXES = (".png", ".ppm", ".pgm")


def parse_label_file(text: str, num_classes: int = 1) -> list[Annotation]:
    """Parse "class cx cy w h" lines into annotations.

    Blank lines are skipped (an image with no objects has an empty file).
    Errors carry the 1-based line number and the offending field name.
    """
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 5:
            raise ValueError(
                f"line {lineno}: expected 5 fields, got {len(fields)}"
            )
        try:
            cls = int(fields[0])
            cx, cy, w, h = (float(v) for v in fields[1:])
        except ValueError:
            raise ValueError(f"line {lineno}: non-numeric field") from None
        if not 0 <= cls < num_classes:
            raise ValueError(
                f"line {lineno}: class {cls} outside [0, {num_classes})"
            )
        for name, value, lo in (("cx", cx, 0.0), ("cy", cy, 0.0)):
            if not lo <= value <= 1.0:
                raise ValueError(
                    f"line {lineno}: {name} {value} outside [0, 1]"
                )
        for name, value in (("w", w), ("h", h)):
            if not 0.0 < value <= 1.0:
                raise ValueError(
                    f"line {lineno}: {name} {value} outside (0, 1]"
                )
        out.append(Annotation(cls, BBox.from_center(cx, cy, w, h, normalized=True)))
    return out


def write_label_file(annotations) -> str:
    """Inverse of parse_label_file up to 6 decimal places."""
    lines = []
    for a in annotations:
        b = a.box.to_center()
        lines.append(
            f"{a.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}"
        )
    return "\n".join(lines) + ("\n" if lines else "")


def split_sizes(n: int) -> tuple[int, int, int]:
    """80/16/4 apportionment by largest remainder, ties to the earlier split."""
    if n < 3:
        raise ValueError(f"need at least 3 items to split, got {n}")
    quotas = [n * f for f in SPLIT_FRACTIONS]
    base = [math.floor(q) for q in quotas]
    leftover = n - sum(base)
    order = sorted(range(3), key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftover]:
        base[i] += 1
    return tuple(base)


@dataclass(frozen=True)
class DatasetManifest:
    """Files of a dataset plus their train/val/test assignment."""

    entries: tuple  # of (image_path, label_path)
    split: tuple  # per-entry name from SPLIT_NAMES
    seed: int

    def __post_init__(self):
        entries = tuple((str(i), str(l)) for i, l in self.entries)
        split = tuple(self.split)
        object.__setattr__(self, "entries", entries)
        object.__setattr__(self, "split", split)
        if len(split) != len(entries):
            raise ValueError("split assignment length differs from entries")
        bad = set(split) - set(SPLIT_NAMES)
        if bad:
            raise ValueError(f"unknown split names: {sorted(bad)}")
        want = split_sizes(len(entries))
        got = tuple(split.count(name) for name in SPLIT_NAMES)
        if got != want:
            raise ValueError(f"split sizes {got} violate the 80/16/4 rule {want}")

    def __len__(self):
        return len(self.entries)

    def counts(self) -> dict:
        return {name: self.split.count(name) for name in SPLIT_NAMES}

    def paths(self, split_name: str) -> list:
        if split_name not in SPLIT_NAMES:
            raise ValueError(f"unknown split {split_name!r}")
        return [e for e, s in zip(self.entries, self.split) if s == split_name]

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "entries": [
                {"image": i, "label": l, "split": s}
                for (i, l), s in zip(self.entries, self.split)
            ],
        }

    @classmethod
    def from_json_dict(cls, data: dict) -> "DatasetManifest":
        entries = tuple((e["image"], e["label"]) for e in data["entries"])
        split = tuple(e["split"] for e in data["entries"])
        return cls(entries=entries, split=split, seed=int(data["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


def split_dataset(n: int, seed: int) -> DatasetManifest:
    """Assign n canonical file names to splits by a seeded shuffle."""
    n_train, n_val, n_test = split_sizes(n)
    perm = np.random.default_rng(seed).permutation(n)
    names = [""] * n
    for rank, idx in enumerate(perm):
        if rank < n_train:
            names[idx] = "train"
        elif rank < n_train + n_val:
            names[idx] = "val"
        else:
            names[idx] = "test"
    entries = tuple(
        (f"images/{i:06d}.png", f"labels/{i:06d}.txt") for i in range(n)
    )
    return DatasetManifest(entries=entries, split=tuple(names), seed=seed)


@dataclass(frozen=True)
class SynthSceneConfig:
    """Knobs for the synthetic sea-and-birds renderer."""

    image_size: int = 160
    birds_per_image: tuple = (1, 4)
    bird_scale: tuple = (0.05, 0.25)
    clutter_level: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size {self.image_size} is too small")
        lo, hi = self.birds_per_image
        if not (0 <= lo <= hi):
            raise ValueError(f"birds_per_image range {self.birds_per_image} is empty")
        slo, shi = self.bird_scale
        if not (0.0 < slo <= shi < 1.0):
            raise ValueError(f"bird_scale range {self.bird_scale} is invalid")
        if not 0.0 <= self.clutter_level <= 1.0:
            raise ValueError(f"clutter_level {self.clutter_level} outside [0, 1]")


def _segment_mask(X, Y, p0, p1, thickness):
    dx, dy = p1[0] - p0[0], p1[1] - p0[1]
    norm2 = dx * dx + dy * dy
    if norm2 == 0.0:
        return (X - p0[0]) ** 2 + (Y - p0[1]) ** 2 <= thickness**2
    t = np.clip(((X - p0[0]) * dx + (Y - p0[1]) * dy) / norm2, 0.0, 1.0)
    qx, qy = p0[0] + t * dx, p0[1] + t * dy
    return (X - qx) ** 2 + (Y - qy) ** 2 <= thickness**2


def _bird_mask(S, cx, cy, wing_w, body_h):
    """Boolean glyph mask: ellipse body plus two raised wing strokes."""
    X, Y = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64))
    a, b = 0.22 * wing_w, 0.30 * body_h
    body = ((X - cx) / a) ** 2 + ((Y - (cy + 0.12 * body_h)) / b) ** 2 <= 1.0
    thick = max(1.0, 0.10 * min(wing_w, body_h))
    tip_y = cy - 0.40 * body_h
    left = _segment_mask(X, Y, (cx, cy), (cx - 0.46 * wing_w, tip_y), thick)
    right = _segment_mask(X, Y, (cx, cy), (cx + 0.46 * wing_w, tip_y), thick)
    return body | left | right


def _anchor_fit(w, h, anchors_by_scale) -> bool:
    for anchors in anchors_by_scale:
        for aw, ah in anchors:
            r = max(w / aw, aw / w, h / ah, ah / h)
            if r < RATIO_LIMIT:
                return True
    return False


def generate_scene(cfg: SynthSceneConfig, index: int):
    """Render one deterministic scene; returns (image Tensor [3,S,S], annotations).

    Sea pixels keep blue above 0.35 and glyph pixels stay below 0.15 on every
    channel, so a threshold scan recovers the glyphs exactly.  Annotations are
    the tight pixel bounding boxes of what was actually drawn.
    """
    rng = np.random.default_rng((cfg.seed, index))
    S = cfg.image_size
    ys = np.linspace(0.0, 1.0, S)[:, None]
    r = np.full((S, S), 0.18) + 0.10 * ys
    g = np.full((S, S), 0.32) + 0.12 * ys
    b = np.full((S, S), 0.50) + 0.20 * ys

    X, Y = np.meshgrid(np.arange(S, dtype=np.float64), np.arange(S, dtype=np.float64))
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wavelength = rng.uniform(8.0, 16.0)
    wave = 0.05 * np.sin(2.0 * np.pi * Y / wavelength + phase + 0.4 * np.sin(X / 23.0))
    g += wave
    b += wave
    noise = rng.uniform(-0.02, 0.02, (S, S))
    r += noise
    g += noise
    b += noise

    n_masts = int(round(cfg.clutter_level * 4))
    for _ in range(n_masts):
        mx = int(rng.integers(0, S))
        mw = int(rng.integers(1, 4))
        mh = int(rng.integers(int(0.15 * S), int(0.45 * S)) + 1)
        my = int(rng.integers(0, max(1, S - mh)))
        shade = rng.uniform(0.85, 0.95)
        for ch in (r, g, b):
            ch[my:my + mh, mx:min(mx + mw, S)] = shade

    anchors = default_anchors(S)
    n_birds = int(rng.integers(cfg.birds_per_image[0], cfg.birds_per_image[1] + 1))
    annotations = []
    taken = []
    for _ in range(n_birds):
        placed = False
        for _attempt in range(200):
            frac = rng.uniform(cfg.bird_scale[0], cfg.bird_scale[1])
            wing_w = max(6.0, frac * S)
            body_h = wing_w * rng.uniform(0.65, 1.0)
            margin = wing_w / 2 + 2
            cx = rng.uniform(margin, S - margin)
            cy = rng.uniform(margin, S - margin)
            mask = _bird_mask(S, cx, cy, wing_w, body_h)
            ys_on, xs_on = np.nonzero(mask)
            if ys_on.size == 0:
                continue
            x1, x2 = int(xs_on.min()), int(xs_on.max())
            y1, y2 = int(ys_on.min()), int(ys_on.max())
            pw, ph = x2 - x1 + 1, y2 - y1 + 1
            if pw < 2 or ph < 2 or not _anchor_fit(pw, ph, anchors):
                continue
            # keep glyphs apart so each dark pixel has one owning box
            clear = all(
                x2 + 2 < ox1 or ox2 + 2 < x1 or y2 + 2 < oy1 or oy2 + 2 < y1
                for ox1, oy1, ox2, oy2 in taken
            )
            if not clear:
                continue
            shade = rng.uniform(0.02, 0.12)
            r[mask] = shade
            g[mask] = shade
            b[mask] = shade + 0.02
            taken.append((x1, y1, x2, y2))
            annotations.append(
                Annotation(
                    0,
                    BBox.from_center(
                        (x1 + x2 + 1) / (2.0 * S),
                        (y1 + y2 + 1) / (2.0 * S),
                        pw / S,
                        ph / S,
                        normalized=True,
                    ),
                )
            )
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"could not place bird {len(taken) + 1} after 200 attempts"
            )
    image = np.clip(np.stack([r, g, b]), 0.0, 1.0)
    return Tensor(image), annotations


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-center bilinear resample of a [C,H,W] array."""
    C, H, W = image.shape
    ty = np.clip((np.arange(out_h) + 0.5) * (H / out_h) - 0.5, 0.0, H - 1.0)
    tx = np.clip((np.arange(out_w) + 0.5) * (W / out_w) - 0.5, 0.0, W - 1.0)
    y0 = np.floor(ty).astype(np.int64)
    x0 = np.floor(tx).astype(np.int64)
    y1 = np.minimum(y0 + 1, H - 1)
    x1 = np.minimum(x0 + 1, W - 1)
    wy = (ty - y0)[None, :, None]
    wx = (tx - x0)[None, None, :]
    top = image[:, y0[:, None], x0[None, :]] * (1 - wx) + image[:, y0[:, None], x1[None, :]] * wx
    bot = image[:, y1[:, None], x0[None, :]] * (1 - wx) + image[:, y1[:, None], x1[None, :]] * wx
    return top * (1 - wy) + bot * wy


def letterbox(image: np.ndarray, target: int) -> np.ndarray:
    """Aspect-preserving resize onto a gray square canvas."""
    C, H, W = image.shape
    scale = target / max(H, W)
    new_h = max(1, int(round(H * scale)))
    new_w = max(1, int(round(W * scale)))
    resized = bilinear_resize(image, new_h, new_w)
    out = np.full((C, target, target), PAD_VALUE)
    top = (target - new_h) // 2
    left = (target - new_w) // 2
    out[:, top:top + new_h, left:left + new_w] = resized
    return out


def load_image(path, target_size: int) -> Tensor:
    """Decode a PNG/PPM/PGM file and letterbox it to target_size."""
    path = Path(path)
    if path.suffix.lower() not in IMAGE_SUFFIXES:
        raise ValueError(f"unsupported image format: {path}")
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise ValueError(f"cannot read image {path}: {e}") from None
    chw = np.ascontiguousarray(arr.transpose(2, 0, 1))
    return Tensor(letterbox(chw, target_size))


def save_image(path, image) -> None:
    """Write a [3,H,W] array of [0,1] floats as an 8-bit image file."""
    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    Image.fromarray(u8.transpose(1, 2, 0)).save(path)


def draw_detections(image, detections) -> np.ndarray:
    """Copy of the image with 1-px boxes and "class conf" text burned in."""
    from PIL import ImageDraw

    arr = image.data if isinstance(image, Tensor) else np.asarray(image)
    u8 = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    im = Image.fromarray(u8.transpose(1, 2, 0))
    draw = ImageDraw.Draw(im)
    H, W = arr.shape[1:]
    for d in detections:
        x1 = min(max(d.box.x1, 0), W - 1)
        y1 = min(max(d.box.y1, 0), H - 1)
        x2 = min(max(d.box.x2, 0), W - 1)
        y2 = min(max(d.box.y2, 0), H - 1)
        draw.rectangle([x1, y1, x2, y2], outline=(255, 64, 64), width=1)
        label = f"{d.class_id} {d.confidence:.2f}"
        ty = y1 - 10 if y1 >= 10 else y1 + 1
        draw.text((x1 + 1, ty), label, fill=(255, 64, 64))
    out = np.asarray(im, dtype=np.float64) / 255.0
    return np.ascontiguousarray(out.transpose(2, 0, 1))


def write_synth_dataset(cfg: SynthSceneConfig, n: int, out_dir, force: bool = False,
                        threads: int = 1) -> DatasetManifest:
    """Render n scenes to out_dir as images/, labels/, and manifest.json."""
    out_dir = Path(out_dir)
    if out_dir.exists() and any(out_dir.iterdir()) and not force:
        raise ValueError(f"output directory {out_dir} is not empty (use force)")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    manifest = split_dataset(n, cfg.seed)

    def render(i):
        image, annotations = generate_scene(cfg, i)
        img_rel, lbl_rel = manifest.entries[i]
        save_image(out_dir / img_rel, image)
        (out_dir / lbl_rel).write_text(write_label_file(annotations))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(render, range(n)))
    else:
        for i in range(n):
            render(i)
    manifest.save(out_dir / "manifest.json")
    return manifest


def load_split(root, manifest: DatasetManifest, split_name: str, input_size: int,
               num_classes: int = 1, threads: int = 1) -> list:
    """Materialize (image Tensor, annotations) pairs for one split."""
    root = Path(root)

    def load_one(entry):
        img_rel, lbl_rel = entry
        image = load_image(root / img_rel, input_size)
        label_path = root / lbl_rel
        text = label_path.read_text() if label_path.exists() else ""
        try:
            annotations = parse_label_file(text, num_classes)
        except ValueError as e:
            raise ValueError(f"{label_path}: {e}") from None
        return image, annotations

    entries = manifest.paths(split_name)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(load_one, entries))
    return [load_one(e) for e in entries]
