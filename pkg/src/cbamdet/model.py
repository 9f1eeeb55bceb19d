"""Miniature multi-scale detector: backbone, fused neck, and three heads.

The backbone is a stem plus an entry downsample followed by three stages,
each a stride-2 convolution, a pair of residual bottlenecks, and an
optional attention block, producing feature maps at strides 8, 16, and 32.
A simplified path-aggregation neck runs top-down (upsample + concat) and
back bottom-up (downsample + concat); a 1x1 head per fused level emits
three anchor slots of (tx, ty, tw, th, objectness, class logits).

Every layer is convolution + bias + SiLU; heads are linear.  There is no
batch normalization, so the network behaves identically in training and
inference.  Parameter initialization is Kaiming-style uniform over fan-in,
drawn from two independent seeded streams (one for attention weights) so
ablation pairs share their non-attention initialization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cbam import CbamConfig, CbamParams, cbam_forward, init_cbam_params
from .kernels import Conv2dParams, conv2d, upsample_nearest_2x
from .tensor import ShapeError, Tensor, add, concat, permute, reshape, silu

__all__ = [
    "STRIDES",
    "NUM_ANCHORS",
    "ModelConfig",
    "RawPredictions",
    "Model",
    "build_model",
    "forward",
    "default_anchors",
    "save_checkpoint",
    "load_checkpoint",
]

STRIDES = (8, 16, 32)
NUM_ANCHORS = 3
DEFAULT_WIDTHS = (16, 32, 64)
MAX_CBAM_SHARE = 0.02
CHECKPOINT_VERSION = 1

# canonical anchor set, specified for 640-pixel inputs, rescaled per config
_ANCHORS_640 = (
    ((10.0, 13.0), (16.0, 30.0), (33.0, 23.0)),
    ((30.0, 61.0), (62.0, 45.0), (59.0, 119.0)),
    ((116.0, 90.0), (156.0, 198.0), (373.0, 326.0)),
)


def default_anchors(input_size: int) -> tuple:
    s = input_size / 640.0
    return tuple(tuple((w * s, h * s) for w, h in scale) for scale in _ANCHORS_640)


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 1
    input_size: int = 160
    widths: tuple = DEFAULT_WIDTHS
    anchors: tuple | None = None  # 3 scales x 3 (w,h) pixel pairs; None = scaled defaults
    cbam_enabled: bool = True
    cbam_reduction: int = 16
    cbam_spatial_kernel: int = 7

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_size <= 0 or self.input_size % 32 != 0:
            raise ValueError(f"input_size must be a positive multiple of 32, got {self.input_size}")
        widths = tuple(int(w) for w in self.widths)
        if len(widths) != 3 or any(w < 1 for w in widths):
            raise ValueError(f"widths must be three positive channel counts, got {self.widths}")
        object.__setattr__(self, "widths", widths)
        anchors = self.anchors if self.anchors is not None else default_anchors(self.input_size)
        anchors = tuple(tuple((float(w), float(h)) for w, h in scale) for scale in anchors)
        if len(anchors) != 3 or any(len(scale) != NUM_ANCHORS for scale in anchors):
            raise ValueError("anchors must hold 3 scales of 3 (w,h) pairs")
        if any(w <= 0 or h <= 0 for scale in anchors for w, h in scale):
            raise ValueError("anchor extents must be strictly positive")
        object.__setattr__(self, "anchors", anchors)

    @property
    def head_channels(self) -> int:
        return NUM_ANCHORS * (5 + self.num_classes)

    def cbam_config(self, stage: int) -> CbamConfig:
        return CbamConfig(
            channels=self.widths[stage],
            reduction_ratio=self.cbam_reduction,
            spatial_kernel=self.cbam_spatial_kernel,
        )

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "input_size": self.input_size,
            "widths": list(self.widths),
            "anchors": [[list(a) for a in scale] for scale in self.anchors],
            "cbam_enabled": self.cbam_enabled,
            "cbam_reduction": self.cbam_reduction,
            "cbam_spatial_kernel": self.cbam_spatial_kernel,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(
            num_classes=d["num_classes"],
            input_size=d["input_size"],
            widths=tuple(d["widths"]),
            anchors=tuple(tuple(tuple(a) for a in scale) for scale in d["anchors"]),
            cbam_enabled=d["cbam_enabled"],
            cbam_reduction=d["cbam_reduction"],
            cbam_spatial_kernel=d["cbam_spatial_kernel"],
        )


@dataclass(frozen=True)
class RawPredictions:
    """Per-scale tensors [B, A, H_s, W_s, 5 + num_classes]."""

    scales: tuple

    def __post_init__(self):
        if len(self.scales) != 3:
            raise ShapeError(f"expected 3 prediction scales, got {len(self.scales)}")
        for t in self.scales:
            if t.ndim != 5 or t.shape[1] != NUM_ANCHORS or t.shape[4] < 6:
                raise ShapeError(f"bad prediction tensor shape {t.shape}")

    def __iter__(self):
        return iter(self.scales)

    def __getitem__(self, i):
        return self.scales[i]


class _Conv:
    """Convolution + bias, optionally followed by SiLU."""

    def __init__(self, params: Conv2dParams, act: bool = True):
        self.params = params
        self.act = act

    def __call__(self, x: Tensor) -> Tensor:
        out = conv2d(x, self.params)
        return silu(out) if self.act else out


class _Bottleneck:
    """1x1 squeeze, 3x3 expand, residual add."""

    def __init__(self, squeeze: _Conv, expand: _Conv):
        self.squeeze = squeeze
        self.expand = expand

    def __call__(self, x: Tensor) -> Tensor:
        return add(x, self.expand(self.squeeze(x)))


class _CbamBlock:
    def __init__(self, cfg: CbamConfig, params: CbamParams):
        self.cfg = cfg
        self.params = params
        self.bypass = False  # test hook: gates forced to identity

    def __call__(self, x: Tensor) -> Tensor:
        if self.bypass:
            return x
        return cbam_forward(x, self.cfg, self.params)


class Model:
    """Built detector; parameters registered by dotted name, in build order."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        self.cbam_blocks: list[_CbamBlock] = []

    # -- parameter registry -------------------------------------------------

    def _register(self, name: str, t: Tensor) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def cbam_parameter_count(self) -> int:
        return sum(t.size for n, t in self.params.items() if ".cbam." in n)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def set_cbam_bypass(self, bypass: bool) -> None:
        for block in self.cbam_blocks:
            block.bypass = bypass

    # -- forward ------------------------------------------------------------

    def __call__(self, images: Tensor) -> RawPredictions:
        cfg = self.cfg
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"images must be [B,3,S,S], got shape {images.shape}")
        S = cfg.input_size
        if images.shape[2] != S or images.shape[3] != S:
            raise ShapeError(
                f"images are {images.shape[2]}x{images.shape[3]} but the model expects {S}x{S}"
            )
        lo, hi = float(images.data.min()), float(images.data.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"pixel values must lie in [0,1], got range [{lo:.4g}, {hi:.4g}]")

        x = self.stem(images)
        x = self.entry_bneck(self.entry(x))
        c3 = self._stage(0, x)
        c4 = self._stage(1, c3)
        c5 = self._stage(2, c4)

        r5 = self.reduce5(c5)
        m4 = self.tdmerge4(concat([upsample_nearest_2x(r5), c4], axis=1))
        r4 = self.reduce4(m4)
        p3 = self.tdmerge3(concat([upsample_nearest_2x(r4), c3], axis=1))
        p4 = self.bumerge4(concat([self.down3(p3), r4], axis=1))
        p5 = self.bumerge5(concat([self.down4(p4), r5], axis=1))

        outs = []
        for head, feat in ((self.head3, p3), (self.head4, p4), (self.head5, p5)):
            raw = head(feat)
            B, _, H, W = raw.shape
            raw = reshape(raw, (B, NUM_ANCHORS, 5 + cfg.num_classes, H, W))
            outs.append(permute(raw, (0, 1, 3, 4, 2)))
        return RawPredictions(tuple(outs))

    def _stage(self, i: int, x: Tensor) -> Tensor:
        down, b1, b2, attn = self.stages[i]
        x = b2(b1(down(x)))
        return attn(x) if attn is not None else x


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def build_model(cfg: ModelConfig, seed: int) -> Model:
    """Deterministically initialize the full detector for a config."""
    rng = np.random.default_rng([seed, 0])
    rng_cbam = np.random.default_rng([seed, 1])
    model = Model(cfg)
    w0, w1, w2 = cfg.widths
    nc_head = cfg.head_channels

    def make_conv(name, cin, cout, k, stride, act=True, bias=None) -> _Conv:
        weight = Tensor(_kaiming_uniform(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        # copy: the same template array seeds all three heads, and sharing a
        # buffer between parameters would silently tie them together
        bias_arr = np.zeros(cout) if bias is None else np.array(bias, dtype=np.float64)
        b = Tensor(bias_arr, requires_grad=True)
        model._register(f"{name}.weight", weight)
        model._register(f"{name}.bias", b)
        return _Conv(Conv2dParams(weight, b, stride=stride, padding=k // 2), act=act)

    def make_bottleneck(name, ch) -> _Bottleneck:
        hidden = max(1, ch // 2)
        return _Bottleneck(
            squeeze=make_conv(f"{name}.squeeze", ch, hidden, 1, 1),
            expand=make_conv(f"{name}.expand", hidden, ch, 3, 1),
        )

    def make_cbam(name, stage: int) -> _CbamBlock | None:
        if not cfg.cbam_enabled:
            return None
        ccfg = cfg.cbam_config(stage)
        cparams = init_cbam_params(ccfg, rng_cbam)
        model._register(f"{name}.cbam.mlp1.weight", cparams.mlp1_weight)
        model._register(f"{name}.cbam.mlp1.bias", cparams.mlp1_bias)
        model._register(f"{name}.cbam.mlp2.weight", cparams.mlp2_weight)
        model._register(f"{name}.cbam.mlp2.bias", cparams.mlp2_bias)
        model._register(f"{name}.cbam.spatial.weight", cparams.spatial.weight)
        model._register(f"{name}.cbam.spatial.bias", cparams.spatial.bias)
        block = _CbamBlock(ccfg, cparams)
        model.cbam_blocks.append(block)
        return block

    stem_ch = max(4, w0 // 2)
    model.stem = make_conv("backbone.stem", 3, stem_ch, 3, 2)
    model.entry = make_conv("backbone.entry.down", stem_ch, w0, 3, 2)
    model.entry_bneck = make_bottleneck("backbone.entry.bneck", w0)

    model.stages = []
    stage_io = ((w0, w0), (w0, w1), (w1, w2))
    for i, (cin, cout) in enumerate(stage_io):
        prefix = f"backbone.stage{i + 1}"
        down = make_conv(f"{prefix}.down", cin, cout, 3, 2)
        b1 = make_bottleneck(f"{prefix}.bneck1", cout)
        b2 = make_bottleneck(f"{prefix}.bneck2", cout)
        attn = make_cbam(prefix, i)
        model.stages.append((down, b1, b2, attn))

    model.reduce5 = make_conv("neck.reduce5", w2, w1, 1, 1)
    model.tdmerge4 = make_conv("neck.tdmerge4", w1 + w1, w1, 3, 1)
    model.reduce4 = make_conv("neck.reduce4", w1, w0, 1, 1)
    model.tdmerge3 = make_conv("neck.tdmerge3", w0 + w0, w0, 3, 1)
    model.down3 = make_conv("neck.down3", w0, w0, 3, 2)
    model.bumerge4 = make_conv("neck.bumerge4", w0 + w0, w1, 3, 1)
    model.down4 = make_conv("neck.down4", w1, w1, 3, 2)
    model.bumerge5 = make_conv("neck.bumerge5", w1 + w1, w2, 3, 1)

    # objectness bias starts low so the untrained detector is quiet
    head_bias = np.zeros(nc_head)
    for a in range(NUM_ANCHORS):
        head_bias[a * (5 + cfg.num_classes) + 4] = -4.0
    model.head3 = make_conv("head.p3", w0, nc_head, 1, 1, act=False, bias=head_bias)
    model.head4 = make_conv("head.p4", w1, nc_head, 1, 1, act=False, bias=head_bias)
    model.head5 = make_conv("head.p5", w2, nc_head, 1, 1, act=False, bias=head_bias)

    _check_cbam_overhead(model)
    return model


def _check_cbam_overhead(model: Model) -> None:
    """Attention must stay a negligible slice of the detector.

    Enforced for configs at or above the default widths; toy models used in
    gradient checks are legitimately below the threshold's regime.
    """
    if not model.cfg.cbam_enabled:
        return
    share = model.cbam_parameter_count() / model.parameter_count()
    model.cbam_share = share
    at_scale = all(w >= d for w, d in zip(model.cfg.widths, DEFAULT_WIDTHS))
    if at_scale and share >= MAX_CBAM_SHARE:
        raise ValueError(
            f"attention blocks hold {share:.2%} of parameters, exceeding the "
            f"{MAX_CBAM_SHARE:.0%} overhead budget"
        )


def forward(model: Model, images: Tensor) -> RawPredictions:
    return model(images)


# -- checkpoints -----------------------------------------------------------


def save_checkpoint(model: Model, path) -> None:
    """Write config plus all parameters; round-trips bit-exactly."""
    meta = {"version": CHECKPOINT_VERSION, "config": model.cfg.to_dict()}
    arrays = {f"param:{name}": t.data for name, t in model.params.items()}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path) -> Model:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as data:
        if "__meta__" not in data:
            raise ValueError(f"{path} is not a detector checkpoint (missing metadata)")
        meta = json.loads(str(data["__meta__"]))
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
        cfg = ModelConfig.from_dict(meta["config"])
        model = build_model(cfg, seed=0)
        stored = {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
    if set(stored) != set(model.params):
        missing = sorted(set(model.params) - set(stored))
        extra = sorted(set(stored) - set(model.params))
        raise ValueError(f"checkpoint parameters do not match config (missing {missing}, extra {extra})")
    for name, arr in stored.items():
        t = model.params[name]
        if arr.shape != t.data.shape:
            raise ShapeError(f"checkpoint {name} has shape {arr.shape}, model expects {t.data.shape}")
        t.data = np.ascontiguousarray(arr)
    return model
