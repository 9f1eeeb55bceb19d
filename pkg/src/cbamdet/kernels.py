"""Convolution, pooling, and resampling kernels over autograd tensors.

The production convolution lowers each input window into a column matrix
(im2col) and runs one batched matrix product per call, which is where the
arithmetic intensity lives at desk scale.  ``conv2d_naive`` keeps the
six-loop direct summation around as the auditable reference the tests
compare against.

Max-style kernels route the gradient to a single winning element; ties go
to the lowest flat index so runs are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, _accumulate, _as_tensor, _record

__all__ = [
    "Conv2dParams",
    "conv2d",
    "conv2d_naive",
    "max_pool2d",
    "global_avg_pool_spatial",
    "global_max_pool_spatial",
    "channel_mean",
    "channel_max",
    "upsample_nearest_2x",
]


@dataclass
class Conv2dParams:
    """Weights of one convolution layer.

    weight is [out_ch, in_ch, kh, kw]; bias, when present, is [out_ch].
    Kernels are odd in both extents (every layer in this project pads to
    "same" or downsamples with k=3) and the stride is a single positive
    integer applied to both spatial axes.
    """

    weight: Tensor
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.weight.ndim != 4:
            raise ShapeError(f"conv weight must be 4-d, got shape {self.weight.shape}")
        kh, kw = self.weight.shape[2:]
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"conv kernels must be odd, got {kh}x{kw}")
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be non-negative, got {self.padding}")
        if self.bias is not None and self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match out_ch {self.weight.shape[0]}"
            )

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]


def _conv_output_extent(extent: int, k: int, pad: int, stride: int) -> int:
    return (extent + 2 * pad - k) // stride + 1


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """[B,C,Hp,Wp] -> column matrix [B, C*kh*kw, Ho*Wo]."""
    B, C, Hp, Wp = xp.shape
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :]  # [B,C,Ho,Wo,kh,kw]
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo)
    return np.ascontiguousarray(cols), Ho, Wo


def conv2d(x, params: Conv2dParams) -> Tensor:
    """2-d cross-correlation of [B,C,H,W] with the layer's weights."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be [B,C,H,W], got shape {x.shape}")
    w, b = params.weight, params.bias
    O, Cw, kh, kw = w.shape
    B, C, H, W = x.shape
    if C != Cw:
        raise ShapeError(
            f"input has {C} channels (shape {x.shape}) but weight expects {Cw} (shape {w.shape})"
        )
    s, p = params.stride, params.padding
    Ho = _conv_output_extent(H, kh, p, s)
    Wo = _conv_output_extent(W, kw, p, s)
    if Ho < 1 or Wo < 1:
        raise ShapeError(
            f"input {H}x{W} too small for kernel {kh}x{kw} with padding {p}, stride {s}"
        )

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols, _, _ = _im2col(xp, kh, kw, s)
    wmat = w.data.reshape(O, Cw * kh * kw)
    out = np.matmul(wmat[None, :, :], cols)  # [B,O,Ho*Wo]
    if b is not None:
        out = out + b.data[None, :, None]
    out = out.reshape(B, O, Ho, Wo)

    def grad_fn(g):
        gf = g.reshape(B, O, Ho * Wo)
        if b is not None:
            _accumulate(b, gf.sum(axis=(0, 2)))
        if w.requires_grad:
            dw = np.matmul(gf, cols.transpose(0, 2, 1)).sum(axis=0)
            _accumulate(w, dw.reshape(w.shape))
        if x.requires_grad:
            dcols = np.matmul(wmat.T[None, :, :], gf)  # [B,C*kh*kw,Ho*Wo]
            dcols = dcols.reshape(B, Cw, kh, kw, Ho, Wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + s * Ho : s, j : j + s * Wo : s] += dcols[:, :, i, j]
            _accumulate(x, dxp[:, :, p : p + H, p : p + W] if p else dxp)

    parents = (x, w) if b is None else (x, w, b)
    return _record(out, parents, grad_fn)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None,
                 stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct-summation convolution on plain arrays; the im2col oracle."""
    B, C, H, W = x.shape
    O, _, kh, kw = weight.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    Ho = _conv_output_extent(H, kh, padding, stride)
    Wo = _conv_output_extent(W, kw, padding, stride)
    out = np.zeros((B, O, Ho, Wo), dtype=x.dtype)
    for b in range(B):
        for o in range(O):
            for oy in range(Ho):
                for ox in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                acc += xp[b, c, oy * stride + i, ox * stride + j] * weight[o, c, i, j]
                    out[b, o, oy, ox] = acc + (bias[o] if bias is not None else 0.0)
    return out


def max_pool2d(x, kernel: int, stride: int | None = None) -> Tensor:
    """Max over kernel x kernel windows; gradient goes to the first max."""
    x = _as_tensor(x)
    stride = kernel if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d input must be [B,C,H,W], got shape {x.shape}")
    if kernel <= 0 or stride <= 0:
        raise ValueError(f"kernel and stride must be positive, got {kernel}, {stride}")
    B, C, H, W = x.shape
    if H < kernel or W < kernel:
        raise ShapeError(f"spatial extents {H}x{W} smaller than pooling kernel {kernel}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))
    win = win[:, :, ::stride, ::stride, :, :].reshape(B, C, Ho, Wo, kernel * kernel)
    flat_arg = win.argmax(axis=-1)  # first max: lowest (i,j), hence lowest flat index
    out = np.take_along_axis(win, flat_arg[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        oy, ox = np.meshgrid(np.arange(Ho), np.arange(Wo), indexing="ij")
        src_y = oy[None, None] * stride + flat_arg // kernel
        src_x = ox[None, None] * stride + flat_arg % kernel
        bb, cc = np.meshgrid(np.arange(B), np.arange(C), indexing="ij")
        bb = bb[:, :, None, None] + np.zeros_like(src_y)
        cc = cc[:, :, None, None] + np.zeros_like(src_y)
        buf = np.zeros_like(x.data)
        np.add.at(buf, (bb.ravel(), cc.ravel(), src_y.ravel(), src_x.ravel()), g.ravel())
        _accumulate(x, buf)

    return _record(np.ascontiguousarray(out), (x,), grad_fn)


def global_avg_pool_spatial(x) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1] spatial mean."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {x.shape}")
    H, W = x.shape[2:]
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g / (H * W), x.data.shape))

    return _record(out, (x,), grad_fn)


def global_max_pool_spatial(x) -> Tensor:
    """[B,C,H,W] -> [B,C,1,1] spatial max, gradient to the first max."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {x.shape}")
    B, C, H, W = x.shape
    flat = x.data.reshape(B, C, H * W)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1).reshape(B, C, 1, 1)

    def grad_fn(g):
        buf = np.zeros_like(flat)
        np.put_along_axis(buf, arg[..., None], g.reshape(B, C, 1), axis=-1)
        _accumulate(x, buf.reshape(x.data.shape))

    return _record(out, (x,), grad_fn)


def channel_mean(x) -> Tensor:
    """[B,C,H,W] -> [B,1,H,W] mean over channels."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {x.shape}")
    C = x.shape[1]
    out = x.data.mean(axis=1, keepdims=True)

    def grad_fn(g):
        _accumulate(x, np.broadcast_to(g / C, x.data.shape))

    return _record(out, (x,), grad_fn)


def channel_max(x) -> Tensor:
    """[B,C,H,W] -> [B,1,H,W] max over channels, gradient to the lowest winner."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {x.shape}")
    arg = x.data.argmax(axis=1)  # first max = lowest channel = lowest flat index
    out = np.take_along_axis(x.data, arg[:, None], axis=1)

    def grad_fn(g):
        buf = np.zeros_like(x.data)
        np.put_along_axis(buf, arg[:, None], g, axis=1)
        _accumulate(x, buf)

    return _record(out, (x,), grad_fn)


def upsample_nearest_2x(x) -> Tensor:
    """[B,C,H,W] -> [B,C,2H,2W] by pixel replication."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"expected [B,C,H,W], got shape {x.shape}")
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def grad_fn(g):
        _accumulate(x, g.reshape(B, C, H, 2, W, 2).sum(axis=(3, 5)))

    return _record(out, (x,), grad_fn)
