"""Input checking shared by the estimator facade and the CLI."""

from __future__ import annotations

import numpy as np
from sklearn.exceptions import NotFittedError

from .boxes import Annotation
from .tensor import Tensor


def check_images(X, input_size: int | None = None) -> np.ndarray:
    """Coerce X to a float64 [N,3,S,S] batch in [0,1].

    Accepts a stacked array, or a sequence of [3,S,S] arrays or Tensors.
    """
    if isinstance(X, Tensor):
        arr = X.data
    elif isinstance(X, np.ndarray):
        arr = X
    else:
        items = [x.data if isinstance(x, Tensor) else np.asarray(x) for x in X]
        if not items:
            raise ValueError("X is empty")
        shapes = {i.shape for i in items}
        if len(shapes) > 1:
            raise ValueError(f"images have mixed shapes: {sorted(shapes)}")
        arr = np.stack(items)
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected [N,3,S,S] images, got shape {arr.shape}")
    if arr.shape[2] != arr.shape[3]:
        raise ValueError(f"images must be square, got {arr.shape[2]}x{arr.shape[3]}")
    if input_size is not None and arr.shape[2] != input_size:
        raise ValueError(
            f"images are {arr.shape[2]}px but the model expects {input_size}px"
        )
    if not np.isfinite(arr).all():
        raise ValueError("images contain non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(
            f"pixel values outside [0, 1]: range [{arr.min()}, {arr.max()}]"
        )
    return arr


def check_annotations(y, n_images: int, num_classes: int) -> list:
    """Validate per-image annotation lists against the image count."""
    y = list(y)
    if len(y) != n_images:
        raise ValueError(f"got {len(y)} annotation lists for {n_images} images")
    out = []
    for i, anns in enumerate(y):
        anns = list(anns)
        for a in anns:
            if not isinstance(a, Annotation):
                raise TypeError(
                    f"image {i}: expected Annotation, got {type(a).__name__}"
                )
            if not 0 <= a.class_id < num_classes:
                raise ValueError(
                    f"image {i}: class {a.class_id} outside [0, {num_classes})"
                )
        out.append(anns)
    return out


def check_is_fitted(estimator, attr: str = "model_") -> None:
    if getattr(estimator, attr, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted yet; call fit first"
        )
