"""Estimator facade: sklearn conventions, fit/predict/score, checkpoints."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from cbamdet.boxes import Annotation, BBox, Detection
from cbamdet.dataio import SynthSceneConfig, generate_scene
from cbamdet.estimator import BirdDetector
from cbamdet.tensor import Tensor
from cbamdet.validation import check_annotations, check_images, check_is_fitted


def _tiny_dataset(n=4, size=64, seed=11):
    cfg = SynthSceneConfig(image_size=size, birds_per_image=(1, 2),
                           bird_scale=(0.2, 0.4), clutter_level=0.0, seed=seed)
    X, y = [], []
    for i in range(n):
        img, anns = generate_scene(cfg, i)
        X.append(img)
        y.append(anns)
    return X, y


def _tiny_estimator(**kw):
    base = dict(input_size=64, widths=(4, 8, 16), epochs=2, batch_size=4,
                warmup_epochs=0.5, seed=0)
    base.update(kw)
    return BirdDetector(**base)


# ---------------------------------------------------------------- validation

def test_check_images_shapes():
    arr = np.random.default_rng(0).uniform(0, 1, (2, 3, 32, 32))
    out = check_images(arr)
    assert out.shape == (2, 3, 32, 32)
    assert out.dtype == np.float64
    single = check_images(arr[0])
    assert single.shape == (1, 3, 32, 32)
    stacked = check_images([Tensor(arr[0]), arr[1]])
    assert np.array_equal(stacked, arr)


def test_check_images_rejects_bad_input():
    good = np.zeros((1, 3, 32, 32))
    with pytest.raises(ValueError, match="empty"):
        check_images([])
    with pytest.raises(ValueError, match="mixed shapes"):
        check_images([np.zeros((3, 32, 32)), np.zeros((3, 16, 16))])
    with pytest.raises(ValueError, match="expected"):
        check_images(np.zeros((1, 4, 32, 32)))
    with pytest.raises(ValueError, match="square"):
        check_images(np.zeros((1, 3, 32, 16)))
    with pytest.raises(ValueError, match="expects"):
        check_images(good, input_size=64)
    with pytest.raises(ValueError, match="non-finite"):
        check_images(np.full((1, 3, 32, 32), np.nan))
    with pytest.raises(ValueError, match="outside"):
        check_images(np.full((1, 3, 32, 32), 1.5))


def test_check_annotations():
    ann = Annotation(0, BBox.from_center(0.5, 0.5, 0.2, 0.2, normalized=True))
    out = check_annotations([[ann], []], 2, 1)
    assert out == [[ann], []]
    with pytest.raises(ValueError, match="annotation lists"):
        check_annotations([[ann]], 2, 1)
    with pytest.raises(TypeError, match="Annotation"):
        check_annotations([[(0, 1, 2, 3)]], 1, 1)
    with pytest.raises(ValueError, match="class"):
        check_annotations([[Annotation(3, ann.box)]], 1, 1)


def test_check_is_fitted():
    est = BirdDetector()
    with pytest.raises(NotFittedError):
        check_is_fitted(est)
    est.model_ = object()
    check_is_fitted(est)


# ----------------------------------------------------------------- estimator

def test_get_params_and_clone():
    est = _tiny_estimator(seed=3, lr0=0.01)
    params = est.get_params()
    assert params["seed"] == 3
    assert params["lr0"] == 0.01
    assert params["widths"] == (4, 8, 16)
    twin = BirdDetector(**params)
    assert twin.get_params() == params
    cloned = clone(est)
    assert cloned.get_params() == params
    est.set_params(seed=9)
    assert est.seed == 9


def test_unfitted_raises():
    est = _tiny_estimator()
    X = np.zeros((1, 3, 64, 64))
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(NotFittedError):
        est.score(X, [[]])
    with pytest.raises(NotFittedError):
        est.save("never.npz")


def test_fit_predict_score():
    X, y = _tiny_dataset()
    est = _tiny_estimator()
    assert est.fit(X, y) is est
    assert len(est.run_.log) == est.epochs
    dets = est.predict(X)
    assert len(dets) == len(X)
    for per_image in dets:
        assert all(isinstance(d, Detection) for d in per_image)
    score = est.score(X, y)
    assert 0.0 <= score <= 1.0


def test_fit_validates_input():
    X, y = _tiny_dataset(n=2)
    est = _tiny_estimator(input_size=32)
    with pytest.raises(ValueError, match="32px"):
        est.fit(X, y)
    with pytest.raises(ValueError, match="annotation lists"):
        _tiny_estimator().fit(X, y[:1])


def test_save_load_round_trip(tmp_path):
    X, y = _tiny_dataset()
    est = _tiny_estimator().fit(X, y)
    path = tmp_path / "detector.npz"
    est.save(path)
    fresh = BirdDetector().load(path)
    assert fresh.input_size == 64
    assert fresh.widths == (4, 8, 16)
    assert fresh.predict(X) == est.predict(X)
