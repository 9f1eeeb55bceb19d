"""Estimator-style wrapper: fit on annotated images, predict detections."""

from __future__ import annotations

from sklearn.base import BaseEstimator

from .evaluation import evaluate
from .model import ModelConfig, build_model, load_checkpoint, save_checkpoint
from .postprocess import DEFAULT_CONF_THRESH, DEFAULT_IOU_THRESH, postprocess
from .tensor import Tensor, no_grad
from .trainer import HyperParams, train_on_pairs
from .validation import check_annotations, check_images, check_is_fitted


class BirdDetector(BaseEstimator):
    """Single-class detector with a scikit-learn shaped interface.

    fit(X, y) trains on images X ([N,3,S,S] in [0,1]) with per-image
    annotation lists y; predict(X) returns per-image Detection lists.
    Validation during fit runs on the training images themselves, which is
    the honest option when the caller has not carved out a split.
    """

    def __init__(self, num_classes=1, input_size=160, widths=(16, 32, 64),
                 cbam=True, epochs=100, batch_size=16, lr0=0.0032, lrf=0.12,
                 momentum=0.937, weight_decay=0.0005, warmup_epochs=2.0,
                 warmup_bias_lr=0.05, conf_thresh=DEFAULT_CONF_THRESH,
                 iou_thresh=DEFAULT_IOU_THRESH, seed=0):
        self.num_classes = num_classes
        self.input_size = input_size
        self.widths = widths
        self.cbam = cbam
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr0 = lr0
        self.lrf = lrf
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.warmup_epochs = warmup_epochs
        self.warmup_bias_lr = warmup_bias_lr
        self.conf_thresh = conf_thresh
        self.iou_thresh = iou_thresh
        self.seed = seed

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            num_classes=self.num_classes,
            input_size=self.input_size,
            widths=tuple(self.widths),
            cbam_enabled=self.cbam,
        )

    def _hyper_params(self) -> HyperParams:
        return HyperParams(
            lr0=self.lr0,
            lrf=self.lrf,
            batch_size=self.batch_size,
            warmup_epochs=self.warmup_epochs,
            warmup_bias_lr=self.warmup_bias_lr,
            epochs=self.epochs,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            seed=self.seed,
        )

    def fit(self, X, y, out_dir=None, log_fn=None):
        arr = check_images(X, self.input_size)
        anns = check_annotations(y, arr.shape[0], self.num_classes)
        pairs = [(arr[i], anns[i]) for i in range(arr.shape[0])]
        self.model_ = build_model(self._model_config(), seed=self.seed)
        self.run_ = train_on_pairs(self.model_, pairs, pairs,
                                   self._hyper_params(), out_dir=out_dir,
                                   log_fn=log_fn)
        return self

    def predict(self, X):
        check_is_fitted(self)
        arr = check_images(X, self.input_size)
        with no_grad():
            preds = self.model_(Tensor(arr))
        return postprocess(preds, self.model_.cfg, self.conf_thresh,
                           self.iou_thresh)

    def score(self, X, y) -> float:
        """mAP at IoU 0.5 on the given images."""
        check_is_fitted(self)
        arr = check_images(X, self.input_size)
        anns = check_annotations(y, arr.shape[0], self.num_classes)
        pairs = [(arr[i], anns[i]) for i in range(arr.shape[0])]
        return evaluate(self.model_, pairs, thresholds=(0.5,)).map50

    def save(self, path) -> None:
        check_is_fitted(self)
        save_checkpoint(self.model_, path)

    def load(self, path):
        """Attach trained weights from a checkpoint file; returns self."""
        model = load_checkpoint(path)
        cfg = model.cfg
        self.num_classes = cfg.num_classes
        self.input_size = cfg.input_size
        self.widths = cfg.widths
        self.cbam = cfg.cbam_enabled
        self.model_ = model
        return self
