"""Attention-augmented miniature bird detector, built on a numpy autograd core."""

from .boxes import CENTER, CORNER, Annotation, BBox, Detection, ciou, iou, iou_matrix
from .cbam import CbamConfig, CbamParams, cbam_forward, cbam_param_count
from .config import RunConfig, load_config
from .dataio import (
    DatasetManifest,
    SynthSceneConfig,
    generate_scene,
    load_image,
    load_split,
    write_synth_dataset,
)
from .estimator import BirdDetector
from .evaluation import EvalReport, average_precision, evaluate, write_report
from .loss import ciou_tensor, detection_loss
from .model import Model, ModelConfig, RawPredictions, build_model, load_checkpoint, save_checkpoint
from .postprocess import decode, nms, postprocess
from .tensor import Tensor, no_grad, set_default_dtype, tensor
from .trainer import HyperParams, TrainingRun, train, train_on_pairs

__version__ = "0.1.0"

__all__ = [
    "Annotation",
    "BBox",
    "BirdDetector",
    "CENTER",
    "CORNER",
    "CbamConfig",
    "CbamParams",
    "DatasetManifest",
    "Detection",
    "EvalReport",
    "HyperParams",
    "Model",
    "ModelConfig",
    "RawPredictions",
    "RunConfig",
    "SynthSceneConfig",
    "Tensor",
    "TrainingRun",
    "average_precision",
    "build_model",
    "cbam_forward",
    "cbam_param_count",
    "ciou",
    "ciou_tensor",
    "decode",
    "detection_loss",
    "evaluate",
    "generate_scene",
    "iou",
    "iou_matrix",
    "load_checkpoint",
    "load_config",
    "load_image",
    "load_split",
    "nms",
    "no_grad",
    "postprocess",
    "save_checkpoint",
    "set_default_dtype",
    "tensor",
    "train",
    "train_on_pairs",
    "write_report",
    "write_synth_dataset",
    "__version__",
]
