"""Desk-scale RGB-D object recognition with fusion Vision Transformers.

Everything here runs on CPU with numpy as the only numerical substrate:
a small reverse-mode tensor engine, ViT encoders with early/late RGB-D
fusion, geometric depth encodings, evaluation harnesses, an open-ended
teaching protocol, and an HTTP teaching service.
"""

from .tensor import Tensor, StateError, set_finite_checks
from .vit import ModelSpec, init_params, cross_entropy
from .depth import (CameraIntrinsics, DepthMap, EncodedImage, PreprocessSpec,
                    encode_depth, preprocess)
from .fusion import (FusionSpec, RgbdSample, features_batch, forward,
                     forward_batch, init_from_rgb_checkpoint,
                     init_fusion_params)
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import OptimizerState, Schedule, TrainingError, optimizer_step
from .gradcheck import check_gradients
from .data import (DatasetIndex, SynthConfig, gen_synthetic, import_rod,
                   kfold_split, load_arrays, load_split, save_split, scan,
                   trial_split, few_shot_subset)
from .evalharness import (EvalReport, FeatureTable, FinetuneHP, LinearEvalHP,
                          extract_features, extractor_fingerprint, finetune,
                          knn_classify, knn_eval, linear_eval,
                          transfer_experiment)
from .lifelong import (ProtocolReport, TeacherConfig, TeachingSession,
                       compute_metrics, run_protocol)

__all__ = [
    "Tensor", "StateError", "set_finite_checks",
    "ModelSpec", "init_params", "cross_entropy",
    "CameraIntrinsics", "DepthMap", "EncodedImage", "PreprocessSpec",
    "encode_depth", "preprocess",
    "FusionSpec", "RgbdSample", "features_batch", "forward", "forward_batch",
    "init_from_rgb_checkpoint", "init_fusion_params",
    "load_checkpoint", "save_checkpoint",
    "OptimizerState", "Schedule", "TrainingError", "optimizer_step",
    "check_gradients",
    "DatasetIndex", "SynthConfig", "gen_synthetic", "import_rod",
    "kfold_split", "load_arrays", "load_split", "save_split", "scan",
    "trial_split", "few_shot_subset",
    "EvalReport", "FeatureTable", "FinetuneHP", "LinearEvalHP",
    "extract_features", "extractor_fingerprint", "finetune", "knn_classify",
    "knn_eval", "linear_eval", "transfer_experiment",
    "ProtocolReport", "TeacherConfig", "TeachingSession", "compute_metrics",
    "run_protocol",
]
