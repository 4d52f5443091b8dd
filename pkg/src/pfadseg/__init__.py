"""Anomaly segmentation by denoising student-teacher feature distillation.

The pipeline: synthesize pseudo-anomalous images from normal ones (Perlin
masks + external textures), distill a student decoder against a frozen
teacher encoder so their features disagree on anomalies, then train a small
segmentation head on the cosine-similarity maps between the two.
"""

__version__ = "0.1.0"

from .blocks import AFF, PCAR, RCM, SPR, BlockConfig, PAResidualBlock
from .exceptions import (
    ConfigurationError,
    DatasetValidationError,
    TrainingDiverged,
    UndefinedMetricError,
    WeightLoadError,
)
from .losses import LossConfig, cosine_distance_loss, downsample_mask, focal_loss, l1_loss, seg_loss
from .metrics import (
    CurvePoint,
    Instance,
    connected_components,
    iap,
    iap_at_k,
    iap_curve,
    image_auc,
    pixel_ap,
    pro_score,
)
from .pyramid import PYRAMID_CHANNELS, PYRAMID_STRIDES, FeaturePyramid
from .segmentation import SegmentationHead, build_seg_input, cosine_similarity_map, image_score
from .student import StudentConfig, StudentNet
from .synthesis import SynthesisConfig, blend_anomaly, generate_perlin_mask, sample_training_pair
from .teacher import TeacherNet, load_pretrained, random_teacher
from .training import (
    Checkpoint,
    InferenceEngine,
    TrainConfig,
    infer,
    train_segmentation,
    train_student,
)

__all__ = [
    "AFF",
    "PCAR",
    "RCM",
    "SPR",
    "BlockConfig",
    "PAResidualBlock",
    "ConfigurationError",
    "DatasetValidationError",
    "TrainingDiverged",
    "UndefinedMetricError",
    "WeightLoadError",
    "LossConfig",
    "cosine_distance_loss",
    "downsample_mask",
    "focal_loss",
    "l1_loss",
    "seg_loss",
    "CurvePoint",
    "Instance",
    "connected_components",
    "iap",
    "iap_at_k",
    "iap_curve",
    "image_auc",
    "pixel_ap",
    "pro_score",
    "PYRAMID_CHANNELS",
    "PYRAMID_STRIDES",
    "FeaturePyramid",
    "SegmentationHead",
    "build_seg_input",
    "cosine_similarity_map",
    "image_score",
    "StudentConfig",
    "StudentNet",
    "SynthesisConfig",
    "blend_anomaly",
    "generate_perlin_mask",
    "sample_training_pair",
    "TeacherNet",
    "load_pretrained",
    "random_teacher",
    "Checkpoint",
    "InferenceEngine",
    "TrainConfig",
    "infer",
    "train_segmentation",
    "train_student",
    "__version__",
]
