"""Facial action-unit detection pipeline.

Face alignment from landmarks, a windowed-attention multi-label classifier
trained with Adam, mergeable per-AU evaluation, pain analytics, and an
annotation service, wired together by a CLI and a sklearn-style estimator
facade.
"""
from .align import AlignmentCache, CanonicalTemplate, LandmarkSet, SimilarityTransform
from .data import AnnotationDoc, AnnotationStore, FrameRecord, PainReport
from .estimator import FaceAligner, WindowedAttentionClassifier
from .metrics import ConfusionCounter, EvalReport, MultiLabelEvaluator
from .model import AU_SETS, ModelConfig
from .pain import AssociationTable, dvprs_category, pspi
from .tensor import Tensor
from .train import AdamState, LabeledFrames, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AU_SETS",
    "AdamState",
    "AlignmentCache",
    "AnnotationDoc",
    "AnnotationStore",
    "AssociationTable",
    "CanonicalTemplate",
    "ConfusionCounter",
    "EvalReport",
    "FaceAligner",
    "FrameRecord",
    "LabeledFrames",
    "LandmarkSet",
    "ModelConfig",
    "MultiLabelEvaluator",
    "PainReport",
    "SimilarityTransform",
    "Tensor",
    "TrainConfig",
    "WindowedAttentionClassifier",
    "dvprs_category",
    "pspi",
]
