"""Phrase-level 3D referring expression segmentation toolkit."""

__version__ = "0.1.0"

from .annotation import (
    AnnotatedDescription,
    DatasetSummary,
    PhraseTarget,
    compare_summary,
    dataset_stats,
    load_dataset,
    parse_tagged_text,
    serialize_tagged_text,
    split_subsets,
)
from .core import PhraseMaskSet, PointMask, Scene, point_iou, union_instance_mask, validate_scene
from .estimator import DetailBase
from .metrics import EvalRecord, MetricsReport, acc_at, evaluate, miou, miou_s, report
from .model import ModelConfig, ModelState, forward, init_state, predict_masks
from .samples import Sample, build_samples, make_sample
from .superpoint import (
    OversegmentConfig,
    Oversegmenter,
    SuperpointPartition,
    broadcast_mask,
    oversegment,
    pool_gt_mask,
    project_features,
    sp_pool,
)
from .synth import GeometricPointFeatures, HashedTokenFeatures, SynthConfig, gen_dataset, gen_scene
from .training import LossConfig, TrainSchedule, gradients, lr_at, total_loss, train
