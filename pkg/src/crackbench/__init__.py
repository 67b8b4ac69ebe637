"""Benchmark harness for concrete surface crack detection with transfer-learned CNNs."""

from .dataset import (ImagePatch, PatchDataset, SourceImage, SplitResult, SplitSpec,
                      extract_patches, load_patch_dataset, normalize, split)
from .localize import Detection, WindowConfig, iou, merge_boxes, slide
from .metrics import ConfusionMatrix, MetricVector, accuracy, aggregate, f1, precision, recall
from .model import (FINE_TUNE, FROZEN, ClassifierModel, build_classifier, classify,
                    list_backbones, predict)
from .stats import compare_models, f_upper_tail, one_way_anova
from .training import TrainConfig, evaluate, run_experiment, train

__version__ = "0.1.0"
