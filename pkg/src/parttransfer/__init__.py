"""Nonparametric object and part localization by bounding-box transfer.

The pieces, from the bottom up: ``geometry`` (boxes, fusion, IoU),
``features`` (descriptors, feature files, providers), ``index`` (manifests
and exact k-NN), ``transfer`` (iterative localization), ``regression``
(ridge box refinement), ``recognition`` (one-vs-all SVMs), ``evaluation``
(PCP and accuracy) and ``synthetic`` (seeded test worlds). ``pipeline``
ties localization, refinement and region features together per image.
"""

from .errors import TransferError
from .evaluation import PcpReport, accuracy, pcp
from .features import FULL, OBJECT, CompositeProvider, Metric, PrecomputedProvider, RasterImage, RasterProvider, Stage, grid_descriptor
from .geometry import BoundingBox, FusionMode, ImageSize, clamp_box, fuse_boxes, iou, map_box
from .index import AnnotatedImage, TrainingIndex, build_index, load_manifest, provider_from_records
from .pipeline import Localization, localize_records, refine_localization, region_feature, regression_pairs
from .recognition import ClassifierModel, RegionLayout, concat_regions, predict, train_svm
from .regression import RegressionPair, RegressorModel, decode_box, encode_targets, fit_regressor, refine_box
from .synthetic import SynthConfig, SynthWorld, generate
from .transfer import Localizer, TerminationReason, TransferConfig, iterative_localize, localize_parts, transfer_step

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage",
    "BoundingBox",
    "ClassifierModel",
    "CompositeProvider",
    "FULL",
    "FusionMode",
    "ImageSize",
    "Localization",
    "Localizer",
    "Metric",
    "OBJECT",
    "PcpReport",
    "PrecomputedProvider",
    "RasterImage",
    "RasterProvider",
    "RegionLayout",
    "RegressionPair",
    "RegressorModel",
    "Stage",
    "SynthConfig",
    "SynthWorld",
    "TerminationReason",
    "TrainingIndex",
    "TransferConfig",
    "TransferError",
    "accuracy",
    "build_index",
    "clamp_box",
    "concat_regions",
    "decode_box",
    "encode_targets",
    "fit_regressor",
    "fuse_boxes",
    "generate",
    "grid_descriptor",
    "iou",
    "iterative_localize",
    "load_manifest",
    "localize_parts",
    "localize_records",
    "map_box",
    "pcp",
    "predict",
    "provider_from_records",
    "refine_box",
    "refine_localization",
    "region_feature",
    "regression_pairs",
    "train_svm",
    "transfer_step",
]
