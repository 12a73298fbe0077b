"""Cellularity scoring from nucleus segmentation maps: weak-label masks, the
composite segmentation loss, 81 hand-crafted features, boosted trees, and
agreement statistics."""

__version__ = "0.1.0"

from .pmap import Channel, PixelMap, downscale2, load_pmap, save_pmap  # noqa: E402,F401
from .annotations import PointAnnotationSet, parse_annotations, synthesize_masks  # noqa: E402,F401
from .losses import (LossConfig, bce, class_loss, jaccard_index, soft_jaccard,  # noqa: E402,F401
                     total_loss, total_loss_grad)
from .features import extract_features, log_blobs, threshold_stats  # noqa: E402,F401
from .gbt import GbtModel, GbtParams, feature_importance, fit, load_model, save_model  # noqa: E402,F401
from .metrics import ScorePairSet, bin4, bootstrap_ci, cohens_kappa, icc, kappa4, mse  # noqa: E402,F401
