"""Image side: centerlines, patch sampling and region patch encoders."""

from .models import (
    PatchDecoder,
    PatchEncoder,
    PretrainConfig,
    PretrainResult,
    encode_patch,
    encode_patches,
    freeze,
    load_encoder,
    pretrain_reconstruction,
    reconstruction_loss,
    save_encoder,
    weights_digest,
)
from .patches import augment_patch, crop, expected_count, grid_points, sample_grid_patches, sample_patches
from .skeleton import Skeleton, extract_skeleton, order_paths

__all__ = [
    "PatchDecoder", "PatchEncoder", "PretrainConfig", "PretrainResult", "Skeleton",
    "augment_patch", "crop", "encode_patch", "encode_patches", "expected_count",
    "extract_skeleton", "freeze", "grid_points", "load_encoder", "order_paths",
    "pretrain_reconstruction", "reconstruction_loss", "sample_grid_patches",
    "sample_patches", "save_encoder", "weights_digest",
]
