from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .network import (
    DecoderState,
    GlobalFeature,
    ModelConfig,
    SDFHolo,
    StudyOutputs,
    TextEmbedding,
    TokenBatch,
    merge_regional_anchors,
)
from .prepare import PreparedRegion, PreparedStudy, prepare_study, sample_study_masks
from .tokens import dominant_classes, mask_count, normalize_ct, normalize_pet, patchify, sample_mask

__all__ = [
    "ModelConfig", "SDFHolo", "TokenBatch", "TextEmbedding", "GlobalFeature", "DecoderState",
    "StudyOutputs", "merge_regional_anchors",
    "PreparedRegion", "PreparedStudy", "prepare_study", "sample_study_masks",
    "patchify", "dominant_classes", "normalize_ct", "normalize_pet", "mask_count", "sample_mask",
    "save_checkpoint", "load_checkpoint", "read_checkpoint",
]
