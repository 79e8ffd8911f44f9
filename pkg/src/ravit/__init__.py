"""RAViT backbone and Fast-COS detector on NumPy, with structural reparameterization."""
from .backbone import PRESETS, Model, VariantConfig, build_variant, count_params_flops, forward, fuse_model, get_variant
from .detector import DetectorConfig, FastCOS, build_detector, fastcos_forward, fuse_detector
from .reparam import fuse_repmsdw, verify_equivalence

__all__ = [
    "PRESETS", "Model", "VariantConfig", "build_variant", "count_params_flops", "forward", "fuse_model",
    "get_variant", "DetectorConfig", "FastCOS", "build_detector", "fastcos_forward", "fuse_detector",
    "fuse_repmsdw", "verify_equivalence",
]
__version__ = "0.1.0"
