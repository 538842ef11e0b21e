"""Synthesize annotated nuclei images from point labels and train segmentors on them."""
from .geometry import PointLabel, SamplerConfig, generate_point_labels, sample_instance_mask
from .codec import decode_instances, encode_hv
from .metrics import aji, fid, kid, object_dice, pixel_metrics

__all__ = ["PointLabel", "SamplerConfig", "generate_point_labels", "sample_instance_mask", "decode_instances",
           "encode_hv", "aji", "fid", "kid", "object_dice", "pixel_metrics"]
__version__ = "0.1.0"
