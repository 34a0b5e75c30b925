"""Pluralistic image inpainting over masked token grids.

Three stages: a restrictive-convolution encoder labels the token cells
it can see, a bidirectional transformer fills in the rest by iterative
parallel decoding, and a composition decoder fuses the tokens with
partial-image features into a complete picture.
"""

from .config import PipelineConfig
from .masks import MaskGrid, MaskPyramid, build_pyramid, generate_mask
from .sampler import SampleSchedule, cosine_schedule, sample_all, sample_step
from .tensor import Tensor
from .vq import Codebook, TokenGrid

__version__ = "0.1.0"

__all__ = [
    "PipelineConfig",
    "MaskGrid",
    "MaskPyramid",
    "build_pyramid",
    "generate_mask",
    "SampleSchedule",
    "cosine_schedule",
    "sample_all",
    "sample_step",
    "Tensor",
    "Codebook",
    "TokenGrid",
    "__version__",
]
