"""slabgan: memory-amortized volumetric GAN library.

Training generates a low-resolution full volume plus one randomly chosen
high-resolution depth slab per step, so activation and gradient memory
scales with the slab rather than the full volume; inference generates and
encodes whole volumes directly. Includes the class-conditional variant,
a slab-trained super-resolution model, distribution/image metrics, and an
analytic + instrumented memory cost model. Pure numpy/scipy.
"""

from .tensor import (Tensor, backward, no_grad, conv3d, dense, group_norm,
                     trilinear_interp, spectral_norm, activation)
from .geometry import SliceWindow, Partition, sample_r, select_low, select_high
from .networks import NetConfig, reference_config, desk_config

__all__ = [
    "Tensor", "backward", "no_grad", "conv3d", "dense", "group_norm",
    "trilinear_interp", "spectral_norm", "activation",
    "SliceWindow", "Partition", "sample_r", "select_low", "select_high",
    "NetConfig", "reference_config", "desk_config",
]

__version__ = "0.1.0"
