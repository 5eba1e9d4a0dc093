"""Dense out-of-distribution detection via diffusion score matching.

A small diffusion model (an MLP over individual feature vectors) is
trained to predict the noise applied by the closed-form forward process;
at inference the directional error between the predicted and the applied
noise, aggregated over the low-noise timesteps, gives a pixel-wise
out-of-distribution score map.
"""

__version__ = "0.1.0"

from .schedule import NoiseSchedule, build_linear_schedule, forward_diffuse, sample_noise
from .tensor_store import FeatureMap, OoDMask, read_tensor, write_tensor

__all__ = [
    "NoiseSchedule",
    "build_linear_schedule",
    "forward_diffuse",
    "sample_noise",
    "FeatureMap",
    "OoDMask",
    "read_tensor",
    "write_tensor",
    "__version__",
]
