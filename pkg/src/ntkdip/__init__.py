"""Deep-image-prior reconstruction and its kernel-regime (NTK) analysis."""

from .dip import DipConfig, RunReport, finalize_with_correction, train_reference_guided, train_self_guided, train_vanilla
from .dynamics import DynamicsProblem, closed_form_zt, iterate_kernel_regime, predict_limit, theorem2_mse
from .numerics import ComplexSignal, RngStream
from .operators import LinearMap, data_correction, inpainting, masked_fourier

__version__ = "0.1.0"

__all__ = [
    "ComplexSignal", "DipConfig", "DynamicsProblem", "LinearMap", "RngStream", "RunReport",
    "closed_form_zt", "data_correction", "finalize_with_correction", "inpainting", "iterate_kernel_regime",
    "masked_fourier", "predict_limit", "theorem2_mse", "train_reference_guided", "train_self_guided",
    "train_vanilla",
]
