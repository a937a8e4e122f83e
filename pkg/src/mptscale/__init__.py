"""Multi-path transformer speech denoising at desk scale.

Submodules:

``tensorcore``  numpy tensors with tape-based reverse-mode autodiff
``dsp``         STFT/iSTFT, Mel band partition, PCM16 WAV I/O
``layers``      linear, norms, GRU/LSTM, linear attention, transformer, conv block
``mptnet``      model configuration and the full network
``complexity``  closed-form MACs/s and parameter counts, budget planner
``evaluation``  SI-SNR, scaling-law fit, causality probe
``pipeline``    synthetic data, training, denoising, scaling experiment
"""

from .complexity import Budget, CostReport, count_macs, count_params, plan
from .evaluation import ScalingFit, causality_probe, fit_scaling, si_snr
from .mptnet import ConfigError, ModelConfig, MPTNet, build, forward

__version__ = "0.1.0"

__all__ = [
    "Budget", "ConfigError", "CostReport", "MPTNet", "ModelConfig", "ScalingFit", "build",
    "causality_probe", "count_macs", "count_params", "fit_scaling", "forward", "plan", "si_snr",
]
