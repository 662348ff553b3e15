"""chestsep: neonatal chest-sound separation toolkit.

A convolution+transformer masking network that splits a single-channel chest
recording into heart and lung waveforms, together with the synthetic mixture
lab used to train it, SI-SDR/SDR evaluation, heart/breathing-rate estimators,
and an inference timing benchmark.
"""

from .dsp import Waveform
from .estimator import ChestSoundSeparator
from .model import SeparatorConfig, SeparatorModel
from .training import TrainConfig

__version__ = "0.1.0"

__all__ = [
    "ChestSoundSeparator",
    "SeparatorConfig",
    "SeparatorModel",
    "TrainConfig",
    "Waveform",
    "__version__",
]
