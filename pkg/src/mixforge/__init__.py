"""mixforge: curriculum data tooling for target speaker extraction.

Synthetic interference speakers via kNN feature-space voice conversion,
similarity-ordered curriculum scheduling, two-talker mixture simulation,
small mask-based extraction baselines and SDR/iSDR evaluation.
"""

from mixforge.errors import MixforgeError
from mixforge.signal import ComplexSpectrogram, StftConfig, ToySpeakerSpec, Waveform, istft, stft

__version__ = "0.1.0"

__all__ = [
    "ComplexSpectrogram",
    "MixforgeError",
    "StftConfig",
    "ToySpeakerSpec",
    "Waveform",
    "istft",
    "stft",
]
