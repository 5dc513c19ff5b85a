"""Visual sound separation with a coarse ("slow") and a fine ("fast") spectrogram stream."""
from .dsp import StftConfig, TOY_STFT, Waveform
from .model import ModelConfig, VSlowFast

__all__ = ["ModelConfig", "StftConfig", "TOY_STFT", "VSlowFast", "Waveform"]
__version__ = "0.1.0"
