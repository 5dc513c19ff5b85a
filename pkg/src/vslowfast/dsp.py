"""Signal processing: framing, STFT/iSTFT, temporal resampling and binary masks."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class SignalError(ValueError):
    """Raised for invalid waveforms, framings or grid shapes."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise SignalError(f"waveform must be 1-D, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise SignalError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(samples)):
            raise SignalError("waveform contains non-finite values")
        object.__setattr__(self, "samples", samples)

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class ComplexSpectrogram:
    """Frequency x time grid of STFT coefficients plus the framing used to make it."""

    bins: np.ndarray
    window_len: int
    hop_len: int
    sample_rate: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.complex128)
        if bins.ndim != 2 or bins.shape[1] < 1:
            raise SignalError(f"spectrogram must be 2-D with >= 1 frame, got {bins.shape}")
        if self.window_len % 2 or bins.shape[0] != self.window_len // 2 + 1:
            raise SignalError(
                f"{bins.shape[0]} frequency rows do not match window_len={self.window_len}"
            )
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape

    def magnitude(self) -> "MagnitudeSpectrogram":
        return MagnitudeSpectrogram(np.abs(self.bins), self.window_len, self.hop_len, self.sample_rate)


@dataclass(frozen=True)
class MagnitudeSpectrogram:
    bins: np.ndarray
    window_len: int
    hop_len: int
    sample_rate: int

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=np.float64)
        if bins.ndim != 2:
            raise SignalError(f"spectrogram must be 2-D, got {bins.shape}")
        if np.any(bins < 0):
            raise SignalError("magnitudes must be non-negative")
        object.__setattr__(self, "bins", bins)

    @property
    def shape(self) -> tuple[int, int]:
        return self.bins.shape


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray
    source_index: int = 0

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2 or not np.all((bits == 0) | (bits == 1)):
            raise SignalError("binary mask must be a 2-D grid of 0/1 values")
        object.__setattr__(self, "bits", bits.astype(np.float64))

    @property
    def shape(self) -> tuple[int, int]:
        return self.bits.shape


@dataclass(frozen=True)
class StftConfig:
    """Framing shared by analysis, synthesis and the network input size."""

    sample_rate: int = 8000
    window_len: int = 254
    hop_len: int = 127
    frames: int = 64

    def __post_init__(self):
        if self.window_len % 2:
            raise SignalError("window_len must be even")
        if not 0 < self.hop_len <= self.window_len // 2:
            raise SignalError("hop_len must be in (0, window_len/2]")
        if self.frames < 1 or self.sample_rate <= 0:
            raise SignalError("frames and sample_rate must be positive")

    @property
    def freq_bins(self) -> int:
        return self.window_len // 2 + 1

    @property
    def clip_len(self) -> int:
        """Number of samples that yields exactly ``frames`` STFT frames."""
        return (self.frames - 1) * self.hop_len + self.window_len

    def interior(self) -> slice:
        """Samples covered by the full number of overlapping frames."""
        edge = self.window_len - self.hop_len
        return slice(edge, self.clip_len - edge)


# Framing used by the toy experiments: 32 x 256 grids so that alpha = 16 still
# leaves a width divisible by 16.
TOY_STFT = StftConfig(sample_rate=8000, window_len=62, hop_len=31, frames=256)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (the DFT-even variant used for spectral analysis)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(w: Waveform, window_len: int, hop_len: int) -> ComplexSpectrogram:
    if window_len <= 0 or window_len % 2:
        raise SignalError("window_len must be a positive even number")
    if not 0 < hop_len <= window_len // 2:
        raise SignalError("hop_len must be in (0, window_len/2]")
    x = w.samples
    if x.shape[0] < window_len:
        raise SignalError("signal too short")
    frames = sliding_window_view(x, window_len)[::hop_len]
    bins = np.fft.rfft(frames * hann(window_len), axis=1).T
    return ComplexSpectrogram(bins, window_len, hop_len, w.sample_rate)


def window_sum(n_frames: int, window_len: int, hop_len: int) -> np.ndarray:
    """Overlap-added squared window, the iSTFT normaliser."""
    win2 = hann(window_len) ** 2
    total = np.zeros((n_frames - 1) * hop_len + window_len)
    for t in range(n_frames):
        total[t * hop_len:t * hop_len + window_len] += win2
    return total


def istft(s: ComplexSpectrogram) -> Waveform:
    n, hop = s.window_len, s.hop_len
    n_frames = s.bins.shape[1]
    win = hann(n)
    frames = np.fft.irfft(s.bins.T, n=n, axis=1) * win
    out = np.zeros((n_frames - 1) * hop + n)
    for t in range(n_frames):
        out[t * hop:t * hop + n] += frames[t]
    wsum = window_sum(n_frames, n, hop)
    nonzero = wsum > 1e-10 * wsum.max()
    # The outermost samples sit on the window's zero and carry no information;
    # a gap anywhere else means the frames do not cover the signal.
    idx = np.flatnonzero(nonzero)
    if idx.size == 0 or not np.all(nonzero[idx[0]:idx[-1] + 1]):
        raise SignalError("non-invertible framing")
    out[nonzero] /= wsum[nonzero]
    out[~nonzero] = 0.0
    return Waveform(out, s.sample_rate)


def temporal_downsample(s: np.ndarray, alpha: int) -> np.ndarray:
    """Mean-pool non-overlapping groups of ``alpha`` frames along the last axis."""
    s = np.asarray(s, dtype=np.float64)
    if alpha < 1:
        raise SignalError("alpha must be >= 1")
    width = s.shape[-1]
    if width % alpha:
        raise SignalError(f"resolution mismatch: width {width} not divisible by {alpha}")
    if alpha == 1:
        return s.copy()
    groups = s.reshape(*s.shape[:-1], width // alpha, alpha)
    # offset by the first frame so constant groups (upsampled input) come back bit-exact
    first = groups[..., :1]
    return first[..., 0] + (groups - first).mean(axis=-1)


def temporal_upsample(s: np.ndarray, alpha: int) -> np.ndarray:
    """Repeat every frame ``alpha`` times along the last axis."""
    if alpha < 1:
        raise SignalError("alpha must be >= 1")
    return np.repeat(np.asarray(s, dtype=np.float64), alpha, axis=-1)


def mix(sources: Sequence[Waveform]) -> Waveform:
    if not sources:
        raise SignalError("nothing to mix")
    rate, length = sources[0].sample_rate, len(sources[0])
    for w in sources[1:]:
        if w.sample_rate != rate:
            raise SignalError("sample rate mismatch")
        if len(w) != length:
            raise SignalError("length mismatch")
    return Waveform(np.sum([w.samples for w in sources], axis=0), rate)


def ideal_binary_mask(mags: Sequence[MagnitudeSpectrogram | np.ndarray], n: int) -> BinaryMask:
    """Bit is set where source ``n`` is at least as loud as every other source.

    Exact ties set the bit for every tied source.
    """
    grids = [np.asarray(getattr(m, "bins", m), dtype=np.float64) for m in mags]
    if not 0 <= n < len(grids):
        raise SignalError(f"source index {n} out of range for {len(grids)} sources")
    shape = grids[0].shape
    if any(g.shape != shape for g in grids):
        raise SignalError("spectrogram shape mismatch")
    bits = np.all(grids[n][None] >= np.stack(grids), axis=0)
    return BinaryMask(bits.astype(np.float64), n)


def apply_mask(mask: np.ndarray, mixture: ComplexSpectrogram) -> ComplexSpectrogram:
    """Scale each bin's magnitude by the mask, keeping the mixture phase."""
    mask = np.asarray(getattr(mask, "bits", mask), dtype=np.float64)
    if mask.shape != mixture.shape:
        raise SignalError(f"mask shape {mask.shape} != spectrogram shape {mixture.shape}")
    return ComplexSpectrogram(mask * mixture.bins, mixture.window_len, mixture.hop_len,
                              mixture.sample_rate)
