"""File formats: 16-bit PCM mono WAV, binary PPM (P6) images and PGM (P5) maps."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .dsp import Waveform

PCM = 0x0001
_PCM_SCALE = 32768.0


class WavError(ValueError):
    """Base class for WAV reading problems."""


class MalformedWavError(WavError):
    pass


class UnsupportedEncodingError(WavError):
    pass


class ChannelCountError(WavError):
    pass


class ImageFormatError(ValueError):
    pass


def save_wav(w: Waveform, path) -> None:
    pcm = np.clip(np.round(w.samples * _PCM_SCALE), -32768, 32767).astype("<i2")
    data = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(data)) + b"WAVE"
    fmt = b"fmt " + struct.pack("<IHHIIHH", 16, PCM, 1, w.sample_rate, w.sample_rate * 2, 2, 16)
    Path(path).write_bytes(header + fmt + b"data" + struct.pack("<I", len(data)) + data)


def load_wav(path) -> Waveform:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise MalformedWavError(f"malformed WAV: {path}: missing RIFF/WAVE header")
    pos, fmt, data = 12, None, None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos:pos + 4]
        (size,) = struct.unpack("<I", raw[pos + 4:pos + 8])
        body = raw[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise MalformedWavError(f"malformed WAV: {path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            if size < 16:
                raise MalformedWavError(f"malformed WAV: {path}: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None:
        raise MalformedWavError(f"malformed WAV: {path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = fmt
    if tag != PCM or bits != 16:
        raise UnsupportedEncodingError(
            f"{path}: only 16-bit PCM is supported (format tag {tag:#x}, {bits} bits)")
    if channels != 1:
        raise ChannelCountError(f"{path}: expected mono, got {channels} channels")
    if rate <= 0:
        raise MalformedWavError(f"malformed WAV: {path}: sample rate {rate}")
    pcm = np.frombuffer(data[:len(data) // 2 * 2], dtype="<i2")
    return Waveform(pcm.astype(np.float64) / _PCM_SCALE, rate)


def _read_netpbm(path, magic: bytes):
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError(f"{path}: truncated header")
        tokens.append(raw[start:pos])
    if tokens[0] != magic:
        raise ImageFormatError(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise ImageFormatError(f"{path}: bad header fields") from None
    if maxval <= 0 or maxval > 255:
        raise ImageFormatError(f"{path}: only 8-bit images are supported")
    return raw[pos + 1:], width, height, maxval


def load_image(path, size: int) -> np.ndarray:
    """Read a P6 PPM, centre-crop to a square, resize (nearest) to ``size`` and scale to [0, 1].

    Returns a 3 x size x size float array.
    """
    body, width, height, maxval = _read_netpbm(path, b"P6")
    need = width * height * 3
    if len(body) < need:
        raise ImageFormatError(f"{path}: truncated pixel data")
    img = np.frombuffer(body[:need], dtype=np.uint8).reshape(height, width, 3)
    side = min(width, height)
    top, left = (height - side) // 2, (width - side) // 2
    img = img[top:top + side, left:left + side]
    idx = (np.arange(size) * side) // size
    img = img[idx][:, idx]
    return img.transpose(2, 0, 1).astype(np.float64) / maxval


def save_image(img: np.ndarray, path) -> None:
    """Write a 3 x H x W array in [0, 1] as a P6 PPM."""
    pix = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    h, w = pix.shape[:2]
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + pix.tobytes())


def save_gray(grid: np.ndarray, path) -> None:
    """Write a 2-D array in [0, 1] as a P5 PGM (row 0 at the top)."""
    pix = np.clip(np.round(np.asarray(grid) * 255), 0, 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def load_gray(path) -> np.ndarray:
    body, width, height, maxval = _read_netpbm(path, b"P5")
    if len(body) < width * height:
        raise ImageFormatError(f"{path}: truncated pixel data")
    return np.frombuffer(body[:width * height], dtype=np.uint8).reshape(height, width) / maxval
