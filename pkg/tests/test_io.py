import struct

import numpy as np
import pytest

from vslowfast.dsp import Waveform
from vslowfast.io import (ChannelCountError, ImageFormatError, MalformedWavError, UnsupportedEncodingError,
                          load_gray, load_image, load_wav, save_gray, save_image, save_wav)


def _wav_bytes(tag=1, channels=1, bits=16, rate=8000, data=b"\x00\x00" * 4):
    fmt = struct.pack("<IHHIIHH", 16, tag, channels, rate, rate * channels * bits // 8, channels * bits // 8, bits)
    body = b"WAVE" + b"fmt " + fmt + b"data" + struct.pack("<I", len(data)) + data
    return b"RIFF" + struct.pack("<I", len(body)) + body


def test_wav_round_trip_is_sample_exact(tmp_path, rng):
    pcm = rng.integers(-32768, 32768, 1000)
    w = Waveform(pcm / 32768.0, 8000)
    save_wav(w, tmp_path / "a.wav")
    back = load_wav(tmp_path / "a.wav")
    assert back.sample_rate == 8000
    np.testing.assert_array_equal(back.samples, w.samples)


def test_wav_header_is_canonical(tmp_path):
    save_wav(Waveform(np.zeros(3), 16000), tmp_path / "a.wav")
    raw = (tmp_path / "a.wav").read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:16] == b"WAVEfmt " and raw[36:40] == b"data"
    assert len(raw) == 44 + 6


def test_truncated_header(tmp_path):
    (tmp_path / "t.wav").write_bytes(_wav_bytes()[:20])
    with pytest.raises(MalformedWavError, match="malformed WAV"):
        load_wav(tmp_path / "t.wav")
    (tmp_path / "u.wav").write_bytes(b"RIFX")
    with pytest.raises(MalformedWavError, match="malformed WAV"):
        load_wav(tmp_path / "u.wav")


def test_unsupported_encoding(tmp_path):
    (tmp_path / "f.wav").write_bytes(_wav_bytes(tag=3, bits=32, data=b"\x00" * 16))
    with pytest.raises(UnsupportedEncodingError):
        load_wav(tmp_path / "f.wav")
    (tmp_path / "e.wav").write_bytes(_wav_bytes(bits=8, data=b"\x00" * 4))
    with pytest.raises(UnsupportedEncodingError):
        load_wav(tmp_path / "e.wav")


def test_wrong_channel_count(tmp_path):
    (tmp_path / "s.wav").write_bytes(_wav_bytes(channels=2, data=b"\x00" * 8))
    with pytest.raises(ChannelCountError):
        load_wav(tmp_path / "s.wav")


def test_error_types_are_distinct():
    kinds = {MalformedWavError, UnsupportedEncodingError, ChannelCountError}
    assert len(kinds) == 3 and not any(issubclass(a, b) for a in kinds for b in kinds if a is not b)


def test_solid_ppm_loads_as_constant(tmp_path):
    color = bytes([10, 128, 255])
    (tmp_path / "c.ppm").write_bytes(b"P6\n# comment\n6 4\n255\n" + color * 24)
    img = load_image(tmp_path / "c.ppm", 8)
    assert img.shape == (3, 8, 8)
    for c, v in enumerate(color):
        np.testing.assert_array_equal(img[c], v / 255)


def test_ppm_round_trip_and_crop(tmp_path, rng):
    img = rng.integers(0, 256, (3, 8, 8)) / 255
    save_image(img, tmp_path / "x.ppm")
    np.testing.assert_allclose(load_image(tmp_path / "x.ppm", 8), img, atol=1e-12)
    np.testing.assert_allclose(load_image(tmp_path / "x.ppm", 4), img[:, ::2, ::2], atol=1e-12)


def test_bad_images(tmp_path):
    (tmp_path / "p5.ppm").write_bytes(b"P5\n2 2\n255\n" + b"\x00" * 4)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "p5.ppm", 2)
    (tmp_path / "short.ppm").write_bytes(b"P6\n2 2\n255\n" + b"\x00" * 5)
    with pytest.raises(ImageFormatError):
        load_image(tmp_path / "short.ppm", 2)


def test_gray_round_trip(tmp_path):
    grid = np.arange(12).reshape(3, 4) / 11
    save_gray(grid, tmp_path / "g.pgm")
    np.testing.assert_allclose(load_gray(tmp_path / "g.pgm"), np.round(grid * 255) / 255)
