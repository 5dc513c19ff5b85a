"""Vision encoder, audio-visual attention, and the slow/fast spectrogram masking networks."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import BatchNorm2d, Conv2d, ConvTranspose2d, Module, Tensor, ops
from .autodiff.tensor import ShapeError

SLOW_FIRST = "slow-first"
FAST_FIRST = "fast-first"
LEAKY_SLOPE = 0.2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description.

    ``category_count`` is the visual embedding width, which is also the sound
    bottleneck width. ``fast_layers = 0`` drops the second stream, leaving a
    single masking network that runs at ``slow_alpha``.
    """

    category_count: int = 4
    vision_channels: tuple[int, ...] = (16, 32, 64)
    slow_layers: int = 7
    fast_layers: int = 7
    slow_alpha: int = 2
    fast_alpha: int = 1
    ordering: str = SLOW_FIRST
    unet_channels: tuple[int, ...] = (16, 32, 64)
    image_size: int = 64
    vision_dilated: bool = True

    def __post_init__(self):
        object.__setattr__(self, "vision_channels", tuple(self.vision_channels))
        object.__setattr__(self, "unet_channels", tuple(self.unet_channels))
        if self.category_count < 1:
            raise ConfigError("category_count must be >= 1")
        if len(self.vision_channels) != 3:
            raise ConfigError("vision_channels lists the three hidden stage widths")
        if self.slow_layers < 4 or (self.fast_layers and self.fast_layers < 4):
            raise ConfigError("U-Net depth must be >= 4 (0 disables the fast stream)")
        for depth in (self.slow_layers, self.fast_layers):
            if depth and len(self.unet_channels) >= depth:
                raise ConfigError(f"unet_channels {self.unet_channels} too long for depth {depth}")
        if self.slow_alpha < 1 or self.fast_alpha < 1:
            raise ConfigError("alphas must be >= 1")
        if self.ordering not in (SLOW_FIRST, FAST_FIRST):
            raise ConfigError(f"ordering must be {SLOW_FIRST!r} or {FAST_FIRST!r}")
        if self.two_stream and not self.fast_alpha < self.slow_alpha:
            raise ConfigError("fast_alpha must be smaller than slow_alpha")
        if self.image_size < 16 or self.image_size % 16:
            raise ConfigError("image_size must be a positive multiple of 16")

    @property
    def two_stream(self) -> bool:
        return self.fast_layers > 0

    def encoder_channels(self, depth: int) -> list[int]:
        return list(self.unet_channels) + [self.category_count] * (depth - len(self.unet_channels))

    def streams(self) -> list[tuple[str, int, int]]:
        """(role, depth, alpha) in execution order."""
        slow = ("slow", self.slow_layers, self.slow_alpha)
        if not self.two_stream:
            return [slow]
        fast = ("fast", self.fast_layers, self.fast_alpha)
        return [slow, fast] if self.ordering == SLOW_FIRST else [fast, slow]

    def check_input(self, freq_bins: int, frames: int) -> None:
        if freq_bins % 16:
            raise ShapeError(f"frequency bins {freq_bins} not divisible by 16")
        for role, _, alpha in self.streams():
            if frames % (16 * alpha):
                raise ShapeError(
                    f"{role} stream: {frames} frames not divisible by 16*alpha={16 * alpha}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["vision_channels"] = list(self.vision_channels)
        d["unet_channels"] = list(self.unet_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown ModelConfig fields: {', '.join(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class VisionFeatures:
    fmap: Tensor       # (B, C, H_V/16, W_V/16)
    embedding: Tensor  # (B, C)


@dataclass
class StreamOutput:
    logits_low: Tensor   # decoder output at the stream's own temporal resolution
    logits_full: Tensor  # (B, 1, H_S, W_S)
    mask: Tensor
    separated: Tensor    # masked mixture magnitude


def avga(embedding: Tensor, features: Tensor) -> Tensor:
    """Attend sound features with the outer product of the visual embedding.

    Accepts a single sample (embedding (C,) or (1, C), features (C, H, W)) or a
    batch (embedding (B, C), features (B, C, H, W)). Output has the feature shape.
    """
    if features.ndim == 3:
        e = ops.reshape(embedding, (embedding.size,))
        c, h, w = features.shape
        if e.size != c:
            raise ShapeError(f"avga: embedding width {e.size} != feature channels {c}")
        attn = ops.outer(e, e)
        return ops.reshape(ops.matmul(attn, ops.reshape(features, (c, h * w))), (c, h, w))
    b, c, h, w = features.shape
    if embedding.shape != (b, c):
        raise ShapeError(f"avga: embedding {embedding.shape} does not match features {features.shape}")
    attn = ops.matmul(ops.reshape(embedding, (b, c, 1)), ops.reshape(embedding, (b, 1, c)))
    return ops.reshape(ops.matmul(attn, ops.reshape(features, (b, c, h * w))), (b, c, h, w))


def localization_scores(embedding: Tensor, fmap: Tensor) -> tuple[Tensor, Tensor]:
    """Per-position sigmoid of the channel inner product, and its spatial maximum.

    embedding (B, C), fmap (B, C, H, W) -> map (B, 1, H, W), pooled (B,).
    """
    b, c, h, w = fmap.shape
    if embedding.shape != (b, c):
        raise ShapeError(f"localization: embedding {embedding.shape} vs fmap {fmap.shape}")
    inner = ops.matmul(ops.reshape(embedding, (b, 1, c)), ops.reshape(fmap, (b, c, h * w)))
    loc = ops.sigmoid(ops.reshape(inner, (b, 1, h, w)))
    pooled = ops.reshape(ops.max_pool2d(loc, (h, w)), (b,))
    return loc, pooled


def localization_map(embedding, fmap) -> tuple[np.ndarray, float]:
    """Single-sample map for visualisation: embedding (C,), fmap (C, H, W)."""
    e = embedding if isinstance(embedding, Tensor) else Tensor(embedding)
    f = fmap if isinstance(fmap, Tensor) else Tensor(fmap)
    if f.ndim != 3 or e.size != f.shape[0]:
        raise ShapeError(f"localization_map: embedding {e.shape} vs fmap {f.shape}")
    loc, pooled = localization_scores(ops.reshape(e, (1, e.size)), ops.reshape(f, (1,) + f.shape))
    return loc.data[0, 0], float(pooled.data[0])


class VisionNet(Module):
    """Four stride-2 stages; the last can be dilated. Output is 1/16 of the image size."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        widths = [3, *cfg.vision_channels]
        self.convs = [Conv2d(a, b, 3, rng, stride=2, pad=1, bias=False) for a, b in zip(widths, widths[1:])]
        self.norms = [BatchNorm2d(b) for b in widths[1:]]
        d = 2 if cfg.vision_dilated else 1
        self.head = Conv2d(widths[-1], cfg.category_count, 3, rng, stride=2, pad=d, dilation=d)

    def __call__(self, image: Tensor) -> VisionFeatures:
        h = image
        for conv, norm in zip(self.convs, self.norms):
            h = ops.relu(norm(conv(h)))
        fmap = self.head(h)
        return VisionFeatures(fmap, ops.spatial_avg_pool(fmap))


def _level(i: int) -> tuple[int, int, int]:
    """(kernel, stride, pad) of encoder/decoder level i: four halvings, then size-preserving."""
    return (4, 2, 1) if i < 4 else (3, 1, 1)


class UNet(Module):
    """Encoder-decoder with skip connections and visual attention at the bottleneck."""

    def __init__(self, in_ch: int, depth: int, cfg: ModelConfig, rng: np.random.Generator,
                 zero_head: bool = True):
        ch = cfg.encoder_channels(depth)
        self.depth = depth
        self.enc = []
        self.enc_norms = []
        prev = in_ch
        for i, c in enumerate(ch):
            k, s, p = _level(i)
            self.enc.append(Conv2d(prev, c, k, rng, stride=s, pad=p, bias=False))
            self.enc_norms.append(BatchNorm2d(c))
            prev = c
        self.dec = []
        self.dec_norms = []
        for i in reversed(range(depth)):
            k, s, p = _level(i)
            cin = ch[i] if i == depth - 1 else 2 * ch[i]
            cout = ch[i - 1] if i > 0 else 1
            self.dec.append(ConvTranspose2d(cin, cout, k, rng, stride=s, pad=p, bias=(i == 0)))
            if i > 0:
                self.dec_norms.append(BatchNorm2d(cout))
        if zero_head:
            self.head.weight.data[...] = 0.0
            self.head.bias.data[...] = 0.0

    @property
    def head(self) -> ConvTranspose2d:
        return self.dec[-1]

    def __call__(self, x: Tensor, embedding: Tensor) -> Tensor:
        skips = []
        h = x
        for conv, norm in zip(self.enc, self.enc_norms):
            h = ops.leaky_relu(norm(conv(h)), LEAKY_SLOPE)
            skips.append(h)
        h = avga(embedding, h)
        for j, conv in enumerate(self.dec):
            level = self.depth - 1 - j
            if level < self.depth - 1:
                h = ops.concat([h, skips[level]], axis=1)
            h = conv(h)
            if level > 0:
                h = ops.leaky_relu(self.dec_norms[j](h), LEAKY_SLOPE)
        return h


class VSlowFast(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, zero_head: bool = True):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.vision = VisionNet(cfg, rng)
        first = True
        for role, depth, _ in cfg.streams():
            setattr(self, role, UNet(1 if first else 2, depth, cfg, rng, zero_head))
            first = False
        if not cfg.two_stream:
            self.fast = None

    def vision_forward(self, images) -> VisionFeatures:
        images = images if isinstance(images, Tensor) else Tensor(images)
        s = self.cfg.image_size
        if images.ndim != 4 or images.shape[1:] != (3, s, s):
            raise ShapeError(f"expected images (B, 3, {s}, {s}), got {images.shape}")
        return self.vision(images)

    def _stream(self, net: UNet, alpha: int, x: Tensor, mag: np.ndarray, embedding: Tensor,
                base: StreamOutput | None) -> StreamOutput:
        low = net(ops.temporal_downsample(x, alpha), embedding)
        logits = ops.temporal_upsample(low, alpha)
        if base is not None:
            logits = ops.add(base.logits_full, logits)
        mask = ops.sigmoid(logits)
        return StreamOutput(low, logits, mask, ops.mul(mask, mag))

    def streams_forward(self, mag: np.ndarray, vf: VisionFeatures):
        """Run the masking streams on mixture magnitudes (B, H_S, W_S).

        Returns (slow, fast); ``fast`` is None for single-stream configs.
        """
        mag = np.asarray(mag, dtype=np.float64)
        if mag.ndim != 3:
            raise ShapeError(f"expected magnitudes (B, H, W), got {mag.shape}")
        self.cfg.check_input(mag.shape[1], mag.shape[2])
        if vf.embedding.shape[0] != mag.shape[0]:
            raise ShapeError("batch size differs between spectrograms and images")
        mag = mag[:, None]
        x_in = Tensor(np.log1p(mag))
        outputs = {}
        prev = None
        for role, _, alpha in self.cfg.streams():
            if prev is None:
                x = x_in
            else:
                x = ops.concat([x_in, ops.log1p(prev.separated)], axis=1)
            prev = self._stream(getattr(self, role), alpha, x, mag, vf.embedding, prev)
            outputs[role] = prev
        return outputs["slow"], outputs.get("fast")

    def __call__(self, mag: np.ndarray, images):
        vf = self.vision_forward(images)
        slow, fast = self.streams_forward(mag, vf)
        return slow, fast, vf

    def final(self, slow: StreamOutput, fast: StreamOutput | None) -> StreamOutput:
        """The stream whose mask is the system output (the one that runs last)."""
        if fast is None:
            return slow
        return fast if self.cfg.ordering == SLOW_FIRST else slow
