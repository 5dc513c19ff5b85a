"""Synthetic audio-visual categories, mixtures, contrastive pairs and on-disk manifests.

Each toy category owns a frequency band. A clip is a train of short pulses:
every pulse sounds the category's harmonic partials inside its band plus a low
"thump" in a band shared by all categories. The shared band makes the ideal
mask depend on *when* each source pulses, so temporal resolution matters for
separation; the home bands keep the categories identifiable.
"""
from __future__ import annotations

import colorsys
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp
from .dsp import StftConfig, Waveform
from .io import load_image, load_wav, save_image, save_wav
from .losses import ContrastivePair

SPLITS = ("train", "test")
HOME_LO_HZ = 450.0
SHARED_HZ = (70.0, 150.0)
TARGET_RMS = 0.1


@dataclass(frozen=True)
class ToyConfig:
    categories: int = 4
    image_size: int = 64
    shared_band: bool = True
    shared_fraction: float = 0.3   # share of pulse energy in the shared low band
    pulse_ms: tuple[float, float] = (10.0, 16.0)
    period_ms: tuple[float, float] = (40.0, 70.0)


@dataclass
class Sample:
    waveform: Waveform
    image: np.ndarray  # (3, S, S) in [0, 1]
    category: int
    id: str


@dataclass
class MixtureItem:
    mixture: Waveform
    sources: list[Sample]
    specs: list[dsp.ComplexSpectrogram]
    gt_masks: list[dsp.BinaryMask]
    contrast_pairs: list[ContrastivePair] = field(default_factory=list)

    @property
    def mixture_spec(self) -> dsp.ComplexSpectrogram:
        first = self.specs[0]
        return dsp.ComplexSpectrogram(np.sum([s.bins for s in self.specs], axis=0),
                                      first.window_len, first.hop_len, first.sample_rate)


def home_band(category: int, categories: int, sample_rate: int) -> tuple[float, float]:
    top = 0.95 * sample_rate / 2
    width = (top - HOME_LO_HZ) / categories
    guard = 0.15 * width
    lo = HOME_LO_HZ + category * width
    return lo + guard, lo + width - guard


def category_color(category: int, categories: int) -> np.ndarray:
    return np.array(colorsys.hsv_to_rgb(category / categories, 0.8, 0.85))


def _pulse_train(rng: np.random.Generator, n: int, sr: int, cfg: ToyConfig) -> np.ndarray:
    env = np.zeros(n)
    period = rng.uniform(*cfg.period_ms) * sr / 1000
    width = int(round(rng.uniform(*cfg.pulse_ms) * sr / 1000))
    shape = dsp.hann(width + 1)[1:] if width > 0 else np.ones(1)
    t = -rng.uniform(0, period)
    while t < n:
        start = int(round(t + rng.uniform(-0.15, 0.15) * period))
        amp = rng.uniform(0.6, 1.0)
        lo, hi = max(start, 0), min(start + width, n)
        if hi > lo:
            env[lo:hi] += amp * shape[lo - start:hi - start]
        t += period
    return env


def _audio(category: int, rng: np.random.Generator, clip_len: int, sr: int, cfg: ToyConfig) -> np.ndarray:
    t = np.arange(clip_len) / sr
    lo, hi = home_band(category, cfg.categories, sr)
    f0 = (hi - lo) / 2.5 * rng.uniform(0.95, 1.05)
    vibrato = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t + rng.uniform(0, 2 * np.pi))
    home = np.zeros(clip_len)
    for h in range(math.ceil(lo / f0), int(hi / f0) + 1):
        phase = 2 * np.pi * np.cumsum(h * f0 * vibrato) / sr
        home += np.sin(phase + rng.uniform(0, 2 * np.pi)) / math.sqrt(h * f0 / lo)
    pulses = _pulse_train(rng, clip_len, sr, cfg)
    swell = 1.0 + 0.3 * np.sin(2 * np.pi * 0.5 * t + rng.uniform(0, 2 * np.pi))
    home = home * pulses * swell
    signal = home
    if cfg.shared_band:
        thump = np.sin(2 * np.pi * rng.uniform(*SHARED_HZ) * t + rng.uniform(0, 2 * np.pi)) * pulses * swell
        e_home, e_thump = home @ home, thump @ thump
        if e_thump > 0:
            frac = cfg.shared_fraction
            signal = home + thump * math.sqrt(frac / (1 - frac) * e_home / e_thump)
    rms = math.sqrt(signal @ signal / clip_len)
    return signal * (TARGET_RMS / rms) if rms > 0 else signal


def _image(category: int, rng: np.random.Generator, cfg: ToyConfig) -> np.ndarray:
    s = cfg.image_size
    base = category_color(category, cfg.categories)
    img = np.broadcast_to(base[:, None, None], (3, s, s)).copy()
    side = int(rng.integers(s // 4, s // 2 + 1))
    top, left = (int(rng.integers(0, s - side + 1)) for _ in range(2))
    period = 2 + category
    yy, xx = np.mgrid[:side, :side]
    checker = ((yy // period + xx // period) % 2).astype(float)
    patch_color = 1.0 - base
    img[:, top:top + side, left:left + side] = (
        checker * patch_color[:, None, None] + (1 - checker) * base[:, None, None])
    img += rng.normal(0, 0.05, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_category(category: int, seed: int, clip_len: int, sample_rate: int,
                      cfg: ToyConfig = ToyConfig(), sample_id: str | None = None) -> Sample:
    if not 0 <= category < cfg.categories:
        raise ValueError(f"category {category} outside [0, {cfg.categories})")
    rng = np.random.default_rng(np.random.SeedSequence([seed, category]))
    audio = _audio(category, rng, clip_len, sample_rate, cfg)
    image = _image(category, rng, cfg)
    return Sample(Waveform(audio, sample_rate), image, category, sample_id or f"c{category}-s{seed}")


def item_seed(seed: int, split: str, category: int, index: int) -> int:
    ss = np.random.SeedSequence([seed, SPLITS.index(split), category, index])
    return int(ss.generate_state(1)[0])


def _generate(args) -> Sample:
    category, s, clip_len, sr, cfg, sid = args
    return generate_category(category, s, clip_len, sr, cfg, sid)


def generate_split(split: str, per_category: int, seed: int, stft_cfg: StftConfig,
                   cfg: ToyConfig = ToyConfig(), workers: int = 1) -> list[Sample]:
    """Deterministic item stream for one split, ordered by (index, category).

    With ``workers > 1`` items are produced in parallel processes and reassembled
    in index order, so the stream is identical to the single-worker one.
    """
    jobs = [(c, item_seed(seed, split, c, i), stft_cfg.clip_len, stft_cfg.sample_rate, cfg,
             f"{split}-c{c}-{i:04d}")
            for i in range(per_category) for c in range(cfg.categories)]
    if workers <= 1:
        return [_generate(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_generate, jobs, chunksize=8))


def sample_partner(anchor: int, categories: Sequence[int], rng: np.random.Generator) -> ContrastivePair:
    """Fair coin between a same-category and a different-category partner, then uniform."""
    categories = np.asarray(categories)
    same = np.flatnonzero((categories == categories[anchor]) & (np.arange(categories.size) != anchor))
    other = np.flatnonzero(categories != categories[anchor])
    positive = bool(rng.integers(2))
    if positive and same.size == 0:
        positive = False
    if not positive and other.size == 0:
        positive = True
    pool = same if positive else other
    if pool.size == 0:
        raise ValueError("no contrastive partner available")
    return ContrastivePair(anchor, int(rng.choice(pool)), int(positive))


def build_mixture(samples: Sequence[Sample], stft_cfg: StftConfig, pool: Sequence[Sample] = (),
                  rng: np.random.Generator | None = None, allow_single: bool = False) -> MixtureItem:
    """Mix the sources and derive per-source spectrograms, ideal masks and contrast pairs.

    Pairs are drawn from ``pool`` (indices refer to it); sources must be members
    of the pool for anchors to be located, otherwise no pairs are produced.
    """
    lo = 1 if allow_single else 2
    if not lo <= len(samples) <= 4:
        raise ValueError(f"mixtures need 2..4 sources, got {len(samples)}")
    mixture = dsp.mix([s.waveform for s in samples])
    specs = [dsp.stft(s.waveform, stft_cfg.window_len, stft_cfg.hop_len) for s in samples]
    mags = [sp.magnitude() for sp in specs]
    masks = [dsp.ideal_binary_mask(mags, n) for n in range(len(samples))]
    pairs = []
    if pool and rng is not None:
        ids = {s.id: i for i, s in enumerate(pool)}
        cats = [s.category for s in pool]
        for s in samples:
            if s.id in ids:
                pairs.append(sample_partner(ids[s.id], cats, rng))
    return MixtureItem(mixture, list(samples), specs, masks, pairs)


class SpectralDataset:
    """In-memory items with precomputed STFTs, for fast batch assembly.

    The STFT of a mixture is the sum of its sources' STFTs, so mixtures are
    formed in the spectral domain without re-running the transform.
    """

    def __init__(self, samples: Sequence[Sample], stft_cfg: StftConfig):
        if not samples:
            raise ValueError("empty dataset")
        self.samples = list(samples)
        self.stft_cfg = stft_cfg
        self.categories = np.array([s.category for s in self.samples])
        self.specs = np.stack([
            dsp.stft(s.waveform, stft_cfg.window_len, stft_cfg.hop_len).bins for s in self.samples])
        self.images = np.stack([s.image for s in self.samples])
        self.by_category = {int(c): np.flatnonzero(self.categories == c) for c in np.unique(self.categories)}

    def __len__(self) -> int:
        return len(self.samples)

    def draw_mixture(self, rng: np.random.Generator, sources: int) -> list[int]:
        cats = list(self.by_category)
        if len(cats) < sources:
            raise ValueError(f"need {sources} categories, dataset has {len(cats)}")
        chosen = rng.choice(cats, size=sources, replace=False)
        return [int(rng.choice(self.by_category[int(c)])) for c in chosen]

    def batch(self, mixtures: Sequence[Sequence[int]], rng: np.random.Generator | None = None) -> dict:
        """Arrays for a list of mixtures (each a list of item indices).

        Rows are ordered mixture-major, source-minor. With ``rng`` one contrast
        partner per row is drawn as well.
        """
        mags, targets, images, idx = [], [], [], []
        for items in mixtures:
            spec = self.specs[list(items)]
            mix_mag = np.abs(spec.sum(axis=0))
            src_mag = np.abs(spec)
            for n, item in enumerate(items):
                mags.append(mix_mag)
                targets.append(np.all(src_mag[n][None] >= src_mag, axis=0))
                images.append(self.images[item])
                idx.append(item)
        out = {
            "mag": np.stack(mags),
            "targets": np.stack(targets)[:, None].astype(np.float64),
            "images": np.stack(images),
            "items": idx,
            "sources": len(mixtures[0]),
        }
        if rng is not None:
            pairs = [sample_partner(i, self.categories, rng) for i in idx]
            out["partner_images"] = self.images[[p.partner_index for p in pairs]]
            out["labels"] = np.array([p.label for p in pairs], dtype=np.float64)
        return out

    def fixed_mixtures(self, count: int, sources: int, seed: int) -> list[list[int]]:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 7919]))
        return [self.draw_mixture(rng, sources) for _ in range(count)]


# ------------------------------------------------------------------ manifests

def write_dataset(out_dir, per_category: dict[str, int], seed: int, stft_cfg: StftConfig,
                  cfg: ToyConfig = ToyConfig(), workers: int = 1) -> Path:
    """Generate splits to WAV/PPM files and write ``manifest.json``; returns its path."""
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "img").mkdir(parents=True, exist_ok=True)
    entries = []
    for split, count in per_category.items():
        for s in generate_split(split, count, seed, stft_cfg, cfg, workers):
            wav, img = f"wav/{s.id}.wav", f"img/{s.id}.ppm"
            save_wav(s.waveform, out / wav)
            save_image(s.image, out / img)
            entries.append({"id": s.id, "category": s.category, "wav": wav, "image": img, "split": split})
    manifest = {
        "version": 1,
        "seed": seed,
        "categories": cfg.categories,
        "image_size": cfg.image_size,
        "stft": {"sample_rate": stft_cfg.sample_rate, "window_len": stft_cfg.window_len,
                 "hop_len": stft_cfg.hop_len, "frames": stft_cfg.frames},
        "items": entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n")
    return path


def read_manifest(path) -> dict:
    path = Path(path)
    manifest = json.loads(path.read_text())
    for key in ("stft", "items", "image_size"):
        if key not in manifest:
            raise ValueError(f"{path}: manifest is missing {key!r}")
    return manifest


def manifest_stft(manifest: dict) -> StftConfig:
    return StftConfig(**manifest["stft"])


def load_split(path, split: str) -> list[Sample]:
    path = Path(path)
    manifest = read_manifest(path)
    root = path.parent
    size = manifest["image_size"]
    clip = manifest_stft(manifest).clip_len
    samples = []
    for e in manifest["items"]:
        if e["split"] != split:
            continue
        w = load_wav(root / e["wav"])
        if len(w) != clip:
            raise ValueError(f"{e['wav']}: {len(w)} samples, manifest framing expects {clip}")
        samples.append(Sample(w, load_image(root / e["image"], size), int(e["category"]), e["id"]))
    return samples
