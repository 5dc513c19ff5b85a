"""SGD training loop, checkpoint handling and BSS-eval evaluation."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import dsp, metrics
from .autodiff import Tensor, backward, load_checkpoint, ops, save_checkpoint
from .data import SpectralDataset, load_split, manifest_stft, read_manifest
from .losses import LossWeights, pair_terms, separation_loss
from .model import ConfigError, ModelConfig, VSlowFast


class TrainingDiverged(RuntimeError):
    pass


class CheckpointMismatch(ValueError):
    pass


@dataclass
class OptimizerState:
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: dict[int, np.ndarray] = field(default_factory=dict)  # keyed by parameter position


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 10
    steps: int = 2000
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    eval_every: int = 500
    sources: int = 2
    weights: LossWeights = LossWeights()
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.steps < 0 or self.eval_every < 1:
            raise ConfigError("steps must be >= 0 and eval_every >= 1")
        if not 2 <= self.sources <= 4:
            raise ConfigError("sources must be in 2..4")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("lr, weight_decay >= 0 and momentum in [0, 1) required")

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        d["weights"] = dataclasses.asdict(self.weights)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {', '.join(unknown)}")
        if "weights" in d:
            d["weights"] = LossWeights(**d["weights"])
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        return cls(**d)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray] | None, state: OptimizerState) -> None:
    """Momentum SGD with coupled weight decay; clears ``p.grad`` afterwards.

    ``grads`` defaults to each parameter's accumulated gradient. Nothing is
    updated if any gradient is non-finite.
    """
    grads = [p.grad for p in params] if grads is None else list(grads)
    if len(grads) != len(params):
        raise ValueError("one gradient per parameter required")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {i}")
    for i, (p, g) in enumerate(zip(params, grads)):
        g = np.zeros_like(p.data) if g is None else g
        v = state.buffers.get(i)
        if v is None:
            v = state.buffers[i] = np.zeros_like(p.data)
        v *= state.momentum
        v += g + state.weight_decay * p.data
        p.data -= state.lr * v
        p.zero_grad()


# ------------------------------------------------------------------ checkpoints

def config_path(checkpoint) -> Path:
    return Path(checkpoint).with_suffix(".json")


def save_model(model: VSlowFast, path) -> None:
    save_checkpoint(model.state_dict(), path)
    model.cfg.save(config_path(path))


def load_model(path, cfg: ModelConfig | None = None) -> VSlowFast:
    if cfg is None:
        cpath = config_path(path)
        if not cpath.exists():
            raise CheckpointMismatch(f"{cpath}: model config next to checkpoint not found")
        cfg = ModelConfig.load(cpath)
    model = VSlowFast(cfg)
    try:
        model.load_state_dict(load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise CheckpointMismatch(f"{path}: checkpoint does not match config: {exc}") from exc
    return model.eval()


# ------------------------------------------------------------------ training

@dataclass
class StepRecord:
    step: int
    l_sep: float
    l_e: float
    l_M: float
    total: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def step_loss(model: VSlowFast, batch: dict, weights: LossWeights):
    """Forward pass for one batch; returns (total, record fields)."""
    images = batch["images"]
    contrast = weights.contrast_enabled and "partner_images" in batch
    if contrast:
        # anchors and partners share one vision pass (and one set of batch statistics)
        vf_all = model.vision_forward(np.concatenate([images, batch["partner_images"]]))
        b = images.shape[0]
        emb = ops.take(vf_all.embedding, 0, b, 0)
        fmap = ops.take(vf_all.fmap, 0, b, 0)
        partner = ops.take(vf_all.embedding, b, 2 * b, 0)
        vf = type(vf_all)(fmap, emb)
    else:
        vf = model.vision_forward(images)
    slow, fast = model.streams_forward(batch["mag"], vf)
    sep = separation_loss(slow, fast, batch["targets"], batch["sources"])
    if contrast:
        l_e, l_m = pair_terms(emb, fmap, partner, batch["labels"], weights.margin)
        l_e, l_m = ops.mean(l_e), ops.mean(l_m)
        total = ops.add(sep, ops.add(ops.mul(l_e, weights.r1), ops.mul(l_m, weights.r2)))
        return total, sep.item(), l_e.item(), l_m.item()
    return sep, sep.item(), 0.0, 0.0


def _diagnose(out_dir, step: int, model: VSlowFast, values, batch: dict) -> Path | None:
    info = {
        "step": step,
        "loss_terms": [v if math.isfinite(v) else repr(v) for v in values],
        "items": [int(i) for i in batch["items"]],
        "param_max_abs": {n: float(np.max(np.abs(p.data))) for n, p in model.named_parameters()},
        "nonfinite_params": [n for n, p in model.named_parameters() if not np.all(np.isfinite(p.data))],
    }
    if out_dir is None:
        return None
    path = Path(out_dir) / "diagnostic.json"
    path.write_text(json.dumps(info, indent=1) + "\n")
    return path


def train(cfg: TrainConfig, data, out_dir=None, log=None) -> tuple[VSlowFast, list[StepRecord]]:
    """Run ``cfg.steps`` SGD steps on ``data`` (a manifest path or a SpectralDataset).

    With ``out_dir`` a newline-delimited JSON log ``train.ndjson`` is written and
    the model is checkpointed every ``eval_every`` steps and at the end.
    ``log`` is an optional callable receiving each StepRecord.
    """
    dataset = data if isinstance(data, SpectralDataset) else _dataset(data, "train")
    cfg.model.check_input(dataset.specs.shape[1], dataset.specs.shape[2])
    model = VSlowFast(cfg.model, seed=cfg.seed).train()
    params = model.parameters()
    state = OptimizerState(cfg.lr, cfg.momentum, cfg.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = (out / "train.ndjson").open("w")
    records = []
    try:
        for step in range(1, cfg.steps + 1):
            mixtures = [dataset.draw_mixture(rng, cfg.sources) for _ in range(cfg.batch_size)]
            batch = dataset.batch(mixtures, rng)
            total, l_sep, l_e, l_m = step_loss(model, batch, cfg.weights)
            values = (l_sep, l_e, l_m, total.item())
            if not all(math.isfinite(v) for v in values):
                where = _diagnose(out, step, model, values, batch)
                raise TrainingDiverged(f"non-finite loss at step {step}: {values}"
                                       + (f"; diagnostic written to {where}" if where else ""))
            backward(total)
            sgd_step(params, None, state)
            rec = StepRecord(step, l_sep, l_e, l_m, total.item())
            records.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec.to_dict()) + "\n")
            if log is not None:
                log(rec)
            if out is not None and (step % cfg.eval_every == 0 or step == cfg.steps):
                save_model(model, out / "checkpoint.vsf")
    finally:
        if log_file is not None:
            log_file.close()
    return model.eval(), records


def _dataset(manifest, split: str) -> SpectralDataset:
    return SpectralDataset(load_split(manifest, split), manifest_stft(read_manifest(manifest)))


# ------------------------------------------------------------------ evaluation

def _waveforms_from_masks(masks: np.ndarray, mixture: np.ndarray, stft_cfg: dsp.StftConfig) -> list[np.ndarray]:
    spec = dsp.ComplexSpectrogram(mixture, stft_cfg.window_len, stft_cfg.hop_len, stft_cfg.sample_rate)
    return [dsp.istft(dsp.apply_mask(m, spec)).samples for m in masks]


def predict_masks(model: VSlowFast, dataset: SpectralDataset, mixtures: Sequence[Sequence[int]],
                  chunk: int = 16) -> list[np.ndarray]:
    """Soft masks (N, H, W) for each mixture, from the stream that runs last."""
    model.eval()
    out = []
    for start in range(0, len(mixtures), chunk):
        group = mixtures[start:start + chunk]
        batch = dataset.batch(group)
        slow, fast, _ = model(batch["mag"], batch["images"])
        mask = model.final(slow, fast).mask.data[:, 0]
        n = len(group[0])
        out += [mask[i * n:(i + 1) * n] for i in range(len(group))]
    return out


def score_mixtures(dataset: SpectralDataset, mixtures: Sequence[Sequence[int]], masks) -> dict:
    """bss_eval of masked-mixture reconstructions and of the copy-paste baseline.

    ``masks`` is a list of (N, H, W) arrays, or ``"ideal"`` for ideal binary masks.
    Scoring is restricted to the fully overlapped interior of the clip.
    """
    cfg = dataset.stft_cfg
    keep = cfg.interior()
    model_scores, copy_scores = [], []
    for m, items in enumerate(mixtures):
        spec = dataset.specs[list(items)]
        mix_spec = spec.sum(axis=0)
        if isinstance(masks, str):
            mags = np.abs(spec)
            mask = np.stack([np.all(mags[n][None] >= mags, axis=0) for n in range(len(items))])
        else:
            mask = masks[m]
        refs = [dataset.samples[i].waveform.samples[keep] for i in items]
        mixture = np.sum(refs, axis=0)
        estimates = _waveforms_from_masks(mask.astype(np.float64), mix_spec, cfg)
        for n in range(len(items)):
            model_scores.append(metrics.bss_eval(estimates[n][keep], refs, n))
            copy_scores.append(metrics.bss_eval(mixture, refs, n))
    return {
        "model": metrics.aggregate(model_scores),
        "copy_paste": metrics.aggregate(copy_scores),
        "per_source": [s.to_dict() for s in model_scores],
    }


def evaluate_model(model: VSlowFast | None, dataset: SpectralDataset, mixtures) -> dict:
    masks = "ideal" if model is None else predict_masks(model, dataset, mixtures)
    report = score_mixtures(dataset, mixtures, masks)
    report["sdr_gain_over_copy_paste"] = report["model"]["sdr"] - report["copy_paste"]["sdr"]
    return report


def evaluate(checkpoint, manifest, mixtures: int = 100, sources: int = 2, seed: int = 0,
             split: str = "test") -> dict:
    """Score a checkpoint on fixed random mixtures of the manifest's test split."""
    model = load_model(checkpoint)
    dataset = _dataset(manifest, split)
    try:
        model.cfg.check_input(dataset.specs.shape[1], dataset.specs.shape[2])
    except ValueError as exc:
        raise CheckpointMismatch(f"{checkpoint}: model cannot take this data's framing: {exc}") from exc
    chosen = dataset.fixed_mixtures(mixtures, sources, seed)
    report = evaluate_model(model, dataset, chosen)
    report.update({"checkpoint": str(checkpoint), "manifest": str(manifest), "mixtures": mixtures,
                   "sources": sources, "seed": seed})
    return report
