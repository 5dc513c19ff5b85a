"""Command-line entry point: ``vslowfast <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime or data error, 3 self-test failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import cost, data, dsp, selfcheck
from .autodiff import CheckpointError, Tensor
from .io import ImageFormatError, WavError, load_image, load_wav, save_gray, save_wav
from .model import ConfigError, ModelConfig, localization_map
from .train import CheckpointMismatch, TrainConfig, TrainingDiverged, evaluate, load_model, train

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3
STFT_SIDECAR = "stft.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _read_json(path) -> dict:
    path = Path(path)
    try:
        value = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return value


def _show(label: str, resolved: dict) -> None:
    print(f"resolved {label} config:")
    print(json.dumps(resolved, indent=2, sort_keys=True))


def _model_overrides(args) -> dict:
    out = {}
    if getattr(args, "alpha_slow", None) is not None:
        out["slow_alpha"] = args.alpha_slow
    if getattr(args, "alpha_fast", None) is not None:
        out["fast_alpha"] = args.alpha_fast
    if getattr(args, "ordering", None) is not None:
        out["ordering"] = args.ordering
    return out


def _stft_from(d: dict, path) -> dsp.StftConfig:
    try:
        return dsp.StftConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"{path}: bad stft section ({exc})") from exc


# ------------------------------------------------------------------ commands

def cmd_gen_data(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    unknown = sorted(set(conf) - {"per_category", "stft", "toy", "workers"})
    if unknown:
        raise ConfigError(f"{args.config}: unknown fields {unknown}")
    stft_cfg = _stft_from(conf.get("stft", {}), args.config)
    toy = data.ToyConfig(**conf.get("toy", {}))
    per_category = conf.get("per_category", {"train": 100, "test": 25})
    bad = sorted(set(per_category) - set(data.SPLITS))
    if bad:
        raise ConfigError(f"{args.config}: unknown splits {bad}")
    resolved = {"out": str(args.out), "seed": args.seed, "per_category": per_category,
                "stft": vars(stft_cfg), "toy": vars(toy), "workers": conf.get("workers", 1)}
    _show("gen-data", resolved)
    path = data.write_dataset(args.out, per_category, args.seed, stft_cfg, toy, resolved["workers"])
    print(f"wrote {path}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    conf = _read_json(args.config) if args.config else {}
    model = dict(conf.get("model", {}))
    model.update(_model_overrides(args))
    conf["model"] = model
    if args.seed is not None:
        conf["seed"] = args.seed
    if args.sources is not None:
        conf["sources"] = args.sources
    if args.steps is not None:
        conf["steps"] = args.steps
    return TrainConfig.from_dict(conf)


def cmd_train(args) -> int:
    cfg = _train_config(args)
    manifest = data.read_manifest(args.manifest)
    _show("train", {**cfg.to_dict(), "manifest": str(args.manifest), "out": str(args.out)})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / STFT_SIDECAR).write_text(json.dumps(manifest["stft"], indent=2) + "\n")
    (out / "train_config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")

    def log(rec):
        if rec.step % 10 == 0 or rec.step == cfg.steps:
            print(json.dumps(rec.to_dict()), flush=True)

    train(cfg, args.manifest, out, log)
    print(f"wrote {out / 'checkpoint.vsf'}")
    return EXIT_OK


def _stft_for_checkpoint(args) -> dsp.StftConfig:
    if args.config:
        conf = _read_json(args.config)
        return _stft_from(conf.get("stft", conf), args.config)
    sidecar = Path(args.checkpoint).parent / STFT_SIDECAR
    if sidecar.exists():
        return _stft_from(_read_json(sidecar), sidecar)
    return dsp.StftConfig()


def cmd_separate(args) -> int:
    model = load_model(args.checkpoint)
    stft_cfg = _stft_for_checkpoint(args)
    _show("separate", {"mixture": str(args.mixture), "images": [str(p) for p in args.image],
                       "checkpoint": str(args.checkpoint), "out": str(args.out),
                       "stft": vars(stft_cfg), "model": model.cfg.to_dict()})
    wav = load_wav(args.mixture)
    if wav.sample_rate != stft_cfg.sample_rate:
        raise ValueError(f"{args.mixture}: sample rate {wav.sample_rate}, model expects {stft_cfg.sample_rate}")
    n = len(wav)
    if n > stft_cfg.clip_len:
        raise ValueError(f"{args.mixture}: {n} samples exceeds the clip length {stft_cfg.clip_len}")
    samples = np.zeros(stft_cfg.clip_len)
    samples[:n] = wav.samples
    spec = dsp.stft(dsp.Waveform(samples, wav.sample_rate), stft_cfg.window_len, stft_cfg.hop_len)
    images = np.stack([load_image(p, model.cfg.image_size) for p in args.image])
    mag = np.repeat(np.abs(spec.bins)[None], len(images), axis=0)
    slow, fast, vf = model(mag, images)
    masks = model.final(slow, fast).mask.data[:, 0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = []
    for i, m in enumerate(masks):
        est = dsp.istft(dsp.apply_mask(m, spec))
        save_wav(dsp.Waveform(est.samples[:n], wav.sample_rate), out / f"source{i}.wav")
        save_gray(m, out / f"mask{i}.pgm")
        loc, score = localization_map(Tensor(vf.embedding.data[i]), Tensor(vf.fmap.data[i]))
        save_gray(loc, out / f"localization{i}.pgm")
        summary.append({"image": str(args.image[i]), "wav": f"source{i}.wav", "mask": f"mask{i}.pgm",
                        "localization": f"localization{i}.pgm", "localization_peak": score})
    (out / "separation.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {len(masks)} sources to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    unknown = sorted(set(conf) - {"mixtures", "split"})
    if unknown:
        raise ConfigError(f"{args.config}: unknown fields {unknown}")
    resolved = {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest),
                "mixtures": conf.get("mixtures", 100), "split": conf.get("split", "test"),
                "sources": args.sources or 2, "seed": args.seed or 0, "out": str(args.out)}
    _show("evaluate", resolved)
    report = evaluate(args.checkpoint, args.manifest, resolved["mixtures"], resolved["sources"],
                      resolved["seed"], resolved["split"])
    text = json.dumps(report, indent=2) + "\n"
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(text)
    print(f"SDR {report['model']['sdr']:.2f} dB, copy-paste {report['copy_paste']['sdr']:.2f} dB; "
          f"wrote {args.out}")
    return EXIT_OK


def cmd_cost(args) -> int:
    overrides = _model_overrides(args)
    cfgs, labels = [], []
    for path in args.config or []:
        cfgs.append(ModelConfig.from_dict({**_read_json(path), **overrides}))
        labels.append(Path(path).stem)
    if not args.config:
        cfgs, labels = [ModelConfig(**overrides)], ["default"]
    if args.input_shape:
        shape = tuple(args.input_shape)
    else:
        frames = max([64] + [16 * a for c in cfgs for _, _, a in c.streams()])
        shape = (dsp.StftConfig().freq_bins, frames)
    _show("cost", {"configs": [c.to_dict() for c in cfgs], "labels": labels, "input_shape": list(shape)})
    table = cost.cost_table(cfgs, shape, labels)
    print(f"input (freq_bins, frames) = {shape}; MACs counted per forward pass of one source")
    print(cost.table_text(table), end="")
    if args.out:
        Path(args.out).write_text(cost.table_json(table) + "\n")
        print(f"wrote {args.out}")
    return EXIT_OK


def cmd_check(args) -> int:
    seed = args.seed or 0
    _show("check", {"seed": seed})
    results = selfcheck.run_all(seed)
    for r in results:
        print(f"{'PASS' if r.ok else 'FAIL'}  {r.name:<26} {r.detail}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_SELFTEST if failed else EXIT_OK


# ------------------------------------------------------------------ parsing

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="vslowfast", description="Visual sound separation with slow/fast spectrogram streams.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def model_flags(sp):
        sp.add_argument("--alpha-slow", type=int)
        sp.add_argument("--alpha-fast", type=int)
        sp.add_argument("--ordering", choices=["slow-first", "fast-first"])

    g = sub.add_parser("gen-data", help="write a synthetic dataset and manifest")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--config", help="JSON with per_category, stft, toy, workers")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="TrainConfig JSON (may embed a model section)")
    t.add_argument("--seed", type=int)
    t.add_argument("--sources", type=int)
    t.add_argument("--steps", type=int)
    model_flags(t)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("separate", help="separate one mixture given one image per source")
    s.add_argument("--mixture", required=True)
    s.add_argument("--image", required=True, action="append", help="repeat once per source")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="STFT framing JSON (default: stft.json next to the checkpoint)")
    s.set_defaults(func=cmd_separate)

    e = sub.add_parser("evaluate", help="score a checkpoint against the copy-paste baseline")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="JSON with mixtures, split")
    e.add_argument("--seed", type=int)
    e.add_argument("--sources", type=int, choices=[2, 3, 4])
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cost", help="parameter and MAC table for model configs")
    c.add_argument("--config", action="append", help="ModelConfig JSON; repeat for a sweep")
    c.add_argument("--input-shape", type=int, nargs=2, metavar=("BINS", "FRAMES"))
    c.add_argument("--out", help="also write the table as JSON")
    model_flags(c)
    c.set_defaults(func=cmd_cost)

    k = sub.add_parser("check", help="run the gradient and oracle self-test suite")
    k.add_argument("--seed", type=int)
    k.set_defaults(func=cmd_check)
    return p


RUNTIME_ERRORS = (OSError, ValueError, KeyError, TypeError, WavError, ImageFormatError, CheckpointError,
                  CheckpointMismatch, ConfigError, TrainingDiverged, FloatingPointError)


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args)
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())
