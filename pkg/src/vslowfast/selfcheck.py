"""Fast gradient and oracle checks run by ``vslowfast check``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import cost, dsp, losses
from .autodiff import Tensor, check_gradients, ops, oracles
from .model import ModelConfig, VSlowFast, avga

GRAD_TOL = 1e-4
# Whole-network checks use a smaller step: at 1e-4 a shifted BN bias moves some
# LeakyReLU inputs across zero and the difference quotient straddles a kink.
E2E_EPS = 1e-6
ORACLE_TOL = 1e-12
MICRO = ModelConfig(category_count=3, vision_channels=(2, 3, 4), slow_layers=5, fast_layers=4,
                    slow_alpha=2, fast_alpha=1, unet_channels=(2, 3), image_size=16)


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str
    seconds: float


def _t(rng, *shape, grad=True) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=grad)


def _grad_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    x, w, b = _t(rng, 2, 3, 6, 6), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    wt = _t(rng, 3, 2, 4, 4)
    g, be = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True), _t(rng, 3)
    e, f = _t(rng, 2, 3), _t(rng, 2, 3, 4, 4)
    p = Tensor(rng.uniform(0.1, 0.9, (2, 5)), requires_grad=True)
    y = (rng.random((2, 5)) > 0.5).astype(float)
    z = _t(rng, 2, 1, 4, 8)
    return {
        "conv2d": (lambda: ops.sum(ops.square(ops.conv2d(x, w, b, 2, 2, 2))), [x, w, b]),
        "conv_transpose2d": (lambda: ops.sum(ops.square(ops.conv_transpose2d(x, wt, None, 2, 1))), [x, wt]),
        "batchnorm2d": (lambda: ops.sum(ops.mul(ops.batchnorm2d(
            x, g, be, np.zeros(3), np.ones(3), True), x)), [x, g, be]),
        "max_pool2d": (lambda: ops.sum(ops.square(ops.max_pool2d(x, 2, 2))), [x]),
        "avga": (lambda: ops.sum(ops.square(avga(e, f))), [e, f]),
        "bce_with_logits": (lambda: ops.bce_with_logits(p, y), [p]),
        "bce": (lambda: ops.bce(p, y), [p]),
        "resample": (lambda: ops.sum(ops.square(ops.temporal_upsample(
            ops.temporal_downsample(z, 4), 2))), [z]),
    }


def check_gradients_ops(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (f, params) in _grad_cases(rng).items():
        t = time.perf_counter()
        err = check_gradients(f, params)
        out.append(CheckResult(f"grad:{name}", err < GRAD_TOL, f"max rel err {err:.2e}", time.perf_counter() - t))
    return out


def end_to_end_loss(model: VSlowFast, rng: np.random.Generator, sources: int = 2,
                    weights: losses.LossWeights = losses.LossWeights()) -> Callable[[], Tensor]:
    """Full objective (separation + contrast) on a random micro batch, as a closure."""
    cfg = model.cfg
    b = 2 * sources
    mag = rng.random((b, 16, 32))
    targets = (rng.random((b, 1, 16, 32)) > 0.5).astype(float)
    images = rng.random((b, 3, cfg.image_size, cfg.image_size))
    partners = rng.random((b, 3, cfg.image_size, cfg.image_size))
    labels = (np.arange(b) % 2).astype(float)

    def f():
        vf = model.vision_forward(np.concatenate([images, partners]))
        emb, fmap = ops.take(vf.embedding, 0, b, 0), ops.take(vf.fmap, 0, b, 0)
        partner = ops.take(vf.embedding, b, 2 * b, 0)
        slow, fast = model.streams_forward(mag, type(vf)(fmap, emb))
        sep = losses.separation_loss(slow, fast, targets, sources)
        con = losses.contrast_loss(emb, fmap, partner, labels, weights)
        return losses.total_loss(sep, con)

    return f


def check_end_to_end(seed: int = 0, max_entries: int = 6) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    # train-mode BN: outputs depend on batch statistics only, so the closure is
    # a pure function of the parameters even though running buffers move
    model = VSlowFast(MICRO, seed=seed, zero_head=False).train()
    err = check_gradients(end_to_end_loss(model, rng), model.parameters(), eps=E2E_EPS,
                          max_entries=max_entries, rng=rng)
    return CheckResult("grad:end_to_end", err < GRAD_TOL, f"max rel err {err:.2e}", time.perf_counter() - t)


def check_oracles(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    wt = rng.normal(size=(3, 4, 4, 4))
    b = rng.normal(size=4)
    g, be = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)
    e, f = rng.normal(size=3), rng.normal(size=(3, 5, 5))
    a2, b2 = rng.normal(size=(5, 6)), rng.normal(size=(6, 4))
    T = Tensor
    pairs = {
        "conv2d": (ops.conv2d(T(x), T(w), T(b), 2, 1).data, oracles.conv2d(x, w, b, 2, 1)),
        "conv_transpose2d": (ops.conv_transpose2d(T(x), T(wt), T(b), 2, 1).data,
                             oracles.conv_transpose2d(x, wt, b, 2, 1)),
        "batchnorm2d": (ops.batchnorm2d(T(x), T(g), T(be), np.zeros(3), np.ones(3), True).data,
                        oracles.batchnorm_train(x, g, be)),
        "max_pool2d": (ops.max_pool2d(T(x), 2, 2).data, oracles.max_pool2d(x, 2, 2)),
        "avga": (avga(T(e), T(f)).data, oracles.avga(e, f)),
        "matmul": (ops.matmul(T(a2), T(b2)).data, oracles.matmul(a2, b2)),
    }
    out = []
    for name, (fast, ref) in pairs.items():
        err = float(np.max(np.abs(fast - ref)))
        out.append(CheckResult(f"oracle:{name}", err < ORACLE_TOL, f"max abs err {err:.1e}", 0.0))
    return out


def check_stft(seed: int = 0) -> CheckResult:
    t = time.perf_counter()
    rng = np.random.default_rng(seed)
    cfg = dsp.StftConfig(window_len=64, hop_len=16, frames=20)
    x = rng.normal(size=cfg.clip_len)
    y = dsp.istft(dsp.stft(dsp.Waveform(x, cfg.sample_rate), cfg.window_len, cfg.hop_len)).samples
    keep = cfg.interior()
    err = float(np.linalg.norm(y[keep] - x[keep]) / np.linalg.norm(x[keep]))
    return CheckResult("stft:round_trip", err < 1e-6, f"rel err {err:.1e}", time.perf_counter() - t)


def check_cost() -> CheckResult:
    t = time.perf_counter()
    shape = (16, 32)
    analytic = (cost.count_params(MICRO), cost.count_macs(MICRO, shape))
    measured = (cost.measured_params(MICRO), cost.measured_macs(MICRO, shape))
    return CheckResult("cost:oracle", analytic == measured,
                       f"analytic {analytic} vs measured {measured}", time.perf_counter() - t)


def run_all(seed: int = 0) -> list[CheckResult]:
    results = check_gradients_ops(seed)
    results.append(check_end_to_end(seed))
    results += check_oracles(seed)
    results.append(check_stft(seed))
    results.append(check_cost())
    return results
