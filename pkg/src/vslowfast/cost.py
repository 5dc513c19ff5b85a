"""Parameter and multiply-accumulate accounting.

MACs count only convolution and matrix multiplies; normalisation, activations,
pooling and temporal resampling are free. Transposed convolutions are charged
I*O*K*K per input pixel, the cost of the equivalent gradient convolution.
Totals are for one forward pass of one source (batch of one).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.oracles import Counter
from .autodiff.tensor import ShapeError
from .model import ModelConfig, VSlowFast, _level


@dataclass(frozen=True)
class CostRow:
    module: str
    layer: str
    params: int
    macs: int


@dataclass
class CostReport:
    input_shape: tuple[int, int]
    rows: list[CostRow] = field(default_factory=list)
    label: str = ""
    config: ModelConfig | None = None

    @property
    def params_total(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def macs_total(self) -> int:
        return sum(r.macs for r in self.rows)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "config": self.config.to_dict() if self.config else None,
            "input_shape": list(self.input_shape),
            "params_total": self.params_total,
            "macs_total": self.macs_total,
            "macs_unit": "per forward pass of one source",
            "per_module": [asdict(r) for r in self.rows],
        }


def _conv_out(n: int, k: int, s: int, p: int, d: int = 1) -> int:
    return (n + 2 * p - d * (k - 1) - 1) // s + 1


def _vision_rows(cfg: ModelConfig) -> list[CostRow]:
    rows = []
    widths = [3, *cfg.vision_channels]
    size = cfg.image_size
    for i, (a, b) in enumerate(zip(widths, widths[1:])):
        size = _conv_out(size, 3, 2, 1)
        rows.append(CostRow("vision", f"conv{i}", b * a * 9, a * b * 9 * size * size))
        rows.append(CostRow("vision", f"bn{i}", 2 * b, 0))
    d = 2 if cfg.vision_dilated else 1
    size = _conv_out(size, 3, 2, d, d)
    c = cfg.category_count
    rows.append(CostRow("vision", "head", c * widths[-1] * 9 + c, widths[-1] * c * 9 * size * size))
    return rows


def _unet_rows(role: str, in_ch: int, depth: int, cfg: ModelConfig, h: int, w: int) -> list[CostRow]:
    ch = cfg.encoder_channels(depth)
    rows = []
    sizes = []  # output resolution of each encoder level
    prev = in_ch
    for i, c in enumerate(ch):
        k, s, p = _level(i)
        h, w = _conv_out(h, k, s, p), _conv_out(w, k, s, p)
        sizes.append((h, w))
        rows.append(CostRow(role, f"enc{i}", c * prev * k * k, prev * c * k * k * h * w))
        rows.append(CostRow(role, f"enc_bn{i}", 2 * c, 0))
        prev = c
    c = ch[-1]
    hb, wb = sizes[-1]
    rows.append(CostRow(role, "avga", 0, c * c + c * c * hb * wb))
    for i in reversed(range(depth)):
        k, _, _ = _level(i)
        cin = ch[i] if i == depth - 1 else 2 * ch[i]
        cout = ch[i - 1] if i > 0 else 1
        hi, wi = sizes[i]
        bias = cout if i == 0 else 0
        rows.append(CostRow(role, f"dec{i}", cin * cout * k * k + bias, cin * cout * k * k * hi * wi))
        if i > 0:
            rows.append(CostRow(role, f"dec_bn{i}", 2 * cout, 0))
    return rows


def _check_shape(cfg: ModelConfig, input_shape) -> tuple[int, int]:
    if len(input_shape) != 2:
        raise ShapeError(f"input_shape is (freq_bins, frames), got {input_shape}")
    h, w = (int(v) for v in input_shape)
    cfg.check_input(h, w)
    return h, w


def count_params(cfg: ModelConfig) -> int:
    """Trainable parameters; independent of the alphas and of the input shape."""
    return cost_report(cfg, (16, 16 * max(a for _, _, a in cfg.streams()))).params_total


def count_macs(cfg: ModelConfig, input_shape) -> int:
    return cost_report(cfg, input_shape).macs_total


def cost_report(cfg: ModelConfig, input_shape, label: str = "") -> CostReport:
    h, w = _check_shape(cfg, input_shape)
    rows = _vision_rows(cfg)
    first = True
    for role, depth, alpha in cfg.streams():
        rows += _unet_rows(role, 1 if first else 2, depth, cfg, h, w // alpha)
        first = False
    return CostReport((h, w), rows, label, cfg)


def _strictly(values: Sequence[int], cmp) -> bool:
    return len(values) > 1 and all(cmp(a, b) for a, b in zip(values, values[1:]))


def cost_table(cfgs: Sequence[ModelConfig], input_shape, labels: Sequence[str] | None = None) -> dict:
    """Reports in the given order plus trend flags over that order."""
    labels = list(labels) if labels is not None else [f"cfg{i}" for i in range(len(cfgs))]
    reports = [cost_report(c, input_shape, lab) for c, lab in zip(cfgs, labels)]
    params = [r.params_total for r in reports]
    macs = [r.macs_total for r in reports]
    flags = {
        "params_constant": len(set(params)) <= 1,
        "params_strictly_increasing": _strictly(params, lambda a, b: a < b),
        "macs_strictly_decreasing": _strictly(macs, lambda a, b: a > b),
        "macs_strictly_increasing": _strictly(macs, lambda a, b: a < b),
    }
    return {"reports": reports, "flags": flags}


def table_json(table: dict) -> str:
    return json.dumps({"reports": [r.to_dict() for r in table["reports"]], "flags": table["flags"]},
                      indent=2)


def table_text(table: dict) -> str:
    reports = table["reports"]
    if not reports:
        return "(no configs)\n"
    head = ["config", "slow", "fast", "a_s", "a_f", "params", "MACs/source", "GMACs"]
    lines = []
    for r in reports:
        c = r.config
        fast = (str(c.fast_layers), str(c.fast_alpha)) if c.two_stream else ("-", "-")
        lines.append([r.label, str(c.slow_layers), fast[0], str(c.slow_alpha), fast[1],
                      str(r.params_total), str(r.macs_total), f"{r.macs_total / 1e9:.4f}"])
    widths = [max(len(h), *(len(row[i]) for row in lines)) for i, h in enumerate(head)]
    fmt = "  ".join(f"{{:>{w}}}" if i else f"{{:<{w}}}" for i, w in enumerate(widths))
    out = [fmt.format(*head)] + [fmt.format(*row) for row in lines]
    out.append("flags: " + ", ".join(f"{k}={v}" for k, v in table["flags"].items()))
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------ oracles

def measured_params(cfg: ModelConfig) -> int:
    """Walk the live parameter registry of a freshly built model."""
    return sum(p.size for p in VSlowFast(cfg).parameters())


def measured_macs(cfg: ModelConfig, input_shape, seed: int = 0) -> int:
    """Run one source through the model with loop kernels that tally every multiply."""
    h, w = _check_shape(cfg, input_shape)
    model = VSlowFast(cfg, seed=seed, zero_head=False).eval()
    rng = np.random.default_rng(seed)
    mag = rng.random((1, h, w))
    image = rng.random((1, 3, cfg.image_size, cfg.image_size))
    counter = Counter()
    with ops.reference_kernels(counter):
        model(mag, image)
    return counter.macs
