"""Projection-based SDR / SIR / SAR."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dsp import Waveform

CAP_DB = 100.0
_UNDERFLOW = 1e-20
METRICS = ("sdr", "sir", "sar")


class DegenerateReferenceError(ValueError):
    pass


@dataclass(frozen=True)
class EvalScores:
    sdr: float
    sir: float
    sar: float
    capped: frozenset = field(default_factory=frozenset)  # names of metrics that hit the cap

    def to_dict(self) -> dict:
        return {"sdr": self.sdr, "sir": self.sir, "sar": self.sar, "capped": sorted(self.capped)}


@dataclass(frozen=True)
class Decomposition:
    target: np.ndarray
    interference: np.ndarray
    artifacts: np.ndarray


def _samples(x) -> np.ndarray:
    return x.samples if isinstance(x, Waveform) else np.asarray(x, dtype=np.float64)


def decompose(estimate, references: Sequence, target_index: int) -> Decomposition:
    est = _samples(estimate)
    refs = np.stack([_samples(r) for r in references])
    if refs.shape[1] != est.shape[0]:
        raise ValueError(f"length mismatch: estimate {est.shape[0]}, references {refs.shape[1]}")
    rates = {r.sample_rate for r in [estimate, *references] if isinstance(r, Waveform)}
    if len(rates) > 1:
        raise ValueError("sample rate mismatch")
    target = refs[target_index]
    energy = target @ target
    if energy <= 0:
        raise DegenerateReferenceError("degenerate reference")
    s_target = (est @ target) / energy * target
    gram = refs @ refs.T
    if np.linalg.matrix_rank(gram) < refs.shape[0]:
        raise DegenerateReferenceError("references are linearly dependent")
    coeffs = np.linalg.solve(gram, refs @ est)
    in_span = coeffs @ refs
    return Decomposition(s_target, in_span - s_target, est - in_span)


def _ratio_db(num: float, den: float) -> tuple[float, bool]:
    if den < _UNDERFLOW * num:
        return CAP_DB, True
    if num <= 0:
        return -CAP_DB, True
    value = 10.0 * math.log10(num / den)
    if abs(value) > CAP_DB:
        return math.copysign(CAP_DB, value), True
    return value, False


def bss_eval(estimate, references: Sequence, target_index: int) -> EvalScores:
    d = decompose(estimate, references, target_index)

    def energy(x):
        return float(x @ x)

    sdr, c1 = _ratio_db(energy(d.target), energy(d.interference + d.artifacts))
    sir, c2 = _ratio_db(energy(d.target), energy(d.interference))
    sar, c3 = _ratio_db(energy(d.target + d.interference), energy(d.artifacts))
    capped = frozenset(name for name, c in zip(METRICS, (c1, c2, c3)) if c)
    return EvalScores(sdr, sir, sar, capped)


def aggregate(scores: Sequence[EvalScores]) -> dict:
    """Mean of each metric over the entries where it was not capped.

    If every entry of a metric is capped, the capped values are averaged instead.
    """
    if not scores:
        raise ValueError("cannot aggregate an empty score list")
    summary = {"count": len(scores), "capped": {}}
    for name in METRICS:
        free = [getattr(s, name) for s in scores if name not in s.capped]
        summary["capped"][name] = len(scores) - len(free)
        values = free or [getattr(s, name) for s in scores]
        summary[name] = float(np.mean(values))
    return summary
