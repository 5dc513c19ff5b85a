import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vslowfast.dsp import Waveform
from vslowfast.metrics import CAP_DB, DegenerateReferenceError, EvalScores, aggregate, bss_eval, decompose


def _orthonormal(rng, n, k):
    q, _ = np.linalg.qr(rng.normal(size=(n, k)))
    return q.T


def test_exact_estimate_is_capped(rng):
    s1, s2 = rng.normal(size=(2, 500))
    sc = bss_eval(s1, [s1, s2], 0)
    assert (sc.sdr, sc.sir, sc.sar) == (CAP_DB, CAP_DB, CAP_DB)
    assert sc.capped == {"sdr", "sir", "sar"}


def test_interference_case(rng):
    s1, s2 = _orthonormal(rng, 400, 2)
    sc = bss_eval(s1 + 0.1 * s2, [s1, s2], 0)
    assert abs(sc.sdr - 20) < 0.01 and abs(sc.sir - 20) < 0.01
    assert sc.sar == CAP_DB and sc.capped == {"sar"}


def test_artifact_case(rng):
    s1, s2, w = _orthonormal(rng, 400, 3)
    sc = bss_eval(s1 + 0.1 * w, [s1, s2], 0)
    assert abs(sc.sdr - 20) < 0.01 and abs(sc.sar - 20) < 0.01
    assert sc.sir == CAP_DB and sc.capped == {"sir"}


@given(seed=st.integers(0, 2**31), c=st.sampled_from([0.1, 10.0, 3.7]))
def test_scale_invariance(seed, c):
    r = np.random.default_rng(seed)
    refs = r.normal(size=(2, 300))
    est = refs[0] + 0.5 * refs[1] + 0.3 * r.normal(size=300)
    a, b = bss_eval(est, list(refs), 0), bss_eval(c * est, list(refs), 0)
    for name in ("sdr", "sir", "sar"):
        assert abs(getattr(a, name) - getattr(b, name)) < 1e-9


@given(seed=st.integers(0, 2**31), k=st.integers(1, 4))
def test_decomposition_exact_and_orthogonal(seed, k):
    r = np.random.default_rng(seed)
    refs = r.normal(size=(k, 200))
    est = r.normal(size=200) + refs[0]
    d = decompose(est, list(refs), 0)
    assert np.linalg.norm(d.target + d.interference + d.artifacts - est) <= 1e-10 * np.linalg.norm(est)
    parts = [d.target, d.interference, d.artifacts]
    scale = np.linalg.norm(est) ** 2
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(parts[i] @ parts[j]) <= 1e-10 * scale


def test_degenerate_and_mismatched(rng):
    s = rng.normal(size=100)
    with pytest.raises(DegenerateReferenceError, match="degenerate reference"):
        bss_eval(s, [np.zeros(100), s], 0)
    with pytest.raises(DegenerateReferenceError):
        bss_eval(s, [s, 2 * s], 0)
    with pytest.raises(ValueError):
        bss_eval(s[:50], [s, s[::-1]], 0)
    with pytest.raises(ValueError, match="sample rate"):
        bss_eval(Waveform(s, 8000), [Waveform(s, 16000)], 0)


def test_scores_are_finite(rng):
    refs = rng.normal(size=(2, 100))
    for est in (np.zeros(100), -refs[0], rng.normal(size=100)):
        sc = bss_eval(est, list(refs), 0)
        assert all(math.isfinite(v) and abs(v) <= CAP_DB for v in (sc.sdr, sc.sir, sc.sar))


def test_aggregate_examples(rng):
    one = EvalScores(3.0, 4.0, 5.0)
    assert aggregate([one]) == {"count": 1, "capped": {"sdr": 0, "sir": 0, "sar": 0},
                                "sdr": 3.0, "sir": 4.0, "sar": 5.0}
    assert aggregate([EvalScores(10, 0, 0), EvalScores(20, 0, 0)])["sdr"] == 15.0
    vals = rng.normal(size=(30, 3)) * 10
    summary = aggregate([EvalScores(*v) for v in vals])
    np.testing.assert_allclose([summary[k] for k in ("sdr", "sir", "sar")], vals.mean(axis=0), rtol=1e-12)
    with pytest.raises(ValueError):
        aggregate([])


def test_aggregate_skips_capped():
    s = aggregate([EvalScores(10.0, CAP_DB, 1.0, frozenset({"sir"})), EvalScores(20.0, 6.0, 3.0)])
    assert s["sir"] == 6.0 and s["capped"]["sir"] == 1
    s = aggregate([EvalScores(10.0, CAP_DB, 1.0, frozenset({"sir"}))])
    assert s["sir"] == CAP_DB
