import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vslowfast.autodiff import Tensor, backward, check_gradients, ops
from vslowfast.autodiff.tensor import ShapeError
from vslowfast.losses import (SQRT_EPS, LossWeights, contrast_loss, embedding_contrast, localization_contrast,
                              separation_loss, total_loss)
from vslowfast.model import StreamOutput


def T(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


def _stream(logits):
    lt = T(logits)
    return StreamOutput(lt, lt, ops.sigmoid(lt), ops.sigmoid(lt))


def test_constants():
    assert SQRT_EPS == math.exp(-9)
    w = LossWeights()
    assert (w.r1, w.r2, w.margin) == (0.1, 0.1, 1.0)


def test_embedding_contrast_examples():
    e = np.array([0.3, -0.2, 1.0])
    assert embedding_contrast(T(e), T(e), 1).item() == 0.0
    assert embedding_contrast(T([0.0, 0.0]), T([2.0, 0.0]), 0).item() == 0.0
    value = embedding_contrast(T(e), T(e), 0).item()
    assert abs(value - 0.5 * (1 - math.sqrt(math.exp(-9))) ** 2) < 1e-15
    assert abs(value - 0.48895) < 1e-5


@given(seed=st.integers(0, 2**31), y=st.sampled_from([0, 1]), scale=st.floats(0.01, 3))
def test_embedding_contrast_symmetric_non_negative(seed, y, scale):
    r = np.random.default_rng(seed)
    a, b = r.normal(size=4) * scale, r.normal(size=4) * scale
    ab = embedding_contrast(T(a), T(b), y).item()
    assert ab == embedding_contrast(T(b), T(a), y).item()
    assert ab >= 0
    dist = np.sum((a - b) ** 2)
    if y == 0:
        assert (ab == 0) == (math.sqrt(dist + SQRT_EPS) >= 1.0)
    else:
        assert (ab == 0) == (dist == 0)


def test_positive_gradient_pulls_together(rng):
    for _ in range(20):
        a, b = T(rng.normal(size=3), grad=True), T(rng.normal(size=3))
        backward(ops.sum(embedding_contrast(a, b, 1)))
        np.testing.assert_allclose(a.grad, a.data - b.data, rtol=1e-12)
        assert check_gradients(lambda: ops.sum(embedding_contrast(a, b, 1)), [a]) < 1e-6


def test_embedding_contrast_errors():
    with pytest.raises(ShapeError):
        embedding_contrast(T(np.ones(3)), T(np.ones(4)), 1)
    with pytest.raises(ValueError):
        embedding_contrast(T(np.ones(3)), T(np.ones(3)), 2)


def test_localization_contrast_examples(rng):
    f = rng.normal(size=(3, 2, 2))
    assert abs(localization_contrast(T(np.zeros(3)), T(f), 1).item() - math.log(2)) < 1e-15
    e = np.full(3, 10.0)
    assert localization_contrast(T(e), T(np.ones((3, 2, 2))), 1).item() < 1e-12


def test_localization_contrast_composed_oracle(rng):
    for y in (0, 1):
        e, f = rng.normal(size=4), rng.normal(size=(4, 3, 3))
        scores = [1 / (1 + math.exp(-sum(e[c] * f[c, i, j] for c in range(4)))) for i in range(3) for j in range(3)]
        q = max(scores)
        ref = -(y * math.log(q) + (1 - y) * math.log(1 - q))
        assert abs(localization_contrast(T(e), T(f), y).item() - ref) < 1e-12
    with pytest.raises(ShapeError):
        localization_contrast(T(np.ones((1, 3))), T(np.ones((1, 4, 2, 2))), 1)


def test_contrast_loss_examples(rng):
    w = LossWeights()
    e, f = rng.normal(size=(1, 3)), rng.normal(size=(1, 3, 2, 2))
    got = contrast_loss(T(e), T(f), T(e), [1], w).item()
    assert abs(got - 0.1 * localization_contrast(T(e[0]), T(f[0]), 1).item()) < 1e-15
    assert contrast_loss(T(e), T(f), T(e), [1], LossWeights(0, 0)).item() == 0.0
    e2, p2, f2 = rng.normal(size=(2, 3)), rng.normal(size=(2, 3)), rng.normal(size=(2, 3, 2, 2))
    per = [0.1 * embedding_contrast(T(p2[i]), T(e2[i]), y).item()
           + 0.1 * localization_contrast(T(p2[i]), T(f2[i]), y).item() for i, y in enumerate([1, 0])]
    assert abs(contrast_loss(T(e2), T(f2), T(p2), [1, 0], w).item() - sum(per) / 2) < 1e-14


def test_contrast_loss_empty_warns():
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        assert contrast_loss(None, None, None, [], LossWeights()).item() == 0.0
    assert any(issubclass(c.category, RuntimeWarning) for c in caught)


def test_separation_loss_examples(rng):
    for n in (2, 3, 4):
        targets = (rng.random((2 * n, 1, 4, 8)) > 0.5).astype(float)
        zero = _stream(np.zeros_like(targets))
        assert abs(separation_loss(zero, zero, targets, n).item() - 2 * n * math.log(2)) < 1e-9
        exact = _stream(np.where(targets > 0, 50.0, -50.0))
        assert separation_loss(exact, exact, targets, n).item() < 1e-15
    with pytest.raises(ShapeError):
        separation_loss(_stream(np.zeros((2, 1, 4, 8))), None, np.zeros((2, 1, 4, 4)), 2)


def test_separation_loss_extended_precision(rng):
    targets = (rng.random((4, 1, 3, 4)) > 0.5).astype(float)
    a, b = rng.normal(scale=4, size=targets.shape), rng.normal(scale=4, size=targets.shape)

    def bce(z):
        p = 1 / (1 + np.exp(-z.astype(np.longdouble)))
        return np.mean(-(targets * np.log(p) + (1 - targets) * np.log1p(-p)))

    ref = float(2 * (bce(a) + bce(b)))
    assert abs(separation_loss(_stream(a), _stream(b), targets, 2).item() - ref) < 1e-12


@given(seed=st.integers(0, 2**31), step=st.floats(0.01, 2))
def test_separation_loss_coordinate_monotone(seed, step):
    r = np.random.default_rng(seed)
    targets = (r.random((2, 1, 2, 3)) > 0.5).astype(float)
    z = r.normal(scale=3, size=targets.shape)
    base = separation_loss(_stream(z), None, targets, 2).item()
    idx = tuple(r.integers(0, s) for s in z.shape)
    moved = z.copy()
    moved[idx] += step if targets[idx] == 1 else -step
    assert separation_loss(_stream(moved), None, targets, 2).item() < base


def test_total_loss():
    assert total_loss(T(0.0), T(0.0)).item() == 0.0
    assert total_loss(T(1.25), T(0.0)).item() == 1.25
    assert total_loss(T(0.3), T(0.7)).item() == 0.3 + 0.7
