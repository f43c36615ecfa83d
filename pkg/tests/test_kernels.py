"""Backend parity: the compiled kernels and the numpy fallback must agree."""

import numpy as np
import pytest

from shardmax import _pykernels

try:
    from shardmax import _ckernels
    BACKENDS = [_pykernels, _ckernels]
except ImportError:
    BACKENDS = [_pykernels]

needs_compiled = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels unavailable")


def _random_problem(seed, b=9, n=31, k=4, dtype=np.float64):
    rng = np.random.default_rng(seed)
    logits = np.ascontiguousarray(rng.standard_normal((b, n)).astype(dtype))
    row_max = np.ascontiguousarray(logits.max(axis=1))
    pos = rng.integers(0, n, b)
    pos[rng.random(b) < 0.3] = -1        # simulate entries owned elsewhere
    neg = rng.integers(-1, n, (b, k))
    return logits, row_max, pos.astype(np.int64), np.ascontiguousarray(neg, np.int64)


@needs_compiled
@pytest.mark.parametrize("variant", [0, 1])
@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_stats_parity(variant, dtype):
    logits, row_max, pos, neg = _random_problem(0, dtype=dtype)
    tol = 1e-13 if dtype == np.float64 else 1e-5
    s_py, w_py = _pykernels.softmax_stats(logits, row_max, pos, neg, 0.8, 0.05, variant)
    s_cy, w_cy = _ckernels.softmax_stats(logits, row_max, pos, neg, 0.8, 0.05, variant)
    assert s_py.dtype == s_cy.dtype == dtype
    np.testing.assert_allclose(s_cy, s_py, rtol=tol)
    np.testing.assert_allclose(w_cy, w_py, rtol=tol, atol=tol)


@needs_compiled
@pytest.mark.parametrize("variant", [0, 1])
def test_grad_parity(variant):
    logits, row_max, pos, neg = _random_problem(1)
    s, w = _pykernels.softmax_stats(logits, row_max, pos, neg, 0.8, 0.05, 0)
    if variant == 1:
        _, w = _pykernels.softmax_stats(logits, row_max, pos, neg, 0.8, 0.05, 1)
    g_py = _pykernels.softmax_loss_grad(logits, row_max, s, w, pos, neg, 0.8, 0.05, 0.1, variant)
    g_cy = _ckernels.softmax_loss_grad(logits, row_max, s, w, pos, neg, 0.8, 0.05, 0.1, variant)
    np.testing.assert_allclose(g_cy, g_py, rtol=1e-13, atol=1e-16)


@needs_compiled
def test_topk_parity_exact():
    rng = np.random.default_rng(2)
    for trial in range(20):
        b, n = 17, rng.integers(5, 60)
        k = int(rng.integers(1, n - 1))
        scores = rng.standard_normal((b, n))
        # sprinkle exact duplicates to exercise tie-breaks
        scores[:, 1] = scores[:, 0]
        scores = np.ascontiguousarray(scores)
        excl = rng.integers(-1, n, b).astype(np.int64)
        assert np.array_equal(
            _pykernels.topk_desc(scores, excl, k),
            _ckernels.topk_desc(scores, excl, k),
        )


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND_NAME)
def test_topk_order_and_exclusion(impl):
    scores = np.array([[3.0, 1.0, 2.0, 3.0, -1.0]])
    out = impl.topk_desc(scores, np.array([-1], np.int64), 4)
    assert out.tolist() == [[0, 3, 2, 1]]   # value desc, ties to lower index
    out = impl.topk_desc(scores, np.array([0], np.int64), 4)
    assert out.tolist() == [[3, 2, 1, 4]]   # self column removed


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND_NAME)
def test_topk_k_too_large(impl):
    scores = np.zeros((2, 3))
    with pytest.raises(ValueError):
        impl.topk_desc(scores, np.array([0, 1], np.int64), 3)
    # without exclusions k == n is allowed
    out = impl.topk_desc(scores, np.array([-1, -1], np.int64), 3)
    assert out.shape == (2, 3)


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND_NAME)
def test_topk_k_zero(impl):
    scores = np.zeros((2, 3))
    assert impl.topk_desc(scores, np.array([-1, -1], np.int64), 0).shape == (2, 0)


@pytest.mark.parametrize("impl", BACKENDS, ids=lambda m: m.BACKEND_NAME)
def test_stats_skip_foreign_entries(impl):
    # entries marked -1 contribute nothing
    logits = np.log(np.array([[1.0, 2.0, 3.0]]))
    row_max = np.ascontiguousarray(logits.max(axis=1))
    s, w = impl.softmax_stats(
        logits, row_max, np.array([-1], np.int64), np.array([[-1, 1]], np.int64),
        0.9, 0.1, 0,
    )
    assert np.isclose(s[0], 6.0 / 3.0)      # (1+2+3)/max-shift 3
    assert np.isclose(w[0], 0.1 * 2.0 / 3.0)
