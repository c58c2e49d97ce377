import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from framediff import metrics as mt


@pytest.fixture(scope="module")
def spec():
    return mt.FeatureSpec.create(2 * 4 * 4 * 1, m=16, seed=3)


def clips(rng, n, shape=(2, 4, 4, 1)):
    return [rng.random(shape) for _ in range(n)]


def test_projection_rows_orthonormal(spec):
    p = spec.projection
    assert np.abs(p @ p.T - np.eye(16)).max() < 1e-10
    np.testing.assert_array_equal(p, mt.FeatureSpec.create(32, 16, 3).projection)


def test_projection_dimension_checked():
    with pytest.raises(ValueError):
        mt.FeatureSpec.create(8, m=9)


def test_identical_sets_zero(spec, rng):
    a = clips(rng, 30)
    assert mt.toy_fvd(a, a, spec) <= 1e-8


def test_mean_shift_closed_form(spec, rng):
    a = clips(rng, 40)
    v = rng.normal(0, 0.2, size=(2, 4, 4, 1))
    b = [c + v for c in a]
    delta = spec.projection @ v.reshape(-1)
    assert mt.toy_fvd(a, b, spec) == pytest.approx(float(delta @ delta), abs=1e-6)


def test_symmetry_and_order_invariance(spec, rng):
    a, b = clips(rng, 25), [c ** 2 for c in clips(rng, 30)]
    assert abs(mt.toy_fvd(a, b, spec) - mt.toy_fvd(b, a, spec)) <= 1e-8
    perm = rng.permutation(25)
    assert mt.toy_fvd([a[i] for i in perm], b, spec) == mt.toy_fvd(a, b, spec)


def scipy_free_frechet(fa, fb):
    """Reference via the eigen-decomposition of the (non-symmetric) product itself."""
    ma, mb = fa.mean(0), fb.mean(0)
    ca, cb = np.cov(fa, rowvar=False), np.cov(fb, rowvar=False)
    w = np.linalg.eigvals(ca @ cb)
    return float((ma - mb) @ (ma - mb) + np.trace(ca) + np.trace(cb) - 2 * np.sqrt(np.clip(w.real, 0, None)).sum())


def test_matches_reference_formula(spec, rng):
    a, b = clips(rng, 50), [0.5 * c + 0.2 for c in clips(rng, 60)]
    expected = scipy_free_frechet(spec.features(a), spec.features(b))
    assert mt.toy_fvd(a, b, spec) == pytest.approx(expected, rel=1e-8, abs=1e-10)


def test_eigen_floor_is_harmless_on_well_conditioned_fits(rng):
    a = rng.standard_normal((200, 5))
    b = rng.standard_normal((200, 5)) @ np.diag([1, 2, 3, 1, 1])
    fa, fb = mt.GaussianFit.of(a), mt.GaussianFit.of(b)
    ra = np.linalg.cholesky(fa.cov)
    raw = np.linalg.eigvalsh(ra.T @ fb.cov @ ra)
    assert mt.sqrt_trace_product(fa.cov, fb.cov) == pytest.approx(np.sqrt(raw).sum(), abs=1e-6)


def test_toy_fvd_input_checks(spec, rng):
    with pytest.raises(ValueError, match="at least 17"):
        mt.toy_fvd(clips(rng, 16), clips(rng, 20), spec)
    with pytest.raises(ValueError, match="uniformly shaped"):
        mt.toy_fvd(clips(rng, 20), clips(rng, 19) + [rng.random((4, 2, 2, 1))], spec)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_toy_fvd_non_negative(seed):
    rng = np.random.default_rng(seed)
    spec = mt.FeatureSpec.create(16, m=4, seed=seed)
    a = [rng.random((1, 4, 4, 1)) for _ in range(6)]
    b = [rng.random((1, 4, 4, 1)) * rng.random() for _ in range(7)]
    assert mt.toy_fvd(a, b, spec) >= 0.0


def test_psnr(rng):
    a = rng.random((3, 4, 4, 1))
    assert mt.psnr(a, a) == math.inf
    assert mt.psnr(np.zeros(10), np.full(10, 0.1)) == pytest.approx(20.0)
    b = rng.random(a.shape)
    assert mt.psnr(a, b) == pytest.approx(10 * math.log10(1 / np.mean((a - b) ** 2)), abs=1e-10)
    with pytest.raises(ValueError):
        mt.psnr(a, b[:2])


def brute_smoothness(trace, window):
    d = [trace[i + 1] - trace[i] for i in range(len(trace) - 1)]
    vals = []
    for s in range(len(d) - window + 1):
        chunk = d[s:s + window]
        mu = sum(chunk) / window
        vals.append(sum((c - mu) ** 2 for c in chunk) / window)
    return sum(vals) / len(vals)


def test_smoothness_examples():
    assert mt.smoothness(np.full(100, 3.0), 10) == 0.0
    assert mt.smoothness(np.arange(100) * 0.5, 10) == pytest.approx(0.0, abs=1e-20)
    alt = np.array([(-1.0) ** i for i in range(101)])
    assert mt.smoothness(alt, 10) == pytest.approx(4.0, abs=1e-12)
    assert mt.smoothness(alt, 9) == pytest.approx(brute_smoothness(list(alt), 9), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10, allow_nan=False), min_size=8, max_size=60), st.integers(2, 6))
def test_smoothness_matches_brute_force(trace, window):
    assert mt.smoothness(trace, window) == pytest.approx(brute_smoothness(trace, window), abs=1e-9)


def test_smoothness_short_trace_rejected():
    with pytest.raises(ValueError):
        mt.smoothness([1.0, 2.0, 3.0], 3)
    with pytest.raises(ValueError):
        mt.smoothness(np.zeros(10), 1)
