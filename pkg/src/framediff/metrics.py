"""Toy Fréchet distance over fixed random-projection clip features, PSNR, loss smoothness."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import check_rng


@dataclass(frozen=True)
class FeatureSpec:
    projection: np.ndarray  # [m, D], orthonormal rows

    @classmethod
    def create(cls, input_dim: int, m: int = 16, seed: int = 0) -> "FeatureSpec":
        if not 1 <= m <= min(16, input_dim):
            raise ValueError(f"feature dimension m={m} must lie in [1, min(16, {input_dim})]")
        g = check_rng(seed).standard_normal((input_dim, m))
        q, r = np.linalg.qr(g)
        q = q * np.sign(np.diag(r))  # fix the QR sign ambiguity
        return cls(np.ascontiguousarray(q.T))

    @property
    def m(self) -> int:
        return self.projection.shape[0]

    def features(self, clips) -> np.ndarray:
        x = np.stack([np.asarray(c, dtype=np.float64).reshape(-1) for c in clips])
        if x.shape[1] != self.projection.shape[1]:
            raise ValueError(f"clip size {x.shape[1]} does not match projection input {self.projection.shape[1]}")
        return x @ self.projection.T


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def of(cls, feats: np.ndarray) -> "GaussianFit":
        cov = np.cov(feats, rowvar=False, ddof=1).reshape(feats.shape[1], feats.shape[1])
        return cls(feats.mean(axis=0), 0.5 * (cov + cov.T))


def sqrt_trace_product(a: np.ndarray, b: np.ndarray) -> float:
    """tr((A B)^{1/2}) for PSD A, B via the symmetric form A^{1/2} B A^{1/2}, eigenvalues floored at 0."""
    wa, va = np.linalg.eigh(a)
    ra = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    m = ra @ b @ ra
    w = np.linalg.eigvalsh(0.5 * (m + m.T))
    return float(np.sqrt(np.clip(w, 0.0, None)).sum())


def frechet_distance(fa: GaussianFit, fb: GaussianFit) -> float:
    diff = fa.mean - fb.mean
    tr = np.trace(fa.cov) + np.trace(fb.cov) - 2.0 * sqrt_trace_product(fa.cov, fb.cov)
    return float(diff @ diff + tr)


def toy_fvd(set_a, set_b, spec: FeatureSpec) -> float:
    set_a, set_b = list(set_a), list(set_b)
    need = spec.m + 1
    if len(set_a) < need or len(set_b) < need:
        raise ValueError(f"toy_fvd needs at least {need} clips per set, got {len(set_a)} and {len(set_b)}")
    shapes = {np.shape(c) for c in set_a + set_b}
    if len(shapes) != 1:
        raise ValueError(f"toy_fvd needs uniformly shaped clips, got {sorted(shapes)}")
    # sort rows so the result does not depend on the order clips arrive in
    fa = spec.features(set_a)
    fb = spec.features(set_b)
    fa = fa[np.lexsort(fa.T[::-1])]
    fb = fb[np.lexsort(fb.T[::-1])]
    return max(0.0, frechet_distance(GaussianFit.of(fa), GaussianFit.of(fb)))


def psnr(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)


def smoothness(trace, window: int = 50) -> float:
    """Variance of first differences inside each sliding window of ``window`` differences, averaged (lower is smoother)."""
    x = np.asarray(trace, dtype=np.float64)
    if window < 2 or len(x) <= window:
        raise ValueError(f"smoothness needs len(trace) > window >= 2, got {len(x)} and {window}")
    views = np.lib.stride_tricks.sliding_window_view(np.diff(x), window)
    return float(views.var(axis=1).mean())
