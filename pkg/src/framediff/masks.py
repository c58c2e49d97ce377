"""Condition masks (which frames the model may see) and loss masks.

Three training tasks share one dataset through condition masks:

* ``IPT`` keeps both end frames and hides one contiguous interior block;
* ``PDT`` hides a prefix or a suffix;
* ``GRT`` keeps frame 0 only and switches text guidance on.

Long clips are condensed by k-means over flattened frames: one
representative per cluster, kept in temporal order, with the loss on all of
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .spritegen import SpriteClip
from .validation import check_rng

TASKS = ("IPT", "PDT", "GRT")


@dataclass(frozen=True)
class ConditionMask:
    task: str
    keep: np.ndarray  # bool [N]
    text_active: bool

    def __len__(self):
        return len(self.keep)


def make_condition_mask(task: str, n: int, rng) -> ConditionMask:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    if n < 3:
        raise ValueError(f"condition masks need N >= 3 frames, got {n}")
    rng = check_rng(rng)
    keep = np.ones(n, dtype=bool)
    if task == "IPT":
        # uniform over all interior blocks [a, b], 1 <= a <= b <= n-2
        blocks = [(a, b) for a in range(1, n - 1) for b in range(a, n - 1)]
        a, b = blocks[rng.integers(len(blocks))]
        keep[a:b + 1] = False
        return ConditionMask(task, keep, False)
    if task == "PDT":
        choice = int(rng.integers(2 * (n - 1)))
        length = choice % (n - 1) + 1
        if choice < n - 1:
            keep[:length] = False
        else:
            keep[n - length:] = False
        return ConditionMask(task, keep, False)
    keep[1:] = False
    return ConditionMask(task, keep, True)


def apply_masks(frames: np.ndarray, cmask: ConditionMask):
    """Split a clip into zeroed-out guidance, its keep plane, and untouched targets."""
    frames = np.asarray(frames, dtype=np.float64)
    if len(cmask) != frames.shape[0]:
        raise ValueError(f"mask length {len(cmask)} != frame count {frames.shape[0]}")
    keep = cmask.keep.astype(np.float64)
    guidance = frames * keep[:, None, None, None]
    plane = np.broadcast_to(keep[:, None, None, None], frames.shape[:3] + (1,)).copy()
    return guidance, plane, frames.copy()


# ------------------------------------------------------------------ k-means

def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _wcss(x, labels, centers) -> float:
    diff = x - centers[labels]
    return float(np.einsum("nd,nd->", diff, diff))


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    for _ in range(1, k):
        d2 = _sq_dists(x, np.array(centers)).min(axis=1)
        total = d2.sum()
        if total <= 0.0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=d2 / total)
        centers.append(x[idx])
    return np.array(centers)


def _repair_empty(x, labels, centers, k):
    """Give every empty cluster the point farthest from its own centroid."""
    for j in range(k):
        if np.any(labels == j):
            continue
        counts = np.bincount(labels, minlength=k)
        donors = counts[labels] > 1
        d = np.where(donors, np.einsum("nd,nd->n", x - centers[labels], x - centers[labels]), -1.0)
        i = int(np.argmax(d))  # ties resolve to the lowest frame index
        labels[i] = j
        centers[j] = x[i]
    return labels


def _check_descent(trace, it):
    if len(trace) > 1 and trace[-1] > trace[-2] * (1 + 1e-12) + 1e-12:
        raise AssertionError(f"WCSS increased at iteration {it}: {trace[-2]} -> {trace[-1]}")


def _hartigan_pass(x, labels, centers) -> bool:
    """Move single points between clusters while that strictly lowers WCSS.

    Moving x from a (size n_a) to b (size n_b) changes WCSS by
    n_b/(n_b+1)|x-c_b|^2 - n_a/(n_a-1)|x-c_a|^2.  A partition that survives
    this pass is also a Lloyd fixed point.
    """
    k = len(centers)
    counts = np.bincount(labels, minlength=k).astype(np.float64)
    moved = False
    for i in range(len(x)):
        a = labels[i]
        if counts[a] <= 1:
            continue
        d = np.einsum("kd,kd->k", x[i] - centers, x[i] - centers)
        gain = counts / (counts + 1.0) * d
        gain[a] = np.inf
        b = int(np.argmin(gain))
        loss = counts[a] / (counts[a] - 1.0) * d[a]
        if gain[b] < loss - 1e-12 * max(1.0, loss):
            centers[a] = (centers[a] * counts[a] - x[i]) / (counts[a] - 1.0)
            centers[b] = (centers[b] * counts[b] + x[i]) / (counts[b] + 1.0)
            counts[a] -= 1.0
            counts[b] += 1.0
            labels[i] = b
            moved = True
    return moved


def lloyd(x: np.ndarray, centers: np.ndarray, max_iter: int = 50):
    """Lloyd iterations from ``centers``, polished by single-point transfers.

    Returns labels, centers, the per-iteration WCSS trace and the number of
    Lloyd iterations used.
    """
    k = len(centers)
    centers = centers.copy()
    labels = None
    trace = []
    it = 0
    while it < max_iter:
        it += 1
        new = _repair_empty(x, np.argmin(_sq_dists(x, centers), axis=1), centers, k)
        for j in range(k):
            centers[j] = x[new == j].mean(axis=0)
        trace.append(_wcss(x, new, centers))
        _check_descent(trace, it)
        if labels is not None and np.array_equal(new, labels):
            labels = new.copy()
            if not _hartigan_pass(x, labels, centers):
                return labels, centers, trace, it
            for j in range(k):  # recompute exactly to shed incremental roundoff
                centers[j] = x[labels == j].mean(axis=0)
            trace.append(_wcss(x, labels, centers))
            _check_descent(trace, it)
            continue
        labels = new
    return labels, centers, trace, it


class FrameKMeans(ClusterMixin, TransformerMixin, BaseEstimator):
    """Euclidean k-means with k-means++ seeding, specialised for short frame sets.

    Empty clusters are re-seeded from the point farthest from its centroid,
    so every cluster stays non-empty even for clips with repeated frames.

    Attributes
    ----------
    cluster_centers_, labels_, inertia_, n_iter_, wcss_trace_
        as in scikit-learn; ``wcss_trace_`` is the per-iteration objective of the
        best restart.
    representatives_ : frame index nearest each centroid (ties to the lowest
        index), sorted ascending.
    """

    def __init__(self, n_clusters: int = 3, max_iter: int = 50, n_init: int = 8, random_state=None):
        self.n_clusters = n_clusters
        self.max_iter = max_iter
        self.n_init = n_init
        self.random_state = random_state

    def fit(self, X, y=None):
        x = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        k = self.n_clusters
        if not 1 <= k <= len(x):
            raise ValueError(f"n_clusters={k} must lie in [1, {len(x)}]")
        rng = check_rng(self.random_state)
        best = None
        for _ in range(max(1, self.n_init)):
            labels, centers, trace, n_iter = lloyd(x, _kmeanspp(x, k, rng), self.max_iter)
            if best is None or trace[-1] < best[2][-1]:
                best = (labels, centers, trace, n_iter)
        labels, centers, trace, n_iter = best
        # cluster ids ordered by first frame occurrence
        order = np.argsort([np.flatnonzero(labels == j)[0] for j in range(k)], kind="stable")
        remap = np.empty(k, dtype=np.int64)
        remap[order] = np.arange(k)
        self.labels_ = remap[labels]
        self.cluster_centers_ = centers[order]
        self.inertia_ = trace[-1]
        self.wcss_trace_ = list(trace)
        self.n_iter_ = n_iter
        reps = []
        d = _sq_dists(x, self.cluster_centers_)
        for j in range(k):
            members = np.flatnonzero(self.labels_ == j)
            reps.append(int(members[np.argmin(d[members, j])]))
        self.representatives_ = np.array(sorted(reps), dtype=np.int64)
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        x = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return np.argmin(_sq_dists(x, self.cluster_centers_), axis=1)

    def transform(self, X):
        check_is_fitted(self, "cluster_centers_")
        x = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
        return np.sqrt(_sq_dists(x, self.cluster_centers_))


@dataclass(frozen=True)
class FrameClustering:
    k: int
    assignment: np.ndarray
    centroids: np.ndarray
    representatives: np.ndarray
    wcss: float
    wcss_trace: tuple
    frame_count: int


@dataclass(frozen=True)
class LossMask:
    weight: np.ndarray  # {0, 1} per frame

    @property
    def active(self) -> int:
        return int(self.weight.sum())


def cluster_frames(clip, k: int, rng, n_init: int = 8) -> FrameClustering:
    frames = clip.frames if isinstance(clip, SpriteClip) else np.asarray(clip)
    n = len(frames)
    if not 3 <= k <= n:
        raise ValueError(f"k={k} must satisfy 3 <= k <= N={n}; route short clips around clustering")
    km = FrameKMeans(n_clusters=k, n_init=n_init, random_state=check_rng(rng)).fit(frames)
    return FrameClustering(k, km.labels_, km.cluster_centers_, km.representatives_,
                           km.inertia_, tuple(km.wcss_trace_), n)


def condense_clip(clip: SpriteClip, clustering: FrameClustering):
    if clustering.frame_count != clip.frame_count or len(clustering.assignment) != clip.frame_count:
        raise ValueError(f"clustering built for {clustering.frame_count} frames, clip has {clip.frame_count}")
    reps = clustering.representatives
    condensed = SpriteClip(clip.frames[reps].copy(), clip.factors, clip.caption)
    return condensed, LossMask(np.ones(len(reps)))


def condense_to(clip: SpriteClip, n: int, rng):
    """Condense ``clip`` to ``n`` frames when longer; shorter or equal clips pass through."""
    if clip.frame_count <= n:
        return clip, LossMask(np.ones(clip.frame_count))
    return condense_clip(clip, cluster_frames(clip, n, rng))
