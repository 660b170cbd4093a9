"""Soft-layout to hard-layout conversion.

Window stacking, spherical K-means, background election, recursive
refinement of subject clusters and Hungarian instance tracking. Ties are
broken toward the lowest index (or lexicographically smallest pixel) so
every result is a deterministic function of its inputs and seed.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Union

import numpy as np

from .backbone import CrossAttnMaps
from .common import ClusterConfig, KMeansMetric
from .layout import HardLayout, LayoutHistory
from .scene import PromptSpec
from .utils import derive_seed, philox

__all__ = ['KMeansResult', 'stack_window', 'spherical_kmeans',
           'select_background', 'cluster_variance', 'refine_cluster',
           'hungarian', 'pad_square', 'iou_matrix', 'assign_initial_labels',
           'relabel_temporal', 'harden']

_log = logging.getLogger(__name__)

NORM_EPS = 1e-12


def _unit(X: np.ndarray) -> np.ndarray:
    return X / np.maximum(np.linalg.norm(X, axis=-1, keepdims=True), NORM_EPS)


def stack_window(history: LayoutHistory) -> np.ndarray:
    """Concatenate the normalized soft-layouts of the window, newest first."""
    if len(history) == 0:
        raise ValueError('History is empty')
    return np.concatenate([_unit(S) for _, S in history], axis=-1)


@dataclass
class KMeansResult:
    """Outcome of the best K-means restart.

    Attributes:
        labels: Cluster index per point.
        centroids: k×D centroids (unit norm in cosine mode).
        objective: Mean distance of points to their centroid.
        history: Objective after each assignment of the winning restart.
        restart: Index of the winning restart.
    """
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    restart: int = 0


class _Metric:
    """Distances, seeding weights and centroid updates of one K-means mode."""
    def __init__(self, metric: KMeansMetric) -> None:
        self.cosine = metric == KMeansMetric.COSINE

    def prepare(self, X: np.ndarray) -> np.ndarray:
        return _unit(X) if self.cosine else np.asarray(X, dtype=np.float64)

    def distances(self, X: np.ndarray, C: np.ndarray) -> np.ndarray:
        if self.cosine:
            return np.maximum(1.0 - X @ C.T, 0.0)
        d2 = (np.sum(X * X, axis=1)[:, None] - 2.0 * X @ C.T
              + np.sum(C * C, axis=1)[None, :])
        return np.maximum(d2, 0.0)

    def seed_weight(self, d: np.ndarray) -> np.ndarray:
        return d * d if self.cosine else d

    def update(self, X: np.ndarray, labels: np.ndarray,
               C: np.ndarray) -> np.ndarray:
        k = C.shape[0]
        one_hot = np.zeros((k, X.shape[0]))
        one_hot[labels, np.arange(X.shape[0])] = 1.0
        totals = one_hot @ X
        counts = one_hot.sum(axis=1)
        if self.cosine:
            scale = np.linalg.norm(totals, axis=1)
            keep = (counts > 0) & (scale > NORM_EPS)
        else:
            scale = counts
            keep = counts > 0
        out = C.copy()
        out[keep] = totals[keep] / scale[keep, None]
        return out


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator,
               metric: _Metric) -> np.ndarray:
    n = X.shape[0]
    chosen = [int(rng.integers(n))]
    closest = metric.distances(X, X[chosen]).min(axis=1)
    while len(chosen) < k:
        weight = metric.seed_weight(closest)
        total = weight.sum()
        if total <= 0:
            pick = int(rng.integers(n))
        else:
            pick = int(rng.choice(n, p=weight / total))
        chosen.append(pick)
        closest = np.minimum(closest, metric.distances(X, X[[pick]])[:, 0])
    return X[chosen].copy()


def _assign(X: np.ndarray, C: np.ndarray, metric: _Metric) -> tuple:
    D = metric.distances(X, C)
    labels = np.argmin(D, axis=1)
    return labels, D


def _fix_empty(X: np.ndarray, labels: np.ndarray, C: np.ndarray,
               D: np.ndarray) -> None:
    """Give each empty cluster the point farthest from its own centroid.

    Points are only taken from clusters holding more than one point.
    Modifies `labels` and `C` in place.
    """
    k = C.shape[0]
    for e in range(k):
        sizes = np.bincount(labels, minlength=k)
        if sizes[e] > 0:
            continue
        own = D[np.arange(labels.size), labels]
        candidates = np.flatnonzero(sizes[labels] > 1)
        if candidates.size == 0:
            break
        far = candidates[np.argmax(own[candidates])]
        labels[far] = e
        C[e] = X[far]
        D[far, e] = 0.0


def _objective(D: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(D[np.arange(labels.size), labels]))


def spherical_kmeans(points: np.ndarray,
                     k: int,
                     seed: int,
                     cfg: Optional[ClusterConfig] = None) -> KMeansResult:
    """Cosine-distance K-means with k-means++ seeding and restarts.

    Points and centroids are unit-normalized; the objective is the mean of
    `1 - cos(point, centroid)`. The restart with the lowest objective wins
    (lowest restart index on ties). With `metric=EUCLIDEAN` this is plain
    squared-Euclidean K-means.

    Raises:
        ValueError: If there are fewer points than clusters.
    """
    cfg = cfg or ClusterConfig()
    X0 = np.asarray(points, dtype=np.float64)
    if X0.ndim != 2:
        raise ValueError('Points must be an n×D matrix')
    n = X0.shape[0]
    if k < 1 or n < k:
        raise ValueError(f'Cannot form {k} clusters from {n} points')
    metric = _Metric(cfg.metric)
    X = metric.prepare(X0)
    best: Optional[KMeansResult] = None
    for restart in range(cfg.kmeans_restarts):
        rng = philox(seed, 'kmeans', restart)
        C = _kmeans_pp(X, k, rng, metric)
        labels, D = _assign(X, C, metric)
        _fix_empty(X, labels, C, D)
        history = [_objective(D, labels)]
        for _ in range(cfg.kmeans_max_iters):
            C = metric.update(X, labels, C)
            new_labels, D = _assign(X, C, metric)
            _fix_empty(X, new_labels, C, D)
            history.append(_objective(D, new_labels))
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        result = KMeansResult(labels, C, history[-1], history, restart)
        _log.debug('K-means restart %d: objective %.6f after %d iterations',
                   restart, result.objective, len(history) - 1)
        if best is None or result.objective < best.objective:
            best = result
    return best


def select_background(labels: np.ndarray, n_clusters: Optional[int] = None) -> int:
    """The cluster covering the most pixels of the 1-pixel border ring."""
    labels = np.asarray(labels)
    ring = np.ones(labels.shape, dtype=bool)
    ring[1:-1, 1:-1] = False
    n_clusters = n_clusters or int(labels.max()) + 1
    counts = np.bincount(labels[ring].ravel(), minlength=n_clusters)
    return int(np.argmax(counts))


def cluster_variance(points: np.ndarray) -> float:
    """Mean squared cosine distance to the normalized mean direction."""
    X = _unit(np.asarray(points, dtype=np.float64))
    direction = _unit(X.mean(axis=0))
    return float(np.mean((1.0 - X @ direction) ** 2))


def refine_cluster(points: np.ndarray,
                   pixel_ids: np.ndarray,
                   cfg: Optional[ClusterConfig] = None,
                   seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Split off minority sub-clusters until the cluster is tight.

    While the variance exceeds the threshold the cluster is split in two;
    the larger half is kept (on equal sizes, the half holding the smallest
    pixel id) and the other half is dropped. Splits use `refine_restarts`
    K-means restarts.

    Returns:
        Kept and dropped pixel ids.
    """
    cfg = cfg or ClusterConfig()
    kept = np.asarray(pixel_ids)
    X = np.asarray(points, dtype=np.float64)
    if kept.size == 0:
        raise ValueError('Cannot refine an empty cluster')
    split_cfg = replace(cfg, kmeans_restarts=cfg.refine_restarts)
    dropped: list[np.ndarray] = []
    splits = 0
    while kept.size > 1 and cluster_variance(X) >= cfg.variance_threshold:
        split = spherical_kmeans(X, 2, derive_seed(seed, 'refine', splits), split_cfg)
        first = split.labels == 0
        n_first, n_second = int(first.sum()), int((~first).sum())
        if n_first == 0 or n_second == 0:
            break
        keep_first = (n_first > n_second or
                      (n_first == n_second and
                       kept[first].min() < kept[~first].min()))
        keep = first if keep_first else ~first
        dropped.append(kept[~keep])
        kept, X = kept[keep], X[keep]
        splits += 1
        _log.debug('Refinement split %d kept %d dropped %d', splits,
                   kept.size, dropped[-1].size)
    out = np.concatenate(dropped) if dropped else np.zeros(0, dtype=kept.dtype)
    return kept, np.sort(out)


def pad_square(score: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Pad a rectangular matrix with `fill` rows or columns to square."""
    score = np.asarray(score, dtype=np.float64)
    n = max(score.shape) if score.ndim == 2 else 0
    out = np.full((n, n), fill)
    out[:score.shape[0], :score.shape[1]] = score
    return out


def _has_perfect_matching(tight: np.ndarray, rows: list[int],
                          cols: list[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r: int, seen: set) -> bool:
        for c in cols:
            if tight[r, c] and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian(score: np.ndarray, maximize: bool = False) -> tuple[list[int], float]:
    """Optimal assignment of rows to columns of a square matrix.

    Potentials give an optimal dual in O(n³); among the optimal
    permutations (all supported on tight edges) the lexicographically
    smallest is then chosen greedily.

    Returns:
        `perm` with `perm[row] = column`, and the total score.

    Raises:
        ValueError: If the matrix is not square or has non-finite entries.
    """
    score = np.asarray(score, dtype=np.float64)
    if score.ndim != 2 or score.shape[0] != score.shape[1]:
        raise ValueError('Score matrix must be square')
    if not np.all(np.isfinite(score)):
        raise ValueError('Score matrix has NaN or infinite entries')
    n = score.shape[0]
    if n == 0:
        return [], 0.0
    cost = -score if maximize else score
    INF = float('inf')
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=int)
    way = np.zeros(n + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    reduced = cost - u[1:, None] - v[None, 1:]
    tol = 1e-9 * max(1.0, float(np.max(np.abs(cost))))
    tight = reduced <= tol
    perm: list[int] = []
    free = list(range(n))
    for row in range(n):
        for col in free:
            if not tight[row, col]:
                continue
            rest = [c for c in free if c != col]
            if _has_perfect_matching(tight, list(range(row + 1, n)), rest):
                perm.append(col)
                free = rest
                break
        else:
            raise ArithmeticError('No tight assignment found')
    total = float(sum(score[r, c] for r, c in enumerate(perm)))
    return perm, total


def iou_matrix(a: np.ndarray,
               b: np.ndarray,
               a_labels: list[int],
               b_labels: list[int]) -> np.ndarray:
    """IoU of every label pair between two label maps of the same grid."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if a.shape != b.shape:
        raise ValueError('Label maps must share a grid')
    out = np.zeros((len(a_labels), len(b_labels)))
    for i, la in enumerate(a_labels):
        ma = a == la
        for j, lb in enumerate(b_labels):
            mb = b == lb
            union = np.count_nonzero(ma | mb)
            if union:
                out[i, j] = np.count_nonzero(ma & mb) / union
    return out


def _raw_labels(layout: Union[HardLayout, np.ndarray]) -> np.ndarray:
    return layout.labels if isinstance(layout, HardLayout) else np.asarray(layout)


def assign_initial_labels(clusters: Union[HardLayout, np.ndarray],
                          attn: CrossAttnMaps,
                          prompt: PromptSpec) -> HardLayout:
    """Tag subject clusters with instances maximizing in-cluster attention.

    The cluster assigned to instance i is relabeled i+1. Clusters left
    without an instance join the background; instances left without a
    cluster are reported as neglected.

    Raises:
        ValueError: If the attention maps carry no mass.
    """
    raw = _raw_labels(clusters)
    k = prompt.k
    if attn.k != k:
        raise ValueError(f'Expected {k} attention maps got {attn.k}')
    if not np.any(attn.A > 0):
        raise ValueError('Attention is zero everywhere')
    subjects = [int(c) for c in np.unique(raw) if c > 0]
    score = np.zeros((k, len(subjects)))
    for c, label in enumerate(subjects):
        score[:, c] = attn.A[:, raw == label].sum(axis=1)
    perm, _ = hungarian(pad_square(score), maximize=True)
    labels = np.zeros(raw.shape, dtype=np.int64)
    tags: dict[int, int] = {}
    for inst in range(k):
        c = perm[inst]
        if c < len(subjects):
            labels[raw == subjects[c]] = inst + 1
            tags[inst + 1] = inst
    untagged = [subjects[c] for c in range(len(subjects)) if c not in perm[:k]]
    if untagged:
        _log.warning('Merging untagged clusters %s into background', untagged)
    layout = HardLayout(labels, k, instance_tags=tags)
    missing = layout.missing_instances()
    if missing:
        _log.warning('Instances %s have no cluster', missing)
    return layout


def relabel_temporal(new_raw: Union[HardLayout, np.ndarray],
                     prev: HardLayout) -> HardLayout:
    """Relabel subject clusters to maximize IoU with the previous layout.

    Background stays 0 and every subject cluster keeps its pixels under the
    slot it is matched to. Tags are carried forward from `prev`; a cluster
    matched to an untagged slot stays untagged.
    """
    raw = _raw_labels(new_raw)
    if raw.shape != prev.shape:
        raise ValueError('Layouts must share a grid')
    k = prev.k
    subjects = [int(c) for c in np.unique(raw) if c > 0]
    if len(subjects) > k:
        raise ValueError(f'{len(subjects)} clusters exceed {k} subject slots')
    slots = list(range(1, k + 1))
    score = iou_matrix(raw, prev.labels, subjects, slots)
    perm, _ = hungarian(pad_square(score), maximize=True)
    tags = prev.instance_tags
    labels = np.zeros(raw.shape, dtype=np.int64)
    new_tags: dict[int, int] = {}
    for c, label in enumerate(subjects):
        slot = slots[perm[c]]
        labels[raw == label] = slot
        if slot in tags:
            new_tags[slot] = tags[slot]
        else:
            _log.debug('Cluster matched to untagged slot %d stays untagged', slot)
    return HardLayout(labels, k, instance_tags=new_tags)


def harden(history: LayoutHistory,
           attn: CrossAttnMaps,
           prompt: PromptSpec,
           t: int,
           T: int,
           cfg: Optional[ClusterConfig] = None,
           seed: int = 0) -> HardLayout:
    """Cluster the soft-layout window into background and k subjects.

    Uses `history.previous` as M^{t+1}; the first hardening (t == T or no
    previous layout) tags clusters from the attention maps instead.
    """
    cfg = cfg or ClusterConfig()
    if history.latest_t != t:
        raise ValueError(f'History does not hold the soft-layout of t={t}')
    stacked = stack_window(history)
    height, width, depth = stacked.shape
    X = stacked.reshape(height * width, depth)
    k = prompt.k
    km = spherical_kmeans(X, k + 1, derive_seed(seed, 'harden', t), cfg)
    assignments = km.labels.reshape(height, width)
    background = select_background(assignments, k + 1)
    raw = np.zeros((height, width), dtype=np.int64)
    label = 0
    for c in range(k + 1):
        if c == background:
            continue
        label += 1
        ids = np.flatnonzero(km.labels == c)
        if ids.size == 0:
            continue
        kept, dropped = refine_cluster(X[ids], ids, cfg,
                                       derive_seed(seed, 'refine', t, c))
        raw.flat[kept] = label
        if dropped.size:
            _log.debug('t=%d cluster %d dropped %d pixels to background',
                       t, c, dropped.size)
    if t == T or history.previous is None:
        layout = assign_initial_labels(raw, attn, prompt)
    else:
        layout = relabel_temporal(raw, history.previous)
    layout.t = t
    return layout
