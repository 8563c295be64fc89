"""Embed -> reduce -> Gaussian-mixture cluster facts, with a hard size cap.

Everything here is deterministic given the config seed: the reducer, the
EM initialization, and the recursive cap-splitting all derive their
randomness from seeded generators.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import MissingEmbedding, TooFewPoints
from .model import BuildConfig, EmbeddingVector, Fact

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-6
EM_TOL = 1e-4
EM_MAX_ITER = 200
SGD_EPOCHS = 200
MAX_SPLIT_ATTEMPTS = 5
MAX_REPAIRS = 3

REDUCER_UMAP_LIKE = "umap_like"
REDUCER_PCA = "pca"


@dataclass(frozen=True)
class ReducedMatrix:
    rows: int
    cols: int
    data: np.ndarray
    reducer_kind: str
    degenerate: bool = False

    def __post_init__(self):
        if self.data.shape != (self.rows, self.cols):
            raise ValueError("data shape does not match rows/cols")
        if not np.isfinite(self.data).all():
            raise ValueError("reduced matrix contains NaN/Inf")


@dataclass(frozen=True)
class GmmModel:
    """Diagonal-covariance Gaussian mixture fitted by EM."""

    n_components: int
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    log_likelihood_trace: tuple[float, ...]

    def log_responsibilities(self, X: np.ndarray) -> tuple[np.ndarray, float]:
        """Per-point log posteriors and the total log-likelihood of X."""
        log_prob = _log_component_density(X, self.means, self.variances)
        log_prob = log_prob + np.log(np.maximum(self.weights, 1e-300))[None, :]
        lse = _logsumexp_rows(log_prob)
        return log_prob - lse[:, None], float(lse.sum())

    def responsibilities(self, X: np.ndarray) -> np.ndarray:
        log_resp, _ = self.log_responsibilities(X)
        return np.exp(log_resp)


@dataclass(frozen=True)
class ClusterAssignment:
    """A partition of items into clusters, each of size <= k."""

    labels: tuple[int, ...]
    clusters: dict[int, tuple[str, ...]]

    def sizes(self) -> list[int]:
        return [len(v) for v in self.clusters.values()]


def initial_cluster_count(n_facts: int, k: int) -> int:
    """Target component count at the lowest level: floor(n/k), clamped to >= 1."""
    if n_facts < 1:
        raise ValueError("n_facts must be >= 1")
    if k < 2:
        raise ValueError("k must be >= 2")
    return max(1, n_facts // k)


# -- dimensionality reduction -------------------------------------------------


def _as_matrix(vectors: list[EmbeddingVector]) -> np.ndarray:
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"vectors have mixed dims: {sorted(dims)}")
    return np.array([v.values for v in vectors], dtype=np.float64)


def _pca(X: np.ndarray, d: int) -> np.ndarray:
    centered = X - X.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:d]
    # Deterministic sign convention: largest-|loading| coordinate positive.
    for row in comps:
        j = int(np.argmax(np.abs(row)))
        if row[j] < 0:
            row *= -1.0
    return centered @ comps.T


def _smooth_knn_weights(dist: np.ndarray, rho: np.ndarray, k: int) -> np.ndarray:
    """Per-point kernel bandwidths via binary search, then edge weights.

    dist: (n, k) neighbor distances sorted ascending; rho: (n,) distance to
    the nearest neighbor. Solves sum_j exp(-max(0, d_ij - rho_i)/sigma_i)
    = log2(k) for sigma_i.
    """
    n = dist.shape[0]
    target = max(np.log2(k), 1e-3)
    shifted = np.maximum(dist - rho[:, None], 0.0)
    lo = np.zeros(n)
    hi = np.full(n, np.inf)
    sigma = np.ones(n)
    for _ in range(64):
        val = np.exp(-shifted / np.maximum(sigma[:, None], VARIANCE_FLOOR)).sum(axis=1)
        too_high = val > target
        hi = np.where(too_high, sigma, hi)
        lo = np.where(too_high, lo, sigma)
        sigma = np.where(np.isinf(hi), np.where(too_high, sigma / 2.0, sigma * 2.0), (lo + hi) / 2.0)
    sigma = np.maximum(sigma, VARIANCE_FLOOR)
    return np.exp(-shifted / sigma[:, None])


def _umap_like(X: np.ndarray, d: int, seed: int) -> np.ndarray:
    """Neighbor-graph embedding: k-NN graph, fuzzy union, seeded SGD layout."""
    n = X.shape[0]
    rng = np.random.default_rng(seed)
    k = min(15, n - 1)

    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * (X @ X.T), 0.0)
    dist = np.sqrt(d2)

    order = np.argsort(dist, axis=1, kind="stable")
    neighbors = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        row = order[i]
        neighbors[i] = row[row != i][:k]
    nbr_dist = np.take_along_axis(dist, neighbors, axis=1)
    rho = nbr_dist[:, 0]

    weights = _smooth_knn_weights(nbr_dist, rho, k)

    W = np.zeros((n, n))
    rows = np.repeat(np.arange(n), k)
    W[rows, neighbors.ravel()] = weights.ravel()
    W = W + W.T - W * W.T  # fuzzy set union

    ei, ej = np.nonzero(np.triu(W, 1))
    ew = W[ei, ej]
    if len(ei) == 0:  # fully disconnected; fall back to a plain projection
        return _pca(X, d)

    Y = _pca(X, d)
    scale = np.abs(Y).max()
    if scale > 0:
        Y = Y / scale * 10.0

    eps = 1e-3
    for epoch in range(SGD_EPOCHS):
        lr = 1.0 - epoch / SGD_EPOCHS
        diff = Y[ei] - Y[ej]
        dist2 = (diff * diff).sum(axis=1)
        att = np.clip(-2.0 / (1.0 + dist2), -4.0, 4.0) * ew
        step = lr * att[:, None] * diff
        np.add.at(Y, ei, step)
        np.add.at(Y, ej, -step)

        neg = rng.integers(0, n, size=len(ei))
        diff_n = Y[ei] - Y[neg]
        dist2_n = (diff_n * diff_n).sum(axis=1)
        rep = np.clip(2.0 / ((eps + dist2_n) * (1.0 + dist2_n)), 0.0, 4.0) * ew
        np.add.at(Y, ei, lr * rep[:, None] * diff_n)
    return Y


def reduce_embeddings(vectors: list[EmbeddingVector], cfg: BuildConfig) -> ReducedMatrix:
    """Project embeddings to cfg.reducer_dims (capped at n-1 and input dim)."""
    n = len(vectors)
    if n < 2:
        raise TooFewPoints(n)
    X = _as_matrix(vectors)
    d = min(cfg.reducer_dims, n - 1, X.shape[1])

    if np.all(X == X[0]):
        logger.warning("all %d input vectors identical; returning degenerate zero matrix", n)
        return ReducedMatrix(n, d, np.zeros((n, d)), cfg.reducer_kind, degenerate=True)

    if cfg.reducer_kind == REDUCER_PCA:
        data = _pca(X, d)
    else:
        data = _umap_like(X, d, seed=cfg.seed)
    return ReducedMatrix(n, d, data, cfg.reducer_kind)


# -- Gaussian mixture ----------------------------------------------------------


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))).ravel()


def _log_component_density(X: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    n, d = X.shape
    inv = 1.0 / variances  # (k, d)
    logdet = np.log(variances).sum(axis=1)  # (k,)
    quad = (X * X) @ inv.T - 2.0 * X @ (means * inv).T + ((means * means) * inv).sum(axis=1)[None, :]
    return -0.5 * (d * math.log(2.0 * math.pi) + logdet[None, :] + quad)


def _kmeanspp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[int(rng.integers(n))]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 1e-12:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers[c] = X[idx]
        d2 = np.minimum(d2, ((X - centers[c]) ** 2).sum(axis=1))
    return centers


def fit_gmm(m, n_components: int, seed: int) -> GmmModel:
    """EM with k-means++ seeding and diagonal covariances.

    Converges when |delta log-likelihood| < 1e-4 or after 200 iterations.
    A collapsed component is re-initialized at the farthest point from its
    mean (at most 3 repairs); the reported trace restarts after a repair so
    it is non-decreasing.
    """
    X = m.data if isinstance(m, ReducedMatrix) else np.asarray(m, dtype=np.float64)
    n, d = X.shape
    if not 1 <= n_components <= n:
        raise ValueError(f"n_components must be in [1, {n}], got {n_components}")

    rng = np.random.default_rng(seed)
    global_var = np.maximum(X.var(axis=0), VARIANCE_FLOOR)
    means = _kmeanspp_init(X, n_components, rng)
    variances = np.tile(global_var, (n_components, 1))
    weights = np.full(n_components, 1.0 / n_components)

    trace: list[float] = []
    prev_ll = -np.inf
    repairs = 0
    for _ in range(EM_MAX_ITER):
        log_prob = _log_component_density(X, means, variances) + np.log(np.maximum(weights, 1e-300))[None, :]
        lse = _logsumexp_rows(log_prob)
        ll = float(lse.sum())
        resp = np.exp(log_prob - lse[:, None])
        nk = resp.sum(axis=0)

        collapsed = nk < 1e-10
        if collapsed.any() and repairs < MAX_REPAIRS:
            repairs += 1
            for c in np.nonzero(collapsed)[0]:
                far = int(np.argmax(((X - means[c]) ** 2).sum(axis=1)))
                means[c] = X[far]
                variances[c] = global_var
                weights[c] = 1.0 / n
            weights = weights / weights.sum()
            trace.clear()
            prev_ll = -np.inf
            continue

        trace.append(ll)
        if abs(ll - prev_ll) < EM_TOL:
            break
        prev_ll = ll

        nk_safe = np.maximum(nk, 1e-300)
        weights = nk / n
        means = (resp.T @ X) / nk_safe[:, None]
        ex2 = (resp.T @ (X * X)) / nk_safe[:, None]
        variances = np.maximum(ex2 - means * means, VARIANCE_FLOOR)

    return GmmModel(
        n_components=n_components,
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood_trace=tuple(trace),
    )


# -- capped assignment ----------------------------------------------------------


def _round_robin(indices: list[int], parts: int) -> list[list[int]]:
    out: list[list[int]] = [[] for _ in range(parts)]
    for pos, idx in enumerate(indices):
        out[pos % parts].append(idx)
    return out


def _split_oversized(X: np.ndarray, indices: list[int], k: int, seed: int, depth: int = 0) -> list[list[int]]:
    """Recursively split a cluster until every part has <= k members.

    Tries a GMM re-fit with ceil(size/k) components; if five attempts fail
    to strictly shrink the largest part, falls back to round-robin (which
    always yields balanced parts of size <= k).
    """
    size = len(indices)
    if size <= k:
        return [indices]
    target = math.ceil(size / k)
    sub = X[indices]
    parts: list[list[int]] | None = None
    for attempt in range(MAX_SPLIT_ATTEMPTS):
        model = fit_gmm(sub, min(target, size), seed + 7919 * depth + 13 * attempt + 1)
        labels = np.argmax(model.responsibilities(sub), axis=1)
        groups: dict[int, list[int]] = {}
        for local, lab in enumerate(labels):
            groups.setdefault(int(lab), []).append(indices[local])
        candidate = [g for g in groups.values() if g]
        if len(candidate) >= 2 and max(len(g) for g in candidate) < size:
            parts = candidate
            break
    if parts is None:
        parts = _round_robin(indices, target)

    out: list[list[int]] = []
    for part in parts:
        out.extend(_split_oversized(X, part, k, seed, depth + 1))
    return out


def assign_with_cap(model: GmmModel, m, k: int, item_ids: list[str] | None = None, seed: int = 0) -> ClusterAssignment:
    """Argmax-posterior assignment followed by recursive cap enforcement.

    Posterior ties resolve to the lowest component id. Final clusters are
    renumbered by their smallest member index, so the result is stable for
    a fixed seed.
    """
    X = m.data if isinstance(m, ReducedMatrix) else np.asarray(m, dtype=np.float64)
    n = X.shape[0]
    ids = item_ids if item_ids is not None else [str(i) for i in range(n)]
    if len(ids) != n:
        raise ValueError("item_ids length does not match data")

    labels = np.argmax(model.responsibilities(X), axis=1)
    initial: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        initial.setdefault(int(lab), []).append(i)

    final_groups: list[list[int]] = []
    for lab in sorted(initial):
        final_groups.extend(_split_oversized(X, initial[lab], k, seed))

    final_groups.sort(key=lambda g: min(g))
    out_labels = [0] * n
    clusters: dict[int, tuple[str, ...]] = {}
    for cid, group in enumerate(final_groups):
        clusters[cid] = tuple(ids[i] for i in group)
        for i in group:
            out_labels[i] = cid
    return ClusterAssignment(labels=tuple(out_labels), clusters=clusters)


# -- end-to-end ------------------------------------------------------------------


def cluster_vectors(vectors: list[EmbeddingVector], cfg: BuildConfig, item_ids: list[str]) -> ClusterAssignment:
    """reduce -> fit_gmm(H0 components) -> capped assignment."""
    n = len(vectors)
    if n != len(item_ids):
        raise ValueError("vectors and item_ids length mismatch")
    if n == 1:
        return ClusterAssignment(labels=(0,), clusters={0: (item_ids[0],)})
    reduced = reduce_embeddings(vectors, cfg)
    h0 = min(initial_cluster_count(n, cfg.k), n)
    model = fit_gmm(reduced, h0, seed=cfg.seed + 1)
    return assign_with_cap(model, reduced, cfg.k, item_ids=item_ids, seed=cfg.seed + 2)


def cluster_facts(facts: list[Fact], cfg: BuildConfig) -> ClusterAssignment:
    """Cluster embedded facts; a single fact short-circuits to one singleton."""
    if not facts:
        raise ValueError("cluster_facts requires at least one fact")
    for f in facts:
        if f.embedding is None:
            raise MissingEmbedding(f.fact_id)
    return cluster_vectors([f.embedding for f in facts], cfg, [f.fact_id for f in facts])
