"""Density clustering, reference agents, and soft pseudo-labels.

Soft labels are a softmax over agent/feature dot products: the probability
that a feature belongs to class m is exp(a_m . f) / sum_i exp(a_i . f).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

NOISE = -1


class ClusterError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterAssignment:
    """Per-sample cluster ids; NOISE (-1) marks unassigned samples."""

    labels: np.ndarray  # int array, shape (N,)
    n_clusters: int

    def __post_init__(self):
        labels = np.asarray(self.labels, dtype=np.int64)
        object.__setattr__(self, "labels", labels)
        labels.setflags(write=False)
        non_noise = labels[labels != NOISE]
        if non_noise.size and (non_noise.min() < 0 or non_noise.max() >= self.n_clusters):
            raise ClusterError("cluster label out of range")
        present = set(np.unique(non_noise).tolist())
        if present != set(range(self.n_clusters)):
            raise ClusterError("every cluster id in [0, n_clusters) must have a member")

    def members(self, cluster: int) -> np.ndarray:
        return np.flatnonzero(self.labels == cluster)


@dataclass(frozen=True)
class AgentBank:
    """One unit-norm representative vector per cluster."""

    agents: np.ndarray  # shape (M, D)

    def __post_init__(self):
        agents = np.asarray(self.agents, dtype=np.float64)
        object.__setattr__(self, "agents", agents)
        agents.setflags(write=False)
        norms = np.linalg.norm(agents, axis=1)
        if agents.shape[0] and not np.allclose(norms, 1.0, atol=1e-9):
            raise ClusterError("agents must be unit vectors")

    def __len__(self) -> int:
        return self.agents.shape[0]


@dataclass(frozen=True)
class SoftLabel:
    probs: np.ndarray
    top_class: int
    top_prob: float


def l2_normalize(features: np.ndarray) -> np.ndarray:
    """Row-normalize to unit L2 norm; rejects zero rows."""
    features = np.asarray(features, dtype=np.float64)
    single = features.ndim == 1
    mat = features[None, :] if single else features
    norms = np.linalg.norm(mat, axis=1)
    zero_rows = np.flatnonzero(norms == 0.0)
    if zero_rows.size:
        raise ClusterError(f"zero vector at row {int(zero_rows[0])}")
    out = mat / norms[:, None]
    return out[0] if single else out


def dbscan(features: np.ndarray, eps: float, min_pts: int) -> ClusterAssignment:
    """Density clustering with L2 distance.

    Neighborhood counts include the point itself.  Clusters are discovered
    in sample order; a border point joins the earliest-discovered cluster
    among its core neighbors, which makes the result deterministic.
    """
    if eps <= 0:
        raise ClusterError(f"eps must be > 0, got {eps}")
    if min_pts < 1:
        raise ClusterError(f"min_pts must be >= 1, got {min_pts}")
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return ClusterAssignment(labels=labels, n_clusters=0)

    # exact pairwise distances; N is small at desk scale
    sq = np.sum(features**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (features @ features.T)
    np.maximum(d2, 0.0, out=d2)
    adj = d2 <= eps * eps
    neighbor_counts = adj.sum(axis=1)
    is_core = neighbor_counts >= min_pts

    cluster = 0
    for start in range(n):
        if labels[start] != NOISE or not is_core[start]:
            continue
        # expand one cluster: queue of core points whose neighborhoods to absorb
        labels[start] = cluster
        queue = [start]
        while queue:
            point = queue.pop()
            for nb in np.flatnonzero(adj[point]):
                if labels[nb] != NOISE:
                    continue
                labels[nb] = cluster
                if is_core[nb]:
                    queue.append(nb)
        cluster += 1
    return ClusterAssignment(labels=labels, n_clusters=cluster)


def kmeans(features: np.ndarray, k: int, seed: int, max_iter: int = 100) -> ClusterAssignment:
    """Lloyd iterations from a k-means++ start; runs to assignment fixpoint."""
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if k > n:
        raise ClusterError(f"k={k} exceeds sample count {n}")
    if k < 1:
        raise ClusterError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(seed)

    # k-means++ seeding: D^2-weighted draws
    centroids = np.empty((k, features.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = features[first]
    closest_sq = np.sum((features - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = closest_sq.sum()
        if total == 0.0:
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest_sq / total))
        centroids[j] = features[idx]
        closest_sq = np.minimum(closest_sq, np.sum((features - centroids[j]) ** 2, axis=1))

    labels = np.full(n, -1, dtype=np.int64)
    for _ in range(max_iter):
        dists = np.linalg.norm(features[:, None, :] - centroids[None, :, :], axis=2)
        new_labels = np.argmin(dists, axis=1)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        forced: list[int] = []
        for j in range(k):
            mask = labels == j
            if np.any(mask):
                centroids[j] = features[mask].mean(axis=0)
            else:
                # re-seed an empty cluster from the point farthest from its centroid
                per_point = dists[np.arange(n), labels].copy()
                per_point[forced] = -np.inf
                far = int(np.argmax(per_point))
                centroids[j] = features[far]
                labels[far] = j
                forced.append(far)
    return ClusterAssignment(labels=labels, n_clusters=k)


def compute_agents(features: np.ndarray, assignment: ClusterAssignment) -> AgentBank:
    """Normalized mean of each cluster's member features; noise is excluded."""
    features = np.asarray(features, dtype=np.float64)
    if assignment.n_clusters == 0:
        raise ClusterError("no clusters")
    agents = np.empty((assignment.n_clusters, features.shape[1]))
    for m in range(assignment.n_clusters):
        mean = features[assignment.members(m)].mean(axis=0)
        norm = np.linalg.norm(mean)
        if norm == 0.0:
            raise ClusterError(f"cluster {m} has all-zero mean")
        agents[m] = mean / norm
    return AgentBank(agents=agents)


def soft_labels(feature: np.ndarray, agents: AgentBank, temperature: float = 1.0) -> SoftLabel:
    """Softmax over agent dot products, max-subtracted for overflow safety."""
    if len(agents) == 0:
        raise ClusterError("empty agent bank")
    probs = soft_label_matrix(np.asarray(feature, dtype=np.float64)[None, :], agents, temperature)[0]
    top = int(np.argmax(probs))
    return SoftLabel(probs=probs, top_class=top, top_prob=float(probs[top]))


def soft_label_matrix(features: np.ndarray, agents: AgentBank, temperature: float = 1.0) -> np.ndarray:
    """Row-wise soft labels for a feature matrix; returns (N, M) probabilities."""
    if len(agents) == 0:
        raise ClusterError("empty agent bank")
    if temperature <= 0:
        raise ClusterError(f"temperature must be > 0, got {temperature}")
    logits = (features @ agents.agents.T) / temperature
    logits -= logits.max(axis=1, keepdims=True)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=1, keepdims=True)
    return logits
