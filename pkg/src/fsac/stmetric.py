"""Spatial-temporal distances and triplet mining within mini-batches.

The spatial-temporal distance between two appearances is a capped frame-index
difference plus a flat penalty when they share a frame:

    st(i, j) = min(sigma, |k_i - k_j|) + eta * [k_i == k_j]   (same book)
    st(i, j) = sigma                                          (different books)

Mining adds this term to the feature L2 distance to pick positives; negatives
depend on the mode (see ``MiningMode``).  The triplet loss itself stays on
pure L2 distances; the spatial-temporal terms steer only the pair search.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .data import Sample


@dataclass(frozen=True)
class STParams:
    """sigma: frame-difference cap; eta: same-frame penalty."""

    sigma: float = 100.0
    eta: float = 1000.0

    def __post_init__(self):
        if not (np.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        if not (np.isfinite(self.eta) and self.eta >= 0):
            raise ValueError(f"eta must be finite and >= 0, got {self.eta}")


class MiningMode(str, Enum):
    # negatives by smallest total distance, same rule as positives
    PAPER_LITERAL = "paper-literal"
    # same-frame different-label candidates become preferred hard negatives
    FRAME_AWARE = "frame-aware"


@dataclass(frozen=True)
class TripletSelection:
    """Per-anchor (positive, negative) batch indices; None when no candidate."""

    pairs: tuple[tuple[int, int] | None, ...]


def st_distance(sample_i: Sample, sample_j: Sample, params: STParams) -> float:
    """Spatial-temporal distance; cross-book pairs are capped at sigma."""
    if sample_i.book_id != sample_j.book_id:
        return params.sigma
    dk = abs(sample_i.frame_index - sample_j.frame_index)
    penalty = params.eta if dk == 0 else 0.0
    return min(params.sigma, float(dk)) + penalty


def total_distance(feat_i: np.ndarray, feat_j: np.ndarray, st: float) -> float:
    """Feature L2 distance plus the spatial-temporal term."""
    feat_i = np.asarray(feat_i, dtype=np.float64)
    feat_j = np.asarray(feat_j, dtype=np.float64)
    if feat_i.shape != feat_j.shape:
        raise ValueError(f"dimension mismatch: {feat_i.shape} vs {feat_j.shape}")
    return float(np.linalg.norm(feat_i - feat_j)) + st


def _pairwise_terms(samples: list[Sample], params: STParams) -> tuple[np.ndarray, np.ndarray]:
    """(capped temporal term, same-frame mask) for all batch pairs."""
    books = np.array([s.book_id for s in samples], dtype=object)
    frames = np.array([s.frame_index for s in samples], dtype=np.float64)
    same_book = books[:, None] == books[None, :]
    dk = np.abs(frames[:, None] - frames[None, :])
    temporal = np.where(same_book, np.minimum(params.sigma, dk), params.sigma)
    same_frame = same_book & (dk == 0)
    return temporal, same_frame


def st_distance_matrix(samples: list[Sample], params: STParams) -> np.ndarray:
    """Pairwise st_distance over a batch."""
    temporal, same_frame = _pairwise_terms(samples, params)
    return temporal + np.where(same_frame, params.eta, 0.0)


def mine_triplets(
    features: np.ndarray,
    samples: list[Sample],
    labels: list[int | None],
    params: STParams,
    mode: MiningMode = MiningMode.FRAME_AWARE,
) -> TripletSelection:
    """Pick one (positive, negative) per anchor inside a mini-batch.

    Positives minimize feature distance plus st_distance over same-label
    candidates.  Negatives minimize the mode's score over different-label
    candidates.  Unlabeled (noise) samples are neither anchors nor candidates.
    Ties break to the lowest batch index.
    """
    n = len(samples)
    if n < 2:
        raise ValueError(f"batch size must be >= 2, got {n}")
    features = np.asarray(features, dtype=np.float64)
    feat_dist = np.linalg.norm(features[:, None, :] - features[None, :, :], axis=2)
    temporal, same_frame = _pairwise_terms(samples, params)
    st = temporal + np.where(same_frame, params.eta, 0.0)

    label_arr = np.array([-1 if l is None else l for l in labels], dtype=np.int64)
    labeled = label_arr >= 0
    pos_score = feat_dist + st
    if mode is MiningMode.PAPER_LITERAL:
        neg_score = feat_dist + st
    else:
        neg_score = feat_dist + temporal - np.where(same_frame, params.eta, 0.0)

    pairs: list[tuple[int, int] | None] = []
    idx = np.arange(n)
    for i in range(n):
        if not labeled[i]:
            pairs.append(None)
            continue
        same = labeled & (label_arr == label_arr[i]) & (idx != i)
        diff = labeled & (label_arr != label_arr[i])
        if not same.any() or not diff.any():
            pairs.append(None)
            continue
        p = int(idx[same][np.argmin(pos_score[i][same])])
        q = int(idx[diff][np.argmin(neg_score[i][diff])])
        pairs.append((p, q))
    return TripletSelection(pairs=tuple(pairs))
