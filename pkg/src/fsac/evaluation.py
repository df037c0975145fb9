"""Retrieval evaluation: mAP, CMC ranks, ablations, and parameter sweeps.

A query's result is the gallery ordered by ascending L2 distance between
embedded features; ties keep gallery order.  mAP averages per-query AP and
CMC rank-k is the fraction of queries whose first relevant hit sits at
position <= k.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetSplit, FaceBodyGraph, SampleSet, split_dataset
from .stmetric import STParams
from .trainer import EmbeddingHead, TrainConfig, forward_batch, run_fsac

DEFAULT_CMC_KS = (1, 5, 10)


class EvalError(ValueError):
    pass


@dataclass(frozen=True)
class Ranking:
    query_id: str
    gallery_ids: tuple[str, ...]  # ascending distance, ties by gallery index
    relevance: np.ndarray  # bool mask aligned with gallery_ids

    def __post_init__(self):
        rel = np.asarray(self.relevance, dtype=bool)
        object.__setattr__(self, "relevance", rel)
        rel.setflags(write=False)
        if rel.shape != (len(self.gallery_ids),):
            raise EvalError("relevance mask does not match gallery ordering")


@dataclass(frozen=True)
class MetricsReport:
    mAP: float
    cmc: dict[int, float]
    n_queries: int
    n_skipped: int = 0

    def __post_init__(self):
        if not 0.0 <= self.mAP <= 1.0:
            raise EvalError(f"mAP out of [0, 1]: {self.mAP}")
        last = 0.0
        for k in sorted(self.cmc):
            v = self.cmc[k]
            if not 0.0 <= v <= 1.0:
                raise EvalError(f"cmc[{k}] out of [0, 1]: {v}")
            if v < last - 1e-12:
                raise EvalError("cmc must be non-decreasing in k")
            last = v

    def as_dict(self) -> dict:
        out = {"mAP": self.mAP, "n_queries": self.n_queries, "n_skipped": self.n_skipped}
        for k in sorted(self.cmc):
            out[f"rank-{k}"] = self.cmc[k]
        return out


def rank_gallery(query_feat: np.ndarray, gallery_feats: np.ndarray) -> np.ndarray:
    """Gallery indices by ascending L2 distance; stable on ties."""
    query_feat = np.asarray(query_feat, dtype=np.float64)
    gallery_feats = np.asarray(gallery_feats, dtype=np.float64)
    if gallery_feats.shape[0] == 0:
        raise EvalError("empty gallery")
    if gallery_feats.shape[1] != query_feat.shape[0]:
        raise EvalError(
            f"dimension mismatch: query {query_feat.shape[0]} vs gallery {gallery_feats.shape[1]}"
        )
    dists = np.linalg.norm(gallery_feats - query_feat[None, :], axis=1)
    return np.argsort(dists, kind="stable")


def average_precision(ranking: Ranking) -> float:
    """Mean of precision-at-r over the relevant positions."""
    rel = ranking.relevance
    n_rel = int(rel.sum())
    if n_rel == 0:
        raise EvalError(f"query {ranking.query_id!r} has no relevant gallery item")
    hits = np.cumsum(rel)
    positions = np.flatnonzero(rel) + 1
    precisions = hits[positions - 1] / positions
    return float(precisions.sum() / n_rel)


def cmc_curve(rankings: list[Ranking], ks: tuple[int, ...] = DEFAULT_CMC_KS) -> dict[int, float]:
    """rank-k = fraction of queries whose first relevant item has position <= k."""
    if not rankings:
        raise EvalError("empty query set")
    first_hits = []
    for r in rankings:
        rel = np.flatnonzero(r.relevance)
        if rel.size == 0:
            raise EvalError(f"query {r.query_id!r} has no relevant gallery item")
        first_hits.append(rel[0] + 1)
    first_hits = np.asarray(first_hits)
    return {k: float(np.mean(first_hits <= k)) for k in ks}


def evaluate(split: DatasetSplit, head: EmbeddingHead, ks: tuple[int, ...] = DEFAULT_CMC_KS) -> MetricsReport:
    """Embed query and gallery with the head, rank, and aggregate mAP/CMC.

    Queries whose identity never occurs in the gallery are skipped and
    counted in ``n_skipped``.
    """
    if len(split.query) == 0:
        raise EvalError("empty query set")
    gallery_feats = forward_batch(head, split.gallery.feature_matrix())
    query_feats = forward_batch(head, split.query.feature_matrix())
    gallery_ids = split.gallery.ids()
    gallery_truth = [s.true_identity for s in split.gallery]

    rankings: list[Ranking] = []
    skipped = 0
    for qi, q in enumerate(split.query):
        rel_raw = np.array([t is not None and t == q.true_identity for t in gallery_truth])
        if not rel_raw.any():
            skipped += 1
            continue
        order = rank_gallery(query_feats[qi], gallery_feats)
        rankings.append(
            Ranking(
                query_id=q.sample_id,
                gallery_ids=tuple(gallery_ids[i] for i in order),
                relevance=rel_raw[order],
            )
        )
    if not rankings:
        raise EvalError("no query has a relevant gallery item")
    aps = [average_precision(r) for r in rankings]
    return MetricsReport(
        mAP=float(np.mean(aps)),
        cmc=cmc_curve(rankings, ks),
        n_queries=len(rankings),
        n_skipped=skipped,
    )


def evaluate_mixed(
    face_split: DatasetSplit,
    body_split: DatasetSplit,
    face_head: EmbeddingHead,
    body_head: EmbeddingHead,
    ks: tuple[int, ...] = DEFAULT_CMC_KS,
) -> MetricsReport:
    """Pooled face+body evaluation: one concatenated gallery per query.

    Every sample is embedded by its own part's head, so both heads must share
    the output dimension; rankings then span the pooled gallery and relevance
    ignores part.
    """
    if face_head.d_out != body_head.d_out:
        raise EvalError("mixed evaluation needs face and body heads with equal output dims")
    gal_feats = np.vstack(
        [
            forward_batch(face_head, face_split.gallery.feature_matrix()),
            forward_batch(body_head, body_split.gallery.feature_matrix()),
        ]
    )
    gal_ids = face_split.gallery.ids() + body_split.gallery.ids()
    gal_truth = [s.true_identity for s in face_split.gallery] + [
        s.true_identity for s in body_split.gallery
    ]
    queries = [(s, f) for s, f in zip(face_split.query.samples,
                                      forward_batch(face_head, face_split.query.feature_matrix()))]
    queries += [(s, f) for s, f in zip(body_split.query.samples,
                                       forward_batch(body_head, body_split.query.feature_matrix()))]

    rankings = []
    skipped = 0
    for q, qf in queries:
        rel_raw = np.array([t is not None and t == q.true_identity for t in gal_truth])
        if not rel_raw.any():
            skipped += 1
            continue
        order = rank_gallery(qf, gal_feats)
        rankings.append(
            Ranking(
                query_id=q.sample_id,
                gallery_ids=tuple(gal_ids[i] for i in order),
                relevance=rel_raw[order],
            )
        )
    if not rankings:
        raise EvalError("no query has a relevant gallery item")
    aps = [average_precision(r) for r in rankings]
    return MetricsReport(
        mAP=float(np.mean(aps)),
        cmc=cmc_curve(rankings, ks),
        n_queries=len(rankings),
        n_skipped=skipped,
    )


def export_features(samples: SampleSet, head: EmbeddingHead, path: str | Path) -> None:
    """CSV of id, identity, and embedded feature values (17 significant digits)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    feats = forward_batch(head, samples.feature_matrix()) if len(samples) else np.zeros((0, head.d_out))
    with p.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "identity"] + [f"f{i}" for i in range(head.d_out)])
        for s, f in zip(samples, feats):
            writer.writerow([s.sample_id, s.true_identity or ""] + [f"{v:.17g}" for v in f])


@dataclass
class PipelineRun:
    """One train-and-evaluate pass on a pre-split world."""

    face: MetricsReport
    body: MetricsReport
    log: list


def run_and_evaluate(
    faces: SampleSet,
    bodies: SampleSet,
    graph: FaceBodyGraph,
    config: TrainConfig,
    gallery_ratio: float = 1.0 / 3.0,
    split_seed: int | None = None,
) -> PipelineRun:
    """Split both parts, train on the train subsets, evaluate on query/gallery."""
    split_seed = config.seed if split_seed is None else split_seed
    face_split = split_dataset(faces, gallery_ratio, split_seed)
    body_split = split_dataset(bodies, gallery_ratio, split_seed)
    train_graph = graph.restrict(
        set(face_split.train.ids()), set(body_split.train.ids())
    )
    result = run_fsac(face_split.train, body_split.train, train_graph, config)
    return PipelineRun(
        face=evaluate(face_split, result.face_head),
        body=evaluate(body_split, result.body_head),
        log=result.log,
    )


ABLATION_ROWS = ("baseline", "st-triplet", "full")


def _row_config(base: TrainConfig, row: str) -> TrainConfig:
    if row == "baseline":
        return replace(base, st_params=STParams(sigma=0.0, eta=0.0), use_fusion=False)
    if row == "st-triplet":
        return replace(base, use_fusion=False)
    if row == "full":
        return replace(base, use_fusion=True)
    raise EvalError(f"unknown ablation row {row!r}")


@dataclass
class AblationResult:
    rows: dict[str, list[PipelineRun]] = field(default_factory=dict)

    def mean_map(self, row: str, part: str = "face") -> float:
        runs = self.rows[row]
        return float(np.mean([getattr(r, part).mAP for r in runs]))

    def table(self) -> list[dict]:
        out = []
        for row in ABLATION_ROWS:
            runs = self.rows[row]
            for part in ("face", "body"):
                reports = [getattr(r, part) for r in runs]
                entry = {
                    "row": row,
                    "part": part,
                    "mAP": float(np.mean([m.mAP for m in reports])),
                    "mAP_std": float(np.std([m.mAP for m in reports])),
                }
                for k in sorted(reports[0].cmc):
                    entry[f"rank-{k}"] = float(np.mean([m.cmc[k] for m in reports]))
                out.append(entry)
        return out


def ablation_suite(
    faces: SampleSet,
    bodies: SampleSet,
    graph: FaceBodyGraph,
    base_config: TrainConfig,
    seeds: list[int],
    gallery_ratio: float = 1.0 / 3.0,
) -> AblationResult:
    """Three-row ablation (classic triplet, +spatial-temporal, +fusion), multi-seed."""
    if not seeds:
        raise EvalError("ablation needs at least one seed")
    result = AblationResult()
    for row in ABLATION_ROWS:
        runs = []
        for seed in seeds:
            cfg = replace(_row_config(base_config, row), seed=seed)
            runs.append(run_and_evaluate(faces, bodies, graph, cfg, gallery_ratio, split_seed=seed))
        result.rows[row] = runs
    return result


def sweep(
    param: str,
    values: list[float],
    faces: SampleSet,
    bodies: SampleSet,
    graph: FaceBodyGraph,
    config: TrainConfig,
    gallery_ratio: float = 1.0 / 3.0,
) -> list[tuple[float, PipelineRun]]:
    """One full run per parameter value, all sharing the config seed."""
    if param not in ("sigma", "eta"):
        raise EvalError(f"sweep param must be sigma or eta, got {param!r}")
    if not values:
        raise EvalError("sweep needs at least one value")
    out = []
    for v in values:
        st = replace(config.st_params, **{param: float(v)})
        cfg = replace(config, st_params=st)
        out.append((float(v), run_and_evaluate(faces, bodies, graph, cfg, gallery_ratio)))
    return out


def sweep_csv(rows: list[tuple[float, PipelineRun]], param: str, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        ks = sorted(rows[0][1].face.cmc) if rows else []
        writer.writerow([param, "part", "mAP"] + [f"rank-{k}" for k in ks])
        for value, run in rows:
            for part in ("face", "body"):
                report = getattr(run, part)
                writer.writerow([value, part, report.mAP] + [report.cmc[k] for k in ks])
