"""Synthetic manga worlds: books, frames, and paired face/body appearances.

Each character owns one latent face prototype and one latent body prototype
(random unit vectors).  Appearances follow a per-frame Markov process over
an on-screen cast: cast members persist into the next frame with
``persist_prob``; when everyone drops, the scene either brings back a
recently benched character (conversation cuts: A, B, A, B across frames)
or switches to a fresh one.  Multi-character frames are injected with
``multi_char_frame_prob``; with ``repeat_in_frame_prob`` the extra
appearance repeats an identity already in the frame.

Emission per appearance:

    normalize(prototype + book_style + noise_scale * g / sqrt(dim)
              [+ exaggeration_scale * g' / sqrt(dim) with prob exaggeration_prob])

where g, g' are standard normal draws and book_style is one fixed vector of
norm ``style_shift_scale`` per (book, part).  The sqrt(dim) factor makes the
scales read as expected perturbation norms, independent of dimension.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import FaceBodyGraph, Part, Sample, SampleSet

# interior constants of the cast process (not calibration knobs)
BENCH_WINDOW = 6  # frames a dropped character stays eligible for a comeback
RETURN_PROB = 0.55  # chance an empty frame revives a benched character
BENCH_COCHAR_PROB = 0.25  # chance an injected co-character comes from the bench

# book styles and exaggerations live in low-dim subspaces per part, so a
# linear feature map can in principle suppress them; capped by embedding size
STYLE_SUBSPACE_DIM = 4
EXAG_SUBSPACE_DIM = 4


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    n_books: int = 10
    frames_per_book: int = 200
    characters_per_book: int = 8
    persist_prob: float = 0.35
    multi_char_frame_prob: float = 0.40
    repeat_in_frame_prob: float = 0.04
    style_shift_scale: float = 0.0
    noise_scale: float = 0.0
    exaggeration_prob: float = 0.0
    exaggeration_scale: float = 0.0
    dim_face: int = 16
    dim_body: int = 16
    seed: int = 0

    def __post_init__(self):
        for name in ("persist_prob", "multi_char_frame_prob", "repeat_in_frame_prob", "exaggeration_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"{name} must be in [0, 1], got {v}")
        for name in ("style_shift_scale", "noise_scale", "exaggeration_scale"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise SynthError(f"{name} must be finite and >= 0, got {v}")
        if self.dim_face < 2 or self.dim_body < 2:
            raise SynthError("embedding dimensions must be >= 2")
        if self.n_books < 1 or self.frames_per_book < 1 or self.characters_per_book < 1:
            raise SynthError("world sizes must be >= 1")
        if self.characters_per_book < 2 and self.multi_char_frame_prob > 0:
            raise SynthError("multi_char_frame_prob > 0 needs at least 2 characters per book")


@dataclass(frozen=True)
class WorldStats:
    temporal_proportion: dict[int, float]
    # (single, multi_distinct, repeated); None when only temporal targets matter
    frame_type_proportions: tuple[float, float, float] | None = None

    def __post_init__(self):
        for k, v in self.temporal_proportion.items():
            if k < 1:
                raise SynthError(f"temporal k must be >= 1, got {k}")
            if not 0.0 <= v <= 1.0:
                raise SynthError(f"target out of range: temporal_proportion[{k}] = {v}")
        if self.frame_type_proportions is not None:
            for v in self.frame_type_proportions:
                if not 0.0 <= v <= 1.0:
                    raise SynthError(f"target out of range: frame type proportion {v}")


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _book_frames(cfg: WorldConfig, rng: np.random.Generator) -> list[list[int]]:
    """Character indices appearing in each frame of one book (with repeats)."""
    chars = list(range(cfg.characters_per_book))
    frames: list[list[int]] = []
    prev_cast: list[int] = []
    last_seen: dict[int, int] = {}
    for t in range(cfg.frames_per_book):
        cast = [c for c in prev_cast if rng.random() < cfg.persist_prob]
        if not cast:
            bench = [
                c for c, last in sorted(last_seen.items())
                if t - last <= BENCH_WINDOW and c not in prev_cast
            ]
            if bench and rng.random() < RETURN_PROB:
                # most recently benched first: the other side of the conversation
                cast = [max(bench, key=lambda c: (last_seen[c], -c))]
            else:
                cast = [chars[int(rng.integers(len(chars)))]]
        appearances = list(cast)
        if rng.random() < cfg.multi_char_frame_prob and len(chars) > 1:
            if rng.random() < cfg.repeat_in_frame_prob:
                appearances.append(appearances[int(rng.integers(len(appearances)))])
            else:
                outside = [c for c in chars if c not in appearances]
                if outside:
                    bench_out = [
                        c for c in outside
                        if c in last_seen and t - last_seen[c] <= BENCH_WINDOW
                    ]
                    if bench_out and rng.random() < BENCH_COCHAR_PROB:
                        appearances.append(max(bench_out, key=lambda c: (last_seen[c], -c)))
                    else:
                        appearances.append(outside[int(rng.integers(len(outside)))])
        frames.append(appearances)
        prev_cast = sorted(set(appearances))
        for c in prev_cast:
            last_seen[c] = t
    return frames


def _subspace_basis(rng: np.random.Generator, dim: int, sub_dim: int) -> np.ndarray:
    """Orthonormal basis of a nuisance subspace for one part."""
    s = max(1, min(sub_dim, dim // 2))
    q, _ = np.linalg.qr(rng.standard_normal((dim, s)))
    return q


def generate_world(cfg: WorldConfig) -> tuple[SampleSet, SampleSet, FaceBodyGraph]:
    """Build paired face/body sample sets and their graph, seeded-deterministic."""
    rng = np.random.default_rng(cfg.seed)
    faces: list[Sample] = []
    bodies: list[Sample] = []
    pairs: list[tuple[str, str]] = []
    style_basis_f = _subspace_basis(rng, cfg.dim_face, STYLE_SUBSPACE_DIM)
    style_basis_b = _subspace_basis(rng, cfg.dim_body, STYLE_SUBSPACE_DIM)
    exag_basis_f = _subspace_basis(rng, cfg.dim_face, EXAG_SUBSPACE_DIM)
    exag_basis_b = _subspace_basis(rng, cfg.dim_body, EXAG_SUBSPACE_DIM)
    for b in range(cfg.n_books):
        book_id = f"b{b:03d}"
        face_protos = [_unit(rng, cfg.dim_face) for _ in range(cfg.characters_per_book)]
        body_protos = [_unit(rng, cfg.dim_body) for _ in range(cfg.characters_per_book)]
        style_face = cfg.style_shift_scale * (style_basis_f @ _unit(rng, style_basis_f.shape[1]))
        style_body = cfg.style_shift_scale * (style_basis_b @ _unit(rng, style_basis_b.shape[1]))
        frames = _book_frames(cfg, rng)
        for t, appearances in enumerate(frames):
            for occ, c in enumerate(appearances):
                identity = f"{book_id}:c{c:02d}"
                face_id = f"F:{book_id}:{t:05d}:{occ}"
                body_id = f"B:{book_id}:{t:05d}:{occ}"
                face_emb = _emit(face_protos[c], style_face, exag_basis_f, cfg.noise_scale,
                                 cfg.exaggeration_prob, cfg.exaggeration_scale, rng)
                body_emb = _emit(body_protos[c], style_body, exag_basis_b, cfg.noise_scale,
                                 cfg.exaggeration_prob, cfg.exaggeration_scale, rng)
                faces.append(Sample(face_id, book_id, t, Part.FACE, face_emb, identity))
                bodies.append(Sample(body_id, book_id, t, Part.BODY, body_emb, identity))
                pairs.append((face_id, body_id))
    return (
        SampleSet(part=Part.FACE, dim=cfg.dim_face, samples=tuple(faces)),
        SampleSet(part=Part.BODY, dim=cfg.dim_body, samples=tuple(bodies)),
        FaceBodyGraph(pairs=tuple(pairs)),
    )


def _emit(
    proto: np.ndarray,
    style: np.ndarray,
    exag_basis: np.ndarray,
    noise_scale: float,
    exaggeration_prob: float,
    exaggeration_scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    dim = proto.shape[0]
    v = proto + style
    if noise_scale > 0:
        v = v + noise_scale * rng.standard_normal(dim) / np.sqrt(dim)
    # draw order is fixed so the exaggeration coin is always consumed
    exaggerate = rng.random() < exaggeration_prob
    if exaggerate and exaggeration_scale > 0:
        v = v + exaggeration_scale * (exag_basis @ _unit(rng, exag_basis.shape[1]))
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise SynthError("degenerate zero embedding; increase scales or dimensions")
    return v / norm


def measure_temporal_stats(samples: SampleSet, k: int) -> float:
    """Proportion of appearances whose identity recurs within frame distance k."""
    if k < 1:
        raise SynthError(f"k must be >= 1, got {k}")
    frames_by_identity: dict[tuple[str, str], list[int]] = {}
    total = 0
    for s in samples:
        if s.true_identity is None:
            raise SynthError("temporal stats need true_identity on every sample")
        frames_by_identity.setdefault((s.book_id, s.true_identity), []).append(s.frame_index)
        total += 1
    if total == 0:
        raise SynthError("empty sample set")
    hits = 0
    for frames in frames_by_identity.values():
        frames.sort()
        for i, f in enumerate(frames):
            # neighbors in sorted order suffice: any other appearance within k
            if i > 0 and f - frames[i - 1] <= k:
                hits += 1
            elif i + 1 < len(frames) and frames[i + 1] - f <= k:
                hits += 1
    return hits / total


def measure_spatial_stats(samples: SampleSet) -> tuple[float, float, float]:
    """(single, multi_distinct, repeated) frame-type proportions; sums to 1."""
    if len(samples) == 0:
        raise SynthError("empty sample set")
    by_frame: dict[tuple[str, int], list[str]] = {}
    for s in samples:
        if s.true_identity is None:
            raise SynthError("spatial stats need true_identity on every sample")
        by_frame.setdefault((s.book_id, s.frame_index), []).append(s.true_identity)
    single = multi = repeated = 0
    for identities in by_frame.values():
        if len(identities) == 1:
            single += 1
        elif len(set(identities)) == 1:
            repeated += 1
        else:
            multi += 1
    n = len(by_frame)
    return (single / n, multi / n, repeated / n)


def world_stats(samples: SampleSet, ks: tuple[int, ...] = (1, 3, 5)) -> WorldStats:
    return WorldStats(
        temporal_proportion={k: measure_temporal_stats(samples, k) for k in ks},
        frame_type_proportions=measure_spatial_stats(samples),
    )


def _deviation(cfg: WorldConfig, targets: WorldStats) -> float:
    faces, _, _ = generate_world(cfg)
    dev = 0.0
    for k, target in sorted(targets.temporal_proportion.items()):
        dev += (measure_temporal_stats(faces, k) - target) ** 2
    if targets.frame_type_proportions is not None:
        measured = measure_spatial_stats(faces)
        dev += sum((m - t) ** 2 for m, t in zip(measured, targets.frame_type_proportions))
    return dev


def calibrate(cfg: WorldConfig, targets: WorldStats, iterations: int = 4) -> WorldConfig:
    """Coordinate search over persist_prob / multi_char_frame_prob.

    Each sweep tries +-step moves per knob, keeping strict improvements;
    the step halves between sweeps.  Deterministic for a fixed cfg.seed.
    """
    if iterations < 1:
        raise SynthError(f"iterations must be >= 1, got {iterations}")
    for k in (1, 3, 5):
        if k not in targets.temporal_proportion:
            raise SynthError(f"calibration targets must include k={k}")
    best = cfg
    best_dev = _deviation(cfg, targets)
    step = 0.16
    for _ in range(iterations):
        for knob in ("persist_prob", "multi_char_frame_prob"):
            for direction in (+1.0, -1.0):
                value = getattr(best, knob) + direction * step
                value = min(0.99, max(0.01, value))
                candidate = replace(best, **{knob: value})
                dev = _deviation(candidate, targets)
                if dev < best_dev:
                    best, best_dev = candidate, dev
        step /= 2.0
    return best
