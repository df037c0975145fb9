"""Data model and I/O for embedding datasets with book/frame annotations.

Records live in JSONL files, one appearance per line:

    {"id": str, "book": str, "frame": int, "part": "face"|"body",
     "emb": [float, ...], "identity": str|null}

A face-body graph file is JSONL of ``{"face": str, "body": str}`` pairs.
"""
from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np


class Part(str, Enum):
    FACE = "face"
    BODY = "body"


class DataError(ValueError):
    """Raised for malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class Sample:
    """One character appearance: an embedding plus its book/frame position."""

    sample_id: str
    book_id: str
    frame_index: int
    part: Part
    embedding: np.ndarray
    true_identity: str | None = None

    def __post_init__(self):
        if self.frame_index < 0:
            raise DataError(f"sample {self.sample_id!r}: negative frame_index")
        emb = np.asarray(self.embedding, dtype=np.float64)
        object.__setattr__(self, "embedding", emb)
        emb.setflags(write=False)


@dataclass(frozen=True)
class SampleSet:
    """Samples of one part in reading order (book, then frame, then input order)."""

    part: Part
    dim: int
    samples: tuple[Sample, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for s in self.samples:
            if s.part is not self.part:
                raise DataError(f"sample {s.sample_id!r}: part {s.part.value} in a {self.part.value} set")
            if s.embedding.shape != (self.dim,):
                raise DataError(f"sample {s.sample_id!r}: dimension {s.embedding.shape[0]} != {self.dim}")
            if s.sample_id in seen:
                raise DataError(f"duplicate sample_id {s.sample_id!r}")
            seen.add(s.sample_id)

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def feature_matrix(self) -> np.ndarray:
        """N x dim matrix of raw embeddings in reading order."""
        if not self.samples:
            return np.zeros((0, self.dim))
        return np.stack([s.embedding for s in self.samples])

    def ids(self) -> list[str]:
        return [s.sample_id for s in self.samples]

    def index_of(self) -> dict[str, int]:
        return {s.sample_id: i for i, s in enumerate(self.samples)}

    def has_truth(self) -> bool:
        return any(s.true_identity is not None for s in self.samples)

    def subset(self, sample_ids: set[str]) -> "SampleSet":
        kept = tuple(s for s in self.samples if s.sample_id in sample_ids)
        return SampleSet(part=self.part, dim=self.dim, samples=kept)


@dataclass(frozen=True)
class FaceBodyGraph:
    """Bijective pairing of face and body appearances from the same frame."""

    pairs: tuple[tuple[str, str], ...]

    def __post_init__(self):
        faces_seen: set[str] = set()
        bodies_seen: set[str] = set()
        for face_id, body_id in self.pairs:
            if face_id in faces_seen:
                raise DataError(f"face {face_id!r} appears in more than one pair")
            if body_id in bodies_seen:
                raise DataError(f"body {body_id!r} appears in more than one pair")
            faces_seen.add(face_id)
            bodies_seen.add(body_id)

    def __len__(self) -> int:
        return len(self.pairs)

    def face_to_body(self) -> dict[str, str]:
        return {f: b for f, b in self.pairs}

    def body_to_face(self) -> dict[str, str]:
        return {b: f for f, b in self.pairs}

    def restrict(self, face_ids: set[str], body_ids: set[str]) -> "FaceBodyGraph":
        """Drop pairs whose endpoints are not both present."""
        kept = tuple((f, b) for f, b in self.pairs if f in face_ids and b in body_ids)
        return FaceBodyGraph(pairs=kept)


@dataclass(frozen=True)
class DatasetSplit:
    train: SampleSet
    gallery: SampleSet
    query: SampleSet


def reading_order(samples: list[Sample]) -> list[Sample]:
    """Sort by (book_id, frame_index), keeping input order within a frame."""
    return sorted(samples, key=lambda s: (s.book_id, s.frame_index))


def load_samples(path: str | Path, part: Part) -> SampleSet:
    """Load a JSONL sample file; dimension is inferred from the first record."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    samples: list[Sample] = []
    seen_ids: set[str] = set()
    dim: int | None = None
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataError(f"{p}:{lineno}: invalid JSON: {e.msg}") from e
            try:
                rec_part = Part(raw["part"])
                emb = np.asarray(raw["emb"], dtype=np.float64)
                sample = Sample(
                    sample_id=str(raw["id"]),
                    book_id=str(raw["book"]),
                    frame_index=int(raw["frame"]),
                    part=rec_part,
                    embedding=emb,
                    true_identity=None if raw.get("identity") is None else str(raw["identity"]),
                )
            except (KeyError, TypeError, ValueError, DataError) as e:
                raise DataError(f"{p}:{lineno}: {e}") from e
            if rec_part is not part:
                raise DataError(f"{p}:{lineno}: expected part {part.value!r}, got {rec_part.value!r}")
            if emb.ndim != 1:
                raise DataError(f"{p}:{lineno}: embedding is not a flat vector")
            if dim is None:
                dim = int(emb.shape[0])
            elif emb.shape[0] != dim:
                raise DataError(f"{p}:{lineno}: dimension {emb.shape[0]} != {dim}")
            if sample.sample_id in seen_ids:
                raise DataError(f"{p}:{lineno}: duplicate sample_id {sample.sample_id!r}")
            seen_ids.add(sample.sample_id)
            samples.append(sample)
    if not samples:
        raise DataError(f"{p}: empty dataset")
    # file order is authoritative reading order; no re-sort
    return SampleSet(part=part, dim=dim, samples=tuple(samples))


def save_samples(sample_set: SampleSet, path: str | Path) -> None:
    """Write a SampleSet back to the JSONL schema (floats as 64-bit decimal text)."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for s in sample_set:
            rec = {
                "id": s.sample_id,
                "book": s.book_id,
                "frame": s.frame_index,
                "part": s.part.value,
                "emb": [float(v) for v in s.embedding],
                "identity": s.true_identity,
            }
            fh.write(json.dumps(rec) + "\n")


def load_graph(path: str | Path) -> FaceBodyGraph:
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    pairs: list[tuple[str, str]] = []
    with p.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                raw = json.loads(line)
                pairs.append((str(raw["face"]), str(raw["body"])))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise DataError(f"{p}:{lineno}: bad graph record: {e}") from e
    try:
        return FaceBodyGraph(pairs=tuple(pairs))
    except DataError as e:
        raise DataError(f"{p}: {e}") from e


def save_graph(graph: FaceBodyGraph, path: str | Path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", encoding="utf-8") as fh:
        for face_id, body_id in graph.pairs:
            fh.write(json.dumps({"face": face_id, "body": body_id}) + "\n")


@dataclass(frozen=True)
class GraphViolation:
    kind: str  # "dangling" | "part mismatch" | "frame mismatch" | "book mismatch"
    face_id: str
    body_id: str
    detail: str = ""


def validate_graph(graph: FaceBodyGraph, faces: SampleSet, bodies: SampleSet) -> list[GraphViolation]:
    """Check every pair against the loaded sets; violations are data, not faults."""
    face_by_id = {s.sample_id: s for s in faces}
    body_by_id = {s.sample_id: s for s in bodies}
    violations: list[GraphViolation] = []
    for face_id, body_id in graph.pairs:
        f = face_by_id.get(face_id)
        b = body_by_id.get(body_id)
        if f is None or b is None:
            missing = face_id if f is None else body_id
            violations.append(GraphViolation("dangling", face_id, body_id, f"unknown id {missing!r}"))
            continue
        if f.part is not Part.FACE or b.part is not Part.BODY:
            violations.append(GraphViolation("part mismatch", face_id, body_id))
            continue
        if f.book_id != b.book_id:
            violations.append(GraphViolation("book mismatch", face_id, body_id,
                                             f"{f.book_id!r} vs {b.book_id!r}"))
        elif f.frame_index != b.frame_index:
            violations.append(GraphViolation("frame mismatch", face_id, body_id,
                                             f"frame {f.frame_index} vs {b.frame_index}"))
    return violations


def split_dataset(samples: SampleSet, gallery_ratio: float, seed: int) -> DatasetSplit:
    """Split per identity into train/gallery, then move one gallery item per identity to query.

    Roughly ``1 - gallery_ratio`` of each identity's appearances go to train.
    An identity enters gallery/query only if it can leave at least one gallery
    item after the query draw; otherwise it is kept whole in train.
    """
    if not 0 < gallery_ratio < 1:
        raise DataError(f"gallery_ratio must be in (0, 1), got {gallery_ratio}")
    with_truth = [s for s in samples if s.true_identity is not None]
    if not with_truth:
        raise DataError("no sample has true_identity; cannot split")

    by_identity: dict[str, list[Sample]] = {}
    for s in samples:
        key = s.true_identity
        if key is None:
            continue
        by_identity.setdefault(key, []).append(s)

    rng = random.Random(seed)
    train_ids: set[str] = {s.sample_id for s in samples if s.true_identity is None}
    gallery_ids: set[str] = set()
    query_ids: set[str] = set()
    for identity in sorted(by_identity):
        members = sorted(by_identity[identity], key=lambda s: s.sample_id)
        n_gallery = round(len(members) * gallery_ratio)
        # query takes one gallery item, so eval needs at least two
        if n_gallery < 2:
            train_ids.update(s.sample_id for s in members)
            continue
        rng.shuffle(members)
        eval_members = members[:n_gallery]
        train_ids.update(s.sample_id for s in members[n_gallery:])
        q = eval_members[rng.randrange(len(eval_members))]
        query_ids.add(q.sample_id)
        gallery_ids.update(s.sample_id for s in eval_members if s.sample_id != q.sample_id)

    return DatasetSplit(
        train=samples.subset(train_ids),
        gallery=samples.subset(gallery_ids),
        query=samples.subset(query_ids),
    )
