"""Face-body label fusion over a merged label space.

For each paired face/body appearance the side with the higher maximum soft
probability donates its top class to both members; exact ties go to the face
side.  Face clusters and body clusters live in a disjoint-union label space,
so a donated body class never collides with a face class.
"""
from __future__ import annotations

from dataclasses import dataclass

from .cluster import SoftLabel
from .data import FaceBodyGraph, SampleSet


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class MergedLabelSpace:
    """Disjoint union of face and body cluster ids.

    Merged ids [0, n_face) are face clusters; [n_face, n_face + n_body) are
    body clusters.
    """

    n_face: int
    n_body: int

    @property
    def size(self) -> int:
        return self.n_face + self.n_body

    def from_face(self, cluster: int) -> int:
        if not 0 <= cluster < self.n_face:
            raise FusionError(f"face cluster {cluster} out of range")
        return cluster

    def from_body(self, cluster: int) -> int:
        if not 0 <= cluster < self.n_body:
            raise FusionError(f"body cluster {cluster} out of range")
        return self.n_face + cluster

    def origin(self, merged: int) -> tuple[str, int]:
        """('face'|'body', original cluster id) for a merged label."""
        if 0 <= merged < self.n_face:
            return ("face", merged)
        if self.n_face <= merged < self.size:
            return ("body", merged - self.n_face)
        raise FusionError(f"merged label {merged} out of range")


@dataclass(frozen=True)
class FusedLabels:
    """Per-sample merged hard labels; None marks noise with no usable pair."""

    face: tuple[int | None, ...]
    body: tuple[int | None, ...]

    def partition_key(self) -> tuple:
        """Hashable view of the label structure, for epoch-over-epoch comparison."""
        return (self.face, self.body)


def fuse_labels(
    faces: SampleSet,
    face_soft: list[SoftLabel | None],
    bodies: SampleSet,
    body_soft: list[SoftLabel | None],
    graph: FaceBodyGraph,
    space: MergedLabelSpace,
) -> FusedLabels:
    """Combine per-part soft labels into one hard label per paired sample.

    ``face_soft[i]`` belongs to ``faces.samples[i]``; None marks a noise
    sample that carries no soft label.  Unpaired samples keep their own
    side's top class; a pair with exactly one noise side takes the other
    side's label; a pair of two noise sides gets None.
    """
    if len(face_soft) != len(faces) or len(body_soft) != len(bodies):
        raise FusionError("soft label list length does not match its sample set")
    face_index = faces.index_of()
    body_index = bodies.index_of()

    face_out: list[int | None] = [
        None if sl is None else space.from_face(sl.top_class) for sl in face_soft
    ]
    body_out: list[int | None] = [
        None if sl is None else space.from_body(sl.top_class) for sl in body_soft
    ]

    for face_id, body_id in graph.pairs:
        if face_id not in face_index or body_id not in body_index:
            raise FusionError(f"graph pair ({face_id!r}, {body_id!r}) references a missing sample")
        fi = face_index[face_id]
        bi = body_index[body_id]
        f_sl = face_soft[fi]
        b_sl = body_soft[bi]
        if f_sl is None and b_sl is None:
            fused = None
        elif f_sl is None:
            fused = space.from_body(b_sl.top_class)
        elif b_sl is None:
            fused = space.from_face(f_sl.top_class)
        elif b_sl.top_prob > f_sl.top_prob:
            fused = space.from_body(b_sl.top_class)
        else:  # ties go to the face side
            fused = space.from_face(f_sl.top_class)
        face_out[fi] = fused
        body_out[bi] = fused
    return FusedLabels(face=tuple(face_out), body=tuple(body_out))


def relabel_compact(labels: FusedLabels) -> tuple[FusedLabels, int, tuple[int, ...]]:
    """Renumber merged labels to a dense [0, K) range.

    Returns (relabeled, K, originals) where ``originals[j]`` is the merged
    label that became dense id j.  New ids follow first appearance, scanning
    face labels then body labels, so the mapping is deterministic and
    equality structure is preserved.
    """
    mapping: dict[int, int] = {}
    for old in list(labels.face) + list(labels.body):
        if old is not None and old not in mapping:
            mapping[old] = len(mapping)
    face = tuple(None if l is None else mapping[l] for l in labels.face)
    body = tuple(None if l is None else mapping[l] for l in labels.body)
    originals = tuple(sorted(mapping, key=mapping.get))
    return FusedLabels(face=face, body=body), len(mapping), originals
