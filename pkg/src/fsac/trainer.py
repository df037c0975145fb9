"""Trainable embedding heads, analytic gradients, and the refinement loop.

Each part (face, body) owns a linear head whose output is L2-normalized:
``f = normalize(W x + b)``.  Training alternates between re-clustering the
current features to get pseudo-labels (fused across the face-body graph)
and SGD on a weighted sum of cross-entropy over the merged label space and
a margin triplet loss whose pairs come from spatial-temporal mining.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cluster as cl
from .cluster import NOISE, AgentBank, SoftLabel, soft_label_matrix
from .data import FaceBodyGraph, SampleSet
from .fusion import FusedLabels, MergedLabelSpace, fuse_labels, relabel_compact
from .stmetric import MiningMode, STParams, TripletSelection, mine_triplets


class TrainerError(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbeddingHead:
    weight: np.ndarray  # (d_out, d_in)
    bias: np.ndarray  # (d_out,)

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise TrainerError(f"inconsistent head shapes {w.shape} / {b.shape}")
        if w.shape[0] > w.shape[1]:
            raise TrainerError("head output dimension exceeds input dimension")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise TrainerError("non-finite head parameters")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def d_in(self) -> int:
        return self.weight.shape[1]

    @property
    def d_out(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Classifier:
    weight: np.ndarray  # (n_classes, d_out)

    @property
    def n_classes(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class ClusteringConfig:
    algorithm: str = "dbscan"  # "dbscan" | "kmeans"
    eps: float = 0.5
    min_pts: int = 4
    k: int | None = None

    def __post_init__(self):
        if self.algorithm not in ("dbscan", "kmeans"):
            raise ValueError(f"unknown clustering algorithm {self.algorithm!r}")
        if self.algorithm == "kmeans" and (self.k is None or self.k < 1):
            raise ValueError("kmeans needs k >= 1")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.3
    learning_rate: float = 0.05
    epochs: int = 10
    inner_iterations: int = 1
    batch_size: int = 64
    shuffle: bool = False
    st_params: STParams = field(default_factory=STParams)
    w_id: float = 1.0
    w_tri: float = 1.0
    temperature: float = 1.0
    seed: int = 0
    clustering: ClusteringConfig = field(default_factory=ClusteringConfig)
    mining_mode: MiningMode = MiningMode.FRAME_AWARE
    use_fusion: bool = True
    fusion_for_triplets: bool = True
    head_dim: int | None = None  # None keeps the input dimension

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError(f"margin must be >= 0, got {self.margin}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.w_id < 0 or self.w_tri < 0 or (self.w_id == 0 and self.w_tri == 0):
            raise ValueError("loss weights must be >= 0 and not both zero")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")


@dataclass(frozen=True)
class Gradients:
    weight: np.ndarray
    bias: np.ndarray
    classifier: np.ndarray


def init_head(d_in: int, d_out: int, rng: np.random.Generator, noise: float = 0.01) -> EmbeddingHead:
    """Identity-truncated weight plus small seeded noise; zero bias."""
    w = np.eye(d_out, d_in) + noise * rng.standard_normal((d_out, d_in))
    return EmbeddingHead(weight=w, bias=np.zeros(d_out))


def forward(head: EmbeddingHead, x: np.ndarray) -> np.ndarray:
    """W x + b, then L2-normalized."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (head.d_in,):
        raise TrainerError(f"input shape {x.shape} does not match head d_in {head.d_in}")
    return forward_batch(head, x[None, :])[0]


def forward_batch(head: EmbeddingHead, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = x @ head.weight.T + head.bias
    norms = np.linalg.norm(z, axis=1)
    bad = np.flatnonzero(norms == 0.0)
    if bad.size:
        raise TrainerError(f"zero-norm feature at row {int(bad[0])}")
    return z / norms[:, None]


def triplet_loss(anchor: np.ndarray, positive: np.ndarray, negative: np.ndarray, margin: float) -> float:
    """max(0, ||a-p|| + margin - ||a-n||) on plain L2 distances."""
    anchor = np.asarray(anchor, dtype=np.float64)
    if anchor.shape != np.shape(positive) or anchor.shape != np.shape(negative):
        raise TrainerError("triplet feature dimensions differ")
    d_ap = float(np.linalg.norm(anchor - positive))
    d_an = float(np.linalg.norm(anchor - negative))
    return max(0.0, d_ap + margin - d_an)


def classification_loss(logits: np.ndarray, label: int) -> float:
    """Cross-entropy of softmax(logits) at label, max-subtracted."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise TrainerError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits - logits.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def batch_losses(
    features: np.ndarray,
    classifier: Classifier,
    labels: list[int | None],
    triplets: TripletSelection,
    config: TrainConfig,
) -> tuple[float, float]:
    """(classification loss, triplet loss), each averaged over its contributors."""
    logits = features @ classifier.weight.T
    labeled = [(i, l) for i, l in enumerate(labels) if l is not None]
    loss_id = 0.0
    if labeled:
        loss_id = sum(classification_loss(logits[i], l) for i, l in labeled) / len(labeled)
    valid = [(i, pn) for i, pn in enumerate(triplets.pairs) if pn is not None]
    loss_tri = 0.0
    if valid:
        loss_tri = sum(
            triplet_loss(features[i], features[p], features[n], config.margin) for i, (p, n) in valid
        ) / len(valid)
    return loss_id, loss_tri


def combined_loss(
    batch: np.ndarray,
    head: EmbeddingHead,
    classifier: Classifier,
    labels: list[int | None],
    triplets: TripletSelection,
    config: TrainConfig,
) -> float:
    """w_id * L_id + w_tri * L_tri for a batch under fixed labels and triplets."""
    features = forward_batch(head, batch)
    loss_id, loss_tri = batch_losses(features, classifier, labels, triplets, config)
    return config.w_id * loss_id + config.w_tri * loss_tri


def gradients(
    batch: np.ndarray,
    head: EmbeddingHead,
    classifier: Classifier,
    labels: list[int | None],
    triplets: TripletSelection,
    config: TrainConfig,
) -> tuple[Gradients, float, float]:
    """Analytic gradients of the combined batch loss.

    Labels and triplets are inputs, so mining stays outside the derivative.
    Returns (gradients, classification loss, triplet loss).
    """
    batch = np.asarray(batch, dtype=np.float64)
    n, _ = batch.shape
    z = batch @ head.weight.T + head.bias
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0.0):
        raise TrainerError("zero-norm feature in batch")
    feats = z / norms[:, None]

    g_feat = np.zeros_like(feats)
    g_cls = np.zeros_like(classifier.weight)

    # cross-entropy term
    labeled = [(i, l) for i, l in enumerate(labels) if l is not None]
    loss_id = 0.0
    if labeled and config.w_id != 0.0:
        idx = np.array([i for i, _ in labeled])
        y = np.array([l for _, l in labeled])
        logits = feats[idx] @ classifier.weight.T
        shifted = logits - logits.max(axis=1, keepdims=True)
        exp = np.exp(shifted)
        probs = exp / exp.sum(axis=1, keepdims=True)
        rows = np.arange(len(labeled))
        loss_id = float(-np.log(probs[rows, y]).mean())
        d_logits = probs.copy()
        d_logits[rows, y] -= 1.0
        d_logits *= config.w_id / len(labeled)
        g_cls += d_logits.T @ feats[idx]
        np.add.at(g_feat, idx, d_logits @ classifier.weight)
    elif labeled:
        logits = feats[[i for i, _ in labeled]] @ classifier.weight.T
        loss_id = float(
            np.mean([classification_loss(logits[r], l) for r, (_, l) in enumerate(labeled)])
        )

    # triplet term (hinge subgradient; zero-distance pairs contribute no direction)
    valid = [(i, pn) for i, pn in enumerate(triplets.pairs) if pn is not None]
    loss_tri = 0.0
    if valid:
        coef = config.w_tri / len(valid)
        total = 0.0
        for i, (p, q) in valid:
            diff_ap = feats[i] - feats[p]
            diff_an = feats[i] - feats[q]
            d_ap = float(np.linalg.norm(diff_ap))
            d_an = float(np.linalg.norm(diff_an))
            hinge = d_ap + config.margin - d_an
            total += max(0.0, hinge)
            if hinge <= 0.0 or config.w_tri == 0.0:
                continue
            u_ap = diff_ap / d_ap if d_ap > 0.0 else np.zeros_like(diff_ap)
            u_an = diff_an / d_an if d_an > 0.0 else np.zeros_like(diff_an)
            g_feat[i] += coef * (u_ap - u_an)
            g_feat[p] -= coef * u_ap
            g_feat[q] += coef * u_an
        loss_tri = total / len(valid)

    # back through the normalization: dz = (g - f (f.g)) / ||z||
    inner = np.sum(g_feat * feats, axis=1, keepdims=True)
    g_z = (g_feat - feats * inner) / norms[:, None]
    g_w = g_z.T @ batch
    g_b = g_z.sum(axis=0)

    for name, g in (("classification", g_cls), ("head", g_w)):
        if not np.isfinite(g).all():
            raise TrainerError(f"non-finite gradient in {name} term")
    if not np.isfinite(g_b).all():
        raise TrainerError("non-finite gradient in head term")
    return Gradients(weight=g_w, bias=g_b, classifier=g_cls), loss_id, loss_tri


def make_batches(samples: SampleSet | int, batch_size: int, shuffle: bool, seed: int) -> list[np.ndarray]:
    """Index batches: contiguous reading-order chunks; shuffle permutes first (seeded)."""
    if batch_size < 2:
        raise TrainerError(f"batch_size must be >= 2, got {batch_size}")
    n_samples = samples if isinstance(samples, int) else len(samples)
    order = np.arange(n_samples)
    if shuffle:
        order = np.random.default_rng(seed).permutation(n_samples)
    return [order[i : i + batch_size] for i in range(0, n_samples, batch_size)]


@dataclass
class EpochLog:
    epoch: int
    n_clusters_face: int
    n_clusters_body: int
    n_noise_face: int
    n_noise_body: int
    merged_classes: int
    loss_id_face: float
    loss_tri_face: float
    loss_id_body: float
    loss_tri_body: float
    metrics: dict[str, float] = field(default_factory=dict)
    early_stop: bool = False

    def as_dict(self) -> dict:
        out = {
            "epoch": self.epoch,
            "n_clusters_face": self.n_clusters_face,
            "n_clusters_body": self.n_clusters_body,
            "n_noise_face": self.n_noise_face,
            "n_noise_body": self.n_noise_body,
            "merged_classes": self.merged_classes,
            "loss_id_face": self.loss_id_face,
            "loss_tri_face": self.loss_tri_face,
            "loss_id_body": self.loss_id_body,
            "loss_tri_body": self.loss_tri_body,
            "early_stop": self.early_stop,
        }
        out.update(self.metrics)
        return out


@dataclass
class TrainResult:
    face_head: EmbeddingHead
    body_head: EmbeddingHead
    log: list[EpochLog]


def _init_classifier(
    n_classes: int,
    originals: tuple[int, ...],
    space: MergedLabelSpace,
    own_part: str,
    own_agents: AgentBank,
    d_out: int,
) -> Classifier:
    """Rows start at the class's own-part agent; other-part classes start at zero."""
    w = np.zeros((n_classes, d_out))
    for new_id, old_id in enumerate(originals):
        part, cluster = space.origin(old_id)
        if part == own_part:
            w[new_id] = own_agents.agents[cluster]
    return Classifier(weight=w)


def _soft_labels_for(
    features: np.ndarray, assignment: cl.ClusterAssignment, temperature: float
) -> tuple[list[SoftLabel | None], AgentBank]:
    agents = cl.compute_agents(features, assignment)
    probs = soft_label_matrix(features, agents, temperature)
    out: list[SoftLabel | None] = []
    for i, lab in enumerate(assignment.labels):
        if lab == NOISE:
            out.append(None)
        else:
            top = int(np.argmax(probs[i]))
            out.append(SoftLabel(probs=probs[i], top_class=top, top_prob=float(probs[i][top])))
    return out, agents


def _cluster_part(features: np.ndarray, cfg: ClusteringConfig, seed: int) -> cl.ClusterAssignment:
    if cfg.algorithm == "dbscan":
        return cl.dbscan(features, eps=cfg.eps, min_pts=cfg.min_pts)
    return cl.kmeans(features, k=min(cfg.k, features.shape[0]), seed=seed)


def _train_part(
    x: np.ndarray,
    samples: list,
    labels: list[int | None],
    head: EmbeddingHead,
    classifier: Classifier,
    config: TrainConfig,
    mining_labels: list[int | None],
    epoch_seed: int,
) -> tuple[EmbeddingHead, Classifier, float, float]:
    """One epoch of SGD over the batch list; returns updated params and mean losses."""
    batches = make_batches(len(samples), config.batch_size, config.shuffle, epoch_seed)
    w, b, c = head.weight.copy(), head.bias.copy(), classifier.weight.copy()
    sum_id = sum_tri = 0.0
    n_batches = 0
    for _ in range(config.inner_iterations):
        for batch_idx in batches:
            cur_head = EmbeddingHead(weight=w, bias=b)
            cur_cls = Classifier(weight=c)
            batch_x = x[batch_idx]
            batch_samples = [samples[i] for i in batch_idx]
            batch_labels = [labels[i] for i in batch_idx]
            if len(batch_idx) >= 2:
                batch_feats = forward_batch(cur_head, batch_x)
                batch_mining = [mining_labels[i] for i in batch_idx]
                triplets = mine_triplets(
                    batch_feats, batch_samples, batch_mining, config.st_params, config.mining_mode
                )
            else:
                triplets = TripletSelection(pairs=(None,) * len(batch_idx))
            grads, loss_id, loss_tri = gradients(
                batch_x, cur_head, cur_cls, batch_labels, triplets, config
            )
            w -= config.learning_rate * grads.weight
            b -= config.learning_rate * grads.bias
            c -= config.learning_rate * grads.classifier
            sum_id += loss_id
            sum_tri += loss_tri
            n_batches += 1
    mean_id = sum_id / n_batches if n_batches else 0.0
    mean_tri = sum_tri / n_batches if n_batches else 0.0
    return EmbeddingHead(weight=w, bias=b), Classifier(weight=c), mean_id, mean_tri


def run_fsac(
    faces: SampleSet,
    bodies: SampleSet,
    graph: FaceBodyGraph,
    config: TrainConfig,
    eval_hook=None,
) -> TrainResult:
    """Alternate clustering, graph fusion, and SGD refinement of both heads.

    Per epoch: extract features, cluster each part, compute soft labels,
    fuse them across the graph into merged hard labels, then run
    ``inner_iterations`` SGD passes over the batch list of each part.
    Stops early when the fused-label partition repeats two epochs in a row.

    ``eval_hook(face_head, body_head) -> dict[str, float]`` is called after
    each epoch and merged into the log when provided.
    """
    rng = np.random.default_rng(config.seed)
    d_out_f = config.head_dim or faces.dim
    d_out_b = config.head_dim or bodies.dim
    face_head = init_head(faces.dim, d_out_f, rng)
    body_head = init_head(bodies.dim, d_out_b, rng)
    face_cls = Classifier(weight=np.zeros((0, d_out_f)))
    body_cls = Classifier(weight=np.zeros((0, d_out_b)))

    face_x = faces.feature_matrix()
    body_x = bodies.feature_matrix()
    face_list = list(faces.samples)
    body_list = list(bodies.samples)

    log: list[EpochLog] = []
    prev_partition = None
    for epoch in range(config.epochs):
        feats_f = forward_batch(face_head, face_x)
        feats_b = forward_batch(body_head, body_x)
        assign_f = _cluster_part(feats_f, config.clustering, config.seed * 1000 + epoch)
        assign_b = _cluster_part(feats_b, config.clustering, config.seed * 1000 + epoch + 1)
        if assign_f.n_clusters == 0 or assign_b.n_clusters == 0:
            part = "face" if assign_f.n_clusters == 0 else "body"
            raise TrainerError(
                f"epoch {epoch}: zero clusters on the {part} side (all noise); "
                f"loosen eps/min_pts or reduce noise"
            )
        soft_f, agents_f = _soft_labels_for(feats_f, assign_f, config.temperature)
        soft_b, agents_b = _soft_labels_for(feats_b, assign_b, config.temperature)
        space = MergedLabelSpace(n_face=assign_f.n_clusters, n_body=assign_b.n_clusters)
        active_graph = graph if config.use_fusion else FaceBodyGraph(pairs=())
        fused = fuse_labels(faces, soft_f, bodies, soft_b, active_graph, space)
        compact, n_classes, originals = relabel_compact(fused)

        if face_cls.n_classes != n_classes:
            face_cls = _init_classifier(n_classes, originals, space, "face", agents_f, d_out_f)
            body_cls = _init_classifier(n_classes, originals, space, "body", agents_b, d_out_b)

        if config.fusion_for_triplets:
            mining_f: list[int | None] = list(compact.face)
            mining_b: list[int | None] = list(compact.body)
        else:
            mining_f = [None if l == NOISE else int(l) for l in assign_f.labels]
            mining_b = [None if l == NOISE else int(l) for l in assign_b.labels]

        epoch_seed = config.seed + 7919 * (epoch + 1)
        face_head, face_cls, id_f, tri_f = _train_part(
            face_x, face_list, list(compact.face), face_head, face_cls, config, mining_f, epoch_seed
        )
        body_head, body_cls, id_b, tri_b = _train_part(
            body_x, body_list, list(compact.body), body_head, body_cls, config, mining_b, epoch_seed
        )

        entry = EpochLog(
            epoch=epoch,
            n_clusters_face=assign_f.n_clusters,
            n_clusters_body=assign_b.n_clusters,
            n_noise_face=int(np.sum(assign_f.labels == NOISE)),
            n_noise_body=int(np.sum(assign_b.labels == NOISE)),
            merged_classes=n_classes,
            loss_id_face=id_f,
            loss_tri_face=tri_f,
            loss_id_body=id_b,
            loss_tri_body=tri_b,
        )
        if eval_hook is not None:
            entry.metrics = {k: float(v) for k, v in eval_hook(face_head, body_head).items()}
        partition = compact.partition_key()
        if prev_partition is not None and partition == prev_partition:
            entry.early_stop = True
            log.append(entry)
            break
        prev_partition = partition
        log.append(entry)
    return TrainResult(face_head=face_head, body_head=body_head, log=log)
