"""Sample-wise partitioning and conflict scoring.

A partition is a static total map from sample ids to expert ids. The quality
of a partition is the expected pairwise conflict ``1 - cos(u, v)`` between
within-cluster pairs, measured either on embedding surrogates or on supplied
per-sample gradient vectors. Partitioners provided:

* label tiers (head / medium / tail frequency bands, plus a dedicated
  expert for the healthy class when K = 4),
* bisecting 2-means on embeddings in cosine geometry, descending the same
  conflict objective,
* uniform random and single-expert controls.

Tie-breaking everywhere prefers the lowest sample/class/expert id, so every
partitioner is bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .datagen import Corpus
from .errors import DegenerateInputError, InsufficientDataError
from .seeding import rng_for

__all__ = [
    "Partition",
    "ConflictScore",
    "pairwise_conflict",
    "partition_conflict",
    "label_tier_partition",
    "bisecting_kmeans_partition",
    "random_partition",
    "single_partition",
    "class_to_expert",
    "composition_report",
    "save_partition",
    "load_partition",
]

PARTITION_FORMAT = "tailflow-partition"
PARTITION_VERSION = 1

METHOD_LABEL_TIER = "label-tier"
METHOD_EMBEDDING_KMEANS = "embedding-kmeans"
METHOD_RANDOM = "random"
METHOD_SINGLE = "single"
_METHODS = (METHOD_LABEL_TIER, METHOD_EMBEDDING_KMEANS, METHOD_RANDOM, METHOD_SINGLE)


@dataclass
class Partition:
    """Total map sample_id -> expert_id, with per-expert class composition."""

    assignments: np.ndarray  # int64, indexed by sample_id
    num_experts: int
    method: str
    composition: list[dict[int, int]]

    def expert_of(self, sample_id: int) -> int:
        if not 0 <= sample_id < len(self.assignments):
            from .errors import UnknownSampleError

            raise UnknownSampleError(sample_id)
        return int(self.assignments[sample_id])

    def members(self, expert_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == expert_id)

    def expert_sizes(self) -> list[int]:
        return [int(np.sum(self.assignments == k)) for k in range(self.num_experts)]

    def validate(self, corpus: Corpus) -> None:
        if self.method not in _METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if len(self.assignments) != len(corpus):
            raise ValueError("assignments do not cover the corpus exactly")
        if self.num_experts < 1:
            raise ValueError("num_experts must be >= 1")
        if self.method == METHOD_SINGLE and self.num_experts != 1:
            raise ValueError("single method implies one expert")
        if self.assignments.min() < 0 or self.assignments.max() >= self.num_experts:
            raise ValueError("expert id out of range")
        if sum(sum(h.values()) for h in self.composition) != len(corpus):
            raise ValueError("composition does not sum to corpus size")


@dataclass
class ConflictScore:
    """Mean pairwise conflict per cluster and overall (pair-weighted)."""

    per_cluster: list[float]
    overall: float
    pair_count: int


def _build(corpus: Corpus, assignments: np.ndarray, num_experts: int, method: str) -> Partition:
    class_ids = corpus.class_ids()
    composition: list[dict[int, int]] = []
    for k in range(num_experts):
        ids, counts = np.unique(class_ids[assignments == k], return_counts=True)
        composition.append({int(c): int(n) for c, n in zip(ids, counts)})
    part = Partition(
        assignments=assignments.astype(np.int64),
        num_experts=num_experts,
        method=method,
        composition=composition,
    )
    part.validate(corpus)
    return part


def pairwise_conflict(u: np.ndarray, v: np.ndarray) -> float:
    """``1 - cos(u, v)``, in [0, 2]. Undefined (raises) for zero-norm input."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim != 1 or u.size < 1:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("cosine undefined for zero-norm vector")
    return float(1.0 - np.dot(u, v) / (nu * nv))


def _normalized_rows(vectors: np.ndarray, what: str) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} vector")
    return vectors / norms[:, None]


def _cluster_conflicts(
    unit: np.ndarray, assignments: np.ndarray, num_clusters: int
) -> ConflictScore:
    per_cluster: list[float] = []
    weighted = 0.0
    total_pairs = 0
    for k in range(num_clusters):
        members = np.flatnonzero(assignments == k)
        m = len(members)
        if m < 2:
            per_cluster.append(0.0)
            continue
        gram = unit[members] @ unit[members].T
        off_diag_sum = (gram.sum() - np.trace(gram)) / 2.0
        pairs = m * (m - 1) // 2
        value = float(np.clip(1.0 - off_diag_sum / pairs, 0.0, 2.0))
        per_cluster.append(value)
        weighted += value * pairs
        total_pairs += pairs
    overall = weighted / total_pairs if total_pairs > 0 else 0.0
    return ConflictScore(per_cluster=per_cluster, overall=float(overall), pair_count=total_pairs)


def partition_conflict(
    corpus: Corpus,
    partition: Partition,
    features: str = "embedding",
    gradients: dict[int, np.ndarray] | None = None,
) -> ConflictScore:
    """Exact mean conflict over all unordered within-cluster pairs.

    ``features`` selects the vector source: "embedding" uses the corpus
    embedding surrogates, "gradients" uses the supplied per-sample gradient
    map. Clusters of size < 2 contribute zero pairs and a value of 0.
    """
    if features == "embedding":
        vectors = corpus.embedding_matrix()
    elif features == "gradients":
        if gradients is None:
            raise ValueError("gradients mode requires a gradient map")
        missing = [s.sample_id for s in corpus.samples if s.sample_id not in gradients]
        if missing:
            raise ValueError(f"missing gradients for samples {missing[:5]}...")
        vectors = np.stack([gradients[s.sample_id] for s in corpus.samples])
    else:
        raise ValueError(f"unknown feature source {features!r}")
    unit = _normalized_rows(np.asarray(vectors, dtype=np.float64), features)
    return _cluster_conflicts(unit, partition.assignments, partition.num_experts)


def _tier_boundaries(counts: list[int], tiers: int) -> list[int]:
    """Greedy sweep over descending counts: close a tier when taking the next
    class would land farther from the adaptive per-tier target."""
    bounds: list[int] = []
    i = 0
    remaining_total = sum(counts)
    for t in range(tiers):
        remaining_tiers = tiers - t
        if remaining_tiers == 1:
            bounds.append(len(counts))
            break
        target = remaining_total / remaining_tiers
        cum = 0
        while True:
            left = len(counts) - i
            if left <= remaining_tiers - 1:
                break
            c = counts[i]
            if cum > 0 and abs(cum + c - target) > abs(cum - target):
                break
            cum += c
            i += 1
        bounds.append(i)
        remaining_total -= cum
    return bounds


def label_tier_partition(corpus: Corpus, num_experts: int = 4) -> Partition:
    """Head/medium/tail frequency tiers; the healthy class gets its own
    expert (the last one) when ``num_experts`` is 4.

    Classes are atomic: each maps wholly to one tier. Tiers are contiguous
    bands of the descending-count order, with boundaries chosen greedily so
    tier totals are as balanced as possible.
    """
    if num_experts not in (3, 4):
        raise ValueError(f"label tiers support K in {{3, 4}}, got {num_experts}")
    healthy = corpus.healthy_class_id()
    if num_experts == 4 and healthy is None:
        raise ValueError("K = 4 label tiers require a designated healthy class")
    tiered = [c for c in corpus.classes if not (num_experts == 4 and c.class_id == healthy)]
    if len(tiered) < 3:
        raise InsufficientDataError("fewer non-healthy classes than tiers")

    tiered.sort(key=lambda c: (-c.count, c.class_id))
    bounds = _tier_boundaries([c.count for c in tiered], 3)
    class_to_tier: dict[int, int] = {}
    start = 0
    for tier, end in enumerate(bounds):
        for c in tiered[start:end]:
            class_to_tier[c.class_id] = tier
        start = end
    if num_experts == 4:
        class_to_tier[healthy] = 3

    assignments = np.array([class_to_tier[s.class_id] for s in corpus.samples], dtype=np.int64)
    return _build(corpus, assignments, num_experts, METHOD_LABEL_TIER)


def _max_conflict_pair(gram: np.ndarray) -> tuple[int, int]:
    """Indices of the most-conflicting pair; first occurrence in row-major
    order wins (lowest i, then lowest j)."""
    n = gram.shape[0]
    conf = 1.0 - gram
    conf[np.tril_indices(n)] = -np.inf
    i, j = np.unravel_index(int(np.argmax(conf)), conf.shape)
    return int(i), int(j)


def _two_means_cosine(unit: np.ndarray, max_iters: int) -> np.ndarray:
    """Cosine 2-means seeded at the maximal-conflict pair. Returns 0/1 labels."""
    n = unit.shape[0]
    gram = unit @ unit.T
    i, j = _max_conflict_pair(gram)
    centroids = np.stack([unit[i], unit[j]])
    labels: np.ndarray | None = None
    for _ in range(max_iters):
        sims = unit @ centroids.T  # (n, 2)
        new_labels = (sims[:, 1] > sims[:, 0]).astype(np.int64)  # tie -> side 0
        if len(np.unique(new_labels)) < 2:
            break  # keep previous non-degenerate labels
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        means = np.stack([unit[labels == 0].mean(axis=0), unit[labels == 1].mean(axis=0)])
        norms = np.linalg.norm(means, axis=1)
        if np.any(norms < 1e-12):
            break
        centroids = means / norms[:, None]
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
        labels[j] = 1
    return labels


def _objective(unit: np.ndarray, clusters: list[np.ndarray]) -> float:
    assignments = np.empty(unit.shape[0], dtype=np.int64)
    for k, members in enumerate(clusters):
        assignments[members] = k
    return _cluster_conflicts(unit, assignments, len(clusters)).overall


def bisecting_kmeans_partition(
    corpus: Corpus,
    num_experts: int,
    seed: int = 0,
    max_iters: int = 50,
    return_history: bool = False,
) -> Partition | tuple[Partition, list[float]]:
    """Bisect the most-conflicting cluster with cosine 2-means until
    ``num_experts`` clusters exist.

    The algorithm is deterministic (the seed only names the run): 2-means is
    seeded at the maximal-conflict pair within the cluster being split. A
    split is accepted only if the overall objective does not increase; the
    fallback peels off the single highest-conflict sample, which provably
    never increases the pair-weighted objective. ``return_history`` also
    returns the objective after every bisection.
    """
    del seed  # deterministic initialization; kept for interface stability
    n = len(corpus)
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    if num_experts > n:
        raise InsufficientDataError(f"K = {num_experts} exceeds corpus size {n}")

    unit = _normalized_rows(corpus.embedding_matrix(), "embedding")
    clusters: list[np.ndarray] = [np.arange(n)]
    history = [_objective(unit, clusters)]

    while len(clusters) < num_experts:
        splittable = [idx for idx, c in enumerate(clusters) if len(c) >= 2]
        scored = []
        for idx in splittable:
            members = clusters[idx]
            gram = unit[members] @ unit[members].T
            m = len(members)
            pairs = m * (m - 1) / 2.0
            value = 1.0 - (gram.sum() - np.trace(gram)) / 2.0 / pairs
            scored.append((-value, -m, int(members[0]), idx))
        scored.sort()
        target_idx = scored[0][3]
        members = clusters[target_idx]

        labels = _two_means_cosine(unit[members], max_iters)
        left, right = members[labels == 0], members[labels == 1]
        candidate = clusters[:target_idx] + clusters[target_idx + 1 :] + [left, right]
        new_obj = _objective(unit, candidate)
        if new_obj > history[-1] + 1e-12:
            # peel the sample with the largest mean conflict to the rest;
            # this never increases the pair-weighted objective
            gram = unit[members] @ unit[members].T
            row_mean = (1.0 - gram).sum(axis=1) / (len(members) - 1)
            worst = int(np.argmax(row_mean))
            left = np.delete(members, worst)
            right = members[worst : worst + 1]
            candidate = clusters[:target_idx] + clusters[target_idx + 1 :] + [left, right]
            new_obj = _objective(unit, candidate)
        clusters = candidate
        history.append(new_obj)

    clusters.sort(key=lambda c: int(c[0]))
    assignments = np.empty(n, dtype=np.int64)
    for k, members in enumerate(clusters):
        assignments[members] = k
    part = _build(corpus, assignments, num_experts, METHOD_EMBEDDING_KMEANS)
    if return_history:
        return part, history
    return part


def random_partition(corpus: Corpus, num_experts: int, seed: int) -> Partition:
    """Uniform independent expert per sample, deterministic per seed."""
    if num_experts < 1:
        raise ValueError("num_experts must be >= 1")
    rng = rng_for(seed, "random-partition")
    assignments = rng.integers(0, num_experts, size=len(corpus), dtype=np.int64)
    return _build(corpus, assignments, num_experts, METHOD_RANDOM)


def single_partition(corpus: Corpus) -> Partition:
    """Everything in expert 0 (the single-expert control)."""
    return _build(corpus, np.zeros(len(corpus), dtype=np.int64), 1, METHOD_SINGLE)


def class_to_expert(partition: Partition, corpus: Corpus) -> dict[int, int]:
    """Majority expert per class (ties -> lowest expert id)."""
    mapping: dict[int, int] = {}
    class_ids = corpus.class_ids()
    for c in corpus.classes:
        mask = class_ids == c.class_id
        experts, counts = np.unique(partition.assignments[mask], return_counts=True)
        order = sorted(zip(-counts, experts))
        mapping[c.class_id] = int(order[0][1])
    return mapping


def composition_report(partition: Partition, corpus: Corpus) -> dict:
    """JSON-ready per-expert class histogram report."""
    sizes = partition.expert_sizes()
    total = len(corpus)
    report = {
        "format_version": PARTITION_VERSION,
        "method": partition.method,
        "num_experts": partition.num_experts,
        "geometry": "cosine",
        "total_samples": total,
        "experts": {
            str(k): {
                "size": sizes[k],
                "share": sizes[k] / total,
                "class_counts": {str(c): n for c, n in sorted(partition.composition[k].items())},
            }
            for k in range(partition.num_experts)
        },
    }
    return report


def save_partition(partition: Partition, path: str | Path) -> None:
    path = Path(path)
    lines = [f"# {PARTITION_FORMAT} {PARTITION_VERSION}"]
    lines.append(f"# method {partition.method}")
    lines.append(f"# experts {partition.num_experts}")
    for sid, k in enumerate(partition.assignments):
        lines.append(f"{sid} {int(k)}")
    path.write_text("\n".join(lines) + "\n")


def load_partition(path: str | Path, corpus: Corpus) -> Partition:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or not lines[0].startswith(f"# {PARTITION_FORMAT} "):
        raise ValueError(f"{path}: not a {PARTITION_FORMAT} file")
    version = int(lines[0].split()[-1])
    if version != PARTITION_VERSION:
        raise ValueError(f"{path}: unsupported partition version {version}")
    method = None
    num_experts = None
    pairs: list[tuple[int, int]] = []
    for line in lines[1:]:
        if not line.strip():
            continue
        if line.startswith("# method"):
            method = line.split()[-1]
        elif line.startswith("# experts"):
            num_experts = int(line.split()[-1])
        elif not line.startswith("#"):
            sid, k = line.split()
            pairs.append((int(sid), int(k)))
    if method is None or num_experts is None:
        raise ValueError(f"{path}: missing method/experts header")
    assignments = np.full(len(pairs), -1, dtype=np.int64)
    for sid, k in pairs:
        assignments[sid] = k
    return _build(corpus, assignments, num_experts, method)
