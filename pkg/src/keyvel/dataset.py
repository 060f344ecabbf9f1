"""Corpus generation, stratified clustering, and 6-way subset assignment.

A corpus of performances is split into train/validation/test; inside
each split, k-means clusters on symbolic features are topped up by the
Robin Hood redistribution policy and then dealt round-robin into six
subsets, one per acoustic preset, so every subset tracks the split's
feature distribution.
"""

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Sequence, Tuple

import numpy as np
from sklearn.cluster import KMeans

from .events import PITCH_MAX, PITCH_MIN, VELOCITY_MAX, VELOCITY_MIN, NoteEvent, Performance
from .seeding import stream

N_SUBSETS = 6
TARGET_CARDINALITY = 6
N_FEATURES = 8


class SplitKind(str, Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


@dataclass
class SplitAssignment:
    """The performances of one split that one preset will render."""

    split: SplitKind
    preset_id: int
    performance_ids: List[str] = field(default_factory=list)


def generate_synthetic_performance(seed: int, n_notes: int) -> Performance:
    """Random-walk performance generator standing in for a real corpus.

    Pitch and velocity follow bounded random walks; inter-onset
    intervals and durations are log-uniform. Deterministic per seed.
    """
    if n_notes < 1:
        raise ValueError("need at least one note")
    rng = np.random.default_rng(seed)
    pitch = int(rng.integers(40, 90))
    velocity = int(rng.integers(30, 100))
    cursor = 0.0
    notes = []
    for _ in range(n_notes):
        pitch = int(np.clip(pitch + rng.integers(-24, 25), PITCH_MIN, PITCH_MAX))
        velocity = int(np.clip(velocity + rng.integers(-12, 13),
                               VELOCITY_MIN, VELOCITY_MAX))
        duration = float(np.exp(rng.uniform(np.log(0.7), np.log(2.0))))
        notes.append(NoteEvent(pitch, cursor, cursor + duration, velocity))
        cursor += float(np.exp(rng.uniform(np.log(0.3), np.log(1.2))))
    return Performance(notes=notes, source_id=f"synthetic-{seed:08d}")


def extract_clustering_features(perf: Performance) -> np.ndarray:
    """8 symbolic statistics describing one performance.

    [pitch mean, pitch std, velocity mean, velocity std, duration mean,
    duration std, note density in notes/s, onset-interval std]
    """
    if not perf.notes:
        raise ValueError("empty performance has no features")
    pitches = np.array([n.pitch for n in perf.notes], dtype=float)
    velocities = np.array([n.velocity for n in perf.notes], dtype=float)
    durations = np.array([n.duration for n in perf.notes], dtype=float)
    onsets = np.array([n.onset for n in perf.notes], dtype=float)
    span = float(max(n.offset for n in perf.notes) - onsets[0])
    density = len(perf.notes) / span if span > 0 else 0.0
    interval_std = float(np.std(np.diff(onsets))) if len(onsets) > 1 else 0.0
    return np.array([
        pitches.mean(), pitches.std(),
        velocities.mean(), velocities.std(),
        durations.mean(), durations.std(),
        density, interval_std,
    ])


def standardize_features(matrix: np.ndarray) -> np.ndarray:
    """Zero-mean unit-variance columns; constant columns pass through."""
    matrix = np.asarray(matrix, dtype=float)
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std[std == 0] = 1.0
    return (matrix - mean) / std


def cluster(features: np.ndarray, n_clusters: int, seed: int = 0):
    """K-means with 50 restarts, keeping the best-inertia solution.

    Returns (labels, centroids).
    """
    features = np.asarray(features, dtype=float)
    if n_clusters < 1:
        raise ValueError("need at least one cluster")
    if n_clusters > len(features):
        raise ValueError(f"cannot make {n_clusters} clusters "
                         f"from {len(features)} points")
    km = KMeans(n_clusters=n_clusters, n_init=50, random_state=seed % (2 ** 32))
    labels = km.fit_predict(features)
    return labels.astype(int), km.cluster_centers_.copy()


def robin_hood_redistribute(points: np.ndarray, labels: np.ndarray,
                            centroids: np.ndarray, t: int) -> np.ndarray:
    """Top up poor clusters by taking the nearest points from rich ones.

    While any cluster holds fewer than t points, the poorest cluster
    (ties: lowest index) receives the point nearest to its centroid
    (ties: lowest point index) among points in clusters above t.
    Centroids are never recomputed, donors never drop below t, and the
    point multiset is conserved.
    """
    points = np.asarray(points, dtype=float)
    labels = np.asarray(labels, dtype=int).copy()
    n_clusters = len(centroids)
    counts = np.bincount(labels, minlength=n_clusters)
    if n_clusters * t > len(points):
        raise ValueError(
            f"infeasible: {n_clusters} clusters * target {t} exceeds "
            f"{len(points)} points"
        )
    while True:
        poor = np.flatnonzero(counts < t)
        if len(poor) == 0:
            return labels
        target = poor[np.argmin(counts[poor])]  # argmin ties -> lowest index
        donors = np.flatnonzero(counts[labels] > t)
        # feasibility guarantees a donor exists while any cluster is poor
        dist = np.linalg.norm(points[donors] - centroids[target], axis=1)
        moved = donors[np.argmin(dist)]
        counts[labels[moved]] -= 1
        counts[target] += 1
        labels[moved] = target


def partition_into_subsets(labels: np.ndarray, n_subsets: int = N_SUBSETS,
                           seed: int = 0) -> List[List[int]]:
    """Deal cluster members round-robin into n_subsets point sets.

    Subset and cluster orders are shuffled once; each round gives every
    subset one uniformly drawn remaining point from every cluster that
    still has any, so subset sizes differ by at most the cluster count.
    """
    labels = np.asarray(labels, dtype=int)
    rng = np.random.default_rng(seed)
    cluster_ids = np.unique(labels)
    subset_order = rng.permutation(n_subsets)
    cluster_order = cluster_ids[rng.permutation(len(cluster_ids))]
    remaining = {c: list(np.flatnonzero(labels == c)) for c in cluster_ids}
    subsets: List[List[int]] = [[] for _ in range(n_subsets)]
    while any(remaining[c] for c in cluster_ids):
        for s in subset_order:
            for c in cluster_order:
                pool = remaining[c]
                if pool:
                    subsets[int(s)].append(pool.pop(int(rng.integers(len(pool)))))
    return subsets


def rebalance_subsets(subsets: List[List[int]], seed: int = 0) -> List[List[int]]:
    """Move random points from the largest subset to the smallest until
    sizes differ by at most one."""
    rng = np.random.default_rng(seed)
    subsets = [list(s) for s in subsets]
    while True:
        sizes = [len(s) for s in subsets]
        big, small = int(np.argmax(sizes)), int(np.argmin(sizes))
        if sizes[big] - sizes[small] <= 1:
            return subsets
        subsets[small].append(
            subsets[big].pop(int(rng.integers(len(subsets[big]))))
        )


def split_corpus(performances: Sequence[Performance], seed: int,
                 fractions: Tuple[float, float] = (0.8, 0.1)
                 ) -> Dict[SplitKind, List[int]]:
    """Shuffle the corpus and cut train/validation/test index lists."""
    n = len(performances)
    order = stream(seed, "corpus-split").permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        SplitKind.TRAIN: [int(i) for i in order[:n_train]],
        SplitKind.VALIDATION: [int(i) for i in order[n_train:n_train + n_val]],
        SplitKind.TEST: [int(i) for i in order[n_train + n_val:]],
    }


def assign_preset_subsets(performances: Sequence[Performance], seed: int
                          ) -> List[SplitAssignment]:
    """Full stratified assignment: split, cluster, redistribute, deal.

    Returns 18 SplitAssignments (3 splits x 6 presets). Performance ids
    must be unique across the corpus.
    """
    ids = [p.source_id for p in performances]
    if len(set(ids)) != len(ids):
        raise ValueError("performance ids must be unique")
    raw = np.stack([extract_clustering_features(p) for p in performances])
    standardized = standardize_features(raw)
    split_indices = split_corpus(performances, seed)

    assignments = []
    for split, indices in split_indices.items():
        k = len(indices)
        if k == 0:
            raise ValueError(f"split {split.value} is empty")
        pts = standardized[indices]
        n_clusters = max(1, k // N_SUBSETS)
        target = min(TARGET_CARDINALITY, k)
        labels, centroids = cluster(
            pts, n_clusters,
            seed=int(stream(seed, "kmeans", split.value).integers(2 ** 31)),
        )
        labels = robin_hood_redistribute(pts, labels, centroids, target)
        subsets = partition_into_subsets(
            labels, N_SUBSETS,
            seed=int(stream(seed, "partition", split.value).integers(2 ** 31)),
        )
        subsets = rebalance_subsets(
            subsets,
            seed=int(stream(seed, "rebalance", split.value).integers(2 ** 31)),
        )
        for preset_id, members in enumerate(subsets):
            assignments.append(SplitAssignment(
                split=split,
                preset_id=preset_id,
                performance_ids=sorted(ids[indices[m]] for m in members),
            ))
    return assignments
