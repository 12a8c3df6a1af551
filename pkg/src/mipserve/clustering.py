"""K-means over user vectors plus the per-cluster angular distortion ceiling.

Lloyd iterations minimize plain L2 distance (spherical variants pay for
pairwise cosine work and per-iteration re-projection), but the quantity the
serving index cares about is angular: each cluster records the largest angle
between any member and the centroid, which later loosens the per-item score
ceilings just enough to stay conservative for every member.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model_io import FactorMatrix

DEFAULT_NUM_CLUSTERS = 8
DEFAULT_MAX_ITERS = 100

# Angle assigned when a vector has zero norm and the angle is undefined; the
# most conservative choice, so downstream ceilings stay valid upper bounds.
DEGENERATE_ANGLE = np.pi


@dataclass(frozen=True)
class Clustering:
    """Result of clustering the user matrix.

    ``max_angle[c]`` is the largest user-to-centroid angle in cluster ``c``
    (radians in [0, pi]); ``members`` and ``assignment`` are mutually
    consistent partitions of the user ids.
    """

    centroids: FactorMatrix
    assignment: np.ndarray
    max_angle: np.ndarray
    members: tuple[np.ndarray, ...]
    objective: np.ndarray
    seed: int

    @property
    def num_clusters(self) -> int:
        return self.centroids.rows


def angular_distance(a, b) -> float:
    """Angle in [0, pi] between two nonzero vectors, scale-invariant.

    Computed in half-angle form, 2*atan2(|x-y|, |x+y|) on the unit vectors,
    which stays accurate where the clamped-arccos form loses half its digits
    (near 0 and pi); the cosine is implicitly clamped by construction.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("angular distance is undefined for zero-norm vectors")
    x = a / na
    y = b / nb
    return float(2.0 * np.arctan2(np.linalg.norm(x - y), np.linalg.norm(x + y)))


def angles_to_center(vectors: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Per-row angle to ``center``; degenerate rows (or center) get pi."""
    norms = np.linalg.norm(vectors, axis=1)
    cn = np.linalg.norm(center)
    if cn == 0.0:
        return np.full(vectors.shape[0], DEGENERATE_ANGLE)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = vectors / safe[:, None]
    y = center / cn
    angles = 2.0 * np.arctan2(
        np.linalg.norm(unit - y, axis=1), np.linalg.norm(unit + y, axis=1)
    )
    angles[norms == 0.0] = DEGENERATE_ANGLE
    return angles


def compute_max_angles(users, centroids, assignment) -> np.ndarray:
    """Max member-to-centroid angle per cluster (0 for perfectly tight clusters)."""
    uvals = users.values if isinstance(users, FactorMatrix) else np.asarray(users, dtype=np.float64)
    cvals = centroids.values if isinstance(centroids, FactorMatrix) else np.asarray(centroids, dtype=np.float64)
    assignment = np.asarray(assignment)
    num_clusters = cvals.shape[0]
    out = np.zeros(num_clusters)
    for c in range(num_clusters):
        ids = np.flatnonzero(assignment == c)
        if ids.size == 0:
            continue
        out[c] = angles_to_center(uvals[ids], cvals[c]).max()
    return out


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # ||p - c||^2 = ||p||^2 + ||c||^2 - 2 p.c; clip tiny negatives from rounding
    p2 = (points * points).sum(axis=1)[:, None]
    c2 = (centers * centers).sum(axis=1)[None, :]
    d2 = p2 + c2 - 2.0 * (points @ centers.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def _plusplus_seeds(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]))
    first = int(rng.integers(0, n))
    centers[0] = points[first]
    d2 = _squared_distances(points, centers[:1]).ravel()
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # fewer distinct points than seeds requested; fall back to the
            # lowest-id point not already chosen
            taken = {tuple(c) for c in centers[:j]}
            pick = next((i for i in range(n) if tuple(points[i]) not in taken), j % n)
        else:
            pick = int(rng.choice(n, p=d2 / total))
        centers[j] = points[pick]
        d2 = np.minimum(d2, _squared_distances(points, centers[j : j + 1]).ravel())
    return centers


def _repair_empty(points, centers, assignment, d2_assigned):
    """Give each empty cluster the member farthest from its current centroid."""
    counts = np.bincount(assignment, minlength=centers.shape[0])
    for c in np.flatnonzero(counts == 0):
        order = np.argsort(-d2_assigned, kind="stable")
        for cand in order:
            cand = int(cand)
            if counts[assignment[cand]] > 1:
                counts[assignment[cand]] -= 1
                assignment[cand] = c
                counts[c] = 1
                centers[c] = points[cand]
                d2_assigned[cand] = 0.0
                break


def kmeans(
    users: FactorMatrix,
    num_clusters: int = DEFAULT_NUM_CLUSTERS,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> Clustering:
    """Lloyd iterations with k-means++ seeding, stopping on stable assignments.

    Deterministic for a fixed seed. Empty clusters are repaired by reseeding
    with the point farthest from its assigned centroid, so the output never
    contains an empty cluster.
    """
    points = users.values
    n = points.shape[0]
    if not 1 <= num_clusters <= n:
        raise ValueError(f"num_clusters must be in [1, {n}], got {num_clusters}")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")

    rng = np.random.default_rng(seed)
    centers = _plusplus_seeds(points, num_clusters, rng)

    d2 = _squared_distances(points, centers)
    assignment = d2.argmin(axis=1)
    d2_assigned = d2[np.arange(n), assignment]
    history = [float(d2_assigned.sum())]

    for _ in range(max_iters):
        for c in range(num_clusters):
            mask = assignment == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
        _repair_empty(points, centers, assignment, d2_assigned)

        d2 = _squared_distances(points, centers)
        new_assignment = d2.argmin(axis=1)
        d2_assigned = d2[np.arange(n), new_assignment]
        history.append(float(d2_assigned.sum()))
        if np.array_equal(new_assignment, assignment):
            break
        assignment = new_assignment

    _repair_empty(points, centers, assignment, d2_assigned)

    assignment = assignment.astype(np.int64)
    members = tuple(np.flatnonzero(assignment == c) for c in range(num_clusters))
    max_angle = compute_max_angles(points, centers, assignment)
    objective = np.asarray(history)
    for arr in (assignment, max_angle, objective):
        arr.setflags(write=False)
    return Clustering(
        centroids=FactorMatrix(centers),
        assignment=assignment,
        max_angle=max_angle,
        members=members,
        objective=objective,
        seed=seed,
    )
