"""Clustered upper-bound index for exact top-K maximum inner product queries.

For each cluster the index keeps every item sorted descending by a
conservative ceiling on the norm-scaled score (u.i)/||u||, valid for every
user in the cluster: ``||i|| * cos(angle(i, centroid) - slack)`` where the
slack is the cluster's largest user-to-centroid angle, or plain ``||i||``
when the slack covers the whole angle. A query walks its cluster's list,
keeps a running top-K of true scores, and stops at the first position whose
ceiling the current K-th best already beats; everything after is provably
worse, so results are exact.

Internally the walk compares raw scores u.i against ceilings scaled by
||u|| once per query (equivalent under positive scaling), so returned
scores are the same floats a brute-force pass computes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .clustering import DEGENERATE_ANGLE, Clustering, angular_distance
from .model_io import (
    DimensionMismatchError,
    FactorMatrix,
    FormatError,
    ModelPair,
    NonFiniteValueError,
)

DEFAULT_BLOCK_SIZE = 4096

INDEX_MAGIC = b"MFIDX001"
_IDX_HEADER = struct.Struct("<8sQQQQQq")

_CHUNK = 1024
_USER_TILE = 2048


@dataclass(frozen=True)
class TopKResult:
    """Top items for one user: scores descending, ties by ascending item id.

    ``visited`` counts the items whose true score was computed to produce the
    result. Work-shared batch queries score the whole shared prefix, so their
    counts are floored at the prefix length.
    """

    user_id: int
    item_ids: np.ndarray
    scores: np.ndarray
    visited: int

    @property
    def entries(self) -> list[tuple[int, float]]:
        return list(zip(self.item_ids.tolist(), self.scores.tolist()))


@dataclass(frozen=True)
class CentroidIndex:
    """Per-cluster item lists sorted by score ceiling, plus item norms.

    ``item_ids[c]`` is a permutation of all item ids and ``bounds[c]`` is the
    matching non-increasing ceiling sequence. Storage is exactly
    ``num_clusters * num_items`` entries. Immutable; safe to share across
    threads for reads.
    """

    item_ids: np.ndarray
    bounds: np.ndarray
    item_norms: np.ndarray
    block_size: int
    clustering: Clustering

    @property
    def num_clusters(self) -> int:
        return self.item_ids.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_ids.shape[1]

    @property
    def entry_count(self) -> int:
        return self.item_ids.shape[0] * self.item_ids.shape[1]


def item_bound(item_norm: float, item_angle: float, cluster_angle: float) -> float:
    """Score ceiling for one item: ||i||*cos(item_angle - cluster_angle) while
    the cluster's angular slack is smaller than the item's angle, else ||i||."""
    if item_norm < 0.0:
        raise ValueError("item_norm must be >= 0")
    for name, angle in (("item_angle", item_angle), ("cluster_angle", cluster_angle)):
        if not 0.0 <= angle <= np.pi:
            raise ValueError(f"{name} outside [0, pi]: {angle}")
    if cluster_angle < item_angle:
        return float(item_norm * np.cos(item_angle - cluster_angle))
    return float(item_norm)


def _item_angles(item_values: np.ndarray, item_norms: np.ndarray, center: np.ndarray) -> np.ndarray:
    """Item-to-centroid angles in half-angle form; zero-norm items or centers
    get pi/2 (their score ceiling collapses to 0 resp. stays at ||i||)."""
    cn = np.linalg.norm(center)
    if cn == 0.0:
        return np.full(item_values.shape[0], np.pi / 2.0)
    safe = np.where(item_norms > 0.0, item_norms, 1.0)
    unit = item_values / safe[:, None]
    y = center / cn
    angles = 2.0 * np.arctan2(
        np.linalg.norm(unit - y, axis=1), np.linalg.norm(unit + y, axis=1)
    )
    angles[item_norms == 0.0] = np.pi / 2.0
    return angles


def _cluster_bounds(item_values, item_norms, center, slack) -> np.ndarray:
    angles = _item_angles(item_values, item_norms, center)
    return np.where(slack < angles, item_norms * np.cos(angles - slack), item_norms)


def _sorted_list(bounds: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((np.arange(bounds.shape[0]), -bounds)).astype(np.int64)
    return order, bounds[order]


def build_index(model: ModelPair, clustering: Clustering, block_size: int = DEFAULT_BLOCK_SIZE) -> CentroidIndex:
    """Build the sorted ceiling lists for every cluster.

    Deterministic for fixed inputs: ceilings tie-break by ascending item id.
    ``block_size`` is the work-sharing prefix length, clamped to the item
    count at query time.
    """
    if clustering.assignment.shape[0] != model.num_users:
        raise ValueError(
            f"clustering covers {clustering.assignment.shape[0]} users, model has {model.num_users}"
        )
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    items = model.items.values
    n = model.num_items
    norms = np.linalg.norm(items, axis=1)
    num_clusters = clustering.num_clusters

    ids = np.empty((num_clusters, n), dtype=np.int64)
    bounds = np.empty((num_clusters, n))
    for c in range(num_clusters):
        row = _cluster_bounds(items, norms, clustering.centroids.values[c], clustering.max_angle[c])
        ids[c], bounds[c] = _sorted_list(row)

    for arr in (ids, bounds, norms):
        arr.setflags(write=False)
    return CentroidIndex(ids, bounds, norms, int(block_size), clustering)


def _select_topk(scores: np.ndarray, ids: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """K best candidates ordered by score descending, item id ascending."""
    order = np.lexsort((ids, -scores))
    if order.size > k:
        order = order[:k]
    return ids[order], scores[order]


def _first_stop(top_scores: np.ndarray, r: np.ndarray, ceilings: np.ndarray, k: int) -> int:
    """First position p where the running k-th best of top+r[:p] exceeds
    ceilings[p]; r.size when the walk survives the whole chunk.

    The predicate is monotone (the k-th best only rises, ceilings only fall),
    so a binary search recovers the exact sequential stopping point.
    """
    lo, hi = 1, r.size
    while lo < hi:
        mid = (lo + hi) // 2
        cat = np.concatenate([top_scores, r[:mid]])
        kth = np.partition(cat, cat.size - k)[cat.size - k]
        if kth > ceilings[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def _walk(
    items: np.ndarray,
    list_ids: np.ndarray,
    list_bounds: np.ndarray,
    u: np.ndarray,
    k: int,
    *,
    start: int = 0,
    warm_ids: np.ndarray | None = None,
    warm_scores: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, int]:
    """Early-terminating list walk; returns (ids, scores, visited).

    Scores the first K positions unconditionally, then advances while the
    running K-th best score does not exceed the next ceiling. Processes the
    list in chunks but reproduces the per-item sequential semantics exactly,
    including the visited count.
    """
    n = list_ids.shape[0]
    k_eff = min(k, n)
    u_norm = float(np.linalg.norm(u))
    ceilings = list_bounds * u_norm

    if warm_ids is None:
        top_ids = np.empty(0, dtype=np.int64)
        top_scores = np.empty(0)
        j = 0
    else:
        top_ids, top_scores = warm_ids, warm_scores
        j = start
    visited = j

    if top_ids.size < k_eff and j < n:
        take = min(n, max(j, k_eff))
        r = items[list_ids[j:take]] @ u
        top_ids, top_scores = _select_topk(
            np.concatenate([top_scores, r]), np.concatenate([top_ids, list_ids[j:take]]), k_eff
        )
        visited = j = take

    m = top_scores[-1]
    while j < n:
        if m > ceilings[j]:
            break
        end = min(j + _CHUNK, n)
        r = items[list_ids[j:end]] @ u
        c = ceilings[j:end]
        if r.max() < m:
            if c[-1] >= m:
                visited = j = end
                continue
            # no replacements possible; stop where the ceiling first drops below m
            visited = j + int(np.searchsorted(-c, -m, side="right"))
            break
        p = _first_stop(top_scores, r, c, k_eff)
        if p < r.size:
            if p:
                top_ids, top_scores = _select_topk(
                    np.concatenate([top_scores, r[:p]]),
                    np.concatenate([top_ids, list_ids[j : j + p]]),
                    k_eff,
                )
            visited = j + p
            break
        top_ids, top_scores = _select_topk(
            np.concatenate([top_scores, r]), np.concatenate([top_ids, list_ids[j:end]]), k_eff
        )
        m = top_scores[-1]
        visited = j = end

    return top_ids, top_scores, visited


def query_user(index: CentroidIndex, model: ModelPair, user_id: int, k: int) -> TopKResult:
    """Exact top-K for one model user via their cluster's list walk."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 <= user_id < model.num_users:
        raise ValueError(f"user_id {user_id} out of range [0, {model.num_users})")
    c = int(index.clustering.assignment[user_id])
    ids, scores, visited = _walk(
        model.items.values, index.item_ids[c], index.bounds[c], model.users.values[user_id], k
    )
    return TopKResult(user_id, ids, scores, visited)


def query_vector(index: CentroidIndex, model: ModelPair, vector, k: int) -> TopKResult:
    """Exact top-K for an arbitrary query vector (user_id -1 in the result).

    Routes to the nearest centroid; when the vector's angle exceeds the
    cluster's recorded slack, the cluster's ceilings are recomputed locally
    with the wider slack so the walk stays exact. Shared state is untouched.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    u = np.asarray(vector, dtype=np.float64)
    if u.shape != (model.factors,):
        raise DimensionMismatchError(f"vector shape {u.shape} != ({model.factors},)")
    if not np.isfinite(u).all():
        raise NonFiniteValueError("query vector contains non-finite values")
    cvals = index.clustering.centroids.values
    c = int(((cvals - u) ** 2).sum(axis=1).argmin())

    u_norm = np.linalg.norm(u)
    cn = np.linalg.norm(cvals[c])
    if u_norm == 0.0 or cn == 0.0:
        theta = DEGENERATE_ANGLE
    else:
        theta = angular_distance(u, cvals[c])

    if theta <= index.clustering.max_angle[c]:
        list_ids, list_bounds = index.item_ids[c], index.bounds[c]
    else:
        row = _cluster_bounds(model.items.values, index.item_norms, cvals[c], theta)
        list_ids, list_bounds = _sorted_list(row)

    ids, scores, visited = _walk(model.items.values, list_ids, list_bounds, u, k)
    return TopKResult(-1, ids, scores, visited)


def query_batch(
    index: CentroidIndex,
    model: ModelPair,
    user_ids=None,
    k: int = 1,
    work_sharing: bool = True,
    precomputed: dict[int, TopKResult] | None = None,
) -> list[TopKResult]:
    """Top-K for many users; identical entries with work sharing on or off.

    With work sharing on, the first ``block_size`` items of each cluster's
    list are scored for all that cluster's users in one blocked multiply;
    each user then continues a per-user walk from the end of the prefix with
    their running top-K pre-filled. ``precomputed`` results (e.g. cached from
    walk-length sampling) are reused verbatim.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if user_ids is None:
        user_ids = range(model.num_users)
    uids = [int(u) for u in user_ids]
    for uid in uids:
        if not 0 <= uid < model.num_users:
            raise ValueError(f"user_id {uid} out of range [0, {model.num_users})")

    precomputed = precomputed or {}
    results: dict[int, TopKResult] = {uid: precomputed[uid] for uid in uids if uid in precomputed}
    pending = [uid for uid in uids if uid not in results]

    if not work_sharing:
        for uid in pending:
            results[uid] = query_user(index, model, uid, k)
        return [results[uid] for uid in uids]

    items = model.items.values
    users = model.users.values
    n = index.num_items
    k_eff = min(k, n)
    prefix = min(index.block_size, n)
    assignment = index.clustering.assignment

    by_cluster: dict[int, list[int]] = {}
    for uid in pending:
        by_cluster.setdefault(int(assignment[uid]), []).append(uid)

    for c, members in by_cluster.items():
        prefix_ids = index.item_ids[c, :prefix]
        block = items[prefix_ids]
        # user tiles bound the shared score matrix to ~tile x prefix floats
        for t in range(0, len(members), _USER_TILE):
            tile = members[t : t + _USER_TILE]
            uarr = users[tile]
            shared = uarr @ block.T
            kth = None
            if prefix > k_eff:
                kth = np.partition(shared, prefix - k_eff, axis=1)[:, prefix - k_eff]
            next_ceiling = None
            if prefix < n:
                next_ceiling = index.bounds[c, prefix] * np.linalg.norm(uarr, axis=1)

            for row, uid in enumerate(tile):
                if kth is None:
                    cand_ids, cand_scores = prefix_ids, shared[row]
                else:
                    mask = shared[row] >= kth[row]
                    cand_ids, cand_scores = prefix_ids[mask], shared[row][mask]
                top_ids, top_scores = _select_topk(cand_scores, cand_ids, k_eff)
                if prefix >= n:
                    results[uid] = TopKResult(uid, top_ids, top_scores, n)
                elif top_scores.size == k_eff and top_scores[-1] > next_ceiling[row]:
                    results[uid] = TopKResult(uid, top_ids, top_scores, prefix)
                else:
                    ids, scores, visited = _walk(
                        items,
                        index.item_ids[c],
                        index.bounds[c],
                        users[uid],
                        k,
                        start=prefix,
                        warm_ids=top_ids,
                        warm_scores=top_scores,
                    )
                    results[uid] = TopKResult(uid, ids, scores, visited)

    return [results[uid] for uid in uids]


def _check_vector(vector, factors: int) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (factors,):
        raise DimensionMismatchError(f"vector shape {v.shape} != ({factors},)")
    if not np.isfinite(v).all():
        raise NonFiniteValueError("vector contains non-finite values")
    return v


def insert_item(index: CentroidIndex, model: ModelPair, item_vector) -> tuple[CentroidIndex, ModelPair]:
    """Add one item; each cluster list receives it at its sorted position.

    Returns the enlarged (index, model) pair; queries over them are exact for
    the new item set. Single-writer: callers must not run this concurrently
    with other mutations.
    """
    v = _check_vector(item_vector, model.factors)
    new_id = model.num_items
    norm = float(np.linalg.norm(v))

    new_items = FactorMatrix(np.vstack([model.items.values, v[None, :]]))
    new_model = ModelPair(model.users, new_items)

    clustering = index.clustering
    num_clusters = index.num_clusters
    ids = np.empty((num_clusters, new_id + 1), dtype=np.int64)
    bounds = np.empty((num_clusters, new_id + 1))
    one_norm = np.array([norm])
    for c in range(num_clusters):
        b = _cluster_bounds(v[None, :], one_norm, clustering.centroids.values[c], clustering.max_angle[c])[0]
        # the new id is the largest, so among equal ceilings it sorts last
        pos = int(np.searchsorted(-index.bounds[c], -b, side="right"))
        ids[c] = np.insert(index.item_ids[c], pos, new_id)
        bounds[c] = np.insert(index.bounds[c], pos, b)

    norms = np.append(index.item_norms, norm)
    for arr in (ids, bounds, norms):
        arr.setflags(write=False)
    return CentroidIndex(ids, bounds, norms, index.block_size, clustering), new_model


def add_user(index: CentroidIndex, model: ModelPair, user_vector) -> tuple[CentroidIndex, ModelPair, bool]:
    """Assign a new user to the nearest centroid (L2).

    If the user's angle fits inside the cluster's recorded slack the index is
    unchanged and the flag is True. Otherwise the slack is raised to the new
    angle, the cluster's list is rebuilt, and the flag is False (signals
    drift). Single-writer, like insert_item.
    """
    v = _check_vector(user_vector, model.factors)
    clustering = index.clustering
    cvals = clustering.centroids.values
    c = int(((cvals - v) ** 2).sum(axis=1).argmin())

    v_norm = np.linalg.norm(v)
    cn = np.linalg.norm(cvals[c])
    if v_norm == 0.0 or cn == 0.0:
        theta = DEGENERATE_ANGLE
    else:
        theta = angular_distance(v, cvals[c])

    new_id = model.num_users
    new_users = FactorMatrix(np.vstack([model.users.values, v[None, :]]))
    new_model = ModelPair(new_users, model.items)

    assignment = np.append(clustering.assignment, np.int64(c))
    assignment.setflags(write=False)
    members = tuple(
        np.append(ms, new_id) if ci == c else ms for ci, ms in enumerate(clustering.members)
    )

    fits = theta <= clustering.max_angle[c]
    max_angle = clustering.max_angle if fits else clustering.max_angle.copy()
    if not fits:
        max_angle[c] = theta

    new_clustering = replace(clustering, assignment=assignment, members=members, max_angle=max_angle)

    if fits:
        new_index = replace(index, clustering=new_clustering)
        return new_index, new_model, True

    row = _cluster_bounds(model.items.values, index.item_norms, cvals[c], theta)
    list_ids, list_bounds = _sorted_list(row)
    ids = index.item_ids.copy()
    bounds = index.bounds.copy()
    ids[c] = list_ids
    bounds[c] = list_bounds
    ids.setflags(write=False)
    bounds.setflags(write=False)
    new_index = CentroidIndex(ids, bounds, index.item_norms, index.block_size, new_clustering)
    return new_index, new_model, False


def save_index(index: CentroidIndex, path) -> None:
    """Serialize to the binary sidecar format (MFIDX001)."""
    clustering = index.clustering
    parts = [
        _IDX_HEADER.pack(
            INDEX_MAGIC,
            index.num_clusters,
            index.num_items,
            clustering.centroids.factors,
            clustering.assignment.shape[0],
            index.block_size,
            clustering.seed,
        ),
        np.ascontiguousarray(clustering.max_angle, dtype="<f8").tobytes(),
        np.ascontiguousarray(clustering.centroids.values, dtype="<f8").tobytes(),
        np.ascontiguousarray(clustering.assignment, dtype="<i8").tobytes(),
        np.ascontiguousarray(index.item_norms, dtype="<f8").tobytes(),
        np.ascontiguousarray(index.item_ids, dtype="<i8").tobytes(),
        np.ascontiguousarray(index.bounds, dtype="<f8").tobytes(),
    ]
    with open(path, "wb") as fh:
        fh.writelines(parts)


def load_index(path) -> CentroidIndex:
    """Load a sidecar written by save_index. The embedded clustering carries
    centroids, assignment and slack angles (not the original user vectors)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _IDX_HEADER.size:
        raise FormatError(f"{path}: file shorter than the index header")
    magic, num_clusters, n, factors, num_users, block_size, seed = _IDX_HEADER.unpack_from(raw)
    if magic != INDEX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {INDEX_MAGIC!r}")
    sizes = [num_clusters, num_clusters * factors, num_users, n, num_clusters * n, num_clusters * n]
    expected = _IDX_HEADER.size + 8 * sum(sizes)
    if len(raw) != expected:
        raise FormatError(f"{path}: file is {len(raw)} bytes, expected {expected}")

    off = _IDX_HEADER.size

    def take(count, dtype):
        nonlocal off
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=off).copy()
        off += count * 8
        return arr

    max_angle = take(num_clusters, "<f8")
    centroids = take(num_clusters * factors, "<f8").reshape(num_clusters, factors)
    assignment = take(num_users, "<i8")
    item_norms = take(n, "<f8")
    item_ids = take(num_clusters * n, "<i8").reshape(num_clusters, n)
    bounds = take(num_clusters * n, "<f8").reshape(num_clusters, n)

    assignment.setflags(write=False)
    max_angle.setflags(write=False)
    members = tuple(np.flatnonzero(assignment == c) for c in range(num_clusters))
    clustering = Clustering(
        centroids=FactorMatrix(centroids),
        assignment=assignment,
        max_angle=max_angle,
        members=members,
        objective=np.empty(0),
        seed=int(seed),
    )
    for arr in (item_ids, bounds, item_norms):
        arr.setflags(write=False)
    return CentroidIndex(item_ids, bounds, item_norms, int(block_size), clustering)
