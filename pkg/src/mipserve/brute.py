"""Brute-force top-K baselines: a naive reference oracle and a tiled multiply.

``topk_naive`` scores every pair one user at a time and is the correctness
oracle everything else is checked against. ``topk_matmul`` computes the same
answers through cache-friendly user x item tiles with a running per-user
top-K selection across tiles. Both use the shared tie-break (score
descending, item id ascending) so outputs are comparable element for element.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass

import numpy as np

from .index import TopKResult, _select_topk
from .model_io import ModelPair

# working-set budget for the default tiles: two factor panels plus the score
# tile should stay within ~256 KiB of float64
_TILE_BUDGET_DOUBLES = 32768


@dataclass(frozen=True)
class BlockSpec:
    user_block: int
    item_block: int

    def __post_init__(self):
        if self.user_block < 1 or self.item_block < 1:
            raise ValueError("block sizes must be >= 1")


def default_blocks(factors: int) -> BlockSpec:
    side = 256
    while side > 8 and 2 * side * factors + side * side > _TILE_BUDGET_DOUBLES:
        side //= 2
    return BlockSpec(side, side)


def topk_naive(model: ModelPair, k: int) -> list[TopKResult]:
    """Score every user-item pair and sort; the exactness oracle."""
    if k < 1:
        raise ValueError("k must be >= 1")
    items = model.items.values
    n = model.num_items
    k_eff = min(k, n)
    ids = np.arange(n, dtype=np.int64)
    out = []
    for uid in range(model.num_users):
        scores = items @ model.users.values[uid]
        order = np.lexsort((ids, -scores))[:k_eff]
        out.append(TopKResult(uid, order.astype(np.int64), scores[order], n))
    return out


def topk_matmul(
    model: ModelPair,
    k: int,
    blocks: BlockSpec | None = None,
    counters: dict | None = None,
) -> list[TopKResult]:
    """Tiled multiply with per-user running top-K; identical to topk_naive.

    When ``counters`` is a dict it receives ``heap_ops``: per-user counts of
    tile candidates that beat the running K-th best, the selection work the
    cost model's log2(K) correction accounts for.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if blocks is None:
        blocks = default_blocks(model.factors)
    users = model.users.values
    items = model.items.values
    num_users = model.num_users
    n = model.num_items
    k_eff = min(k, n)

    # sentinel rows: id beyond the real range at -inf, displaced as real
    # candidates arrive
    run_ids = np.full((num_users, k_eff), n, dtype=np.int64)
    run_scores = np.full((num_users, k_eff), -np.inf)
    heap_ops = np.zeros(num_users, dtype=np.int64)
    all_ids = np.arange(n, dtype=np.int64)

    for a in range(0, num_users, blocks.user_block):
        b = min(a + blocks.user_block, num_users)
        u_tile = users[a:b]
        for p in range(0, n, blocks.item_block):
            q = min(p + blocks.item_block, n)
            scores = u_tile @ items[p:q].T
            tile_ids = all_ids[p:q]
            kth = run_scores[a:b, -1]
            if counters is not None:
                heap_ops[a:b] += (scores > kth[:, None]).sum(axis=1)
            for row in np.flatnonzero(scores.max(axis=1) >= kth):
                uid = a + row
                merged_ids, merged_scores = _select_topk(
                    np.concatenate([run_scores[uid], scores[row]]),
                    np.concatenate([run_ids[uid], tile_ids]),
                    k_eff,
                )
                run_ids[uid] = merged_ids
                run_scores[uid] = merged_scores

    if counters is not None:
        counters["heap_ops"] = heap_ops
    return [
        TopKResult(uid, run_ids[uid].copy(), run_scores[uid].copy(), n)
        for uid in range(num_users)
    ]


def _perpair_scan(model: ModelPair, k: int) -> None:
    """Pair-at-a-time scoring with a bounded min-heap; the unblocked
    reference the hardware factor is measured against."""
    users = model.users.values
    items = model.items.values
    n = model.num_items
    for uid in range(model.num_users):
        u = users[uid]
        heap: list[tuple[float, int]] = []
        for iid in range(n):
            s = float(items[iid] @ u)
            if len(heap) < k:
                heapq.heappush(heap, (s, -iid))
            elif s > heap[0][0]:
                heapq.heapreplace(heap, (s, -iid))


@dataclass(frozen=True)
class ThroughputSample:
    """Scored pairs per second for the tiled multiply and the per-pair loop."""

    blocked_rate: float
    unblocked_rate: float


def measure_throughput(model: ModelPair, k: int = 1, blocks: BlockSpec | None = None) -> ThroughputSample:
    """Wall-clock both serving styles over the full user x item workload."""
    pairs = model.num_users * model.num_items
    t0 = time.perf_counter()
    topk_matmul(model, k, blocks)
    blocked = max(time.perf_counter() - t0, 1e-9)
    t0 = time.perf_counter()
    _perpair_scan(model, k)
    unblocked = max(time.perf_counter() - t0, 1e-9)
    return ThroughputSample(pairs / blocked, pairs / unblocked)
