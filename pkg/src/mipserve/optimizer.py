"""Cost-based choice between index walking and blocked matrix multiply.

The expected walk length is estimated by running the index walk on a small
user sample; the per-pair cheapness of blocked multiply is captured by a
machine-specific hardware factor h0, scaled by log2(K) to account for the
top-K selection work the multiply path pays after the product. The pipeline
always clusters and builds the sorted lists (both are cheap), then serves
through whichever path the decision rule picks; results are exact either way.
"""

from __future__ import annotations

import math
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np

from . import brute, clustering as clustering_mod, index as index_mod
from .index import CentroidIndex, TopKResult
from .model_io import ModelPair

INDEX = "index"
MATMUL = "matmul"

DEFAULT_H0 = 0.05
DEFAULT_SAMPLE_FRACTION = 0.001
SAMPLE_FLOOR = 30
CONFIG_ENV = "MIPS_SIMDEX_CONFIG"

_Z95 = 1.96


def hardware_factor(k: int, h0: float = DEFAULT_H0) -> float:
    """Per-pair cost advantage of blocked multiply at top-K: h0 * max(1, log2 K).

    The max keeps the factor at h0 for K=1, where no selection penalty
    applies yet.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if h0 <= 0.0:
        raise ValueError("h0 must be > 0")
    return h0 * max(1.0, math.log2(k))


def pruning_fraction(mean_visited: float, item_count: int, block_size: int) -> float:
    """Fraction of post-prefix items the walk is expected to touch:
    max(0, w - B) / (|I| - B), clamped to [0, 1]."""
    if block_size >= item_count:
        return 1.0
    frac = max(0.0, mean_visited - block_size) / (item_count - block_size)
    return min(frac, 1.0)


def decide(mean_visited: float, item_count: int, block_size: int, k: int, h0: float = DEFAULT_H0) -> str:
    """Pick the serving path: "index" when the expected post-prefix walk
    fraction is within the hardware factor (boundary inclusive), else
    "matmul". A prefix covering the whole list is matmul by definition.
    """
    if block_size >= item_count:
        return MATMUL
    frac = pruning_fraction(mean_visited, item_count, block_size)
    return INDEX if frac <= hardware_factor(k, h0) else MATMUL


def calibrate_h0(
    model: ModelPair,
    k: int = 1,
    repeats: int = 5,
    blocks: brute.BlockSpec | None = None,
    config_path=None,
) -> float:
    """Fit h0 on this machine: per-pair blocked cost over per-pair loop cost.

    Repeats the measurement and returns the median; a spread above 50% of the
    median triggers a warning. Models below ~10^6 pairs give noisy timings.
    When ``config_path`` is given the value is persisted there.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    ratios = []
    for _ in range(repeats):
        sample = brute.measure_throughput(model, k, blocks)
        ratios.append(sample.unblocked_rate / sample.blocked_rate)
    ratios.sort()
    h0 = float(np.median(ratios))
    spread = (ratios[-1] - ratios[0]) / h0 if h0 > 0 else float("inf")
    if spread > 0.5:
        warnings.warn(
            f"h0 calibration unstable: spread {spread:.0%} of median across {repeats} runs",
            stacklevel=2,
        )
    if config_path is not None:
        cfg = {}
        if os.path.exists(config_path):
            cfg = load_config(config_path)
        cfg["h0"] = h0
        save_config(config_path, cfg)
    return h0


@dataclass(frozen=True)
class WalkEstimate:
    """Sampled mean walk length with a 95% normal-approximation interval."""

    mean_visited: float
    ci_low: float
    ci_high: float
    sample_size: int
    seed: int
    sampled: dict[int, TopKResult]


def estimate_walk_length(
    index: CentroidIndex,
    model: ModelPair,
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION,
    k: int = 1,
    seed: int = 0,
) -> WalkEstimate:
    """Run the index walk on a uniform user sample and average the visited
    counts. The sample size is floored at 30 users (all users when fewer);
    sampled results are kept for reuse by the serving stage."""
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must be in (0, 1]")
    num_users = model.num_users
    if num_users < 1:
        raise ValueError("model has no users")
    size = min(num_users, max(SAMPLE_FLOOR, int(round(sample_fraction * num_users))))
    if size == num_users:
        sample = np.arange(num_users)
    else:
        rng = np.random.default_rng(seed)
        sample = np.sort(rng.choice(num_users, size=size, replace=False))

    results = {int(uid): index_mod.query_user(index, model, int(uid), k) for uid in sample}
    visited = np.array([r.visited for r in results.values()], dtype=np.float64)
    mean = float(visited.mean())
    half = 0.0
    if size >= 2:
        half = _Z95 * float(visited.std(ddof=1)) / math.sqrt(size)
    return WalkEstimate(mean, mean - half, mean + half, size, seed, results)


@dataclass(frozen=True)
class CostEstimate:
    mean_visited: float
    pruning_fraction: float
    hw_factor: float
    decision: str
    sample_size: int
    seed: int
    ci_low: float
    ci_high: float


@dataclass(frozen=True)
class PipelineReport:
    """Per-stage wall-clock breakdown of one pipeline run."""

    num_users: int
    num_items: int
    k: int
    num_clusters: int
    block_size: int
    decision: str
    forced: bool
    estimate: CostEstimate
    cluster_seconds: float
    build_seconds: float
    estimate_seconds: float
    serve_seconds: float

    @property
    def total_seconds(self) -> float:
        return self.cluster_seconds + self.build_seconds + self.estimate_seconds + self.serve_seconds

    @property
    def overhead_fraction(self) -> float:
        total = self.total_seconds
        if total <= 0.0:
            return 0.0
        return (self.cluster_seconds + self.build_seconds + self.estimate_seconds) / total

    def csv_rows(self) -> list[tuple[str, str]]:
        """Rows for the report CSV: stage timings, then decision metadata."""
        rows = [
            ("cluster", f"{self.cluster_seconds:.6f}"),
            ("build", f"{self.build_seconds:.6f}"),
            ("estimate", f"{self.estimate_seconds:.6f}"),
            ("serve", f"{self.serve_seconds:.6f}"),
            ("total", f"{self.total_seconds:.6f}"),
            ("overhead_fraction", f"{self.overhead_fraction:.6f}"),
            ("decision", self.decision),
            ("forced", str(self.forced).lower()),
            ("mean_visited", f"{self.estimate.mean_visited:.3f}"),
            ("pruning_fraction", f"{self.estimate.pruning_fraction:.6f}"),
            ("hw_factor", f"{self.estimate.hw_factor:.6f}"),
            ("sample_size", str(self.estimate.sample_size)),
            ("users", str(self.num_users)),
            ("items", str(self.num_items)),
            ("k", str(self.k)),
            ("clusters", str(self.num_clusters)),
            ("block", str(self.block_size)),
        ]
        return rows


def run_pipeline(
    model: ModelPair,
    *,
    k: int,
    num_clusters: int = clustering_mod.DEFAULT_NUM_CLUSTERS,
    block_size: int = index_mod.DEFAULT_BLOCK_SIZE,
    sample_fraction: float = DEFAULT_SAMPLE_FRACTION,
    h0: float | None = None,
    seed: int = 0,
    max_iters: int = clustering_mod.DEFAULT_MAX_ITERS,
    force: str | None = None,
    work_sharing: bool = True,
) -> tuple[list[TopKResult], PipelineReport]:
    """The full pipeline: cluster, build + sort, estimate, decide, serve.

    ``force`` ("index" or "matmul") overrides the decision for testing; the
    served results are exact on either branch. The cluster count is clamped
    to the user count and echoed in the report.
    """
    if force not in (None, INDEX, MATMUL):
        raise ValueError(f"force must be None, '{INDEX}' or '{MATMUL}'")
    if k < 1:
        raise ValueError("k must be >= 1")
    h0 = DEFAULT_H0 if h0 is None else h0
    effective_clusters = min(num_clusters, model.num_users)

    t0 = time.perf_counter()
    clustering = clustering_mod.kmeans(model.users, effective_clusters, max_iters=max_iters, seed=seed)
    t_cluster = time.perf_counter() - t0

    t0 = time.perf_counter()
    built = index_mod.build_index(model, clustering, block_size)
    t_build = time.perf_counter() - t0

    t0 = time.perf_counter()
    walk = estimate_walk_length(built, model, sample_fraction, k, seed)
    t_estimate = time.perf_counter() - t0

    decision = decide(walk.mean_visited, model.num_items, block_size, k, h0)
    forced = force is not None and force != decision
    if force is not None:
        decision = force
    estimate = CostEstimate(
        mean_visited=walk.mean_visited,
        pruning_fraction=pruning_fraction(walk.mean_visited, model.num_items, block_size),
        hw_factor=hardware_factor(k, h0),
        decision=decision,
        sample_size=walk.sample_size,
        seed=seed,
        ci_low=walk.ci_low,
        ci_high=walk.ci_high,
    )

    t0 = time.perf_counter()
    if decision == INDEX:
        results = index_mod.query_batch(
            built, model, None, k, work_sharing=work_sharing, precomputed=walk.sampled
        )
    else:
        results = brute.topk_matmul(model, k)
    t_serve = time.perf_counter() - t0

    report = PipelineReport(
        num_users=model.num_users,
        num_items=model.num_items,
        k=k,
        num_clusters=effective_clusters,
        block_size=block_size,
        decision=decision,
        forced=force is not None,
        estimate=estimate,
        cluster_seconds=t_cluster,
        build_seconds=t_build,
        estimate_seconds=t_estimate,
        serve_seconds=t_serve,
    )
    return results, report


def save_config(path, values: dict) -> None:
    """Write a plain key=value config file (h0, clusters, block, ...)."""
    lines = [f"{key}={values[key]}" for key in sorted(values)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_config(path) -> dict:
    """Read a key=value config file; numeric values are parsed as numbers."""
    out: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or "=" not in line:
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            try:
                out[key] = int(value)
            except ValueError:
                try:
                    out[key] = float(value)
                except ValueError:
                    out[key] = value
    return out


def resolve_h0(explicit: float | None = None) -> float:
    """Effective h0: explicit value, else the calibration file named by the
    MIPS_SIMDEX_CONFIG environment variable, else the shipped default."""
    if explicit is not None:
        return explicit
    path = os.environ.get(CONFIG_ENV)
    if path and os.path.exists(path):
        cfg = load_config(path)
        if "h0" in cfg:
            return float(cfg["h0"])
    return DEFAULT_H0
