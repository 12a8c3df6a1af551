"""FastAPI application wrapping the serving engine.

Endpoints take file paths on the server's filesystem (models and indexes are
large; requests stay small) and keep recently loaded models and indexes in an
in-memory cache so repeated point queries hit a warm index.
"""

from __future__ import annotations

import csv
import threading
import time
from collections import OrderedDict
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, brute, clustering, index as index_mod, model_io, optimizer
from . import schemas

_CACHE_SLOTS = 8


class _FileCache:
    """Small LRU keyed by (path, size, mtime); safe for threaded handlers."""

    def __init__(self, slots: int = _CACHE_SLOTS):
        self._slots = slots
        self._lock = threading.Lock()
        self._entries: OrderedDict = OrderedDict()

    def get(self, path: str, loader):
        p = Path(path)
        stat = p.stat()
        key = (str(p.resolve()), stat.st_size, stat.st_mtime_ns)
        with self._lock:
            if key in self._entries:
                self._entries.move_to_end(key)
                return self._entries[key]
        value = loader(path)
        with self._lock:
            self._entries[key] = value
            self._entries.move_to_end(key)
            while len(self._entries) > self._slots:
                self._entries.popitem(last=False)
        return value


def _write_topk_csv(path: str, results) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["user_id", "rank", "item_id", "score"])
        for res in results:
            for rank, (item_id, score) in enumerate(res.entries, start=1):
                writer.writerow([res.user_id, rank, item_id, repr(score)])


def _write_report_csv(path: str, report: optimizer.PipelineReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stage", "seconds"])
        writer.writerows(report.csv_rows())


def create_app() -> FastAPI:
    app = FastAPI(title="mipserve", version=__version__)
    app.state.models = _FileCache()
    app.state.indexes = _FileCache()

    def load_model_pair(users_file: str, items_file: str) -> model_io.ModelPair:
        users = app.state.models.get(users_file, model_io.load_matrix)
        items = app.state.models.get(items_file, model_io.load_matrix)
        return model_io.ModelPair(users, items)

    @app.exception_handler(FileNotFoundError)
    async def _missing_file(request: Request, exc: FileNotFoundError):
        return JSONResponse(status_code=404, content={"detail": str(exc), "kind": "io"})

    @app.exception_handler(OSError)
    async def _os_error(request: Request, exc: OSError):
        return JSONResponse(status_code=404, content={"detail": str(exc), "kind": "io"})

    @app.exception_handler(model_io.ModelIOError)
    async def _model_error(request: Request, exc: model_io.ModelIOError):
        return JSONResponse(status_code=400, content={"detail": str(exc), "kind": "validation"})

    @app.exception_handler(ValueError)
    async def _value_error(request: Request, exc: ValueError):
        return JSONResponse(status_code=400, content={"detail": str(exc), "kind": "validation"})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/models/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        t0 = time.perf_counter()
        spec = model_io.SyntheticSpec(
            num_users=req.num_users,
            num_items=req.num_items,
            factors=req.factors,
            archetype_count=req.archetypes,
            angular_spread=req.angular_spread,
            norm_low=req.norm_low,
            norm_high=req.norm_high,
            seed=req.seed,
        )
        model = model_io.generate_synthetic(spec)
        model_io.save_model(model, req.users_path, req.items_path)
        return schemas.GenerateResponse(
            users_path=req.users_path,
            items_path=req.items_path,
            num_users=model.num_users,
            num_items=model.num_items,
            factors=model.factors,
            seed=req.seed,
            elapsed_seconds=time.perf_counter() - t0,
        )

    @app.post("/index/build", response_model=schemas.BuildIndexResponse)
    def build(req: schemas.BuildIndexRequest):
        t0 = time.perf_counter()
        model = load_model_pair(req.users_file, req.items_file)
        cl = clustering.kmeans(
            model.users, min(req.clusters, model.num_users), max_iters=req.max_iters, seed=req.seed
        )
        built = index_mod.build_index(model, cl, req.block)
        index_mod.save_index(built, req.out)
        return schemas.BuildIndexResponse(
            out=req.out,
            num_clusters=built.num_clusters,
            num_items=built.num_items,
            entry_count=built.entry_count,
            max_angle=[float(a) for a in cl.max_angle],
            cluster_sizes=[int(m.size) for m in cl.members],
            elapsed_seconds=time.perf_counter() - t0,
        )

    @app.post("/run", response_model=schemas.RunResponse)
    def run(req: schemas.RunRequest):
        model = load_model_pair(req.users_file, req.items_file)
        h0 = optimizer.resolve_h0(req.h0)
        results, report = optimizer.run_pipeline(
            model,
            k=req.k,
            num_clusters=req.clusters,
            block_size=req.block,
            sample_fraction=req.sample_frac,
            h0=h0,
            seed=req.seed,
            force=req.force,
        )
        if req.topk_out:
            _write_topk_csv(req.topk_out, results)
        if req.report_out:
            _write_report_csv(req.report_out, report)
        return schemas.RunResponse(
            decision=report.decision,
            forced=report.forced,
            mean_visited=report.estimate.mean_visited,
            pruning_fraction=report.estimate.pruning_fraction,
            hw_factor=report.estimate.hw_factor,
            h0=h0,
            sample_size=report.estimate.sample_size,
            overhead_fraction=report.overhead_fraction,
            timings=schemas.StageTimings(
                cluster=report.cluster_seconds,
                build=report.build_seconds,
                estimate=report.estimate_seconds,
                serve=report.serve_seconds,
                total=report.total_seconds,
            ),
            num_users=report.num_users,
            num_items=report.num_items,
            k=report.k,
            clusters=report.num_clusters,
            block=report.block_size,
            seed=req.seed,
            topk_out=req.topk_out,
            report_out=req.report_out,
        )

    @app.post("/query/point", response_model=schemas.PointResponse)
    def point(req: schemas.PointRequest):
        model = load_model_pair(req.users_file, req.items_file)
        built = app.state.indexes.get(req.index_file, index_mod.load_index)
        # point queries run the plain per-user walk (no work sharing)
        if req.user_id is not None:
            t0 = time.perf_counter()
            result = index_mod.query_user(built, model, req.user_id, req.k)
            latency = time.perf_counter() - t0
        else:
            vector = np.asarray(req.vector, dtype=np.float64)
            t0 = time.perf_counter()
            result = index_mod.query_vector(built, model, vector, req.k)
            latency = time.perf_counter() - t0
        return schemas.PointResponse(
            entries=[schemas.PointEntry(item_id=i, score=s) for i, s in result.entries],
            visited=result.visited,
            latency_us=latency * 1e6,
        )

    @app.post("/sweep", response_model=schemas.SweepResponse)
    def sweep(req: schemas.SweepRequest):
        model = load_model_pair(req.users_file, req.items_file)
        seen = set()
        rows = []
        for c in req.c_list:
            if c in seen:
                continue
            seen.add(c)
            if not 1 <= c <= model.num_users:
                raise ValueError(f"cluster count {c} outside [1, {model.num_users}]")
            t0 = time.perf_counter()
            cl = clustering.kmeans(model.users, c, seed=req.seed)
            t_cluster = time.perf_counter() - t0
            built = index_mod.build_index(model, cl, req.block)
            t0 = time.perf_counter()
            # no work sharing here so w_bar reflects true walk lengths
            results = index_mod.query_batch(built, model, None, req.k, work_sharing=False)
            t_serve = time.perf_counter() - t0
            w_bar = float(np.mean([r.visited for r in results]))
            rows.append(
                schemas.SweepRow(
                    clusters=c, cluster_seconds=t_cluster, serve_seconds=t_serve, w_bar=w_bar
                )
            )
        if req.out:
            with open(req.out, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["C", "cluster_seconds", "serve_seconds", "w_bar"])
                for row in rows:
                    writer.writerow(
                        [row.clusters, f"{row.cluster_seconds:.6f}", f"{row.serve_seconds:.6f}", f"{row.w_bar:.3f}"]
                    )
        return schemas.SweepResponse(rows=rows, out=req.out)

    @app.post("/calibrate", response_model=schemas.CalibrateResponse)
    def calibrate(req: schemas.CalibrateRequest):
        model = load_model_pair(req.users_file, req.items_file)
        h0 = optimizer.calibrate_h0(model, k=req.k, repeats=req.repeats, config_path=req.config_out)
        return schemas.CalibrateResponse(h0=h0, repeats=req.repeats, persisted_to=req.config_out)

    return app


app = create_app()
