"""Command-line client for the serving API.

All commands are one-shot: they build a request, send it to the service, and
print the response. By default the app runs in-process (no daemon, no
network); pass --server to talk to a running instance instead. Exit codes:
0 success, 1 validation error, 2 I/O or connection error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import os
import sys

import httpx

from .optimizer import CONFIG_ENV

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)


async def _post_embedded(path: str, payload: dict) -> httpx.Response:
    from .service.app import create_app

    transport = httpx.ASGITransport(app=create_app())
    async with httpx.AsyncClient(transport=transport, base_url="http://mipserve.local", timeout=None) as client:
        return await client.post(path, json=payload)


def _post(server: str | None, path: str, payload: dict) -> dict:
    try:
        if server:
            with httpx.Client(base_url=server, timeout=None) as client:
                response = client.post(path, json=payload)
        else:
            response = asyncio.run(_post_embedded(path, payload))
    except httpx.HTTPError as exc:
        print(f"error: cannot reach service: {exc}", file=sys.stderr)
        raise SystemExit(EXIT_IO)
    if response.status_code >= 400:
        try:
            body = response.json()
        except json.JSONDecodeError:
            body = {"detail": response.text}
        detail = body.get("detail", "request failed")
        kind = body.get("kind", "validation" if response.status_code in (400, 422) else "io")
        print(f"error: {detail}", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION if kind == "validation" else EXIT_IO)
    return response.json()


def _echo(command: str, payload: dict, extra: dict | None = None) -> None:
    fields = dict(payload)
    if extra:
        fields.update(extra)
    parts = " ".join(f"{k}={v}" for k, v in fields.items() if v is not None)
    print(f"{command}: {parts}")


def _force_flag(args) -> str | None:
    if args.force_index and args.force_matmul:
        print("error: --force-index and --force-matmul are mutually exclusive", file=sys.stderr)
        raise SystemExit(EXIT_VALIDATION)
    if args.force_index:
        return "index"
    if args.force_matmul:
        return "matmul"
    return None


def cmd_gen(args) -> int:
    payload = {
        "num_users": args.users,
        "num_items": args.items,
        "factors": args.factors,
        "archetypes": args.archetypes,
        "angular_spread": args.spread,
        "norm_low": args.norm_low,
        "norm_high": args.norm_high,
        "seed": args.seed,
        "users_path": args.users_file,
        "items_path": args.items_file,
    }
    body = _post(args.server, "/models/generate", payload)
    _echo("gen", payload, {"elapsed_seconds": f"{body['elapsed_seconds']:.3f}"})
    return EXIT_OK


def cmd_build(args) -> int:
    payload = {
        "users_file": args.users_file,
        "items_file": args.items_file,
        "clusters": args.clusters,
        "block": args.block,
        "seed": args.seed,
        "out": args.out,
    }
    body = _post(args.server, "/index/build", payload)
    _echo(
        "build",
        payload,
        {"entries": body["entry_count"], "elapsed_seconds": f"{body['elapsed_seconds']:.3f}"},
    )
    return EXIT_OK


def cmd_run(args) -> int:
    topk_out = f"{args.out}.topk.csv"
    report_out = f"{args.out}.report.csv"
    payload = {
        "users_file": args.users_file,
        "items_file": args.items_file,
        "k": args.k,
        "clusters": args.clusters,
        "block": args.block,
        "sample_frac": args.sample_frac,
        "h0": args.h0,
        "seed": args.seed,
        "force": _force_flag(args),
        "topk_out": topk_out,
        "report_out": report_out,
    }
    body = _post(args.server, "/run", payload)
    _echo(
        "run",
        payload,
        {
            "h0_effective": body["h0"],
            "decision": body["decision"],
            "mean_visited": f"{body['mean_visited']:.2f}",
            "overhead_fraction": f"{body['overhead_fraction']:.4f}",
            "total_seconds": f"{body['timings']['total']:.3f}",
        },
    )
    return EXIT_OK


def cmd_point(args) -> int:
    vector = None
    if args.vector:
        try:
            vector = [float(x) for x in args.vector.split(",")]
        except ValueError:
            print("error: --vector must be comma-separated floats", file=sys.stderr)
            return EXIT_VALIDATION
    payload = {
        "users_file": args.users_file,
        "items_file": args.items_file,
        "index_file": args.index,
        "k": args.k,
        "user_id": args.user_id,
        "vector": vector,
    }
    body = _post(args.server, "/query/point", payload)
    for rank, entry in enumerate(body["entries"], start=1):
        print(f"{rank},{entry['item_id']},{entry['score']!r}")
    print(f"latency_us={body['latency_us']:.1f} visited={body['visited']}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    payload = {
        "users_file": args.users_file,
        "items_file": args.items_file,
        "c_list": [int(c) for c in args.c_list.split(",")],
        "k": args.k,
        "block": args.block,
        "seed": args.seed,
        "out": args.out,
    }
    body = _post(args.server, "/sweep", payload)
    print("C,cluster_seconds,serve_seconds,w_bar")
    for row in body["rows"]:
        print(f"{row['clusters']},{row['cluster_seconds']:.6f},{row['serve_seconds']:.6f},{row['w_bar']:.3f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config_out = args.out or os.environ.get(CONFIG_ENV)
    payload = {
        "users_file": args.users_file,
        "items_file": args.items_file,
        "k": args.k,
        "repeats": args.repeats,
        "config_out": config_out,
    }
    body = _post(args.server, "/calibrate", payload)
    _echo("calibrate", payload, {"h0": body["h0"]})
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> _Parser:
    parser = _Parser(prog="mipserve", description=__doc__)
    parser.add_argument("--server", default=None, help="base URL of a running service (default: in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_model_files(p, as_outputs=False):
        helper = "output path" if as_outputs else "path"
        p.add_argument("--users-file", required=True, help=f"{helper} of the user matrix")
        p.add_argument("--items-file", required=True, help=f"{helper} of the item matrix")

    p = sub.add_parser("gen", help="generate a synthetic model and write both matrices")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--items", type=int, required=True)
    p.add_argument("--factors", type=int, required=True)
    p.add_argument("--archetypes", type=int, default=8)
    p.add_argument("--spread", type=float, default=0.3, help="max angular perturbation (radians)")
    p.add_argument("--norm-low", type=float, default=1.0)
    p.add_argument("--norm-high", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    add_model_files(p, as_outputs=True)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("build", help="cluster, build the index, and save it")
    add_model_files(p)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--block", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="index sidecar output path")
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("run", help="full pipeline: cluster, build, estimate, decide, serve")
    add_model_files(p)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--block", type=int, default=4096)
    p.add_argument("--sample-frac", type=float, default=0.001)
    p.add_argument("--h0", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force-index", action="store_true")
    p.add_argument("--force-matmul", action="store_true")
    p.add_argument("--out", required=True, help="prefix for <out>.topk.csv and <out>.report.csv")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("point", help="serve one user or vector from a prebuilt index")
    add_model_files(p)
    p.add_argument("--index", required=True, help="index sidecar path")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--user-id", type=int, default=None)
    p.add_argument("--vector", default=None, help="comma-separated floats")
    p.set_defaults(func=cmd_point)

    p = sub.add_parser("sweep", help="index path at several cluster counts")
    add_model_files(p)
    p.add_argument("--c-list", required=True, help="comma-separated cluster counts")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--block", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("calibrate", help="fit the hardware factor on this machine")
    add_model_files(p)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--out", default=None, help=f"config file to persist h0 (default: ${CONFIG_ENV})")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
