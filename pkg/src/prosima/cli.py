"""Command-line client for the pipeline service.

By default the CLI talks to an in-process copy of the HTTP app (no server
needed); --url pointing at a running instance switches to the network. All
verbs are service calls, so CLI and HTTP behavior cannot drift apart.

Exit codes: 0 success, 2 configuration error, 3 verification failure,
4 consensus abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import httpx

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_VERIFY = 3
EXIT_CONSENSUS = 4


def _client(url: str | None) -> httpx.Client:
    if url:
        return httpx.Client(base_url=url, timeout=600.0)
    # no server given: drive the ASGI app in-process
    import warnings

    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # test-client import warns about httpx pinning
        from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app, raise_server_exceptions=False)


def _load_config_dict(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise SystemExit(_fail(f"cannot read config: {exc}", EXIT_CONFIG))
    except json.JSONDecodeError as exc:
        raise SystemExit(_fail(f"malformed config {path}: {exc}", EXIT_CONFIG))
    if not isinstance(data, dict):
        raise SystemExit(_fail("config root must be a JSON object", EXIT_CONFIG))
    return data


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _post(args, path: str, body: dict) -> tuple[int, dict | None]:
    """POST and map HTTP status to an exit code; returns (code, body)."""
    with _client(args.url) as client:
        resp = client.post(path, json=body)
    try:
        payload = resp.json()
    except json.JSONDecodeError:
        payload = None
    if resp.status_code == 200:
        return EXIT_OK, payload
    detail = (payload or {}).get("detail", resp.text)
    if resp.status_code in (400, 404, 422):
        return _fail(str(detail), EXIT_CONFIG), None
    if resp.status_code == 409:
        return _fail(str(detail), EXIT_CONSENSUS), None
    return _fail(f"HTTP {resp.status_code}: {detail}", 1), None


def _merged_config(args, **extra) -> dict:
    cfg = _load_config_dict(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    out_dir = args.output_dir or os.environ.get("PROSIMA_OUTPUT_DIR")
    if out_dir:
        cfg["output_dir"] = out_dir
    for k, v in extra.items():
        if v is not None:
            cfg[k] = v
    return cfg


# --- verbs ------------------------------------------------------------------------

def cmd_fragment(args) -> int:
    code, body = _post(
        args,
        "/fragment",
        {"image": args.image, "rows": args.rows, "cols": args.cols, "out_dir": args.out_dir},
    )
    if code == EXIT_OK:
        _emit(body)
    return code


def cmd_anchor(args) -> int:
    cfg = _merged_config(args, source=args.source, image_count=args.count)
    code, body = _post(args, "/anchor", {"deployment": args.deployment, "config": cfg})
    if code == EXIT_OK:
        _emit(body)
    return code


def cmd_reconstruct(args) -> int:
    code, body = _post(
        args,
        "/reconstruct",
        {
            "deployment": args.deployment,
            "image_id": args.image_id,
            "input_image": args.input,
            "sigma": args.sigma,
            "noise_seed": args.noise_seed,
            "alpha": args.alpha,
            "fallback": args.fallback,
            "output_image": args.output,
            "provenance_out": args.provenance,
        },
    )
    if code == EXIT_OK:
        _emit(body)
    return code


def cmd_verify(args) -> int:
    code, body = _post(args, "/verify", {"deployment": args.deployment})
    if code != EXIT_OK:
        return code
    _emit(body)
    if body["status"] == "failed":
        return EXIT_VERIFY
    if body["status"] == "unavailable":
        print("verification unavailable", file=sys.stderr)
    return EXIT_OK


def cmd_topology(args) -> int:
    code, body = _post(
        args,
        "/topology",
        {
            "nodes": args.nodes,
            "m0": args.m0,
            "m": args.m,
            "seed": args.seed if args.seed is not None else 0,
            "leader_fraction": args.leader_fraction,
            "out": args.out,
        },
    )
    if code == EXIT_OK:
        _emit(body)
    return code


def cmd_consensus_sim(args) -> int:
    cfg = _merged_config(args)
    code, body = _post(
        args,
        "/consensus-sim",
        {
            "P": args.p,
            "f": args.f,
            "rounds": args.rounds,
            "txs_per_round": args.txs,
            "seed": args.seed if args.seed is not None else 0,
            "faults": args.fault,
            "config": cfg,
            "trace_out": args.trace_out,
        },
    )
    if code != EXIT_OK:
        return code
    trace_csv = body.pop("trace_csv")
    _emit(body)
    if not args.trace_out:
        sys.stdout.write(trace_csv)
    if body["aborted_rounds"] == body["rounds"]:
        return _fail("no round reached quorum", EXIT_CONSENSUS)
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _merged_config(args)
    body = {"config": cfg, "out_dir": args.out_dir}
    code, payload = _post(args, f"/bench/{args.suite}", body)
    if code == EXIT_OK:
        _emit(payload)
    return code


def _global_flags(defaulted: bool) -> argparse.ArgumentParser:
    """The four global options, attachable before or after the verb.

    The root parser carries real defaults; subparser copies use SUPPRESS so
    a flag omitted after the verb does not erase one given before it.
    """
    common = argparse.ArgumentParser(add_help=False)
    d = None if defaulted else argparse.SUPPRESS
    common.add_argument("--url", default=d, help="remote service URL (default: in-process)")
    common.add_argument("--config", default=d, help="experiment config JSON file")
    common.add_argument("--seed", type=int, default=d, help="override config seed")
    common.add_argument(
        "--output-dir", default=d, help="override config output_dir (or $PROSIMA_OUTPUT_DIR)"
    )
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="prosima",
        description="fragment, fingerprint, anchor, reconstruct, verify, benchmark",
        parents=[_global_flags(defaulted=True)],
    )
    globals_after = _global_flags(defaulted=False)
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("fragment", parents=[globals_after], help="split a PGM image into shards")
    p.add_argument("image")
    p.add_argument("--rows", type=int, default=4)
    p.add_argument("--cols", type=int, default=4)
    p.add_argument("--out-dir")
    p.set_defaults(fn=cmd_fragment)

    p = sub.add_parser("anchor", parents=[globals_after], help="anchor a corpus into a deployment directory")
    p.add_argument("deployment")
    p.add_argument("--source", help='"synthetic" or a PGM directory')
    p.add_argument("--count", type=int, help="number of images to anchor")
    p.set_defaults(fn=cmd_anchor)

    p = sub.add_parser("reconstruct", parents=[globals_after], help="restore a corrupted image from anchors")
    p.add_argument("deployment")
    p.add_argument("--image-id", help="anchored image id (hex); corrupts then restores")
    p.add_argument("--input", help="PGM file to restore directly")
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--noise-seed", type=int, default=0)
    p.add_argument("--alpha", type=float)
    p.add_argument("--fallback", choices=["nearest", "exact_only"])
    p.add_argument("--output", help="write restored PGM here")
    p.add_argument("--provenance", help="write per-shard provenance JSONL here")
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("verify", parents=[globals_after], help="re-verify every artifact of a deployment")
    p.add_argument("deployment")
    p.set_defaults(fn=cmd_verify)

    p = sub.add_parser("topology", parents=[globals_after], help="generate a scale-free overlay")
    p.add_argument("--nodes", type=int, default=20)
    p.add_argument("--m0", type=int, default=4)
    p.add_argument("--m", type=int, default=2)
    p.add_argument("--leader-fraction", type=float, default=0.1)
    p.add_argument("--out", help="write edge list here")
    p.set_defaults(fn=cmd_topology)

    p = sub.add_parser("consensus-sim", parents=[globals_after], help="run standalone consensus rounds")
    p.add_argument("--p", type=int, default=4, help="participating ranks")
    p.add_argument("--f", type=int, default=1)
    p.add_argument("--rounds", type=int, default=10)
    p.add_argument("--txs", type=int, default=16)
    p.add_argument("--fault", action="append", default=[], metavar="RANK:MODE")
    p.add_argument("--trace-out", help="write round trace CSV here")
    p.set_defaults(fn=cmd_consensus_sim)

    p = sub.add_parser("bench", parents=[globals_after], help="benchmark suites")
    bench_sub = p.add_subparsers(dest="suite", required=True)
    for suite, blurb in (
        ("table4", "replication/storage/latency by placement policy"),
        ("scale", "batch and worker-count scaling"),
        ("robustness", "reconstruction quality across noise levels"),
        ("ablation", "locality placement on/off latency comparison"),
    ):
        q = bench_sub.add_parser(suite, parents=[globals_after], help=blurb)
        q.add_argument("--out-dir")
        q.set_defaults(fn=cmd_bench)

    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.fn(args)
    except SystemExit as exc:  # argparse or config loading already reported
        return int(exc.code) if exc.code is not None else EXIT_OK
    except httpx.HTTPError as exc:
        return _fail(f"transport failure: {exc}", 1)


if __name__ == "__main__":
    sys.exit(main())
