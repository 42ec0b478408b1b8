"""HTTP service over the core package. Stateless: every request names the
deployment directory or config it operates on, so the process holds no
session state and horizontal restarts are free."""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from ..bench import (
    run_gft_ablation,
    run_robustness,
    run_scale_batches,
    run_scale_workers,
    run_table4,
    write_csv,
)
from ..config import ExperimentConfig, config_from_dict, config_hash, load_config
from ..consensus import SimConfig, run_consensus_round, simulate_batch, traces_to_csv
from ..corpus import load_pgm_dir, make_corpus
from ..errors import (
    ConfigError,
    ConfigInvalid,
    ConsensusAbort,
    LedgerFormatError,
    NotFound,
    ProsimaError,
)
from ..fingerprint import hash_latent, encode_shard
from ..imaging import Image, ShardGrid, corrupt_gaussian, fragment, read_pgm, write_pgm
from ..ledger import TxKind, create_transaction
from ..pipeline import (
    Deployment,
    anchor_image,
    load_deployment,
    new_deployment,
    reconstruct_with,
    save_deployment,
    verify_deployment,
)
from ..reconstruction import write_provenance
from ..topology import generate_scale_free, is_connected, leader_set, place_shards, write_topology
from . import schemas as s

app = FastAPI(title="prosima", version="0.1.0")

_CONFIG_CLASS = (ConfigError, ConfigInvalid, LedgerFormatError)


@app.exception_handler(ProsimaError)
async def _prosima_error(_request: Request, exc: ProsimaError):
    if isinstance(exc, _CONFIG_CLASS):
        status, kind = 400, "config"
    elif isinstance(exc, NotFound):
        status, kind = 404, "not_found"
    elif isinstance(exc, ConsensusAbort):
        status, kind = 409, "consensus"
    else:
        status, kind = 422, type(exc).__name__
    return JSONResponse(status_code=status, content={"error": kind, "detail": str(exc)})


@app.exception_handler(OSError)
async def _os_error(_request: Request, exc: OSError):
    return JSONResponse(status_code=400, content={"error": "io", "detail": str(exc)})


def _prep_out(path: str) -> str:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return path


def _resolve_config(config_file: str | None, overrides: dict) -> ExperimentConfig:
    if config_file:
        return load_config(config_file, overrides=overrides)
    return config_from_dict(overrides)


def _build_deployment(cfg: ExperimentConfig) -> Deployment:
    graph = generate_scale_free(cfg.nodes, m0=cfg.m0, m=cfg.m, seed=cfg.seed)
    sim = SimConfig(
        P=cfg.P,
        f=cfg.f,
        seed=cfg.seed,
        base_delay_ms=cfg.base_delay_ms,
        jitter_ms=cfg.jitter_ms,
        t_verify_ms=cfg.t_verify_ms,
        t_aggregate_ms=cfg.t_aggregate_ms,
        t_assemble_ms=cfg.t_assemble_ms,
        t_encode_ms=cfg.t_encode_ms,
        t_push_ms=cfg.t_push_ms,
        weight_threshold=cfg.weight_threshold,
    )
    return new_deployment(
        graph,
        sim,
        ShardGrid(cfg.grid_rows, cfg.grid_cols),
        dim=cfg.dim,
        kind=cfg.kind,
        alpha=cfg.alpha,
        policy=cfg.effective_policy,
        policy_d=cfg.policy_d,
        leader_fraction=cfg.leader_fraction,
        fingerprint_on=cfg.fingerprint_on,
    )


@app.get("/healthz")
async def healthz():
    return {"status": "ok"}


@app.post("/fragment", response_model=s.FragmentResponse)
async def fragment_endpoint(req: s.FragmentRequest):
    path = Path(req.image)
    if not path.is_file():
        raise ConfigError(f"image not found: {path}")
    img = read_pgm(path)
    shards = fragment(img, ShardGrid(req.rows, req.cols))
    written: list[str] = []
    if req.out_dir:
        out = Path(req.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for sh in shards:
            dest = out / f"shard_r{sh.row}_c{sh.col}.pgm"
            write_pgm(
                Image(width=sh.width, height=sh.height, pixels=sh.pixels), dest
            )
            written.append(str(dest))
    return s.FragmentResponse(
        image_id=img.image_id.hex(),
        rows=req.rows,
        cols=req.cols,
        shards=[
            s.ShardInfo(
                row=sh.row, col=sh.col, key=sh.key.hex(), width=sh.width, height=sh.height
            )
            for sh in shards
        ],
        written=written,
    )


@app.post("/anchor", response_model=s.AnchorResponse)
async def anchor_endpoint(req: s.AnchorRequest):
    cfg = _resolve_config(req.config_file, req.config)
    dep_dir = Path(req.deployment)
    if (dep_dir / "manifest.json").is_file():
        dep = load_deployment(dep_dir)
    else:
        dep = _build_deployment(cfg)

    if cfg.source == "synthetic":
        corpus = make_corpus(cfg.image_count, seed=cfg.seed, size=cfg.image_size)
    else:
        corpus = [img for _, img in load_pgm_dir(cfg.source)][: cfg.image_count]

    reports = []
    for img in corpus:
        if img.image_id in dep.images:
            continue  # already anchored; keep the call idempotent
        rep = anchor_image(dep, img)
        reports.append(
            s.AnchorImageReport(image_id=rep.image_id, root=rep.root, rounds=len(rep.traces))
        )
    save_deployment(dep, dep_dir)
    return s.AnchorResponse(
        deployment=str(dep_dir),
        anchored=reports,
        scopes=len(dep.ledgers.all_ledgers()),
        config_hash=config_hash(cfg),
    )


@app.post("/reconstruct", response_model=s.ReconstructResponse)
async def reconstruct_endpoint(req: s.ReconstructRequest):
    dep = load_deployment(req.deployment)
    original = None
    if req.image_id is not None:
        wanted = bytes.fromhex(req.image_id)
        if wanted not in dep.images:
            raise NotFound(f"image {req.image_id[:12]} is not anchored here")
        original = dep.images[wanted]
        corrupted = corrupt_gaussian(original, req.sigma, seed=req.noise_seed)
    elif req.input_image is not None:
        corrupted = read_pgm(req.input_image)
    else:
        raise ConfigError("need image_id or input_image")

    res = reconstruct_with(
        dep,
        corrupted,
        original=original,
        fallback=req.fallback or "nearest",
        alpha=req.alpha,
    )
    out_img = None
    if req.output_image:
        write_pgm(res.image, _prep_out(req.output_image))
        out_img = req.output_image
    prov_out = None
    if req.provenance_out:
        write_provenance(res, _prep_out(req.provenance_out))
        prov_out = req.provenance_out
    return s.ReconstructResponse(
        image_id=res.image.image_id.hex(),
        verified=res.verified,
        metrics=res.metrics,
        provenance=[
            s.ShardProvenanceInfo(
                cell=[p.row, p.col],
                scope=p.scope,
                height=p.height,
                tx_id=p.tx_id,
                mode=p.mode,
                cosine=p.cosine,
                verified=p.verified,
            )
            for p in res.provenance
        ],
        output_image=out_img,
        provenance_out=prov_out,
    )


@app.post("/verify", response_model=s.VerifyResponse)
async def verify_endpoint(req: s.VerifyRequest):
    report = verify_deployment(req.deployment)
    return s.VerifyResponse(
        status=report["status"],
        percent=report["percent"],
        checked=report["checked"],
        passed=report["passed"],
        detail=report.get("detail"),
        scopes={k: s.ScopeReport(**v) for k, v in report["scopes"].items()},
    )


@app.post("/topology", response_model=s.TopologyResponse)
async def topology_endpoint(req: s.TopologyRequest):
    graph = generate_scale_free(req.nodes, m0=req.m0, m=req.m, seed=req.seed)
    out = None
    if req.out:
        write_topology(graph, _prep_out(req.out))
        out = req.out
    return s.TopologyResponse(
        nodes=graph.node_count,
        edges=len(graph.edges),
        max_degree=max(graph.degrees),
        mean_degree=sum(graph.degrees) / graph.node_count,
        leaders=list(leader_set(graph, req.leader_fraction)),
        connected=is_connected(graph),
        out=out,
    )


def _parse_faults(entries: list[str]) -> tuple[tuple[int, str], ...]:
    faults = []
    for entry in entries:
        rank, _, mode = entry.partition(":")
        try:
            faults.append((int(rank), mode))
        except ValueError:
            raise ConfigError(f'fault must look like "1:crash", got {entry!r}')
    return tuple(faults)


@app.post("/consensus-sim", response_model=s.ConsensusSimResponse)
async def consensus_sim_endpoint(req: s.ConsensusSimRequest):
    cfg = _resolve_config(req.config_file, req.config)
    if req.P > cfg.nodes:
        raise ConfigError(f"P={req.P} exceeds overlay size {cfg.nodes}")
    sim = SimConfig(
        P=req.P,
        f=req.f,
        seed=req.seed,
        base_delay_ms=cfg.base_delay_ms,
        jitter_ms=cfg.jitter_ms,
        t_verify_ms=cfg.t_verify_ms,
        t_aggregate_ms=cfg.t_aggregate_ms,
        t_assemble_ms=cfg.t_assemble_ms,
        faults=_parse_faults(req.faults),
    )
    graph = generate_scale_free(cfg.nodes, m0=cfg.m0, m=cfg.m, seed=cfg.seed)
    txs = [
        create_transaction(
            TxKind.SHARD_FINGERPRINT,
            hash_latent(encode_shard(sh, dim=cfg.dim, kind=cfg.kind)),
            {"image_id": img.image_id.hex(), "row": str(sh.row), "col": str(sh.col)},
        )
        for img in make_corpus(1, seed=req.seed, size=cfg.image_size)
        for sh in fragment(img, ShardGrid(cfg.grid_rows, cfg.grid_cols))
    ][: req.txs_per_round]
    pm = place_shards(
        graph, [t.payload_hash for t in txs], cfg.effective_policy, d=cfg.policy_d,
        seed=cfg.seed, leader_fraction=cfg.leader_fraction,
    )

    traces = []
    committed_rounds = aborted = committed_txs = conflicts = 0
    for i in range(req.rounds):
        block, trace = run_consensus_round(
            sim, graph, pm, txs, height=i + 1, round_index=i
        )
        traces.append(trace)
        if block is None:
            aborted += 1
        else:
            committed_rounds += 1
            committed_txs += len(block.txs)
        distinct = {h for _, h in trace.rank_commits if h is not None}
        if len(distinct) > 1:
            conflicts += 1

    csv_text = traces_to_csv(traces)
    trace_out = None
    if req.trace_out:
        Path(req.trace_out).parent.mkdir(parents=True, exist_ok=True)
        Path(req.trace_out).write_text(csv_text)
        trace_out = req.trace_out
    return s.ConsensusSimResponse(
        rounds=req.rounds,
        committed_rounds=committed_rounds,
        aborted_rounds=aborted,
        committed_txs=committed_txs,
        conflicting_commits=conflicts,
        mean_total_ms=sum(t.total_ms for t in traces) / len(traces),
        trace_csv=csv_text,
        trace_out=trace_out,
    )


def _bench_out(req: s.BenchRequest, cfg: ExperimentConfig, name: str) -> Path | None:
    base = req.out_dir or cfg.output_dir
    if not base:
        return None
    return Path(base) / name


@app.post("/bench/table4", response_model=s.BenchTable4Response)
async def bench_table4_endpoint(req: s.BenchRequest):
    cfg = _resolve_config(req.config_file, req.config)
    rows = run_table4(cfg)
    path = _bench_out(req, cfg, "table4.csv")
    if path is not None:
        write_csv(path, rows, cfg)
    return s.BenchTable4Response(
        rows=rows, csv_path=str(path) if path else None, config_hash=config_hash(cfg)
    )


@app.post("/bench/scale", response_model=s.BenchScaleResponse)
async def bench_scale_endpoint(req: s.BenchRequest):
    cfg = _resolve_config(req.config_file, req.config)
    batch_rows = run_scale_batches(cfg)
    workers = run_scale_workers(cfg)
    bpath = _bench_out(req, cfg, "scale_batches.csv")
    wpath = _bench_out(req, cfg, "scale_workers.csv")
    if bpath is not None:
        write_csv(bpath, batch_rows, cfg)
    if wpath is not None:
        write_csv(wpath, workers["rows"], cfg)
    return s.BenchScaleResponse(
        batch_rows=batch_rows,
        worker_rows=workers["rows"],
        fit_a=workers["fit_a"],
        fit_b=workers["fit_b"],
        r2=workers["r2"],
        phase1_speedup=workers["phase1_speedup"],
        batches_csv=str(bpath) if bpath else None,
        workers_csv=str(wpath) if wpath else None,
        config_hash=config_hash(cfg),
    )


@app.post("/bench/robustness", response_model=s.BenchRobustnessResponse)
async def bench_robustness_endpoint(req: s.BenchRequest):
    cfg = _resolve_config(req.config_file, req.config)
    rows = run_robustness(cfg)
    path = _bench_out(req, cfg, "robustness.csv")
    if path is not None:
        write_csv(path, rows, cfg)
    return s.BenchRobustnessResponse(
        rows=rows, csv_path=str(path) if path else None, config_hash=config_hash(cfg)
    )


@app.post("/bench/ablation")
async def bench_ablation_endpoint(req: s.BenchRequest):
    cfg = _resolve_config(req.config_file, req.config)
    return {"config_hash": config_hash(cfg), **run_gft_ablation(cfg)}
