"""Benchmark harness: storage/replication table, scaling sweeps, robustness.

Every writer emits deterministic CSV (fixed float formatting, stable row
order) with a leading comment line carrying the resolved config hash, so a
result file can always be traced back to the exact configuration that
produced it.
"""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, config_hash
from .consensus import SimConfig, run_consensus_round, simulate_batch
from .corpus import load_pgm_dir, make_corpus
from .errors import ConfigError
from .fingerprint import cosine, encode_shard
from .imaging import ShardGrid, corrupt_gaussian, fragment, psnr
from .ledger import TxKind, create_transaction
from .pipeline import anchor_image, new_deployment, reconstruct_with
from .topology import generate_scale_free, place_shards, replication_factor, storage_per_node

TABLE4_POLICIES = (("full_ledger", None), ("random_dup", 3), ("gft_locality", None))
# per-copy footprint: shard raster (f32) + canonical latent + anchor tx overhead
_TX_OVERHEAD_BYTES = 256


def _corpus(cfg: ExperimentConfig, count: int | None = None):
    n = count if count is not None else cfg.image_count
    if cfg.source == "synthetic":
        return make_corpus(n, seed=cfg.seed, size=cfg.image_size)
    images = [img for _, img in load_pgm_dir(cfg.source)]
    if len(images) < n:
        raise ConfigError(f"{cfg.source} holds {len(images)} images, need {n}")
    return images[:n]


def _graph(cfg: ExperimentConfig):
    return generate_scale_free(cfg.nodes, m0=cfg.m0, m=cfg.m, seed=cfg.seed)


def _sim(cfg: ExperimentConfig, P: int | None = None, f: int | None = None) -> SimConfig:
    return SimConfig(
        P=cfg.P if P is None else P,
        f=cfg.f if f is None else f,
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


def write_csv(path: str | Path, rows: list[dict], cfg: ExperimentConfig) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        fh.write(f"# config={config_hash(cfg)}\n")
        if rows:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
            writer.writeheader()
            for row in rows:
                writer.writerow(
                    {k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in row.items()}
                )
    return path


# --- storage / replication table ----------------------------------------------------

def run_table4(cfg: ExperimentConfig, shard_count: int = 1000) -> list[dict]:
    """Policy comparison at fixed overlay size: RF, storage, commit latency.

    The same shard population and the same consensus seeds are used for
    every policy, so rows differ only by placement.
    """
    graph = _graph(cfg)
    sim = _sim(cfg)
    grid = ShardGrid(cfg.grid_rows, cfg.grid_cols)
    per_image = grid.count

    corpus = _corpus(cfg, count=math.ceil(shard_count / per_image))
    shards = [s for img in corpus for s in fragment(img, grid)][:shard_count]
    keys = [s.key for s in shards]
    sizes = {
        s.key: s.width * s.height * 4 + (4 + 1 + 4 * cfg.dim) + _TX_OVERHEAD_BYTES
        for s in shards
    }

    latency_corpus = _corpus(cfg, count=max(cfg.table4_rounds, 20))

    rows = []
    for policy, d in TABLE4_POLICIES:
        pm = place_shards(
            graph, keys, policy, d=d, seed=cfg.seed, leader_fraction=cfg.leader_fraction
        )
        rf = replication_factor(pm)
        per_node = storage_per_node(pm, sizes)
        mean_storage = sum(per_node.values()) / graph.node_count

        result = simulate_batch(sim, graph, pm, latency_corpus, grid=grid, dim=cfg.dim, kind=cfg.kind)
        lats = [
            per_image * cfg.t_encode_ms + t.total_ms + per_image * rf * cfg.t_push_ms
            for t in result["traces"]
        ]
        rows.append(
            {
                "policy": policy,
                "shards": len(keys),
                "replication_factor": rf,
                "storage_per_node_bytes": mean_storage,
                "commit_latency_mean_ms": float(np.mean(lats)),
                "commit_latency_std_ms": float(np.std(lats)),
                "rounds": len(lats),
            }
        )
    return rows


def run_gft_ablation(cfg: ExperimentConfig) -> dict:
    """Mean commit latency with locality placement on vs off, same seeds."""
    rows = {r["policy"]: r for r in run_table4(cfg)}
    on = rows["gft_locality"]["commit_latency_mean_ms"]
    off = rows["random_dup"]["commit_latency_mean_ms"]
    return {
        "gft_on_latency_ms": on,
        "gft_off_latency_ms": off,
        "delta_pct": 100.0 * (off - on) / on,
    }


# --- scaling ------------------------------------------------------------------------

def run_scale_batches(cfg: ExperimentConfig) -> list[dict]:
    """Throughput/latency versus batch size; batches share a corpus prefix."""
    graph = _graph(cfg)
    sim = _sim(cfg)
    grid = ShardGrid(cfg.grid_rows, cfg.grid_cols)
    corpus = _corpus(cfg, count=max(cfg.batches))
    keys = [s.key for img in corpus for s in fragment(img, grid)]
    pm = place_shards(
        graph, keys, cfg.effective_policy, d=cfg.policy_d, seed=cfg.seed,
        leader_fraction=cfg.leader_fraction,
    )
    rows = []
    for b in cfg.batches:
        result = simulate_batch(sim, graph, pm, corpus[:b], grid=grid, dim=cfg.dim, kind=cfg.kind)
        rows.append(
            {
                "batch": b,
                "makespan_ms": result["makespan_ms"],
                "mean_latency_ms": result["mean_latency_ms"],
                "throughput_img_s": result["throughput_img_s"],
                "aborted_rounds": result["aborted_rounds"],
            }
        )
    return rows


def run_scale_workers(cfg: ExperimentConfig) -> dict:
    """One fixed-size round at each worker count; fit a*n/P + b*log2(P).

    Worker counts run fault-free so the comparison isolates the cost model.
    """
    graph = _graph(cfg)
    n = cfg.scale_n
    rng = np.random.default_rng(cfg.seed)
    txs = [
        create_transaction(
            TxKind.SHARD_FINGERPRINT,
            rng.bytes(32),
            {"image_id": f"{i:08x}", "row": "0", "col": "0"},
        )
        for i in range(n)
    ]
    pm = place_shards(
        graph, [t.payload_hash for t in txs], cfg.effective_policy, d=cfg.policy_d,
        seed=cfg.seed, leader_fraction=cfg.leader_fraction,
    )
    rows = []
    for P in cfg.workers:
        sim = _sim(cfg, P=P, f=0)
        block, trace = run_consensus_round(sim, graph, pm, txs)
        rows.append(
            {
                "P": P,
                "n": n,
                "phase1_ms": trace.phase1_ms,
                "gather_ms": trace.gather_ms,
                "total_ms": trace.total_ms,
                "committed": 0 if block is None else len(block.txs),
            }
        )

    design = np.array([[n / r["P"], math.log2(r["P"])] for r in rows])
    totals = np.array([r["total_ms"] for r in rows])
    coef, *_ = np.linalg.lstsq(design, totals, rcond=None)
    pred = design @ coef
    ss_res = float(np.sum((totals - pred) ** 2))
    ss_tot = float(np.sum((totals - totals.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    first = next(r for r in rows if r["P"] == min(cfg.workers))
    last = next(r for r in rows if r["P"] == max(cfg.workers))
    return {
        "rows": rows,
        "fit_a": float(coef[0]),
        "fit_b": float(coef[1]),
        "r2": r2,
        "phase1_speedup": first["phase1_ms"] / last["phase1_ms"],
    }


# --- robustness ---------------------------------------------------------------------

def _mean_shard_cosine(candidate, original, grid, dim, kind) -> float:
    sims = [
        cosine(encode_shard(sc, dim=dim, kind=kind), encode_shard(so, dim=dim, kind=kind))
        for sc, so in zip(fragment(candidate, grid), fragment(original, grid))
    ]
    return float(np.mean(sims))


def run_robustness(cfg: ExperimentConfig) -> list[dict]:
    """Anchor a corpus, then corrupt and reconstruct it across noise levels."""
    graph = _graph(cfg)
    dep = new_deployment(
        graph,
        _sim(cfg),
        ShardGrid(cfg.grid_rows, cfg.grid_cols),
        dim=cfg.dim,
        kind=cfg.kind,
        alpha=cfg.alpha,
        policy=cfg.effective_policy,
        policy_d=cfg.policy_d,
        leader_fraction=cfg.leader_fraction,
        fingerprint_on=cfg.fingerprint_on,
    )
    corpus = _corpus(cfg, count=cfg.robustness_images)
    for img in corpus:
        anchor_image(dep, img)

    rows = []
    for sigma in cfg.sigmas:
        cor_scores, rec_scores, psnr_cor, psnr_rec, wins = [], [], [], [], 0
        for i, img in enumerate(corpus):
            cor = corrupt_gaussian(img, sigma, seed=cfg.seed * 1_000_003 + 10_000 + i)
            res = reconstruct_with(dep, cor, fallback=cfg.fallback)
            c = _mean_shard_cosine(cor, img, dep.grid, cfg.dim, cfg.kind)
            r = _mean_shard_cosine(res.image, img, dep.grid, cfg.dim, cfg.kind)
            cor_scores.append(c)
            rec_scores.append(r)
            psnr_cor.append(psnr(cor, img))
            psnr_rec.append(psnr(res.image, img))
            if r >= c:
                wins += 1
        rows.append(
            {
                "sigma": sigma,
                "corrupted_cosine": float(np.mean(cor_scores)),
                "reconstructed_cosine": float(np.mean(rec_scores)),
                "win_rate": wins / len(corpus),
                "corrupted_psnr_db": float(np.mean(psnr_cor)),
                "reconstructed_psnr_db": float(np.mean(psnr_rec)),
                "images": len(corpus),
            }
        )
    return rows
