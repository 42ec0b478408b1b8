"""Three-phase degree-weighted consensus over a simulated process network.

Deterministic logical-time simulation: P ranks (rank r runs on overlay node
r) verify and sign a transaction batch in parallel, exchange signatures in
an allgather, certify transactions that clear BOTH a 2f+1 signer count and
a degree weight threshold, then the highest-degree rank assembles and
broadcasts a block. Commit requires an echo quorum of 2f+1 matching block
headers, so with P >= 3f+1 at most one block variant can commit per round
even under an equivocating leader.

Signatures are keyed MACs (the simulator owns all keys); Byzantine modes:
  crash        rank goes silent
  garbage_sig  rank signs with random-looking invalid bytes
  equivocate   rank shows different ranks different data
"""

from __future__ import annotations

import dataclasses
import hashlib
import hmac
import math
import random
import struct
from dataclasses import dataclass

from .errors import ConfigInvalid, RankOutOfRange
from .imaging import Image, ShardGrid, fragment
from .ledger import GENESIS_PREV, Block, Transaction, TxKind, create_transaction
from .fingerprint import build_merkle, encode_shard, hash_latent
from .topology import OverlayGraph, PlacementMap, replication_factor

FAULT_MODES = ("crash", "garbage_sig", "equivocate")

TRACE_CSV_HEADER = "round,phase1_ms,gather_ms,aggregate_ms,assemble_ms,total_ms,committed_txs,msgs"


@dataclass(frozen=True)
class SimConfig:
    P: int
    f: int
    seed: int = 0
    base_delay_ms: float = 5.0
    jitter_ms: float = 2.0
    t_verify_ms: float = 1.0
    t_aggregate_ms: float = 0.0
    t_assemble_ms: float = 0.5
    t_encode_ms: float = 2.0
    t_push_ms: float = 1.5
    # None -> min((2f+1) * mean degree, sum of the 2f+1 smallest rank degrees)
    weight_threshold: float | None = None
    faults: tuple[tuple[int, str], ...] = ()

    def __post_init__(self):
        if self.P < 1 or self.f < 0 or self.P < 3 * self.f + 1:
            raise ConfigInvalid(f"need P >= 3f+1 >= 1, got P={self.P} f={self.f}")
        for rank, mode in self.faults:
            if not (0 <= rank < self.P):
                raise RankOutOfRange(f"faulty rank {rank} not in [0, {self.P})")
            if mode not in FAULT_MODES:
                raise ConfigInvalid(f"unknown fault mode {mode!r}")

    def fault_map(self) -> dict[int, str]:
        return dict(self.faults)


def inject_fault(config: SimConfig, rank: int, mode: str) -> SimConfig:
    """Return a config where `rank` misbehaves per `mode` in later rounds."""
    if not (0 <= rank < config.P):
        raise RankOutOfRange(f"rank {rank} not in [0, {config.P})")
    if mode not in FAULT_MODES:
        raise ConfigInvalid(f"unknown fault mode {mode!r}")
    kept = tuple((r, m) for r, m in config.faults if r != rank)
    return dataclasses.replace(config, faults=kept + ((rank, mode),))


@dataclass(frozen=True)
class Signature:
    signer: int
    mac: bytes


@dataclass(frozen=True)
class RoundTrace:
    round_index: int
    phase1_ms: float
    gather_ms: float
    aggregate_ms: float
    assemble_ms: float
    committed_txs: int
    msgs: int
    # (rank, committed header hash hex or None) for every rank
    rank_commits: tuple[tuple[int, str | None], ...]

    @property
    def total_ms(self) -> float:
        return self.phase1_ms + self.gather_ms + self.aggregate_ms + self.assemble_ms

    def csv_row(self) -> str:
        return (
            f"{self.round_index},{self.phase1_ms:.3f},{self.gather_ms:.3f},"
            f"{self.aggregate_ms:.3f},{self.assemble_ms:.3f},{self.total_ms:.3f},"
            f"{self.committed_txs},{self.msgs}"
        )


# --- keys and signatures -------------------------------------------------------

def rank_key(seed: int, rank: int) -> bytes:
    return hashlib.sha256(b"prosima-rank-key" + struct.pack("<QI", seed, rank)).digest()


def sign_transaction(rank: int, tx: Transaction, honest: bool, *, seed: int = 0) -> Signature:
    key = rank_key(seed, rank)
    if honest:
        return Signature(signer=rank, mac=hmac.new(key, tx.tx_id, hashlib.sha256).digest())
    # deterministic junk that never verifies
    return Signature(signer=rank, mac=hashlib.sha256(b"garbage" + key + tx.tx_id).digest())


def verify_signature(sig: Signature, tx_id: bytes, *, seed: int = 0) -> bool:
    expect = hmac.new(rank_key(seed, sig.signer), tx_id, hashlib.sha256).digest()
    return hmac.compare_digest(sig.mac, expect)


# --- certificates ----------------------------------------------------------------

def weight_threshold(config: SimConfig, graph: OverlayGraph) -> float:
    """Degree weight a certificate must reach.

    Default is the (2f+1)-scaled mean degree, floored by the smallest sum
    any 2f+1 distinct ranks can actually produce — otherwise a run could
    demand more weight than the surviving quorum physically has.
    """
    if config.weight_threshold is not None:
        return config.weight_threshold
    q = 2 * config.f + 1
    mean_deg = sum(graph.degrees) / graph.node_count
    rank_degs = sorted(graph.degrees[r] for r in range(config.P))
    return min(q * mean_deg, float(sum(rank_degs[:q])))


def serialize_certificate(sigs: list[Signature]) -> bytes:
    out = [struct.pack("<H", len(sigs))]
    for s in sorted(sigs, key=lambda s: s.signer):
        out.append(struct.pack("<I", s.signer) + s.mac)
    return b"".join(out)


def parse_certificate(raw: bytes) -> list[Signature]:
    if len(raw) < 2:
        raise ValueError("truncated certificate")
    (count,) = struct.unpack_from("<H", raw, 0)
    if len(raw) != 2 + count * 36:
        raise ValueError("certificate size mismatch")
    sigs = []
    for i in range(count):
        off = 2 + i * 36
        (rank,) = struct.unpack_from("<I", raw, off)
        sigs.append(Signature(signer=rank, mac=raw[off + 4 : off + 36]))
    return sigs


def validate_certificate(
    cert: bytes, tx_id: bytes, config: SimConfig, graph: OverlayGraph
) -> bool:
    """Re-check a stored certificate: distinct ranks, valid MACs, both thresholds."""
    try:
        sigs = parse_certificate(cert)
    except ValueError:
        return False
    signers = [s.signer for s in sigs]
    if len(set(signers)) != len(signers):
        return False
    if any(not (0 <= r < config.P) for r in signers):
        return False
    valid = [s for s in sigs if verify_signature(s, tx_id, seed=config.seed)]
    if len(valid) != len(sigs):
        return False  # certificates must not carry dead weight
    weight = sum(graph.degrees[s.signer] for s in valid)
    return len(valid) >= 2 * config.f + 1 and weight >= weight_threshold(config, graph)


# --- the round ---------------------------------------------------------------------

def _leader_rank(config: SimConfig, graph: OverlayGraph) -> int:
    return max(range(config.P), key=lambda r: (graph.degrees[r], -r))


def _stages(p: int) -> int:
    return math.ceil(math.log2(p)) if p > 1 else 0


def run_consensus_round(
    config: SimConfig,
    graph: OverlayGraph,
    placement: PlacementMap,
    txs: list[Transaction],
    *,
    height: int = 1,
    prev_hash: bytes = GENESIS_PREV,
    timestamp: int = 0,
    round_index: int = 0,
) -> tuple[Block | None, RoundTrace]:
    """One full three-phase round; returns (committed block or None, trace)."""
    if config.P > graph.node_count:
        raise ConfigInvalid(f"P={config.P} exceeds node count {graph.node_count}")
    if not txs:
        raise ConfigInvalid("a round needs at least one transaction")

    P, f, n = config.P, config.f, len(txs)
    faults = config.fault_map()
    alive = [r for r in range(P) if faults.get(r) != "crash"]
    rng = random.Random(config.seed * 1_000_003 + round_index)

    def link_delay() -> float:
        return config.base_delay_ms + rng.uniform(0.0, config.jitter_ms)

    # Phase 1 — parallel shard pre-verification and signing.
    # Work is split across ranks, so simulated wall time is ceil(n/P) verifies;
    # the allgather then costs ceil(log2 P) latency stages.
    # sigs[dest][tx position] -> {rank: Signature} as seen by dest
    sigs: dict[int, list[dict[int, Signature]]] = {d: [dict() for _ in txs] for d in alive}
    for r in alive:
        mode = faults.get(r)
        for j, tx in enumerate(txs):
            if mode is None:
                s = sign_transaction(r, tx, honest=True, seed=config.seed)
                for d in alive:
                    sigs[d][j][r] = s
            elif mode == "garbage_sig":
                s = sign_transaction(r, tx, honest=False, seed=config.seed)
                for d in alive:
                    sigs[d][j][r] = s
            else:  # equivocate: even-rank peers see a valid sig, odd see junk
                good = sign_transaction(r, tx, honest=True, seed=config.seed)
                junk = sign_transaction(r, tx, honest=False, seed=config.seed)
                for d in alive:
                    sigs[d][j][r] = good if d % 2 == 0 else junk

    phase1_ms = math.ceil(n / P) * config.t_verify_ms
    gather_ms = sum(link_delay() for _ in range(_stages(P)))

    # Phase 2 — degree-weighted aggregation in the leader's view.
    leader = _leader_rank(config, graph)
    threshold = weight_threshold(config, graph)
    certified: list[Transaction] = []
    if faults.get(leader) != "crash":
        for j, tx in enumerate(txs):
            valid = [
                s
                for s in sigs[leader][j].values()
                if verify_signature(s, tx.tx_id, seed=config.seed)
            ]
            weight = sum(graph.degrees[s.signer] for s in valid)
            if len(valid) >= 2 * f + 1 and weight >= threshold:
                certified.append(tx.with_certificate(serialize_certificate(valid)))
    aggregate_ms = math.ceil(n / P) * config.t_aggregate_ms

    # message budget: allgather P(P-1), broadcast P-1, echoes P(P-1), acks P-1
    msgs = 2 * (P * P - 1) if P > 1 else 0

    def finish(committed: Block | None, commits: dict[int, str | None]) -> tuple[Block | None, RoundTrace]:
        assemble = config.t_assemble_ms + sum(link_delay() for _ in range(_stages(P)))
        if P > 1:
            assemble += link_delay()  # barrier
        trace = RoundTrace(
            round_index=round_index,
            phase1_ms=phase1_ms,
            gather_ms=gather_ms,
            aggregate_ms=aggregate_ms,
            assemble_ms=assemble,
            committed_txs=len(committed.txs) if committed else 0,
            msgs=msgs,
            rank_commits=tuple((r, commits.get(r)) for r in range(P)),
        )
        return committed, trace

    if faults.get(leader) == "crash" or not certified:
        return finish(None, {})

    # Phase 3 — leader assembly, broadcast, echo quorum, barrier.
    def assemble_block(order: list[Transaction], ts: int) -> Block:
        return Block(
            height=height,
            prev_hash=prev_hash,
            merkle_root=build_merkle([t.tx_id for t in order]).root,
            timestamp=ts,
            txs=tuple(order),
        )

    block_a = assemble_block(certified, timestamp)
    if faults.get(leader) == "equivocate":
        # a second variant with a different header: order reversed and the
        # timestamp nudged so single-tx rounds still split
        block_b = assemble_block(list(reversed(certified)), timestamp + 1)
        received = {d: (block_a if d % 2 == 0 else block_b) for d in alive}
    else:
        received = {d: block_a for d in alive}

    # Commit quorum: 2f+1 with a strict-majority floor. Each rank echoes the
    # header it received once, so two variants both reaching a majority is
    # impossible — no conflicting commits at any (scope, height).
    echo_quorum = max(2 * f + 1, P // 2 + 1)
    echoes = {d: received[d].header_hash() for d in alive}
    commits: dict[int, str | None] = {}
    committed_variant: Block | None = None
    for d in alive:
        matching = sum(1 for e in echoes.values() if e == echoes[d])
        if matching >= echo_quorum:
            commits[d] = echoes[d].hex()
            committed_variant = received[d]
        else:
            commits[d] = None

    return finish(committed_variant, commits)


# --- batched pipeline simulation ---------------------------------------------------

def _image_txs(image: Image, grid: ShardGrid, dim: int, kind: str) -> list[Transaction]:
    txs = []
    for shard in fragment(image, grid):
        z = encode_shard(shard, dim=dim, kind=kind)
        txs.append(
            create_transaction(
                TxKind.SHARD_FINGERPRINT,
                hash_latent(z),
                {
                    "image_id": image.image_id.hex(),
                    "row": str(shard.row),
                    "col": str(shard.col),
                },
            )
        )
    return txs


def simulate_batch(
    config: SimConfig,
    graph: OverlayGraph,
    placement: PlacementMap,
    images: list[Image],
    *,
    grid: ShardGrid | None = None,
    dim: int = 64,
    kind: str = "full",
) -> dict:
    """Push a batch through the fragment->fingerprint->consensus pipeline.

    Three simulated stages per image: encode (t_encode per shard), one
    consensus round over its shard transactions, then replication push
    (t_push per stored shard copy). Stages overlap across images, so the
    reported latency is amortized makespan/batch — it shrinks toward the
    bottleneck stage as the batch grows while throughput rises.
    """
    if not images:
        raise ConfigInvalid("simulate_batch needs a nonempty image stream")
    grid = grid or ShardGrid(rows=4, cols=4)
    rf = replication_factor(placement)

    traces: list[RoundTrace] = []
    stage_costs: list[tuple[float, float, float]] = []
    committed = 0
    aborted = 0
    for i, img in enumerate(images):
        txs = _image_txs(img, grid, dim, kind)
        block, trace = run_consensus_round(
            config, graph, placement, txs, height=i + 1, round_index=i
        )
        traces.append(trace)
        if block is None:
            aborted += 1
        else:
            committed += len(block.txs)
        encode_ms = len(txs) * config.t_encode_ms
        push_ms = len(txs) * rf * config.t_push_ms
        stage_costs.append((encode_ms, trace.total_ms, push_ms))

    # three-stage pipeline recurrence over simulated time
    finish = [0.0, 0.0, 0.0]
    for enc, rnd, push in stage_costs:
        finish[0] = finish[0] + enc
        finish[1] = max(finish[0], finish[1]) + rnd
        finish[2] = max(finish[1], finish[2]) + push
    makespan = finish[2]

    B = len(images)
    return {
        "batch_size": B,
        "makespan_ms": makespan,
        "mean_latency_ms": makespan / B,
        "throughput_img_s": 1000.0 * B / makespan,
        "committed_txs": committed,
        "aborted_rounds": aborted,
        "mean_phase1_ms": sum(t.phase1_ms for t in traces) / B,
        "mean_gather_ms": sum(t.gather_ms for t in traces) / B,
        "mean_aggregate_ms": sum(t.aggregate_ms for t in traces) / B,
        "mean_assemble_ms": sum(t.assemble_ms for t in traces) / B,
        "mean_encode_ms": sum(c[0] for c in stage_costs) / B,
        "mean_push_ms": sum(c[2] for c in stage_costs) / B,
        "traces": traces,
    }


def traces_to_csv(traces: list[RoundTrace]) -> str:
    return "\n".join([TRACE_CSV_HEADER] + [t.csv_row() for t in traces]) + "\n"
