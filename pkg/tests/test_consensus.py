import hashlib
import math
import struct

import numpy as np
import pytest

from prosima.consensus import (
    SimConfig,
    TRACE_CSV_HEADER,
    inject_fault,
    parse_certificate,
    run_consensus_round,
    serialize_certificate,
    sign_transaction,
    simulate_batch,
    traces_to_csv,
    validate_certificate,
    verify_signature,
    weight_threshold,
)
from prosima.errors import ConfigInvalid, RankOutOfRange
from prosima.imaging import Image, ShardGrid
from prosima.ledger import TxKind, create_transaction
from prosima.topology import generate_scale_free, place_shards


def make_txs(n, tag=0):
    return [
        create_transaction(
            TxKind.SHARD_FINGERPRINT,
            hashlib.sha256(struct.pack("<II", tag, i)).digest(),
            {"image_id": "x", "row": "0", "col": str(i)},
        )
        for i in range(n)
    ]


def setup(N=8, P=4, f=1, seed=0, n_txs=3, **cfg_kw):
    g = generate_scale_free(N, 3, 2, seed)
    txs = make_txs(n_txs, tag=seed)
    pm = place_shards(g, [t.payload_hash for t in txs], "gft_locality")
    return SimConfig(P=P, f=f, seed=seed, **cfg_kw), g, pm, txs


def leader_of(config, graph):
    return max(range(config.P), key=lambda r: (graph.degrees[r], -r))


# --- config / fault plumbing --------------------------------------------------

def test_config_requires_bft_bound():
    with pytest.raises(ConfigInvalid):
        SimConfig(P=3, f=1)
    with pytest.raises(ConfigInvalid):
        SimConfig(P=0, f=0)
    SimConfig(P=4, f=1)  # boundary ok


def test_inject_fault_validation():
    cfg = SimConfig(P=4, f=1)
    with pytest.raises(RankOutOfRange):
        inject_fault(cfg, 4, "crash")
    with pytest.raises(ConfigInvalid):
        inject_fault(cfg, 1, "sleepy")
    a = inject_fault(cfg, 1, "crash")
    b = inject_fault(a, 1, "garbage_sig")  # re-inject replaces
    assert b.fault_map() == {1: "garbage_sig"}
    assert cfg.fault_map() == {}  # original untouched


def test_rank_exceeding_nodes_rejected():
    cfg, g, pm, txs = setup(N=8, P=4)
    small = generate_scale_free(3, 2, 1, 0)
    with pytest.raises(ConfigInvalid):
        run_consensus_round(SimConfig(P=4, f=1), small, pm, txs)


# --- signatures ----------------------------------------------------------------

def test_signature_roundtrip():
    (tx,) = make_txs(1)
    sig = sign_transaction(2, tx, honest=True, seed=9)
    assert verify_signature(sig, tx.tx_id, seed=9)
    assert not verify_signature(sig, tx.tx_id, seed=10)  # wrong key universe
    again = sign_transaction(2, tx, honest=True, seed=9)
    assert sig.mac == again.mac


def test_garbage_signature_rejected():
    (tx,) = make_txs(1)
    bad = sign_transaction(2, tx, honest=False, seed=9)
    assert not verify_signature(bad, tx.tx_id, seed=9)
    assert bad.mac == sign_transaction(2, tx, honest=False, seed=9).mac


# --- happy-path round -----------------------------------------------------------

def test_full_participation_certificate():
    """All four honest ranks sign; the certificate carries all their weight."""
    g = generate_scale_free(4, 3, 2, seed=1)  # ranks cover every node
    txs = make_txs(1)
    pm = place_shards(g, [txs[0].payload_hash], "gft_locality")
    cfg = SimConfig(P=4, f=1, seed=1)
    block, trace = run_consensus_round(cfg, g, pm, txs)
    assert block is not None
    assert trace.committed_txs == 1
    sigs = parse_certificate(block.txs[0].certificate)
    assert sorted(s.signer for s in sigs) == [0, 1, 2, 3]
    weight = sum(g.degrees[s.signer] for s in sigs)
    assert weight == sum(g.degrees)
    assert validate_certificate(block.txs[0].certificate, block.txs[0].tx_id, cfg, g)


def test_all_ranks_commit_same_block():
    cfg, g, pm, txs = setup(P=7, f=2, n_txs=5)
    block, trace = run_consensus_round(cfg, g, pm, txs)
    assert block is not None
    hashes = {h for _, h in trace.rank_commits}
    assert hashes == {block.header_hash().hex()}


def test_insufficient_honest_signers_abort():
    # two garbage ranks out of four leave only 2 valid signatures < 2f+1
    cfg, g, pm, txs = setup(P=4, f=1, n_txs=2)
    cfg = inject_fault(inject_fault(cfg, 1, "garbage_sig"), 2, "garbage_sig")
    block, trace = run_consensus_round(cfg, g, pm, txs)
    assert block is None
    assert trace.committed_txs == 0
    assert all(h is None for _, h in trace.rank_commits)


# --- crash tolerance -------------------------------------------------------------

def test_single_crash_still_commits():
    for seed in range(20):
        cfg, g, pm, txs = setup(P=4, f=1, seed=seed)
        victim = next(r for r in range(4) if r != leader_of(cfg, g))
        cfg = inject_fault(cfg, victim, "crash")
        block, trace = run_consensus_round(cfg, g, pm, txs, round_index=seed)
        assert block is not None
        sigs = parse_certificate(block.txs[0].certificate)
        assert len(sigs) == 3
        assert victim not in {s.signer for s in sigs}


def test_double_crash_loses_liveness_not_safety():
    cfg, g, pm, txs = setup(P=4, f=1)
    cfg = inject_fault(inject_fault(cfg, 1, "crash"), 2, "crash")
    block, trace = run_consensus_round(cfg, g, pm, txs)
    assert block is None
    assert {h for _, h in trace.rank_commits} == {None}


def test_triple_crash_liveness_at_p10():
    for seed in range(30):
        cfg, g, pm, txs = setup(N=16, P=10, f=3, seed=seed, n_txs=4)
        lead = leader_of(cfg, g)
        crashed = [r for r in range(10) if r != lead][:3]
        for r in crashed:
            cfg = inject_fault(cfg, r, "crash")
        block, _ = run_consensus_round(cfg, g, pm, txs, round_index=seed)
        assert block is not None


# --- equivocation safety ----------------------------------------------------------

def test_nonleader_equivocator_identical_commits():
    """A signer showing different ranks different signatures cannot split
    the committed block: every committing rank lands on the same header."""
    for seed in range(50):
        cfg, g, pm, txs = setup(P=7, f=2, seed=seed, n_txs=3)
        eq = next(r for r in range(7) if r != leader_of(cfg, g))
        cfg = inject_fault(cfg, eq, "equivocate")
        block, trace = run_consensus_round(cfg, g, pm, txs, round_index=seed)
        committed = {h for _, h in trace.rank_commits if h is not None}
        assert len(committed) <= 1
        if block is not None:
            assert committed == {block.header_hash().hex()}


def test_equivocating_leader_never_splits_commits():
    """200 seeded rounds with two equivocators, one of them the leader:
    no two ranks may ever commit different blocks at the same height."""
    for seed in range(200):
        g = generate_scale_free(12, 3, 2, seed)
        txs = make_txs(4, tag=seed)
        pm = place_shards(g, [t.payload_hash for t in txs], "gft_locality")
        cfg = SimConfig(P=7, f=2, seed=seed)
        lead = leader_of(cfg, g)
        cfg = inject_fault(cfg, lead, "equivocate")
        cfg = inject_fault(cfg, (lead + 1) % 7, "equivocate")
        _, trace = run_consensus_round(cfg, g, pm, txs, round_index=seed)
        committed = {h for _, h in trace.rank_commits if h is not None}
        assert len(committed) <= 1


# --- certificates -------------------------------------------------------------------

def test_certificate_serialization_roundtrip():
    (tx,) = make_txs(1)
    sigs = [sign_transaction(r, tx, honest=True, seed=4) for r in (3, 0, 2)]
    raw = serialize_certificate(sigs)
    back = parse_certificate(raw)
    assert [s.signer for s in back] == [0, 2, 3]  # canonical rank order
    assert {s.mac for s in back} == {s.mac for s in sigs}


def test_certificate_validation_rejects_tampering():
    cfg, g, pm, txs = setup(P=4, f=1, seed=2, n_txs=1)
    block, _ = run_consensus_round(cfg, g, pm, txs)
    cert, tx_id = block.txs[0].certificate, block.txs[0].tx_id
    assert validate_certificate(cert, tx_id, cfg, g)
    flipped = bytearray(cert)
    flipped[10] ^= 0x01
    assert not validate_certificate(bytes(flipped), tx_id, cfg, g)
    # a certificate is bound to its transaction
    other = make_txs(2, tag=9)[1]
    assert not validate_certificate(cert, other.tx_id, cfg, g)
    # duplicate signers rejected
    sigs = parse_certificate(cert)
    assert not validate_certificate(serialize_certificate(sigs + [sigs[0]]), tx_id, cfg, g)


def test_certificate_monotone_in_signers():
    cfg, g, pm, txs = setup(N=8, P=7, f=1, seed=3, n_txs=1)
    tx = txs[0]
    all_sigs = [sign_transaction(r, tx, honest=True, seed=3) for r in range(7)]
    valid_from = None
    for k in range(1, 8):
        ok = validate_certificate(serialize_certificate(all_sigs[:k]), tx.tx_id, cfg, g)
        if ok and valid_from is None:
            valid_from = k
        if valid_from is not None:
            assert ok  # once valid, growing the signer set keeps it valid
    assert valid_from is not None


def test_weight_threshold_rules():
    g = generate_scale_free(4, 3, 2, seed=1)
    cfg = SimConfig(P=4, f=1, seed=1)
    q = 3
    by_formula = q * sum(g.degrees) / 4
    floor = sum(sorted(g.degrees)[:q])
    assert weight_threshold(cfg, g) == min(by_formula, floor)
    explicit = SimConfig(P=4, f=1, seed=1, weight_threshold=2.5)
    assert weight_threshold(explicit, g) == 2.5


# --- cost model ------------------------------------------------------------------

def test_phase1_cost_contract():
    for P, n in [(1, 7), (4, 7), (8, 64), (5, 12)]:
        cfg, g, pm, _ = setup(N=16, P=P, f=0, n_txs=1)
        txs = make_txs(n)
        _, trace = run_consensus_round(cfg, g, pm, txs)
        assert trace.phase1_ms == math.ceil(n / P) * cfg.t_verify_ms


def test_gather_cost_scales_with_log_p():
    for P in (2, 4, 8):
        cfg, g, pm, txs = setup(N=16, P=P, f=0, n_txs=2)
        _, trace = run_consensus_round(cfg, g, pm, txs)
        stages = math.ceil(math.log2(P))
        assert stages * cfg.base_delay_ms <= trace.gather_ms
        assert trace.gather_ms <= stages * (cfg.base_delay_ms + cfg.jitter_ms)


def test_serial_degenerate_case():
    # P=1: no gather, no broadcast, total = n verifies + assembly
    cfg, g, pm, _ = setup(N=8, P=1, f=0)
    txs = make_txs(5)
    block, trace = run_consensus_round(cfg, g, pm, txs)
    assert block is not None
    assert trace.gather_ms == 0.0
    assert trace.total_ms == 5 * cfg.t_verify_ms + cfg.t_assemble_ms
    assert trace.msgs == 0


def test_phase1_scaling_fit():
    """Phase-1 time across P in {1,2,4,8} fits a*(n/P) + b*log2(P)."""
    g = generate_scale_free(16, 3, 2, 1)
    txs = make_txs(1024)
    pm = place_shards(g, [txs[0].payload_hash], "gft_locality")
    ys, X = [], []
    for P in (1, 2, 4, 8):
        cfg = SimConfig(P=P, f=0, seed=3)
        _, trace = run_consensus_round(cfg, g, pm, txs)
        ys.append(trace.phase1_ms)
        X.append([1024 / P, math.log2(P)])
    X, y = np.array(X), np.array(ys)
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    r2 = 1.0 - float(resid @ resid) / float((y - y.mean()) @ (y - y.mean()))
    assert r2 >= 0.95


def test_trace_determinism_and_csv():
    cfg, g, pm, txs = setup(P=4, f=1, seed=11, n_txs=3)
    _, t1 = run_consensus_round(cfg, g, pm, txs, round_index=2)
    _, t2 = run_consensus_round(cfg, g, pm, txs, round_index=2)
    assert t1 == t2
    assert t1.csv_row() == t2.csv_row()
    _, t3 = run_consensus_round(cfg, g, pm, txs, round_index=3)
    assert t3.csv_row() != t1.csv_row()
    csv = traces_to_csv([t1, t3])
    lines = csv.strip().split("\n")
    assert lines[0] == "round,phase1_ms,gather_ms,aggregate_ms,assemble_ms,total_ms,committed_txs,msgs"
    assert len(lines) == 3
    assert float(lines[1].split(",")[5]) == pytest.approx(t1.total_ms, abs=1e-3)


# --- batch simulation ---------------------------------------------------------------

def build_images(count, seed=5, size=32):
    rng = np.random.default_rng(seed)
    return [
        Image(width=size, height=size, pixels=rng.uniform(0, 1, (size, size)))
        for _ in range(count)
    ]


def test_batch_trends():
    """Bigger batches amortize pipeline fill: latency down, throughput up."""
    images = build_images(60)
    grid = ShardGrid(rows=4, cols=4)
    g = generate_scale_free(20, 3, 2, 0)
    from prosima.imaging import fragment

    keys = [s.key for img in images[:3] for s in fragment(img, grid)]
    pm = place_shards(g, keys, "gft_locality")
    cfg = SimConfig(P=8, f=2, seed=1)
    lat, thr = [], []
    for B in (10, 25, 60):
        m = simulate_batch(cfg, g, pm, images[:B], grid=grid)
        lat.append(m["mean_latency_ms"])
        thr.append(m["throughput_img_s"])
        assert m["aborted_rounds"] == 0
        assert m["committed_txs"] == B * 16
    assert lat[0] > lat[1] > lat[2]
    assert thr[0] < thr[1] < thr[2]


def test_batch_replication_cost_ordering():
    images = build_images(30)
    grid = ShardGrid(rows=4, cols=4)
    g = generate_scale_free(20, 3, 2, 0)
    from prosima.imaging import fragment

    keys = [s.key for img in images[:3] for s in fragment(img, grid)]
    cfg = SimConfig(P=8, f=2, seed=1)
    lats = {}
    for policy, kw in [
        ("gft_locality", {}),
        ("random_dup", {"d": 3}),
        ("full_ledger", {}),
    ]:
        pm = place_shards(g, keys, policy, **kw)
        lats[policy] = simulate_batch(cfg, g, pm, images, grid=grid)["mean_latency_ms"]
    assert lats["gft_locality"] < lats["random_dup"] < lats["full_ledger"]
