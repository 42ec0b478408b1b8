"""Federated model-fingerprint scaffolding.

Each node fits a tiny affine restoration model y = a*x + b on its local
(corrupted, original) pixel pairs, anchors the model's fingerprint on the
GLOBAL chain, and a coordinator aggregates the parameters after re-verifying
every fingerprint against its anchor. The model is deliberately minimal —
the interesting part is the provenance loop, not the learner.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsensusAbort, DegenerateData, TamperedRecord
from .imaging import Image
from .ledger import TxKind, append_committed, create_transaction
from .pipeline import Deployment
from .consensus import run_consensus_round
from .topology import place_shards

_VAR_EPS = 1e-24

AGGREGATE_NODE_ID = "aggregate"


@dataclass(frozen=True)
class ModelParams:
    a: float
    b: float

    def canonical_bytes(self) -> bytes:
        return struct.pack("<dd", self.a, self.b)

    @classmethod
    def from_canonical(cls, raw: bytes) -> "ModelParams":
        if len(raw) != 16:
            raise ValueError(f"model canonical form is 16 bytes, got {len(raw)}")
        a, b = struct.unpack("<dd", raw)
        return cls(a=a, b=b)

    def apply(self, pixels: np.ndarray) -> np.ndarray:
        return np.clip(self.a * pixels + self.b, 0.0, 1.0)


def hash_model(params: ModelParams) -> bytes:
    return hashlib.sha256(params.canonical_bytes()).digest()


def fit_local_model(pairs: list[tuple[Image, Image]]) -> ModelParams:
    """Closed-form least squares of original on corrupted over pooled pixels.

    Degenerate inputs: no pixels at all raises; constant-x data has no
    unique slope, so the fit collapses to the mean predictor (a=0).
    """
    if not pairs:
        raise DegenerateData("no image pairs to fit")
    xs = np.concatenate([c.pixels.ravel() for c, _ in pairs])
    ys = np.concatenate([o.pixels.ravel() for _, o in pairs])
    if xs.size == 0:
        raise DegenerateData("no pixels to fit")

    x_mean = float(xs.mean())
    y_mean = float(ys.mean())
    var = float(np.mean((xs - x_mean) ** 2))
    if var < _VAR_EPS:
        return ModelParams(a=0.0, b=y_mean)
    cov = float(np.mean((xs - x_mean) * (ys - y_mean)))
    a = cov / var
    return ModelParams(a=a, b=y_mean - a * x_mean)


@dataclass(frozen=True)
class ModelRecord:
    node_id: str
    round_no: int
    params: ModelParams
    fingerprint: bytes
    height: int
    tx_offset: int
    tx_id: bytes


def anchor_model(
    dep: Deployment, node_id: str, round_no: int, params: ModelParams
) -> ModelRecord:
    """Run one consensus round anchoring the model fingerprint on GLOBAL."""
    fp = hash_model(params)
    tx = create_transaction(
        TxKind.MODEL_FINGERPRINT, fp, {"node_id": node_id, "round": str(round_no)}
    )
    # reuse the shard placement machinery for the round's participant view
    placement = place_shards(
        dep.graph, [fp], dep.policy, d=dep.policy_d, seed=dep.sim.seed,
        leader_fraction=dep.leader_fraction,
    )
    gled = dep.ledgers.global_ledger
    block, _trace = run_consensus_round(
        dep.sim,
        dep.graph,
        placement,
        [tx],
        height=len(gled.blocks) + 1,
        prev_hash=gled.tip_hash,
        timestamp=dep.tick(),
        round_index=dep.round_counter,
    )
    dep.round_counter += 1
    if block is None:
        raise ConsensusAbort(f"model anchoring round failed for node {node_id}")
    append_committed(gled, block)
    return ModelRecord(
        node_id=node_id,
        round_no=round_no,
        params=params,
        fingerprint=fp,
        height=block.height,
        tx_offset=0,
        tx_id=tx.tx_id,
    )


def _reverify(dep: Deployment, rec: ModelRecord) -> None:
    gled = dep.ledgers.global_ledger
    if not (1 <= rec.height <= len(gled.blocks)):
        raise TamperedRecord(f"node {rec.node_id}: height {rec.height} not on chain")
    block = gled.blocks[rec.height - 1]
    if rec.tx_offset >= len(block.txs):
        raise TamperedRecord(f"node {rec.node_id}: tx offset out of range")
    tx = block.txs[rec.tx_offset]
    if tx.kind != TxKind.MODEL_FINGERPRINT or tx.tx_id != rec.tx_id:
        raise TamperedRecord(f"node {rec.node_id}: anchored tx does not match record")
    if tx.metadata.get("node_id") != rec.node_id:
        raise TamperedRecord(f"node {rec.node_id}: anchored under a different node id")
    if tx.payload_hash != hash_model(rec.params):
        raise TamperedRecord(f"node {rec.node_id}: parameters do not match anchor")


def aggregate_models(
    dep: Deployment,
    records: list[ModelRecord],
    weights: list[float] | None = None,
) -> ModelParams:
    """Mean of verified node models; any anchor mismatch aborts aggregation.

    weights, when given, are per-record sample counts (or any nonnegative
    masses); the default is the plain unweighted mean.
    """
    if not records:
        raise DegenerateData("no model records to aggregate")
    if weights is not None:
        if len(weights) != len(records):
            raise ValueError("one weight per record required")
        if any(w < 0 for w in weights) or sum(weights) <= 0:
            raise ValueError("weights must be nonnegative with positive sum")
    for rec in records:
        _reverify(dep, rec)
    if weights is None:
        a = sum(r.params.a for r in records) / len(records)
        b = sum(r.params.b for r in records) / len(records)
    else:
        total = sum(weights)
        a = sum(w * r.params.a for w, r in zip(weights, records)) / total
        b = sum(w * r.params.b for w, r in zip(weights, records)) / total
    return ModelParams(a=a, b=b)


def anchor_aggregate(dep: Deployment, round_no: int, params: ModelParams) -> ModelRecord:
    return anchor_model(dep, AGGREGATE_NODE_ID, round_no, params)


def export_records(records: list[ModelRecord], path: str | Path) -> None:
    lines = [
        json.dumps(
            {
                "node_id": r.node_id,
                "round": r.round_no,
                "a": r.params.a,
                "b": r.params.b,
                "fingerprint": r.fingerprint.hex(),
                "height": r.height,
                "tx_id": r.tx_id.hex(),
            },
            sort_keys=True,
        )
        for r in records
    ]
    Path(path).write_text("\n".join(lines) + "\n")
