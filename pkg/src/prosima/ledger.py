"""Append-only per-scope block chains anchoring shard fingerprints.

Each grid cell gets its own chain (scope "cell-{row}-{col}"); image-level
roots and model fingerprints land on the "GLOBAL" chain. Blocks store only
32-byte anchors; latent vectors live in a content-addressed side store
keyed by their fingerprint. Timestamps are logical (caller-supplied
monotone counters), never wall clocks.

On-disk chain format (PSLG v1, little-endian throughout):
  magic "PSLG", version u8
  scope_len u16, scope UTF-8
  per block: height u64, prev_hash 32B, merkle_root 32B, timestamp u64,
             tx_count u32, then per tx:
             kind u8, payload_hash 32B, meta_len u16, metadata,
             cert_len u32, certificate
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ChainCorrupt,
    InvalidMetadata,
    LedgerFormatError,
    MetadataTooLarge,
    MissingMetadataKey,
    NotFound,
    UnverifiedTransaction,
)
from .fingerprint import LatentVector, build_merkle, cosine, hash_latent

GLOBAL_SCOPE = "GLOBAL"
GENESIS_PREV = bytes(32)
PSLG_MAGIC = b"PSLG"
PSLG_VERSION = 1
METADATA_LIMIT = 4096


def cell_scope(row: int, col: int) -> str:
    return f"cell-{row}-{col}"


class TxKind(enum.IntEnum):
    SHARD_FINGERPRINT = 1
    ROOT_ANCHOR = 2
    MODEL_FINGERPRINT = 3
    RECONSTRUCTION_EVENT = 4


# metadata schema per kind; extra keys are allowed, these are mandatory
REQUIRED_KEYS = {
    TxKind.SHARD_FINGERPRINT: ("image_id", "row", "col"),
    TxKind.ROOT_ANCHOR: ("image_id",),
    TxKind.MODEL_FINGERPRINT: ("node_id", "round"),
    TxKind.RECONSTRUCTION_EVENT: ("image_id", "row", "col"),
}


def canonical_metadata(metadata: dict[str, str]) -> bytes:
    """Sorted `k=v` pairs joined by `;`; neither character may appear inside."""
    parts = []
    for k in sorted(metadata):
        v = metadata[k]
        if not k or "=" in k or ";" in k or "=" in v or ";" in v:
            raise InvalidMetadata(f"illegal metadata pair {k!r}={v!r}")
        parts.append(f"{k}={v}")
    raw = ";".join(parts).encode("utf-8")
    if len(raw) > METADATA_LIMIT:
        raise MetadataTooLarge(f"metadata {len(raw)} bytes exceeds {METADATA_LIMIT}")
    return raw


def parse_metadata(raw: bytes) -> dict[str, str]:
    if not raw:
        return {}
    out = {}
    for pair in raw.decode("utf-8").split(";"):
        k, sep, v = pair.partition("=")
        if not sep or not k:
            raise LedgerFormatError(f"malformed metadata pair {pair!r}")
        out[k] = v
    return out


@dataclass(frozen=True)
class Transaction:
    kind: TxKind
    payload_hash: bytes
    metadata: dict[str, str]
    certificate: bytes = b""
    tx_id: bytes = field(init=False)

    def __post_init__(self):
        if len(self.payload_hash) != 32:
            raise ValueError("payload_hash must be 32 bytes")
        body = (
            struct.pack("<B", int(self.kind))
            + self.payload_hash
            + struct.pack("<H", len(self.meta_bytes))
            + self.meta_bytes
        )
        object.__setattr__(self, "tx_id", hashlib.sha256(body).digest())

    @property
    def meta_bytes(self) -> bytes:
        return canonical_metadata(self.metadata)

    def with_certificate(self, cert: bytes) -> "Transaction":
        return Transaction(kind=self.kind, payload_hash=self.payload_hash,
                           metadata=dict(self.metadata), certificate=cert)


def create_transaction(
    kind: TxKind, payload_hash: bytes, metadata: dict[str, str]
) -> Transaction:
    """Build a transaction, enforcing the kind's metadata schema."""
    for key in REQUIRED_KEYS[kind]:
        if key not in metadata:
            raise MissingMetadataKey(f"{kind.name} requires metadata key {key!r}")
    canonical_metadata(metadata)  # size/charset check up front
    return Transaction(kind=kind, payload_hash=payload_hash, metadata=dict(metadata))


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    merkle_root: bytes
    timestamp: int
    txs: tuple[Transaction, ...]

    def header_bytes(self) -> bytes:
        return (
            struct.pack("<Q", self.height)
            + self.prev_hash
            + self.merkle_root
            + struct.pack("<QI", self.timestamp, len(self.txs))
        )

    def header_hash(self) -> bytes:
        return hashlib.sha256(self.header_bytes()).digest()


@dataclass
class Ledger:
    scope: str
    blocks: list[Block] = field(default_factory=list)
    # payload_hash -> (height, tx offset) of the FIRST anchor
    index: dict[bytes, tuple[int, int]] = field(default_factory=dict)

    @property
    def tip_hash(self) -> bytes:
        return self.blocks[-1].header_hash() if self.blocks else GENESIS_PREV

    def tx_at(self, height: int, offset: int) -> Transaction:
        return self.blocks[height - 1].txs[offset]


def append_block(ledger: Ledger, txs: list[Transaction], timestamp: int) -> Block:
    """Seal verified transactions into the next block of the chain."""
    if not txs:
        raise UnverifiedTransaction("cannot append an empty block")
    for tx in txs:
        if not tx.certificate:
            raise UnverifiedTransaction(f"tx {tx.tx_id.hex()[:12]} lacks a certificate")
    ok, bad = verify_chain(ledger)
    if not ok:
        raise ChainCorrupt(f"ledger {ledger.scope} corrupt at height {bad}")

    block = Block(
        height=len(ledger.blocks) + 1,
        prev_hash=ledger.tip_hash,
        merkle_root=build_merkle([tx.tx_id for tx in txs]).root,
        timestamp=timestamp,
        txs=tuple(txs),
    )
    ledger.blocks.append(block)
    for off, tx in enumerate(block.txs):
        ledger.index.setdefault(tx.payload_hash, (block.height, off))
    return block


def append_committed(ledger: Ledger, block: Block) -> Block:
    """Append a block assembled elsewhere (consensus commit) after linkage checks."""
    if block.height != len(ledger.blocks) + 1 or block.prev_hash != ledger.tip_hash:
        raise ChainCorrupt(
            f"block height {block.height} does not extend {ledger.scope} "
            f"at height {len(ledger.blocks)}"
        )
    if block.merkle_root != build_merkle([tx.tx_id for tx in block.txs]).root:
        raise ChainCorrupt("block merkle root does not match its transactions")
    for tx in block.txs:
        if not tx.certificate:
            raise UnverifiedTransaction(f"tx {tx.tx_id.hex()[:12]} lacks a certificate")
    ledger.blocks.append(block)
    for off, tx in enumerate(block.txs):
        ledger.index.setdefault(tx.payload_hash, (block.height, off))
    return block


def verify_chain(ledger: Ledger) -> tuple[bool, int | None]:
    """Recompute the hash chain and per-block tx roots; (ok, first bad height)."""
    prev = GENESIS_PREV
    for i, block in enumerate(ledger.blocks):
        if block.height != i + 1 or block.prev_hash != prev:
            return False, i + 1
        if block.merkle_root != build_merkle([tx.tx_id for tx in block.txs]).root:
            return False, i + 1
        prev = block.header_hash()
    return True, None


# --- content-addressed latent side store --------------------------------------

class LatentStore:
    """Maps fingerprint -> canonical latent bytes; self-verifying on read."""

    def __init__(self):
        self._data: dict[bytes, bytes] = {}

    def put(self, latent: LatentVector) -> bytes:
        fp = hash_latent(latent)
        self._data[fp] = latent.canonical_bytes()
        return fp

    def get(self, fingerprint: bytes) -> LatentVector:
        raw = self._data.get(fingerprint)
        if raw is None:
            raise NotFound(f"no latent stored for {fingerprint.hex()[:12]}")
        if hashlib.sha256(raw).digest() != fingerprint:
            raise ChainCorrupt(f"latent store entry {fingerprint.hex()[:12]} tampered")
        return LatentVector.from_canonical(raw)

    def __contains__(self, fingerprint: bytes) -> bool:
        return fingerprint in self._data

    def __len__(self) -> int:
        return len(self._data)

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for fp, raw in self._data.items():
            (d / fp.hex()).write_bytes(raw)

    @classmethod
    def load(cls, directory: str | Path) -> "LatentStore":
        store = cls()
        d = Path(directory)
        if d.is_dir():
            for p in sorted(d.iterdir()):
                try:
                    fp = bytes.fromhex(p.name)
                except ValueError:
                    raise LedgerFormatError(f"foreign file in latent store: {p.name}")
                store._data[fp] = p.read_bytes()
        return store


@dataclass(frozen=True)
class Provenance:
    scope: str
    height: int
    tx_offset: int
    payload_hash: bytes


def retrieve_latent(
    ledger: Ledger,
    store: LatentStore,
    query_hash: bytes,
    fallback: str = "exact_only",
    query_latent: LatentVector | None = None,
) -> tuple[LatentVector, Provenance]:
    """Look up an anchored latent by fingerprint.

    fallback="nearest": on an exact miss, linear-scan every anchored latent
    in this scope and return the one with maximal cosine to query_latent;
    ties go to the lower block height (then earlier tx offset).
    """
    if query_hash in ledger.index:
        height, off = ledger.index[query_hash]
        return store.get(query_hash), Provenance(ledger.scope, height, off, query_hash)

    if fallback == "exact_only":
        raise NotFound(f"no anchor for {query_hash.hex()[:12]} in {ledger.scope}")
    if fallback != "nearest":
        raise ValueError(f"unknown fallback {fallback!r}")
    if query_latent is None:
        raise ValueError("nearest fallback requires the query latent")

    best: tuple[float, int, int, bytes] | None = None
    for block in ledger.blocks:
        for off, tx in enumerate(block.txs):
            if tx.kind != TxKind.SHARD_FINGERPRINT or tx.payload_hash not in store:
                continue
            sim = cosine(query_latent, store.get(tx.payload_hash))
            # strict > keeps the earliest (lowest height/offset) on ties
            if best is None or sim > best[0]:
                best = (sim, block.height, off, tx.payload_hash)
    if best is None:
        raise NotFound(f"scope {ledger.scope} holds no anchored latents")
    _, height, off, payload = best
    return store.get(payload), Provenance(ledger.scope, height, off, payload)


@dataclass
class LedgerSet:
    """All chains of one deployment: per-cell ledgers, the GLOBAL chain, latents."""

    cells: dict[tuple[int, int], Ledger] = field(default_factory=dict)
    global_ledger: Ledger = field(default_factory=lambda: Ledger(scope=GLOBAL_SCOPE))
    store: LatentStore = field(default_factory=LatentStore)

    def cell(self, row: int, col: int) -> Ledger:
        key = (row, col)
        if key not in self.cells:
            self.cells[key] = Ledger(scope=cell_scope(row, col))
        return self.cells[key]

    def all_ledgers(self) -> list[Ledger]:
        ordered = [self.cells[k] for k in sorted(self.cells)]
        return ordered + [self.global_ledger]

    def anchored_leaf_hashes(self, image_id_hex: str, rows: int, cols: int) -> list[bytes] | None:
        """Row-major per-cell fingerprints for one image; None if any cell lacks one."""
        leaves = []
        for r in range(rows):
            for c in range(cols):
                led = self.cells.get((r, c))
                found = None
                if led is not None:
                    for block in led.blocks:
                        for tx in block.txs:
                            if (
                                tx.kind == TxKind.SHARD_FINGERPRINT
                                and tx.metadata.get("image_id") == image_id_hex
                            ):
                                found = tx.payload_hash
                                break
                        if found:
                            break
                if found is None:
                    return None
                leaves.append(found)
        return leaves

    def root_anchor(self, image_id_hex: str) -> bytes | None:
        for block in self.global_ledger.blocks:
            for tx in block.txs:
                if (
                    tx.kind == TxKind.ROOT_ANCHOR
                    and tx.metadata.get("image_id") == image_id_hex
                ):
                    return tx.payload_hash
        return None


# --- storage accounting ---------------------------------------------------------

def ledger_bytes(ledger: Ledger) -> int:
    return len(serialize_ledger(ledger))


def storage_metrics(ledgers_per_node: dict[int, list[Ledger]]) -> dict:
    """Aggregate on-disk footprint across node-local chains."""
    bytes_per_node = {
        n: sum(ledger_bytes(l) for l in chains)
        for n, chains in ledgers_per_node.items()
    }
    blocks_per_node = {
        n: sum(len(l.blocks) for l in chains) for n, chains in ledgers_per_node.items()
    }
    copies = 0
    distinct: set[bytes] = set()
    for chains in ledgers_per_node.values():
        for l in chains:
            for b in l.blocks:
                for tx in b.txs:
                    if tx.kind == TxKind.SHARD_FINGERPRINT:
                        copies += 1
                        distinct.add(tx.payload_hash)
    return {
        "bytes_per_node": bytes_per_node,
        "blocks_per_node": blocks_per_node,
        "replication_factor": (copies / len(distinct)) if distinct else 0.0,
    }


# --- PSLG serialization ---------------------------------------------------------

def serialize_ledger(ledger: Ledger) -> bytes:
    scope_raw = ledger.scope.encode("utf-8")
    out = [PSLG_MAGIC, struct.pack("<BH", PSLG_VERSION, len(scope_raw)), scope_raw]
    for block in ledger.blocks:
        out.append(block.header_bytes())
        for tx in block.txs:
            meta = tx.meta_bytes
            out.append(struct.pack("<B", int(tx.kind)) + tx.payload_hash)
            out.append(struct.pack("<H", len(meta)) + meta)
            out.append(struct.pack("<I", len(tx.certificate)) + tx.certificate)
    return b"".join(out)


def write_ledger(ledger: Ledger, path: str | Path) -> None:
    Path(path).write_bytes(serialize_ledger(ledger))


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise LedgerFormatError("truncated ledger file")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def done(self) -> bool:
        return self.pos == len(self.raw)


def deserialize_ledger(raw: bytes) -> Ledger:
    r = _Reader(raw)
    if r.take(4) != PSLG_MAGIC:
        raise LedgerFormatError("bad PSLG magic")
    version, scope_len = r.unpack("<BH")
    if version != PSLG_VERSION:
        raise LedgerFormatError(f"unsupported PSLG version {version}")
    try:
        scope = r.take(scope_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise LedgerFormatError(f"undecodable scope: {exc}") from exc

    ledger = Ledger(scope=scope)
    while not r.done:
        (height,) = r.unpack("<Q")
        prev_hash = r.take(32)
        merkle_root = r.take(32)
        timestamp, tx_count = r.unpack("<QI")
        txs = []
        for _ in range(tx_count):
            (kind_code,) = r.unpack("<B")
            try:
                kind = TxKind(kind_code)
            except ValueError:
                raise LedgerFormatError(f"unknown tx kind {kind_code}")
            payload_hash = r.take(32)
            (meta_len,) = r.unpack("<H")
            metadata = parse_metadata(r.take(meta_len))
            (cert_len,) = r.unpack("<I")
            cert = r.take(cert_len)
            try:
                # re-canonicalization rejects metadata a corrupted byte let
                # through parse_metadata (e.g. '=' inside a value)
                tx = Transaction(kind=kind, payload_hash=payload_hash,
                                 metadata=metadata, certificate=cert)
            except (InvalidMetadata, MetadataTooLarge, ValueError) as exc:
                raise LedgerFormatError(f"invalid transaction content: {exc}") from exc
            txs.append(tx)
        block = Block(height=height, prev_hash=prev_hash, merkle_root=merkle_root,
                      timestamp=timestamp, txs=tuple(txs))
        ledger.blocks.append(block)
        for off, tx in enumerate(block.txs):
            ledger.index.setdefault(tx.payload_hash, (block.height, off))
    return ledger


def read_ledger(path: str | Path) -> Ledger:
    return deserialize_ledger(Path(path).read_bytes())
