"""End-to-end anchoring pipeline, deployment persistence, and verification.

A Deployment bundles the overlay graph, consensus parameters, encoder
settings, all ledgers, and the anchored source rasters. On disk it is a
directory:

    manifest.json     resolved parameters, chain tip hashes, image ids
    topology.txt      overlay edge list
    ledgers/*.pslg    one chain per scope
    latents/<hex>     content-addressed canonical latents
    images/<hex>.pimg anchored source rasters, named by image id

Verification re-derives everything: chain hashes, certificate MACs, store
content addresses, per-image fingerprints and Merkle roots recomputed from
the rasters, and chain tips against the manifest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .consensus import (
    RoundTrace,
    SimConfig,
    run_consensus_round,
    validate_certificate,
    weight_threshold,
)
from .errors import ConfigError, ConsensusAbort, LedgerFormatError
from .fingerprint import build_merkle, encode_shard, hash_latent
from .imaging import Image, ShardGrid, fragment, read_pimg, write_pimg
from .ledger import (
    GLOBAL_SCOPE,
    LatentStore,
    Ledger,
    LedgerSet,
    TxKind,
    append_committed,
    create_transaction,
    deserialize_ledger,
    read_ledger,
    verify_chain,
    write_ledger,
)
from .reconstruction import LossWeights, ReconstructionResult, reconstruct_image
from .topology import OverlayGraph, place_shards, read_topology, write_topology

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class Deployment:
    graph: OverlayGraph
    sim: SimConfig
    grid: ShardGrid
    dim: int = 64
    kind: str = "full"
    alpha: float = 0.6
    policy: str = "gft_locality"
    policy_d: int | None = None
    leader_fraction: float = 0.1
    fingerprint_on: bool = True
    ledgers: LedgerSet = field(default_factory=LedgerSet)
    images: dict[bytes, Image] = field(default_factory=dict)
    clock: int = 0
    round_counter: int = 0

    def tick(self) -> int:
        self.clock += 1
        return self.clock


@dataclass(frozen=True)
class AnchorReport:
    image_id: str
    root: str
    cell_heights: tuple[tuple[int, int, int], ...]  # (row, col, height)
    traces: tuple[RoundTrace, ...]


def new_deployment(
    graph: OverlayGraph,
    sim: SimConfig,
    grid: ShardGrid,
    **kw,
) -> Deployment:
    return Deployment(graph=graph, sim=sim, grid=grid, **kw)


def anchor_image(dep: Deployment, image: Image) -> AnchorReport:
    """Anchor one image: a consensus round per cell plus a root round.

    All-or-nothing per image — if any round fails quorum, no block of this
    image is appended and ConsensusAbort is raised.
    """
    shards = fragment(image, dep.grid)
    latents = [encode_shard(s, dim=dep.dim, kind=dep.kind) for s in shards]
    fingerprints = [hash_latent(z) for z in latents]
    keys = [s.key for s in shards]
    placement = place_shards(
        dep.graph,
        keys,
        dep.policy,
        d=dep.policy_d,
        seed=dep.sim.seed,
        leader_fraction=dep.leader_fraction,
    )
    image_hex = image.image_id.hex()

    staged: list[tuple[Ledger, object]] = []
    traces: list[RoundTrace] = []
    for shard, fp in zip(shards, fingerprints):
        tx = create_transaction(
            TxKind.SHARD_FINGERPRINT,
            fp,
            {"image_id": image_hex, "row": str(shard.row), "col": str(shard.col)},
        )
        led = dep.ledgers.cell(shard.row, shard.col)
        block, trace = run_consensus_round(
            dep.sim,
            dep.graph,
            placement,
            [tx],
            height=len(led.blocks) + 1,
            prev_hash=led.tip_hash,
            timestamp=dep.tick(),
            round_index=dep.round_counter,
        )
        dep.round_counter += 1
        traces.append(trace)
        if block is None:
            raise ConsensusAbort(
                f"cell ({shard.row}, {shard.col}) round failed quorum; image not anchored"
            )
        staged.append((led, block))

    root = build_merkle(fingerprints).root
    root_tx = create_transaction(TxKind.ROOT_ANCHOR, root, {"image_id": image_hex})
    gled = dep.ledgers.global_ledger
    block, trace = run_consensus_round(
        dep.sim,
        dep.graph,
        placement,
        [root_tx],
        height=len(gled.blocks) + 1,
        prev_hash=gled.tip_hash,
        timestamp=dep.tick(),
        round_index=dep.round_counter,
    )
    dep.round_counter += 1
    traces.append(trace)
    if block is None:
        raise ConsensusAbort("root anchoring round failed quorum; image not anchored")
    staged.append((gled, block))

    # every round committed: append atomically and persist latents
    for led, blk in staged:
        append_committed(led, blk)
    for z in latents:
        dep.ledgers.store.put(z)
    dep.images[image.image_id] = image

    heights = tuple(
        (s.row, s.col, blk.height) for (s, (_, blk)) in zip(shards, staged[:-1])
    )
    return AnchorReport(
        image_id=image_hex,
        root=root.hex(),
        cell_heights=heights,
        traces=tuple(traces),
    )


def reconstruct_with(
    dep: Deployment,
    corrupted: Image,
    *,
    original: Image | None = None,
    fallback: str = "nearest",
    weights: LossWeights = LossWeights(),
    alpha: float | None = None,
) -> ReconstructionResult:
    return reconstruct_image(
        corrupted,
        dep.grid,
        dep.ledgers,
        dim=dep.dim,
        kind=dep.kind,
        alpha=dep.alpha if alpha is None else alpha,
        fallback=fallback,
        original=original,
        weights=weights,
    )


# --- persistence -----------------------------------------------------------------

def _scope_filename(scope: str) -> str:
    return f"{scope}.pslg"


def save_deployment(dep: Deployment, directory: str | Path) -> Path:
    root = Path(directory)
    (root / "ledgers").mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)

    for led in dep.ledgers.all_ledgers():
        write_ledger(led, root / "ledgers" / _scope_filename(led.scope))
    dep.ledgers.store.save(root / "latents")
    for image_id, img in dep.images.items():
        write_pimg(img, root / "images" / f"{image_id.hex()}.pimg")
    write_topology(dep.graph, root / "topology.txt")

    manifest = {
        "version": MANIFEST_VERSION,
        "grid": [dep.grid.rows, dep.grid.cols],
        "dim": dep.dim,
        "kind": dep.kind,
        "alpha": dep.alpha,
        "policy": dep.policy,
        "policy_d": dep.policy_d,
        "leader_fraction": dep.leader_fraction,
        "fingerprint_on": dep.fingerprint_on,
        "P": dep.sim.P,
        "f": dep.sim.f,
        "sim_seed": dep.sim.seed,
        "base_delay_ms": dep.sim.base_delay_ms,
        "jitter_ms": dep.sim.jitter_ms,
        "t_verify_ms": dep.sim.t_verify_ms,
        "weight_threshold": weight_threshold(dep.sim, dep.graph),
        "clock": dep.clock,
        "round_counter": dep.round_counter,
        "tips": {led.scope: led.tip_hash.hex() for led in dep.ledgers.all_ledgers()},
        "image_ids": sorted(i.hex() for i in dep.images),
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_manifest(directory: str | Path) -> dict:
    path = Path(directory) / MANIFEST_NAME
    if not path.is_file():
        raise ConfigError(f"no {MANIFEST_NAME} in {directory}")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed manifest: {exc}") from exc
    if manifest.get("version") != MANIFEST_VERSION:
        raise ConfigError(f"unsupported manifest version {manifest.get('version')}")
    return manifest


def load_deployment(directory: str | Path) -> Deployment:
    root = Path(directory)
    manifest = load_manifest(root)
    graph = read_topology(root / "topology.txt")
    sim = SimConfig(
        P=manifest["P"],
        f=manifest["f"],
        seed=manifest["sim_seed"],
        base_delay_ms=manifest["base_delay_ms"],
        jitter_ms=manifest["jitter_ms"],
        t_verify_ms=manifest["t_verify_ms"],
    )
    grid = ShardGrid(rows=manifest["grid"][0], cols=manifest["grid"][1])

    ledgers = LedgerSet()
    ledger_dir = root / "ledgers"
    if ledger_dir.is_dir():
        for p in sorted(ledger_dir.glob("*.pslg")):
            led = read_ledger(p)
            if led.scope == GLOBAL_SCOPE:
                ledgers.global_ledger = led
            else:
                parts = led.scope.split("-")
                ledgers.cells[(int(parts[1]), int(parts[2]))] = led
    ledgers.store = LatentStore.load(root / "latents")

    images: dict[bytes, Image] = {}
    image_dir = root / "images"
    if image_dir.is_dir():
        for p in sorted(image_dir.glob("*.pimg")):
            img = read_pimg(p)
            images[img.image_id] = img

    return Deployment(
        graph=graph,
        sim=sim,
        grid=grid,
        dim=manifest["dim"],
        kind=manifest["kind"],
        alpha=manifest["alpha"],
        policy=manifest["policy"],
        policy_d=manifest["policy_d"],
        leader_fraction=manifest["leader_fraction"],
        fingerprint_on=manifest["fingerprint_on"],
        ledgers=ledgers,
        images=images,
        clock=manifest["clock"],
        round_counter=manifest["round_counter"],
    )


# --- verification ------------------------------------------------------------------

def check_ledger_bytes(
    raw: bytes,
    expected_scope: str,
    expected_tip_hex: str | None,
    sim: SimConfig,
    graph: OverlayGraph,
) -> tuple[bool, str]:
    """Scoped integrity check of one serialized chain."""
    try:
        led = deserialize_ledger(raw)
    except (LedgerFormatError, ValueError) as exc:
        return False, f"parse: {exc}"
    if led.scope != expected_scope:
        return False, f"scope mismatch: {led.scope!r}"
    ok, bad = verify_chain(led)
    if not ok:
        return False, f"chain broken at height {bad}"
    if expected_tip_hex is not None and led.tip_hash.hex() != expected_tip_hex:
        return False, "tip hash does not match manifest"
    for block in led.blocks:
        for off, tx in enumerate(block.txs):
            if not validate_certificate(tx.certificate, tx.tx_id, sim, graph):
                return False, f"bad certificate at height {block.height} tx {off}"
    return True, "ok"


def check_latent_entry(fingerprint: bytes, raw: bytes) -> tuple[bool, str]:
    if hashlib.sha256(raw).digest() != fingerprint:
        return False, "content hash mismatch"
    try:
        from .fingerprint import LatentVector

        LatentVector.from_canonical(raw)
    except ValueError as exc:
        return False, f"parse: {exc}"
    return True, "ok"


def check_image_bytes(
    raw: bytes,
    expected_id_hex: str,
    ledgers: LedgerSet,
    grid: ShardGrid,
    dim: int,
    kind: str,
) -> tuple[bool, str]:
    """Re-derive an anchored image's fingerprints and root from its raster."""
    try:
        img = read_pimg(raw)
    except LedgerFormatError as exc:
        return False, f"parse: {exc}"
    if img.image_id.hex() != expected_id_hex:
        return False, "image id does not match raster content"
    fps = [
        hash_latent(encode_shard(s, dim=dim, kind=kind)) for s in fragment(img, grid)
    ]
    anchored = ledgers.anchored_leaf_hashes(expected_id_hex, grid.rows, grid.cols)
    if anchored is None:
        return False, "missing anchored fingerprints"
    if anchored != fps:
        first = next(i for i, (a, b) in enumerate(zip(anchored, fps)) if a != b)
        return False, f"fingerprint mismatch at cell index {first}"
    root = ledgers.root_anchor(expected_id_hex)
    if root is None:
        return False, "missing root anchor"
    if build_merkle(fps).root != root:
        return False, "merkle root mismatch"
    return True, "ok"


def verify_deployment(directory: str | Path) -> dict:
    """Verify every artifact of a saved deployment; returns a full report."""
    root = Path(directory)
    manifest = load_manifest(root)
    if not manifest.get("fingerprint_on", True):
        return {
            "status": "unavailable",
            "ok": False,
            "detail": "fingerprinting disabled for this deployment; verification unavailable",
            "scopes": {},
            "checked": 0,
            "passed": 0,
            "percent": None,
        }

    graph = read_topology(root / "topology.txt")
    sim = SimConfig(
        P=manifest["P"],
        f=manifest["f"],
        seed=manifest["sim_seed"],
        weight_threshold=manifest["weight_threshold"],
    )
    grid = ShardGrid(rows=manifest["grid"][0], cols=manifest["grid"][1])
    tips = manifest.get("tips", {})

    results: dict[str, tuple[bool, str]] = {}

    ledger_dir = root / "ledgers"
    ledger_files = sorted(ledger_dir.glob("*.pslg")) if ledger_dir.is_dir() else []
    if not ledger_files:
        raise ConfigError(f"no ledgers found under {root}")
    seen_scopes = set()
    for p in ledger_files:
        scope = p.stem
        seen_scopes.add(scope)
        results[f"ledger:{scope}"] = check_ledger_bytes(
            p.read_bytes(), scope, tips.get(scope), sim, graph
        )
    for scope in tips:
        if scope not in seen_scopes:
            results[f"ledger:{scope}"] = (False, "chain file missing")

    latent_dir = root / "latents"
    if latent_dir.is_dir():
        for p in sorted(latent_dir.iterdir()):
            try:
                fp = bytes.fromhex(p.name)
            except ValueError:
                results[f"latent:{p.name}"] = (False, "foreign file in store")
                continue
            results[f"latent:{p.name[:12]}"] = check_latent_entry(fp, p.read_bytes())

    ledgers = LedgerSet()
    for p in ledger_files:
        try:
            led = read_ledger(p)
        except (LedgerFormatError, ValueError):
            continue  # already reported above
        if led.scope == GLOBAL_SCOPE:
            ledgers.global_ledger = led
        elif led.scope.startswith("cell-"):
            parts = led.scope.split("-")
            ledgers.cells[(int(parts[1]), int(parts[2]))] = led
    image_dir = root / "images"
    if image_dir.is_dir():
        for p in sorted(image_dir.glob("*.pimg")):
            results[f"image:{p.stem[:12]}"] = check_image_bytes(
                p.read_bytes(), p.stem, ledgers, grid, manifest["dim"], manifest["kind"]
            )

    checked = len(results)
    passed = sum(1 for ok, _ in results.values() if ok)
    return {
        "status": "ok" if passed == checked else "failed",
        "ok": passed == checked,
        "scopes": {k: {"ok": ok, "detail": d} for k, (ok, d) in sorted(results.items())},
        "checked": checked,
        "passed": passed,
        "percent": 100.0 * passed / checked if checked else None,
    }
