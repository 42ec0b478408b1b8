import random

import pytest

from prosima.consensus import SimConfig
from prosima.corpus import make_corpus, make_phantom
from prosima.errors import ConfigError, ConsensusAbort
from prosima.fingerprint import build_merkle, encode_shard, hash_latent
from prosima.imaging import ShardGrid, corrupt_gaussian, fragment
from prosima.ledger import GLOBAL_SCOPE, TxKind
from prosima.pipeline import (
    anchor_image,
    check_image_bytes,
    check_latent_entry,
    check_ledger_bytes,
    load_deployment,
    load_manifest,
    new_deployment,
    reconstruct_with,
    save_deployment,
    verify_deployment,
)
from prosima.topology import generate_scale_free


def make_dep(seed=7, P=4, f=1, faults=(), policy="gft_locality"):
    graph = generate_scale_free(20, m0=4, m=2, seed=11)
    sim = SimConfig(P=P, f=f, seed=seed, faults=tuple(faults))
    return new_deployment(graph, sim, ShardGrid(4, 4), policy=policy)


def test_anchor_appends_one_block_per_cell_plus_root():
    dep = make_dep()
    img = make_phantom(1)
    rep = anchor_image(dep, img)

    assert len(dep.ledgers.cells) == 16
    assert all(len(led.blocks) == 1 for led in dep.ledgers.cells.values())
    assert len(dep.ledgers.global_ledger.blocks) == 1
    assert len(rep.cell_heights) == 16
    assert len(rep.traces) == 17

    gtx = dep.ledgers.global_ledger.blocks[0].txs[0]
    assert gtx.kind == TxKind.ROOT_ANCHOR
    assert gtx.payload_hash.hex() == rep.root


def test_anchor_root_matches_recomputed_merkle():
    dep = make_dep()
    img = make_phantom(2)
    rep = anchor_image(dep, img)
    fps = [hash_latent(encode_shard(s)) for s in fragment(img, dep.grid)]
    assert build_merkle(fps).root.hex() == rep.root
    # and the ledgers agree with direct recomputation
    anchored = dep.ledgers.anchored_leaf_hashes(img.image_id.hex(), 4, 4)
    assert anchored == fps


def test_anchor_is_atomic_under_quorum_failure():
    dep = make_dep()
    anchor_image(dep, make_phantom(3))
    before = {led.scope: len(led.blocks) for led in dep.ledgers.all_ledgers()}
    images_before = set(dep.images)

    # two garbage signers out of four can never reach quorum
    dep.sim = SimConfig(P=4, f=1, seed=7, faults=((1, "garbage_sig"), (2, "garbage_sig")))
    with pytest.raises(ConsensusAbort):
        anchor_image(dep, make_phantom(4))

    after = {led.scope: len(led.blocks) for led in dep.ledgers.all_ledgers()}
    assert after == before
    assert set(dep.images) == images_before


def test_anchor_survives_single_nonleader_crash():
    # leader is the max-degree rank; crash someone else
    dep = make_dep(faults=((3, "crash"),))
    degs = [dep.graph.degrees[r] for r in range(4)]
    assert degs.index(max(degs)) != 3
    rep = anchor_image(dep, make_phantom(5))
    assert len(rep.cell_heights) == 16


def test_save_load_round_trip(tmp_path):
    dep = make_dep()
    for img in make_corpus(3, seed=9):
        anchor_image(dep, img)
    save_deployment(dep, tmp_path / "d")
    dep2 = load_deployment(tmp_path / "d")

    assert dep2.grid == dep.grid
    assert dep2.sim.P == dep.sim.P and dep2.sim.seed == dep.sim.seed
    assert sorted(dep2.images) == sorted(dep.images)
    for led, led2 in zip(dep.ledgers.all_ledgers(), dep2.ledgers.all_ledgers()):
        assert led.scope == led2.scope
        assert led.tip_hash == led2.tip_hash
    # same corrupted query against in-memory vs reloaded state: identical output
    target = min(dep.images)
    cor = corrupt_gaussian(dep2.images[target], 0.05, seed=2)
    res_mem = reconstruct_with(dep, cor)
    res_disk = reconstruct_with(dep2, cor)
    assert res_disk.image.raster_equal(res_mem.image)
    assert res_disk.provenance == res_mem.provenance


def test_verify_clean_deployment_is_all_green(tmp_path):
    dep = make_dep()
    for img in make_corpus(4, seed=21):
        anchor_image(dep, img)
    save_deployment(dep, tmp_path / "d")
    rep = verify_deployment(tmp_path / "d")
    assert rep["status"] == "ok"
    assert rep["passed"] == rep["checked"] > 0
    assert rep["percent"] == 100.0


def test_verify_reports_unavailable_when_fingerprinting_off(tmp_path):
    dep = make_dep()
    dep.fingerprint_on = False
    anchor_image(dep, make_phantom(6))
    save_deployment(dep, tmp_path / "d")
    rep = verify_deployment(tmp_path / "d")
    assert rep["status"] == "unavailable"
    assert rep["percent"] is None
    assert "unavailable" in rep["detail"]


def test_verify_missing_manifest_and_empty_dir(tmp_path):
    with pytest.raises(ConfigError):
        load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ConfigError):
        verify_deployment(tmp_path)


def test_verify_no_ledgers_is_config_error(tmp_path):
    dep = make_dep()
    anchor_image(dep, make_phantom(7))
    save_deployment(dep, tmp_path / "d")
    for p in (tmp_path / "d" / "ledgers").glob("*.pslg"):
        p.unlink()
    with pytest.raises(ConfigError):
        verify_deployment(tmp_path / "d")


def test_verify_detects_ledger_raster_and_store_flips(tmp_path):
    dep = make_dep()
    for img in make_corpus(3, seed=33):
        anchor_image(dep, img)
    root = save_deployment(dep, tmp_path / "d")

    rng = random.Random(404)
    for kind in ("ledgers", "latents", "images"):
        files = sorted((root / kind).iterdir())
        victim = rng.choice(files)
        raw = bytearray(victim.read_bytes())
        raw[rng.randrange(len(raw))] ^= 1 << rng.randrange(8)
        victim.write_bytes(bytes(raw))

    rep = verify_deployment(root)
    assert rep["status"] == "failed"
    assert rep["checked"] - rep["passed"] >= 3


def test_scoped_checkers_pass_on_clean_artifacts(tmp_path):
    dep = make_dep()
    anchor_image(dep, make_phantom(8))
    root = save_deployment(dep, tmp_path / "d")
    manifest = load_manifest(root)
    sim = SimConfig(P=4, f=1, seed=manifest["sim_seed"], weight_threshold=manifest["weight_threshold"])

    p = root / "ledgers" / "GLOBAL.pslg"
    ok, detail = check_ledger_bytes(p.read_bytes(), GLOBAL_SCOPE, manifest["tips"]["GLOBAL"], sim, dep.graph)
    assert ok, detail

    lat = sorted((root / "latents").iterdir())[0]
    ok, detail = check_latent_entry(bytes.fromhex(lat.name), lat.read_bytes())
    assert ok, detail

    img = sorted((root / "images").glob("*.pimg"))[0]
    ok, detail = check_image_bytes(img.read_bytes(), img.stem, dep.ledgers, dep.grid, 64, "full")
    assert ok, detail


def test_check_ledger_rejects_wrong_scope_and_stale_tip(tmp_path):
    dep = make_dep()
    anchor_image(dep, make_phantom(9))
    root = save_deployment(dep, tmp_path / "d")
    manifest = load_manifest(root)
    sim = SimConfig(P=4, f=1, seed=manifest["sim_seed"], weight_threshold=manifest["weight_threshold"])
    raw = (root / "ledgers" / "GLOBAL.pslg").read_bytes()

    ok, detail = check_ledger_bytes(raw, "cell-0-0", None, sim, dep.graph)
    assert not ok and "scope" in detail
    ok, detail = check_ledger_bytes(raw, GLOBAL_SCOPE, "00" * 32, sim, dep.graph)
    assert not ok and "tip" in detail


def test_clock_and_heights_advance_across_images():
    dep = make_dep()
    for img in make_corpus(3, seed=55):
        anchor_image(dep, img)
    assert len(dep.ledgers.global_ledger.blocks) == 3
    heights = [b.height for b in dep.ledgers.global_ledger.blocks]
    assert heights == [1, 2, 3]
    stamps = [b.timestamp for b in dep.ledgers.global_ledger.blocks]
    assert stamps == sorted(stamps) and len(set(stamps)) == 3
