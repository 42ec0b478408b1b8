"""PROSIMA: provenance-backed image fragmentation, anchoring, and recovery.

Core flow: fragment an image into shards, fingerprint each shard's latent,
anchor the fingerprints on per-cell append-only chains via simulated
degree-weighted consensus over a scale-free overlay, then reconstruct
corrupted images guided by the anchored latents — with every step
re-verifiable from the chains alone.
"""

from .config import ExperimentConfig, config_hash, load_config, save_config
from .consensus import SimConfig, run_consensus_round, simulate_batch
from .corpus import make_corpus, make_phantom
from .fingerprint import LatentVector, build_merkle, encode_shard, hash_latent
from .imaging import Image, Shard, ShardGrid, corrupt_gaussian, fragment, psnr, reaggregate, ssim
from .ledger import Ledger, LedgerSet, Transaction, TxKind
from .pipeline import (
    Deployment,
    anchor_image,
    load_deployment,
    new_deployment,
    reconstruct_with,
    save_deployment,
    verify_deployment,
)
from .reconstruction import LossWeights, compute_losses, reconstruct_image
from .topology import OverlayGraph, generate_scale_free, place_shards

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig",
    "config_hash",
    "load_config",
    "save_config",
    "SimConfig",
    "run_consensus_round",
    "simulate_batch",
    "make_corpus",
    "make_phantom",
    "LatentVector",
    "build_merkle",
    "encode_shard",
    "hash_latent",
    "Image",
    "Shard",
    "ShardGrid",
    "corrupt_gaussian",
    "fragment",
    "psnr",
    "reaggregate",
    "ssim",
    "Ledger",
    "LedgerSet",
    "Transaction",
    "TxKind",
    "Deployment",
    "anchor_image",
    "load_deployment",
    "new_deployment",
    "reconstruct_with",
    "save_deployment",
    "verify_deployment",
    "LossWeights",
    "compute_losses",
    "reconstruct_image",
    "OverlayGraph",
    "generate_scale_free",
    "place_shards",
    "__version__",
]
