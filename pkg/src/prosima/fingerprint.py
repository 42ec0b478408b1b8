"""Deterministic latent encoding of shards, fingerprints, and Merkle anchoring.

The encoder is a fixed block-statistics stand-in for a learned embedding:
similar shards map to nearby unit vectors, and the whole encode->hash
pipeline is bit-reproducible across platforms. Latents are serialized as
dim (u32 LE) || kind (u8) || dim float32 LE values; fingerprints are
SHA-256 over exactly those bytes.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch, EmptyLeaves, IndexOutOfRange, InvalidDim
from .imaging import Shard

KIND_FULL = "full"
KIND_SEMANTIC = "semantic"
_KIND_CODES = {KIND_FULL: 0, KIND_SEMANTIC: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

# below this pre-normalization L2 norm a latent collapses to the zero vector
_ZERO_NORM_EPS = 1e-12


@dataclass(frozen=True)
class LatentVector:
    """Unit-norm (or all-zero) embedding of one shard."""

    dim: int
    values: np.ndarray  # float32, shape (dim,)
    kind: str

    def __post_init__(self):
        if self.kind not in _KIND_CODES:
            raise ValueError(f"unknown latent kind {self.kind!r}")
        arr = np.ascontiguousarray(self.values, dtype=np.float32).reshape(self.dim)
        object.__setattr__(self, "values", arr)

    @property
    def is_zero(self) -> bool:
        return not np.any(self.values)

    def canonical_bytes(self) -> bytes:
        return (
            struct.pack("<IB", self.dim, _KIND_CODES[self.kind])
            + self.values.astype("<f4").tobytes()
        )

    @classmethod
    def from_canonical(cls, raw: bytes) -> "LatentVector":
        if len(raw) < 5:
            raise ValueError("truncated latent serialization")
        dim, code = struct.unpack_from("<IB", raw, 0)
        if code not in _KIND_NAMES:
            raise ValueError(f"unknown latent kind code {code}")
        body = raw[5:]
        if len(body) != dim * 4:
            raise ValueError("latent payload size mismatch")
        values = np.frombuffer(body, dtype="<f4").copy()
        return cls(dim=dim, values=values, kind=_KIND_NAMES[code])


def _block_means(pixels: np.ndarray, side: int) -> np.ndarray:
    h, w = pixels.shape
    if h % side or w % side:
        raise InvalidDim(f"{side}x{side} block grid does not divide shard {h}x{w}")
    bh, bw = h // side, w // side
    return pixels.reshape(side, bh, side, bw).mean(axis=(1, 3))


def encode_pixels(pixels: np.ndarray, dim: int = 64, kind: str = KIND_FULL) -> LatentVector:
    """Block-statistics encoder over a raw raster; see encode_shard."""
    side = math.isqrt(dim)
    if side * side != dim or dim < 1:
        raise InvalidDim(f"dim {dim} is not a positive perfect square")
    if kind not in _KIND_CODES:
        raise ValueError(f"unknown latent kind {kind!r}")

    # quantize to the wire precision first so latents are reproducible from
    # serialized rasters, not just from the in-memory float64 originals
    arr = np.asarray(pixels, dtype=np.float64).astype("<f4").astype(np.float64)
    if kind == KIND_SEMANTIC:
        arr = arr[::2, ::2]  # 2x decimation: coarser view, distinct statistics
    means = _block_means(arr, side).reshape(-1)
    centered = means - means.mean()
    norm = float(np.linalg.norm(centered))
    if norm < _ZERO_NORM_EPS:
        return LatentVector(dim=dim, values=np.zeros(dim, dtype=np.float32), kind=kind)
    return LatentVector(dim=dim, values=(centered / norm).astype(np.float32), kind=kind)


def encode_shard(shard: Shard, dim: int = 64, kind: str = KIND_FULL) -> LatentVector:
    """Encode a shard into a deterministic latent.

    Partitions the shard (after 2x decimation when kind="semantic") into a
    sqrt(dim) x sqrt(dim) grid, takes block means, subtracts the overall
    mean, and L2-normalizes. A zero-variance shard yields the all-zero
    vector.
    """
    return encode_pixels(shard.pixels, dim=dim, kind=kind)


def hash_latent(z: LatentVector) -> bytes:
    """Fingerprint: SHA-256 of the canonical latent serialization."""
    return hashlib.sha256(z.canonical_bytes()).digest()


def cosine(a: LatentVector, b: LatentVector) -> float:
    """Cosine similarity; 0.0 by convention when either vector is all-zero."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"latent dims differ: {a.dim} vs {b.dim}")
    if a.is_zero or b.is_zero:
        return 0.0
    av = a.values.astype(np.float64)
    bv = b.values.astype(np.float64)
    return float(np.dot(av, bv) / (np.linalg.norm(av) * np.linalg.norm(bv)))


# --- Merkle anchoring ---------------------------------------------------------

def _combine(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(left + right).digest()


class MerkleTree:
    """Binary hash tree over ordered 32-byte leaves, odd node duplicated."""

    def __init__(self, leaves: list[bytes]):
        if not leaves:
            raise EmptyLeaves("merkle tree needs at least one leaf")
        for leaf in leaves:
            if len(leaf) != 32:
                raise ValueError("leaves must be 32-byte digests")
        self.leaves = list(leaves)
        self.levels: list[list[bytes]] = [list(leaves)]
        while len(self.levels[-1]) > 1 or len(self.levels) == 1:
            cur = self.levels[-1]
            nxt = []
            for i in range(0, len(cur), 2):
                left = cur[i]
                right = cur[i + 1] if i + 1 < len(cur) else cur[i]
                nxt.append(_combine(left, right))
            self.levels.append(nxt)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    # (sibling digest, side): side "L" means the sibling sits left of the
    # running hash, "R" means right
    path: tuple[tuple[bytes, str], ...]


def build_merkle(leaves: list[bytes]) -> MerkleTree:
    return MerkleTree(leaves)


def prove_leaf(tree: MerkleTree, index: int) -> MerkleProof:
    if not (0 <= index < len(tree.leaves)):
        raise IndexOutOfRange(f"leaf index {index} out of range")
    path = []
    i = index
    for level in tree.levels[:-1]:
        sibling = i ^ 1
        if sibling >= len(level):
            sibling = i  # odd node pairs with itself
        side = "L" if sibling < i else "R"
        path.append((level[sibling], side))
        i //= 2
    return MerkleProof(leaf_index=index, path=tuple(path))


def verify_proof(root: bytes, leaf: bytes, proof: MerkleProof) -> bool:
    acc = leaf
    for digest, side in proof.path:
        if side == "L":
            acc = _combine(digest, acc)
        elif side == "R":
            acc = _combine(acc, digest)
        else:
            return False
    return acc == root
