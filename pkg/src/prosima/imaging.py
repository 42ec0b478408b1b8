"""Grayscale rasters, deterministic grid fragmentation, corruption, and quality metrics.

Intensities live in [0, 1] as float64 arrays. The canonical on-the-wire form
(PIMG1, also used for content hashing) quantizes to 32-bit little-endian
floats, so an image's identity is defined at float32 precision.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    ImageTooSmall,
    InconsistentShard,
    LedgerFormatError,
    MissingShard,
)

PIMG_MAGIC = b"PIMG1"
PSNR_CAP_DB = 100.0
SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def _as_raster(pixels, height: int, width: int) -> np.ndarray:
    arr = np.ascontiguousarray(pixels, dtype=np.float64).reshape(height, width)
    if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
        raise ValueError("pixel intensities must lie in [0, 1]")
    return arr


@dataclass(frozen=True)
class Image:
    """A grayscale raster with a content-derived identity."""

    width: int
    height: int
    pixels: np.ndarray
    image_id: bytes = field(init=False)

    def __post_init__(self):
        arr = _as_raster(self.pixels, self.height, self.width)
        object.__setattr__(self, "pixels", arr)
        object.__setattr__(self, "image_id", hashlib.sha256(self.canonical_bytes()).digest())

    def canonical_bytes(self) -> bytes:
        """PIMG1 serialization; the SHA-256 of these bytes is the image_id."""
        return (
            PIMG_MAGIC
            + struct.pack("<II", self.width, self.height)
            + self.pixels.astype("<f4").tobytes()
        )

    def raster_equal(self, other: "Image") -> bool:
        return (
            self.width == other.width
            and self.height == other.height
            and np.array_equal(self.pixels, other.pixels)
        )


@dataclass(frozen=True)
class ShardGrid:
    rows: int
    cols: int

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid dimensions must be >= 1")

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def cells(self):
        for r in range(self.rows):
            for c in range(self.cols):
                yield r, c


@dataclass(frozen=True)
class Shard:
    """One rectangular fragment of an image, addressed by (row, col)."""

    image_id: bytes
    row: int
    col: int
    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pixels", _as_raster(self.pixels, self.height, self.width))

    @property
    def key(self) -> bytes:
        """Deterministic shard identifier: SHA-256(image_id || row || col)."""
        return shard_key(self.image_id, self.row, self.col)


def shard_key(image_id: bytes, row: int, col: int) -> bytes:
    return hashlib.sha256(image_id + struct.pack("<II", row, col)).digest()


def fragment(image: Image, grid: ShardGrid) -> list[Shard]:
    """Split an image into rows*cols shards in row-major grid order.

    Grid dimensions must divide the image dimensions exactly; no padding.
    """
    if image.height % grid.rows or image.width % grid.cols:
        raise DimensionMismatch(
            f"grid {grid.rows}x{grid.cols} does not divide image "
            f"{image.height}x{image.width}"
        )
    sh = image.height // grid.rows
    sw = image.width // grid.cols
    shards = []
    for r, c in grid.cells():
        block = image.pixels[r * sh : (r + 1) * sh, c * sw : (c + 1) * sw].copy()
        shards.append(
            Shard(image_id=image.image_id, row=r, col=c, width=sw, height=sh, pixels=block)
        )
    return shards


def reaggregate(shards: list[Shard], grid: ShardGrid) -> Image:
    """Inverse of fragment: reassemble exactly one shard per grid cell."""
    by_cell: dict[tuple[int, int], Shard] = {}
    for s in shards:
        cell = (s.row, s.col)
        if not (0 <= s.row < grid.rows and 0 <= s.col < grid.cols):
            raise InconsistentShard(f"shard cell {cell} outside grid {grid.rows}x{grid.cols}")
        if cell in by_cell:
            raise InconsistentShard(f"duplicate shard for cell {cell}")
        by_cell[cell] = s

    for r, c in grid.cells():
        if (r, c) not in by_cell:
            raise MissingShard(f"missing shard for cell ({r}, {c})")

    first = by_cell[(0, 0)]
    for s in by_cell.values():
        if (s.width, s.height) != (first.width, first.height):
            raise InconsistentShard(
                f"shard ({s.row}, {s.col}) dims {s.height}x{s.width} conflict"
            )
        if s.image_id != first.image_id:
            raise InconsistentShard(f"shard ({s.row}, {s.col}) has foreign image_id")

    raster = np.empty((grid.rows * first.height, grid.cols * first.width), dtype=np.float64)
    for (r, c), s in by_cell.items():
        raster[
            r * first.height : (r + 1) * first.height,
            c * first.width : (c + 1) * first.width,
        ] = s.pixels
    return Image(width=raster.shape[1], height=raster.shape[0], pixels=raster)


def corrupt_gaussian(image: Image, sigma: float, seed: int) -> Image:
    """Add i.i.d. zero-mean Gaussian noise (std = sigma), clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, sigma, size=image.pixels.shape)
    noisy = np.clip(image.pixels + noise, 0.0, 1.0)
    return Image(width=image.width, height=image.height, pixels=noisy)


def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB (MAX = 1.0), capped at 100 dB."""
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch("psnr requires equal dimensions")
    mse = float(np.mean((a.pixels - b.pixels) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


def ssim(a: Image, b: Image) -> float:
    """Mean local SSIM over non-overlapping 8x8 windows, uniform weights.

    Trailing rows/cols that do not fill a complete window are ignored.
    Variances are population (divide by n) moments.
    """
    if (a.width, a.height) != (b.width, b.height):
        raise DimensionMismatch("ssim requires equal dimensions")
    if a.width < SSIM_WINDOW or a.height < SSIM_WINDOW:
        raise ImageTooSmall(f"ssim requires dims >= {SSIM_WINDOW}")

    nh = a.height // SSIM_WINDOW
    nw = a.width // SSIM_WINDOW
    h8, w8 = nh * SSIM_WINDOW, nw * SSIM_WINDOW

    def windows(img: Image) -> np.ndarray:
        x = img.pixels[:h8, :w8]
        return x.reshape(nh, SSIM_WINDOW, nw, SSIM_WINDOW).transpose(0, 2, 1, 3).reshape(
            nh * nw, -1
        )

    wa, wb = windows(a), windows(b)
    mu_a = wa.mean(axis=1)
    mu_b = wb.mean(axis=1)
    var_a = wa.var(axis=1)
    var_b = wb.var(axis=1)
    cov = ((wa - mu_a[:, None]) * (wb - mu_b[:, None])).mean(axis=1)

    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


# --- ingestion formats -------------------------------------------------------

def write_pgm(image: Image, path: str | Path) -> None:
    """Write binary PGM (P5, maxval 255); intensities quantize to 8 bits."""
    data = np.rint(image.pixels * 255.0).astype(np.uint8)
    header = f"P5\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(source: str | Path | bytes) -> Image:
    """Read binary PGM (P5, 8-bit); pixel p maps to intensity p/255."""
    raw = source if isinstance(source, bytes) else Path(source).read_bytes()
    if raw[:2] != b"P5":
        raise LedgerFormatError("not a P5 PGM")
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LedgerFormatError("truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise LedgerFormatError("malformed PGM header") from exc
    if maxval != 255:
        raise LedgerFormatError(f"unsupported PGM maxval {maxval}")
    body = raw[pos:]
    if len(body) != width * height:
        raise LedgerFormatError("PGM payload size mismatch")
    pixels = np.frombuffer(body, dtype=np.uint8).astype(np.float64) / 255.0
    return Image(width=width, height=height, pixels=pixels.reshape(height, width))


def write_pimg(image: Image, path: str | Path) -> None:
    Path(path).write_bytes(image.canonical_bytes())


def read_pimg(source: str | Path | bytes) -> Image:
    raw = source if isinstance(source, bytes) else Path(source).read_bytes()
    if raw[: len(PIMG_MAGIC)] != PIMG_MAGIC:
        raise LedgerFormatError("bad PIMG1 magic")
    head = len(PIMG_MAGIC)
    if len(raw) < head + 8:
        raise LedgerFormatError("truncated PIMG1 header")
    width, height = struct.unpack_from("<II", raw, head)
    body = raw[head + 8 :]
    if len(body) != width * height * 4:
        raise LedgerFormatError("PIMG1 payload size mismatch")
    pixels = np.frombuffer(body, dtype="<f4").astype(np.float64)
    if pixels.size and not (
        np.all(np.isfinite(pixels)) and pixels.min() >= 0.0 and pixels.max() <= 1.0
    ):
        raise LedgerFormatError("PIMG1 intensities outside [0, 1]")
    return Image(width=width, height=height, pixels=pixels.reshape(height, width))
