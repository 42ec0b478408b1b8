"""Seeded synthetic image corpus: structured grayscale phantoms.

Every phantom is a smooth intensity ramp with a few elliptical lesions,
quantized to 8 bits so stored rasters round-trip PGM exactly and any
single-bit tamper moves intensities by at least 1/255.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import NotFound
from .imaging import Image, read_pgm


def make_phantom(seed: int, size: int = 64) -> Image:
    """One deterministic phantom: gradient background plus 2-4 ellipses."""
    rng = np.random.default_rng(seed)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64) / size

    theta = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.25, 0.45)
    img = 0.5 + amp * ((xs - 0.5) * np.cos(theta) + (ys - 0.5) * np.sin(theta))

    for _ in range(int(rng.integers(2, 5))):
        cx, cy = rng.uniform(0.2, 0.8, size=2)
        ax_, ay = rng.uniform(0.08, 0.3, size=2)
        phi = rng.uniform(0, np.pi)
        dx, dy = xs - cx, ys - cy
        u = dx * np.cos(phi) + dy * np.sin(phi)
        v = -dx * np.sin(phi) + dy * np.cos(phi)
        mask = (u / ax_) ** 2 + (v / ay) ** 2 <= 1.0
        img = np.where(mask, img + rng.uniform(0.15, 0.35) * rng.choice([-1.0, 1.0]), img)

    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0  # 8-bit grid
    return Image(width=size, height=size, pixels=img)


def make_corpus(count: int, seed: int = 0, size: int = 64) -> list[Image]:
    return [make_phantom(seed * 100_003 + i, size=size) for i in range(count)]


def load_pgm_dir(path: str | Path) -> list[tuple[str, Image]]:
    """All .pgm files in a directory, sorted by name."""
    d = Path(path)
    files = sorted(d.glob("*.pgm"))
    if not files:
        raise NotFound(f"no .pgm files in {d}")
    return [(p.stem, read_pgm(p)) for p in files]
