"""Procedural photo-like images for desk-scale runs and tests."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .image_io import DatasetManifest, build_manifest, save_png


def synthetic_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth colour gradient, a few soft-edged blobs and stripes, light grain."""
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    c0, c1, c2 = rng.uniform(0, 255, (3, 3))
    angle = rng.uniform(0, 2 * np.pi)
    t = np.clip(0.5 + (np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)), 0, 1)[..., None]
    img = c0 * (1 - t) ** 2 + 2 * c1 * t * (1 - t) + c2 * t ** 2
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.08, 0.35, 2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        alpha = (0.5 - 0.5 * np.tanh((d - 1) * 3))[..., None]
        img = img * (1 - alpha) + rng.uniform(0, 255, 3) * alpha
    if rng.random() < 0.5:
        freq = rng.uniform(3, 9)
        phase = rng.uniform(0, 2 * np.pi)
        img += (18 * np.sin(2 * np.pi * freq * xx + phase))[..., None]
    img += rng.normal(0, 4, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_fixture(directory, n_images: int = 16, size: int = 64, seed: int = 2019,
                  manifest_size: int = 32) -> DatasetManifest:
    """Write ``n_images`` PNGs plus ``manifest.json`` pairing disjoint halves."""
    directory = Path(directory)
    rng = np.random.default_rng(seed)
    names = []
    for i in range(n_images):
        name = f"img_{i:02d}.png"
        save_png(synthetic_image(rng, size), directory / name)
        names.append(name)
    manifest = build_manifest(names, seed=seed, split="train", size=manifest_size, disjoint=True,
                              root=directory)
    manifest.save(directory / "manifest.json")
    return manifest
