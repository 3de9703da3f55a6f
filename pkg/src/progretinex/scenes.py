"""Procedural well-exposed RGB scenes used as a self-contained source corpus.

Each scene mixes a sky/ground gradient, smooth low-frequency shading, flat and
textured objects and a few specular highlights, then is exposure-normalized so
its brightest percentile sits near full scale.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .tensor import bilinear_resize


def _smooth_field(rng, h, w, cells):
    coarse = rng.random((1, 1, cells, cells)).astype(np.float32)
    return bilinear_resize(coarse, (h, w))[0, 0].astype(np.float64)


def _color(rng, bright=False):
    c = rng.random(3)
    if bright:
        c = 0.75 + 0.25 * c
    return c


def make_scene(rng: np.random.Generator, size=(192, 256)) -> np.ndarray:
    """One ``(3, h, w)`` float scene in ``[0, 1]``."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / np.array([h, w])[:, None, None]
    horizon = rng.uniform(0.3, 0.7)
    sky_top, sky_bottom = _color(rng, bright=True), _color(rng)
    ground = _color(rng) * rng.uniform(0.4, 0.9)
    frac = np.clip(yy / horizon, 0, 1)
    img = np.where(
        yy < horizon,
        sky_top[:, None, None] * (1 - frac) + sky_bottom[:, None, None] * frac,
        ground[:, None, None] * (0.6 + 0.4 * _smooth_field(rng, h, w, 6)),
    )
    for _ in range(rng.integers(30, 60)):
        color = _color(rng, bright=rng.random() < 0.3)
        cy, cx = rng.random(2)
        ry, rx = rng.uniform(0.02, 0.15, 2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        else:
            mask = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
        shade = 0.7 + 0.3 * _smooth_field(rng, h, w, int(rng.integers(2, 12)))
        if rng.random() < 0.4:
            stripes = 0.5 + 0.5 * np.sin(2 * np.pi * (xx * rng.uniform(8, 40) + yy * rng.uniform(-20, 20)))
            shade = shade * (0.75 + 0.25 * stripes)
        img = np.where(mask, color[:, None, None] * shade, img)
    for _ in range(rng.integers(40, 80)):
        cy, cx = rng.random(2)
        r = rng.uniform(0.003, 0.012)
        glow = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2)))
        img = img + glow * rng.uniform(0.5, 1.0)
    img = img * (0.9 + 0.2 * _smooth_field(rng, h, w, 4))
    img = img + rng.normal(0, 0.01, img.shape)
    img = img / max(np.percentile(img, 99.5), 1e-6)
    return np.clip(img, 0.0, 1.0)


def write_corpus(out_dir, count: int = 24, seed: int = 0, size=(192, 256)) -> list:
    """Write ``count`` PNG scenes to ``out_dir`` and return their paths."""
    from .camera import save_rgb

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        path = out_dir / f"scene_{i:03d}.png"
        save_rgb(path, make_scene(rng, size))
        paths.append(path)
    return paths
