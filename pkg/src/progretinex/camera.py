"""Synthetic low-light data: camera response, Bayer sampling and raw noise.

The forward model darkens a clean patch, maps it back to sensor irradiance
with the inverse camera response, samples it through a colour filter array,
adds signal-dependent plus constant Gaussian noise in the raw domain, then
demosaics and re-applies the camera response.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

TABLE_SIZE = 1024
GRID = np.linspace(0.0, 1.0, TABLE_SIZE)
RAW_CEILING = 1.5
PHASES = ("RGGB", "GRBG", "GBRG", "BGGR")
SIGMA_S_MAX = 0.16
SIGMA_C_MAX = 0.06


# ---------------------------------------------------------------------------
# camera response
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class CRF:
    """Tabulated camera response ``f`` and its inverse on ``[0, 1]``."""

    name: str
    forward: np.ndarray
    inverse: np.ndarray

    def __post_init__(self):
        for label, table in (("forward", self.forward), ("inverse", self.inverse)):
            if table.shape != (TABLE_SIZE,):
                raise ValueError(f"CRF {self.name}: {label} table needs {TABLE_SIZE} samples")
            if abs(table[0]) > 1e-9 or abs(table[-1] - 1) > 1e-9 or np.any(np.diff(table) <= 0):
                raise ValueError(f"CRF {self.name}: {label} table must rise strictly from 0 to 1")
        # one piecewise-linear curve through the samples of both tables, so that
        # f and its inverse stay exact inverses and the steep end is well sampled
        xs = np.concatenate([GRID, self.inverse])
        ys = np.concatenate([self.forward, GRID])
        xs, first = np.unique(xs, return_index=True)
        ys = ys[first]
        if np.any(np.diff(ys) <= 0):
            raise ValueError(f"CRF {self.name}: forward and inverse tables disagree")
        object.__setattr__(self, "knots", (xs, ys))


def gamma_crf(gamma: float, name: str | None = None) -> CRF:
    return CRF(name or f"gamma{gamma:g}", GRID ** (1.0 / gamma), GRID ** gamma)


def crf_from_table(name: str, forward) -> CRF:
    forward = np.asarray(forward, dtype=np.float64)
    if forward.shape != (TABLE_SIZE,) or np.any(np.diff(forward) <= 0):
        raise ValueError(f"CRF table {name} must hold {TABLE_SIZE} strictly increasing samples")
    inverse = np.interp(GRID, forward, GRID)
    return CRF(name, forward, inverse)


def load_crf_table(path) -> CRF:
    """Read 1024 whitespace-separated response samples (irradiance grid 0..1)."""
    path = Path(path)
    return crf_from_table(path.stem, np.loadtxt(path).ravel())


# Stand-ins for the two response curves used for training data.
CRFS = {
    "gamma2.2": gamma_crf(2.2),
    "gamma2.4": gamma_crf(2.4),
}


def get_crf(name: str) -> CRF:
    if name in CRFS:
        return CRFS[name]
    if os.path.isfile(name):
        return load_crf_table(name)
    raise KeyError(f"unknown CRF {name!r}; known: {sorted(CRFS)} or a path to a 1024-sample table")


def crf_apply(crf: CRF, x):
    xs, ys = crf.knots
    return np.interp(np.clip(x, 0.0, 1.0), xs, ys)


def crf_invert(crf: CRF, y):
    xs, ys = crf.knots
    return np.interp(np.clip(y, 0.0, 1.0), ys, xs)


# ---------------------------------------------------------------------------
# Bayer sampling
# ---------------------------------------------------------------------------


def _phase_channels(phase: str) -> np.ndarray:
    """Channel index (0=R, 1=G, 2=B) at each site of the 2x2 Bayer cell."""
    lookup = {"R": 0, "G": 1, "B": 2}
    try:
        return np.array([lookup[ch] for ch in PHASES[PHASES.index(phase)]]).reshape(2, 2)
    except ValueError:
        raise ValueError(f"unknown Bayer phase {phase!r}") from None


def _check_even(h, w):
    if h % 2 or w % 2:
        raise ValueError(f"Bayer sampling needs even dimensions, got {h}x{w}")


def cfa_masks(h: int, w: int, phase: str = "RGGB") -> np.ndarray:
    """Boolean ``(3, h, w)`` masks marking which colour each site samples."""
    _check_even(h, w)
    cell = _phase_channels(phase)
    sites = np.tile(cell, (h // 2, w // 2))
    return np.stack([sites == c for c in range(3)])


def bayer_mosaic(rgb: np.ndarray, phase: str = "RGGB") -> np.ndarray:
    """Sample a ``(3, h, w)`` image into a ``(1, h, w)`` colour filter array."""
    rgb = np.asarray(rgb)
    _, h, w = rgb.shape
    masks = cfa_masks(h, w, phase)
    return (rgb * masks).sum(axis=0, keepdims=True)


_G_KERNEL = np.array([[0, 1, 0], [1, 4, 1], [0, 1, 0]]) / 4.0
_RB_KERNEL = np.array([[1, 2, 1], [2, 4, 2], [1, 2, 1]]) / 4.0


def _conv3(plane: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    # reflect padding mirrors about the edge sample, which keeps the CFA parity
    p = np.pad(plane, 1, mode="reflect")
    h, w = plane.shape
    out = np.zeros_like(plane, dtype=np.float64)
    for dy in range(3):
        for dx in range(3):
            if kernel[dy, dx]:
                out += kernel[dy, dx] * p[dy:dy + h, dx:dx + w]
    return out


def bayer_demosaic(raw: np.ndarray, phase: str = "RGGB") -> np.ndarray:
    """Bilinear demosaic of a ``(1, h, w)`` mosaic into ``(3, h, w)``."""
    raw = np.asarray(raw, dtype=np.float64)
    plane = raw[0] if raw.ndim == 3 else raw
    h, w = plane.shape
    masks = cfa_masks(h, w, phase)
    return np.stack([
        _conv3(plane * masks[c], _G_KERNEL if c == 1 else _RB_KERNEL) for c in range(3)
    ])


# ---------------------------------------------------------------------------
# noise
# ---------------------------------------------------------------------------


def raw_noise(irradiance: np.ndarray, sigma_s: float, sigma_c: float, rng: np.random.Generator) -> np.ndarray:
    """Zero-mean Gaussian draw with per-pixel variance ``sigma_s**2 * L + sigma_c**2``."""
    var = sigma_s ** 2 * np.asarray(irradiance, dtype=np.float64) + sigma_c ** 2
    return rng.standard_normal(np.shape(irradiance)) * np.sqrt(var)


def add_raw_noise(irradiance: np.ndarray, sigma_s: float, sigma_c: float, rng: np.random.Generator) -> np.ndarray:
    if sigma_s == 0 and sigma_c == 0:
        return np.asarray(irradiance, dtype=np.float64).copy()
    noisy = irradiance + raw_noise(irradiance, sigma_s, sigma_c, rng)
    return np.clip(noisy, 0.0, RAW_CEILING)


# ---------------------------------------------------------------------------
# synthesis
# ---------------------------------------------------------------------------


@dataclass
class SynthParams:
    t: float
    sigma_s: float = 0.0
    sigma_c: float = 0.0
    crf: CRF = field(default_factory=lambda: CRFS["gamma2.2"])
    bayer_phase: str = "RGGB"
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        if not 0.0 <= self.sigma_s <= SIGMA_S_MAX or not 0.0 <= self.sigma_c <= SIGMA_C_MAX:
            raise ValueError(f"noise scales out of range: sigma_s={self.sigma_s}, sigma_c={self.sigma_c}")
        _phase_channels(self.bayer_phase)


def synthesize_lowlight(clean: np.ndarray, params: SynthParams, rng: np.random.Generator | None = None):
    """Run the low-light camera model on a ``(3, h, w)`` image in ``[0, 1]``.

    Returns ``(lowlight, lowlight_noiseless)``; both share the darkening,
    mosaic and demosaic steps and differ only by the raw-domain noise.
    """
    if rng is None:
        rng = np.random.default_rng(params.seed)
    clean = np.asarray(clean, dtype=np.float64)
    irradiance = crf_invert(params.crf, clean * params.t)
    raw = bayer_mosaic(irradiance, params.bayer_phase)
    noisy = add_raw_noise(raw, params.sigma_s, params.sigma_c, rng)
    low = crf_apply(params.crf, bayer_demosaic(noisy, params.bayer_phase))
    ref = crf_apply(params.crf, bayer_demosaic(raw, params.bayer_phase))
    return low, ref


def noise_gt(lowlight: np.ndarray, lowlight_noiseless: np.ndarray) -> float:
    lowlight = np.asarray(lowlight, dtype=np.float64)
    lowlight_noiseless = np.asarray(lowlight_noiseless, dtype=np.float64)
    if lowlight.shape != lowlight_noiseless.shape:
        raise ValueError(f"shape mismatch {lowlight.shape} vs {lowlight_noiseless.shape}")
    return float(np.std(lowlight - lowlight_noiseless))


def sample_params(rng: np.random.Generator, crf_names) -> SynthParams:
    return SynthParams(
        t=float(rng.uniform(0.0, 1.0)),
        sigma_s=float(rng.uniform(0.0, SIGMA_S_MAX)),
        sigma_c=float(rng.uniform(0.0, SIGMA_C_MAX)),
        crf=get_crf(crf_names[rng.integers(len(crf_names))]),
        bayer_phase=PHASES[rng.integers(len(PHASES))],
    )


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class PatchRecord:
    clean: np.ndarray  # (3, 32, 32) float in [0, 1]
    lowlight: np.ndarray
    t: float
    sigma_eff: float


IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff", ".ppm"}


def load_rgb(path) -> np.ndarray:
    """8-bit image file -> float ``(3, h, w)`` in ``[0, 1]``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr.transpose(2, 0, 1)


def to_uint8(img: np.ndarray) -> np.ndarray:
    """``(3, h, w)`` float -> ``(h, w, 3)`` uint8, rounding half to even."""
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_rgb(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


def load_source_images(image_dir, patch: int = 32) -> list:
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise FileNotFoundError(f"image directory not found: {image_dir}")
    images = []
    for path in sorted(image_dir.iterdir()):
        if path.suffix.lower() not in IMAGE_SUFFIXES:
            continue
        try:
            img = load_rgb(path)
        except OSError as exc:
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        if min(img.shape[1:]) < patch:
            log.warning("skipping %s: smaller than %dx%d", path, patch, patch)
            continue
        images.append((path.name, img))
    if not images:
        raise ValueError(f"no usable images in {image_dir}")
    return images


def make_patch(images: list, index: int, seed: int, crf_names, patch: int = 32):
    """Deterministic sample ``index`` of a dataset: crop, parameters and synthesis."""
    rng = np.random.default_rng([seed, index])
    name, img = images[rng.integers(len(images))]
    _, h, w = img.shape
    y = int(rng.integers(h - patch + 1))
    x = int(rng.integers(w - patch + 1))
    clean = img[:, y:y + patch, x:x + patch]
    params = sample_params(rng, crf_names)
    low, ref = synthesize_lowlight(clean, params, rng)
    return PatchRecord(clean, low, params.t, noise_gt(low, ref)), params, (name, y, x)


def build_dataset(image_dir, n_patches: int, seed: int, out_dir, crf_names=None,
                  train_fraction: float = 0.8) -> list:
    """Synthesize ``n_patches`` training pairs and write them with a manifest.

    Writes ``patches/clean_XXXXXX.png`` / ``patches/low_XXXXXX.png`` and
    ``manifest.jsonl`` under ``out_dir``. The first ``train_fraction`` of the
    records form the train split, the rest the test split.
    """
    if n_patches <= 0:
        raise ValueError("n_patches must be positive")
    crf_names = list(crf_names or CRFS)
    for name in crf_names:
        get_crf(name)
    images = load_source_images(image_dir)
    out_dir = Path(out_dir)
    (out_dir / "patches").mkdir(parents=True, exist_ok=True)
    n_train = int(round(n_patches * train_fraction))
    records = []
    for i in range(n_patches):
        rec, params, (src, y, x) = make_patch(images, i, seed, crf_names)
        clean_rel = f"patches/clean_{i:06d}.png"
        low_rel = f"patches/low_{i:06d}.png"
        save_rgb(out_dir / clean_rel, rec.clean)
        save_rgb(out_dir / low_rel, rec.lowlight)
        records.append({
            "clean_path": clean_rel,
            "low_path": low_rel,
            "t": rec.t,
            "sigma_eff": rec.sigma_eff,
            "sigma_s": params.sigma_s,
            "sigma_c": params.sigma_c,
            "crf": params.crf.name,
            "phase": params.bayer_phase,
            "split": "train" if i < n_train else "test",
            "source": src,
            "crop": [y, x],
            "seed": seed,
        })
    write_manifest(out_dir / "manifest.jsonl", records)
    return records


def write_manifest(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list:
    path = Path(path)
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from exc
            for key in ("clean_path", "low_path", "t", "sigma_eff", "split"):
                if key not in rec:
                    raise ValueError(f"{path}:{line_no}: missing field {key!r}")
            records.append(rec)
    return records


def load_split(manifest_path, split: str):
    """Load one split as ``(names, clean, lowlight, t, sigma_eff)`` arrays.

    Images come back as float32 ``(n, 3, 32, 32)`` re-normalized from the PNGs.
    """
    manifest_path = Path(manifest_path)
    root = manifest_path.parent
    recs = [r for r in read_manifest(manifest_path) if r["split"] == split]
    clean = np.stack([load_rgb(root / r["clean_path"]) for r in recs]).astype(np.float32) if recs else None
    low = np.stack([load_rgb(root / r["low_path"]) for r in recs]).astype(np.float32) if recs else None
    names = [Path(r["low_path"]).stem for r in recs]
    t = np.array([r["t"] for r in recs])
    sigma = np.array([r["sigma_eff"] for r in recs])
    return names, clean, low, t, sigma

