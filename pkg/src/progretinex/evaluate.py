"""Iteration sweeps and noise-level ablations over a set of synthetic images."""

from __future__ import annotations

import json
import math
from collections import defaultdict

import numpy as np

from .enhance import EnhanceConfig, enhance_with_maps
from .metrics import psnr, ssim
from .progressive import ProgressiveConfig, StageModels, infer_maps

CONSTANT_NOISE_LEVELS = (0.0, 0.04, 0.08, 0.12, 0.16, 0.20)


def parse_k_sweep(text: str) -> list:
    """``"0..5"`` -> ``[0, 1, 2, 3, 4, 5]``; ``"1,4"`` -> ``[1, 4]``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(v) for v in text.split("..", 1))
        if hi < lo:
            raise ValueError(f"empty k range {text!r}")
        return list(range(lo, hi + 1))
    return [int(v) for v in text.split(",") if v.strip()]


def k_sweep(models: StageModels, items, ks, cfg: EnhanceConfig | None = None,
            prog_cfg: ProgressiveConfig | None = None) -> list:
    """Enhance every ``(name, lowlight, clean)`` item at each ``k``.

    Returns one ``{name, k, psnr, ssim}`` record per (image, k) pair.
    """
    rows = []
    for name, low, clean in items:
        for k in ks:
            illum, noise = infer_maps(models, low, prog_cfg, k=k)
            out = enhance_with_maps(low, illum, noise, cfg)
            rows.append({"name": name, "k": k, "psnr": psnr(out, clean), "ssim": ssim(out, clean)})
    return rows


def noise_ablation(models: StageModels, items, levels=CONSTANT_NOISE_LEVELS, k: int | None = None,
                   cfg: EnhanceConfig | None = None, prog_cfg: ProgressiveConfig | None = None) -> list:
    """Compare NM-Net noise maps against constant noise levels at a fixed ``k``.

    Records carry ``noise`` = ``"nm"`` or the constant level used.
    """
    rows = []
    for name, low, clean in items:
        illum, noise = infer_maps(models, low, prog_cfg, k=k)
        variants = [("nm", noise)] + [(lvl, np.full_like(noise, lvl)) for lvl in levels]
        for label, nmap in variants:
            out = enhance_with_maps(low, illum, nmap, cfg)
            rows.append({"name": name, "noise": label, "psnr": psnr(out, clean), "ssim": ssim(out, clean)})
    return rows


def summarize(rows, key: str = "k") -> list:
    """Mean PSNR / SSIM per value of ``key`` in first-seen order."""
    groups = defaultdict(list)
    for row in rows:
        groups[row[key]].append(row)
    out = []
    for value, grp in groups.items():
        p = [r["psnr"] for r in grp]
        out.append({
            key: value,
            "psnr": float(np.mean(p)) if all(math.isfinite(v) for v in p) else math.inf,
            "ssim": float(np.mean([r["ssim"] for r in grp])),
            "n": len(grp),
        })
    return out


def _json_value(v):
    if isinstance(v, float) and math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return v


def write_report(path, rows) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps({k: _json_value(v) for k, v in row.items()}) + "\n")


def read_report(path) -> list:
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                row = json.loads(line)
                for key in ("psnr", "ssim"):
                    if isinstance(row.get(key), str):
                        row[key] = float(row[key])
                rows.append(row)
    return rows


def format_summary(summary, key: str = "k") -> str:
    """Tab-separated table with one column per ``key`` value, rows PSNR and SSIM."""
    labels = [("Iter %s" % s[key]) if key == "k" else str(s[key]) for s in summary]
    lines = ["\t".join(["metric", *labels])]
    lines.append("\t".join(["PSNR", *(f"{s['psnr']:.2f}" for s in summary)]))
    lines.append("\t".join(["SSIM", *(f"{s['ssim']:.3f}" for s in summary)]))
    return "\n".join(lines) + "\n"
