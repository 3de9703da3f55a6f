"""Progressive alternation between the illumination and noise-level networks.

Stage ``k`` owns one IM-Net and one NM-Net. IM-Net at stage 1 sees a zero
feedback channel; afterwards each network receives the previous estimate of
the other as a fourth, spatially constant input channel. Earlier stages are
frozen while later ones train.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .enhance import ILLUM_FLOOR, window_starts
from .modelio import load_model, save_model
from .networks import (
    DTYPE,
    IM_NET,
    NM_NET,
    PATCH_SIZE,
    TrainConfig,
    TrainingError,
    build_im_net,
    build_nm_net,
    predict,
    train,
)

log = logging.getLogger(__name__)

MAX_K = 8
SANITY_SAMPLES = 8
SANITY_ITERATIONS = 500
SANITY_LOSS = 1e-3
SANITY_TARGET = 0.5


@dataclass
class ProgressiveConfig:
    k_iterations: int = 4
    stride: int = 16
    patch_size: int = PATCH_SIZE

    def __post_init__(self):
        if not 1 <= self.k_iterations <= MAX_K:
            raise ValueError(f"k_iterations must lie in 1..{MAX_K}")
        if self.patch_size != PATCH_SIZE:
            raise ValueError(f"patch size is fixed at {PATCH_SIZE}")
        if not 1 <= self.stride <= self.patch_size:
            raise ValueError("stride must lie in 1..patch_size")


@dataclass
class StageModels:
    """Per-stage parameters; ``im[k-1]`` / ``nm[k-1]`` belong to stage ``k``.

    ``baseline_nm`` is an optional NM-Net trained without feedback, used for
    the non-cascaded ``k=0`` configuration.
    """

    im: list
    nm: list
    baseline_nm: dict | None = None
    input_channels: int = 4
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.im or len(self.im) != len(self.nm):
            raise ValueError("StageModels needs matching, non-empty IM and NM stage lists")

    @property
    def k(self) -> int:
        return len(self.im)

    @property
    def im_net(self):
        return build_im_net(self.input_channels)

    @property
    def nm_net(self):
        return build_nm_net(self.input_channels)

    def truncated(self, k: int) -> "StageModels":
        return dataclasses.replace(self, im=self.im[:k], nm=self.nm[:k])


def with_feedback(lowlight: np.ndarray, feedback) -> np.ndarray:
    """Append a constant fourth channel holding one feedback value per patch."""
    lowlight = np.asarray(lowlight, dtype=DTYPE)
    n, _, h, w = lowlight.shape
    fb = np.broadcast_to(np.asarray(feedback, dtype=DTYPE).reshape(n, 1, 1, 1), (n, 1, h, w))
    return np.concatenate([lowlight, fb], axis=1)


def _sanity_check(net, inputs, cfg: TrainConfig, label: str) -> float:
    # memorize a constant target on this stage's own inputs (feedback included)
    sub = min(SANITY_SAMPLES, len(inputs))
    sanity_cfg = dataclasses.replace(cfg, iterations=SANITY_ITERATIONS, batch_size=sub, log_every=100)
    targets = np.full(sub, SANITY_TARGET)
    _, res = train(net, inputs[:sub], targets, sanity_cfg, label=f"{label} sanity")
    if not res.final_loss < SANITY_LOSS:
        raise TrainingError(f"stage {label} failed the overfit sanity check (loss {res.final_loss:.3g} on {sub} samples)")
    return res.final_loss


def train_progressive(lowlight: np.ndarray, t: np.ndarray, sigma: np.ndarray, train_cfg: TrainConfig,
                      prog_cfg: ProgressiveConfig | None = None, baseline: bool = False,
                      sanity: bool = True, on_stage=None):
    """Train ``K`` alternating IM/NM stages on ``(n, 3, 32, 32)`` low-light patches.

    Returns ``(StageModels, curves)`` where ``curves`` maps stage labels such as
    ``"IM1"`` to :class:`TrainResult`. ``on_stage(label, params, result)`` is
    called after each stage.
    """
    prog_cfg = prog_cfg or ProgressiveConfig()
    lowlight = np.asarray(lowlight, dtype=DTYPE)
    t = np.asarray(t, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    im_net, nm_net = build_im_net(), build_nm_net()
    curves = {}
    im_stages, nm_stages = [], []
    feedback = np.zeros(len(lowlight))
    ordinal = 0

    def run(net, targets, label):
        nonlocal ordinal
        ordinal += 1
        cfg = dataclasses.replace(train_cfg, seed=train_cfg.seed * 1000 + ordinal)
        inputs = with_feedback(lowlight, feedback)
        if sanity:
            _sanity_check(net, inputs, cfg, label)
        params, res = train(net, inputs, targets, cfg, label=label)
        curves[label] = res
        log.info("%s trained: final loss %.5g in %.1fs", label, res.final_loss, res.seconds)
        if on_stage:
            on_stage(label, params, res)
        return params, predict(net, params, inputs)

    for k in range(1, prog_cfg.k_iterations + 1):
        if k == 1:
            feedback = np.zeros(len(lowlight))
        params, t_hat = run(im_net, t, f"IM{k}")
        im_stages.append(params)
        feedback = t_hat
        params, s_hat = run(nm_net, sigma, f"NM{k}")
        nm_stages.append(params)
        feedback = s_hat
    baseline_nm = None
    if baseline:
        feedback = np.zeros(len(lowlight))
        baseline_nm, _ = run(nm_net, sigma, "NM0")
    models = StageModels(im_stages, nm_stages, baseline_nm, meta={"seed": train_cfg.seed})
    return models, curves


def cascade(models: StageModels, lowlight: np.ndarray, k: int, baseline: bool = False):
    """Run stages ``1..k`` on ``(n, 3, 32, 32)`` patches; returns ``(t_hat, sigma_hat)``.

    ``k=0`` runs the non-cascaded pair: stage-1 IM-Net and the baseline NM-Net,
    both with zero feedback.
    """
    lowlight = np.asarray(lowlight, dtype=DTYPE)
    n = len(lowlight)
    zeros = np.zeros(n)
    if k == 0 or baseline:
        if models.baseline_nm is None:
            raise ValueError("k=0 needs a baseline NM-Net (train with baseline enabled)")
        t_hat = predict(models.im_net, models.im[0], with_feedback(lowlight, zeros))
        s_hat = predict(models.nm_net, models.baseline_nm, with_feedback(lowlight, zeros))
        return t_hat, s_hat
    if not 1 <= k <= models.k:
        raise ValueError(f"k={k} outside the trained range 1..{models.k}")
    s_hat = zeros
    for stage in range(k):
        t_hat = predict(models.im_net, models.im[stage], with_feedback(lowlight, s_hat))
        s_hat = predict(models.nm_net, models.nm[stage], with_feedback(lowlight, t_hat))
    return t_hat, s_hat


def infer_patch(models: StageModels, patch: np.ndarray, k: int):
    patch = np.asarray(patch, dtype=DTYPE)
    if patch.ndim == 3:
        patch = patch[None]
    t_hat, s_hat = cascade(models, patch, k)
    return float(t_hat[0]), float(s_hat[0])


def _grid_to_image(grid: np.ndarray, ys, xs, h: int, w: int, patch: int) -> np.ndarray:
    # grid values sit at window centres; linear between them, flat beyond
    cy = np.asarray(ys, dtype=np.float64) + (patch - 1) / 2
    cx = np.asarray(xs, dtype=np.float64) + (patch - 1) / 2
    py, px = np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64)
    rows = np.stack([np.interp(px, cx, g) for g in grid])
    return np.stack([np.interp(py, cy, rows[:, j]) for j in range(w)], axis=1)


def window_layout(h: int, w: int, prog_cfg: ProgressiveConfig | None = None):
    prog_cfg = prog_cfg or ProgressiveConfig()
    return (window_starts(h, prog_cfg.patch_size, prog_cfg.stride),
            window_starts(w, prog_cfg.patch_size, prog_cfg.stride))


def infer_maps(models: StageModels, image: np.ndarray, prog_cfg: ProgressiveConfig | None = None,
               k: int | None = None, baseline: bool = False):
    """Full-resolution illumination and noise-level maps for a ``(3, h, w)`` image."""
    prog_cfg = prog_cfg or ProgressiveConfig()
    image = np.asarray(image, dtype=DTYPE)
    _, h, w = image.shape
    p = prog_cfg.patch_size
    if h < p or w < p:
        raise ValueError(f"image {h}x{w} is smaller than one {p}x{p} patch")
    k = models.k if k is None else k
    ys, xs = window_layout(h, w, prog_cfg)
    patches = np.stack([image[:, y:y + p, x:x + p] for y in ys for x in xs])
    t_hat, s_hat = cascade(models, patches, k, baseline=baseline)
    t_grid = t_hat.reshape(len(ys), len(xs)).astype(np.float64)
    s_grid = s_hat.reshape(len(ys), len(xs)).astype(np.float64)
    illum = np.clip(_grid_to_image(t_grid, ys, xs, h, w, p), ILLUM_FLOOR, 1.0)
    noise = np.clip(_grid_to_image(s_grid, ys, xs, h, w, p), 0.0, 1.0)
    return illum, noise


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

MANIFEST = "manifest.json"


def save_stage_models(out_dir, models: StageModels, prog_cfg: ProgressiveConfig | None = None,
                      extra: dict | None = None) -> list:
    prog_cfg = prog_cfg or ProgressiveConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for k in range(1, models.k + 1):
        for net, params, stem in ((models.im_net, models.im[k - 1], "im"), (models.nm_net, models.nm[k - 1], "nm")):
            path = out_dir / f"{stem}_stage{k}.prtx"
            save_model(path, net, params, k)
            written.append(path)
    if models.baseline_nm is not None:
        path = out_dir / "nm_stage0.prtx"
        save_model(path, models.nm_net, models.baseline_nm, 0)
        written.append(path)
    manifest = {
        "k": models.k,
        "stride": prog_cfg.stride,
        "patch_size": prog_cfg.patch_size,
        "input_channels": models.input_channels,
        "baseline": models.baseline_nm is not None,
        "seed": models.meta.get("seed"),
    }
    manifest.update(extra or {})
    (out_dir / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return written


def load_stage_models(model_dir):
    """Return ``(StageModels, ProgressiveConfig)`` from a model directory."""
    model_dir = Path(model_dir)
    manifest = json.loads((model_dir / MANIFEST).read_text())
    k = int(manifest["k"])
    im, nm = [], []
    for stage in range(1, k + 1):
        for stem, net_id, bucket in (("im", IM_NET, im), ("nm", NM_NET, nm)):
            mf = load_model(model_dir / f"{stem}_stage{stage}.prtx")
            if mf.net.net_id != net_id or mf.stage != stage:
                raise ValueError(f"{stem}_stage{stage}.prtx holds network {mf.net.net_id} stage {mf.stage}")
            bucket.append(mf.params)
    baseline = None
    if manifest.get("baseline"):
        baseline = load_model(model_dir / "nm_stage0.prtx").params
    models = StageModels(im, nm, baseline, int(manifest.get("input_channels", 4)),
                         meta={"seed": manifest.get("seed")})
    prog_cfg = ProgressiveConfig(k_iterations=k, stride=int(manifest["stride"]),
                                 patch_size=int(manifest["patch_size"]))
    return models, prog_cfg
