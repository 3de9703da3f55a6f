"""Command-line entry point: ``progretinex <command> [options]``.

Exit codes: 0 success, 2 bad arguments or configuration, 3 I/O failure,
4 training divergence, 5 corrupt model file. Diagnostics go to stderr,
reports and tables to stdout.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_ARGS = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_CORRUPT = 5

DESK_PATCHES = 2500
DESK_ITERS = 2000

log = logging.getLogger("progretinex")


class CliError(Exception):
    def __init__(self, message, code=EXIT_ARGS):
        super().__init__(message)
        self.code = code


# defaults per command; a config file and then explicit flags override them
DEFAULTS = {
    "corpus": {"out": None, "count": 24, "seed": 0},
    "synth": {"images": None, "out": None, "count": 250_000, "seed": 0, "crf": None, "desk": False},
    "train": {"data": None, "out": None, "k": 4, "iters_per_stage": 50_000, "seed": 0, "batch_size": 128,
              "desk": False, "baseline": False, "no_sanity": False, "threads": 1},
    "enhance": {"model": None, "input": None, "out": None, "k": None, "no_denoise": False, "threads": 1},
    "eval": {"model": None, "data": None, "k_sweep": None, "report": None, "limit": None, "split": "test",
             "noise_ablation": False, "threads": 1},
    "inspect": {"model": None},
}
REQUIRED = {
    "corpus": ("out",),
    "synth": ("images", "out"),
    "train": ("data", "out"),
    "enhance": ("model", "input", "out"),
    "eval": ("model", "data", "report"),
    "inspect": ("model",),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="progretinex", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def cmd(name, help_):
        p = sub.add_parser(name, help=help_, argument_default=None)
        p.add_argument("--config", help="flat JSON file of option values; flags take precedence")
        return p

    p = cmd("corpus", "write procedural well-exposed source scenes")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)

    p = cmd("synth", "synthesize a low-light patch dataset")
    p.add_argument("--images", help="directory of 8-bit RGB source images")
    p.add_argument("--out")
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--crf", action="append", help="CRF name or 1024-sample table path (repeatable)")
    p.add_argument("--desk", action="store_true", default=None, help=f"desk scale: {DESK_PATCHES} patches")

    p = cmd("train", "train the progressive IM/NM stages")
    p.add_argument("--data", help="dataset manifest.jsonl")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--iters-per-stage", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--desk", action="store_true", default=None, help=f"desk scale: {DESK_ITERS} iterations/stage")
    p.add_argument("--baseline", action="store_true", default=None,
                   help="also train a feedback-free NM-Net (nm_stage0.prtx) for k=0")
    p.add_argument("--no-sanity", action="store_true", default=None, help="skip per-stage overfit checks")
    p.add_argument("--threads", type=int)

    p = cmd("enhance", "enhance one image")
    p.add_argument("--model")
    p.add_argument("--in", dest="input")
    p.add_argument("--out")
    p.add_argument("--k", type=int)
    p.add_argument("--no-denoise", action="store_true", default=None)
    p.add_argument("--threads", type=int)

    p = cmd("eval", "PSNR/SSIM sweep over progressive iterations")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--k-sweep", help="e.g. 0..5 or 1,2,4 (default 0..K, or 1..K without a baseline)")
    p.add_argument("--report", help="JSON-lines metrics report path")
    p.add_argument("--limit", type=int, help="evaluate only the first N images of the split")
    p.add_argument("--split")
    p.add_argument("--noise-ablation", action="store_true", default=None,
                   help="also compare NM-Net maps against constant noise levels")
    p.add_argument("--threads", type=int)

    p = cmd("inspect", "describe a .prtx model file")
    p.add_argument("--model")
    return parser


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults, an optional JSON config and explicit flags (flags win)."""
    command = args.command
    cfg = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise CliError(f"cannot read config {args.config}: {exc}", EXIT_IO) from exc
        except json.JSONDecodeError as exc:
            raise CliError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise CliError(f"config {args.config} must hold a flat JSON object")
        for key, value in loaded.items():
            norm = key.replace("-", "_")
            if norm == "in":
                norm = "input"
            if norm not in cfg:
                raise CliError(f"unknown config key {key!r} for command {command}")
            cfg[norm] = value
    explicit = {k: v for k, v in vars(args).items() if k in cfg and v is not None}
    if command == "synth" and (explicit.get("desk") or (cfg["desk"] and "count" not in explicit)):
        cfg["count"] = DESK_PATCHES
    if command == "train" and (cfg["desk"] or explicit.get("desk")) and "iters_per_stage" not in explicit:
        cfg["iters_per_stage"] = DESK_ITERS
    cfg.update(explicit)
    missing = [k for k in REQUIRED[command] if cfg.get(k) is None]
    if missing:
        raise CliError(f"{command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _limit_threads(n):
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_corpus(cfg):
    from .scenes import write_corpus

    paths = write_corpus(cfg["out"], cfg["count"], cfg["seed"])
    print(f"wrote {len(paths)} scenes to {cfg['out']}")


def cmd_synth(cfg):
    from .camera import build_dataset

    images = Path(cfg["images"])
    if not images.is_dir():
        raise CliError(f"image directory not found: {images}", EXIT_IO)
    if cfg["count"] <= 0:
        raise CliError("--count must be positive")
    crfs = cfg["crf"]
    if isinstance(crfs, str):
        crfs = [crfs]
    try:
        records = build_dataset(images, cfg["count"], cfg["seed"], cfg["out"], crf_names=crfs)
    except KeyError as exc:
        raise CliError(str(exc.args[0])) from exc
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    n_train = sum(r["split"] == "train" for r in records)
    print(f"manifest\t{Path(cfg['out']) / 'manifest.jsonl'}")
    print(f"train\t{n_train}")
    print(f"test\t{len(records) - n_train}")


def cmd_train(cfg):
    from .camera import load_split
    from .networks import TrainConfig, TrainingError
    from .plotting import plot_loss_curves
    from .progressive import ProgressiveConfig, save_stage_models, train_progressive

    data = Path(cfg["data"])
    if not data.is_file():
        raise CliError(f"manifest not found: {data}", EXIT_IO)
    try:
        prog_cfg = ProgressiveConfig(k_iterations=cfg["k"])
        train_cfg = TrainConfig(iterations=cfg["iters_per_stage"], batch_size=cfg["batch_size"], seed=cfg["seed"])
    except ValueError as exc:
        raise CliError(str(exc)) from exc
    _, _, low, t, sigma = load_split(data, "train")
    if low is None:
        raise CliError(f"{data} has no train split")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    with _limit_threads(cfg["threads"]):
        try:
            models, curves = train_progressive(low, t, sigma, train_cfg, prog_cfg, baseline=bool(cfg["baseline"]),
                                               sanity=not cfg["no_sanity"])
        except TrainingError as exc:
            raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from exc
    written = save_stage_models(out, models, prog_cfg, extra={
        "iters_per_stage": train_cfg.iterations,
        "batch_size": train_cfg.batch_size,
        "data": str(data),
        "train_patches": int(len(low)),
    })
    with open(out / "loss_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "stage", "loss", "lr"])
        for label, res in curves.items():
            for it, loss, lr in res.curve:
                writer.writerow([it, label, f"{loss:.8g}", f"{lr:.8g}"])
    plot_loss_curves({label: res.curve for label, res in curves.items()}, out / "loss_curves.png")
    for path in written:
        print(path)
    print(out / "loss_curves.csv")


def _load_models(model_dir):
    from .modelio import ModelFormatError
    from .progressive import load_stage_models

    model_dir = Path(model_dir)
    if not (model_dir / "manifest.json").is_file():
        raise CliError(f"model directory incomplete or missing: {model_dir}", EXIT_IO)
    try:
        return load_stage_models(model_dir)
    except ModelFormatError as exc:
        raise CliError(f"corrupt model in {model_dir}: {exc}", EXIT_CORRUPT) from exc
    except FileNotFoundError as exc:
        raise CliError(f"model file missing: {exc.filename}", EXIT_IO) from exc


def _check_k(models, k):
    if k == 0 and models.baseline_nm is None:
        raise CliError("k=0 needs a baseline NM-Net; retrain with --baseline")
    if not 0 <= k <= models.k:
        raise CliError(f"k={k} not available: model directory holds k=1..{models.k}")


def cmd_enhance(cfg):
    from .camera import load_rgb, save_rgb
    from .enhance import EnhanceConfig, enhance_with_maps
    from .progressive import infer_maps

    models, prog_cfg = _load_models(cfg["model"])
    k = models.k if cfg["k"] is None else cfg["k"]
    _check_k(models, k)
    try:
        image = load_rgb(cfg["input"])
    except OSError as exc:
        raise CliError(f"cannot read image {cfg['input']}: {exc}", EXIT_IO) from exc
    if min(image.shape[1:]) < prog_cfg.patch_size:
        raise CliError(f"image {cfg['input']} is smaller than {prog_cfg.patch_size}x{prog_cfg.patch_size}")
    with _limit_threads(cfg["threads"]):
        illum, noise = infer_maps(models, image, prog_cfg, k=k)
        out = enhance_with_maps(image, illum, noise, EnhanceConfig(), denoise=not cfg["no_denoise"])
    try:
        save_rgb(cfg["out"], out)
    except OSError as exc:
        raise CliError(f"cannot write {cfg['out']}: {exc}", EXIT_IO) from exc
    print(cfg["out"])


def cmd_eval(cfg):
    from .camera import load_split
    from .evaluate import (format_summary, k_sweep, noise_ablation, parse_k_sweep, summarize,
                           write_report)
    from .plotting import plot_k_sweep, plot_noise_ablation

    models, prog_cfg = _load_models(cfg["model"])
    data = Path(cfg["data"])
    if not data.is_file():
        raise CliError(f"manifest not found: {data}", EXIT_IO)
    if cfg["k_sweep"] is None:
        ks = list(range(0 if models.baseline_nm is not None else 1, models.k + 1))
    else:
        try:
            ks = parse_k_sweep(str(cfg["k_sweep"]))
        except ValueError as exc:
            raise CliError(f"bad --k-sweep {cfg['k_sweep']!r}: {exc}") from exc
    for k in ks:
        _check_k(models, k)
    names, clean, low, _, _ = load_split(data, cfg["split"])
    if low is None:
        raise CliError(f"{data} has no {cfg['split']} split")
    if cfg["limit"] is not None:
        names, clean, low = names[:cfg["limit"]], clean[:cfg["limit"]], low[:cfg["limit"]]
    items = [(n, lo.astype(np.float64), c.astype(np.float64)) for n, lo, c in zip(names, low, clean)]
    report = Path(cfg["report"])
    report.parent.mkdir(parents=True, exist_ok=True)
    with _limit_threads(cfg["threads"]):
        rows = k_sweep(models, items, ks, prog_cfg=prog_cfg)
        write_report(report, rows)
        summary = summarize(rows)
        table = format_summary(summary)
        report.with_suffix(".summary.tsv").write_text(table)
        plot_k_sweep(summary, report.with_suffix(".png"))
        sys.stdout.write(table)
        if cfg["noise_ablation"]:
            abl = noise_ablation(models, items, k=max(k for k in ks if k > 0) if any(ks) else None,
                                 prog_cfg=prog_cfg)
            abl_path = report.with_suffix(".noise.jsonl")
            write_report(abl_path, abl)
            abl_summary = summarize(abl, key="noise")
            abl_table = format_summary(abl_summary, key="noise")
            abl_path.with_suffix(".summary.tsv").write_text(abl_table)
            plot_noise_ablation(abl_summary, abl_path.with_suffix(".png"))
            sys.stdout.write(abl_table)


def cmd_inspect(cfg):
    from .modelio import ModelFormatError, load_model

    path = Path(cfg["model"])
    if not path.is_file():
        raise CliError(f"model file not found: {path}", EXIT_IO)
    try:
        mf = load_model(path)
    except ModelFormatError as exc:
        raise CliError(f"corrupt model file {path}: {exc}", EXIT_CORRUPT) from exc
    net = mf.net
    print(f"network\t{net.name}\tid={net.net_id}")
    print(f"stage\t{mf.stage}")
    print(f"format\tv{mf.version}\tchecksum ok")
    total = 0
    for layer in net.conv_layers:
        p = mf.params[layer.name]
        count = p.weights.size + p.bias.size
        total += count
        print(f"{layer.name}\t{p.c_in}->{p.c_out}\tweights {p.c_out}x{p.c_in}x1x1\tbias {p.c_out}\tparams {count}")
    print(f"total\t{total}")


COMMANDS = {
    "corpus": cmd_corpus,
    "synth": cmd_synth,
    "train": cmd_train,
    "enhance": cmd_enhance,
    "eval": cmd_eval,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except CliError as exc:
        print(f"progretinex {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"progretinex {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
