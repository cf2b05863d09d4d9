"""Command-line entry point: synth, preprocess, train, eval, predict, overlay.

Settings come from an optional JSON config file (``--config``) with sections
``unet``, ``train``, ``clahe`` and ``phantom``; explicit flags override it.

Exit codes: 0 success, 2 usage, 3 I/O or data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import imaging, phantom, trainer, unet
from .imaging import ClaheParams, ParameterError
from .objectives import DEFAULT_THRESHOLD, MetricsReport, binarize, combined_loss, dice_score, iou
from .overlay import render_overlay, write_overlay
from .tensor import DimensionError, NumericalError, Tensor

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("vertseg")


class UsageError(Exception):
    pass


def _section(cfg: dict, name: str, cls, overrides: dict):
    known = {f.name for f in fields(cls)}
    values = {k: v for k, v in cfg.get(name, {}).items() if k in known}
    values.update({k: v for k, v in overrides.items() if v is not None and k in known})
    for f in fields(cls):
        if f.name in values and isinstance(getattr(cls, f.name, None), tuple):
            values[f.name] = tuple(values[f.name])
    return cls(**values)


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from exc


def _clahe_params(args, cfg) -> ClaheParams:
    return _section(cfg, "clahe", ClaheParams, {
        "tiles_x": args.tiles, "tiles_y": args.tiles,
        "clip_limit": args.clip_limit, "bins": args.bins,
    })


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    cfg = _load_config(args.config)
    params = _section(cfg, "phantom", phantom.PhantomParams, {
        "width": args.width, "height": args.height, "n_vertebrae": args.n_vertebrae,
        "noise_sigma": args.noise_sigma, "texture_amplitude": args.texture_amplitude,
        "fracture_prob": args.fracture_prob, "hard_mode": args.hard_mode or None,
    })
    _, manifest = phantom.generate_dataset(args.n, params, seed=args.seed, out_dir=args.out)
    (Path(args.out) / "config.json").write_text(
        json.dumps({"n": args.n, "seed": args.seed, "phantom": asdict(params)}, indent=1) + "\n")
    print(f"wrote {args.n} phantom pairs to {args.out} ({manifest.counts()})")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _load_config(args.config)
    params = _clahe_params(args, cfg)
    use_clahe = not args.no_clahe
    out_w, out_h = args.width or args.size, args.height or args.size
    src = trainer.DatasetManifest.load(Path(args.in_dir) / "manifest.tsv")
    out = Path(args.out)
    failures = []
    for e in src.entries:
        try:
            img_path, mask_path = src.resolve(e.image), src.resolve(e.mask)
            img = imaging.read_png(img_path)
            mask = imaging.read_mask(mask_path)
            if (img.width, img.height) == (out_w, out_h) and not use_clahe:
                # nothing to do: keep the exact bytes
                for s, d in ((img_path, out / e.image), (mask_path, out / e.mask)):
                    d.parent.mkdir(parents=True, exist_ok=True)
                    shutil.copyfile(s, d)
                continue
            img = preprocess_image(img, out_w, out_h, params if use_clahe else None)
            imaging.write_png(img, out / e.image)
            imaging.write_mask(imaging.resize_mask(mask, out_w, out_h), out / e.mask)
        except (OSError, ParameterError, ValueError) as exc:
            failures.append(f"{e.image}: {exc}")
    trainer.DatasetManifest(src.entries, src.seed).save(out / "manifest.tsv")
    (out / "config.json").write_text(json.dumps(
        {"width": out_w, "height": out_h, "clahe": asdict(params) if use_clahe else None}, indent=1) + "\n")
    if failures:
        for f in failures:
            print(f"error: {f}", file=sys.stderr)
        return EXIT_IO
    print(f"preprocessed {len(src.entries)} pairs into {out}")
    return EXIT_OK


def preprocess_image(img, out_w: int, out_h: int, params: ClaheParams | None):
    """CLAHE (when ``params`` is given) followed by bilinear resize."""
    if params is not None:
        img = imaging.clahe(img, params)
    return imaging.resize_bilinear(img, out_w, out_h)


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    ucfg = _section(cfg, "unet", unet.UNetConfig, {"depth": args.depth, "base_channels": args.base})
    tcfg = _section(cfg, "train", trainer.TrainConfig, {
        "learning_rate": args.lr, "batch_size": args.batch_size, "max_epochs": args.max_epochs,
        "plateau_patience": args.patience, "plateau_min_delta": args.min_delta,
        "augment": args.augment or None, "seed": args.seed, "threshold": args.threshold,
    })
    manifest = trainer.DatasetManifest.load(args.manifest)
    counts = manifest.counts()
    for tag in ("train", "val"):
        if counts[tag] == 0:
            raise trainer.DatasetError(f"manifest {args.manifest} has no {tag!r} split")
    run = Path(args.run_dir)
    for sub in ("checkpoints", "reports"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    (run / "config").write_text(json.dumps({
        "manifest": str(Path(args.manifest).resolve()),
        "unet": asdict(ucfg), "train": asdict(tcfg),
    }, indent=1, default=str) + "\n")
    model = unet.build(ucfg, seed=tcfg.seed)
    result = trainer.train(model, manifest, tcfg, run_dir=run)
    unet.save_checkpoint(model, run / "checkpoints" / "best.ckpt")
    print(f"best epoch {result.best_epoch} val loss {result.best_val_loss:.5f}; "
          f"{len(result.log)} epochs; run dir {run}")
    return EXIT_OK


def _resolve_checkpoint(path: Path) -> Path:
    if path.is_dir():
        marker = path / "checkpoints" / "best" if (path / "checkpoints").is_dir() else path / "best"
        return marker.parent / marker.read_text().strip()
    return path


def cmd_eval(args) -> int:
    manifest = trainer.DatasetManifest.load(args.manifest)
    entries = manifest.split(args.split)
    if not entries:
        raise trainer.DatasetError(f"split {args.split!r} is empty")
    if (args.checkpoint is None) == (args.pred_dir is None):
        raise UsageError("give exactly one of --checkpoint or --pred-dir")
    model = unet.load_checkpoint(_resolve_checkpoint(Path(args.checkpoint))) if args.checkpoint else None
    report = MetricsReport(split=args.split)
    for e in entries:
        truth = imaging.read_mask(manifest.resolve(e.mask))
        if model is not None:
            img = imaging.read_png(manifest.resolve(e.image))
            prob = model(imaging.normalize(img)).data
        else:
            prob = imaging.read_mask(Path(args.pred_dir) / Path(e.mask).name).pixels.astype(np.float32)
        loss = float(combined_loss(Tensor(prob.reshape(1, 1, *truth.pixels.shape)), truth).data)
        pred = binarize(prob.reshape(truth.pixels.shape), args.threshold)
        report.add(Path(e.image).stem, dice_score(pred, truth), iou(pred, truth), loss)
    report.validate()
    txt, js = report.save(args.out)
    print(report.to_text(), end="")
    print(f"wrote {txt} and {js}")
    return EXIT_OK


def predict_mask(model: unet.UNetModel, img, threshold: float = DEFAULT_THRESHOLD, size=None):
    """Binary prediction at the image's own size; ``size`` resizes for the network."""
    net_in = img if size is None else imaging.resize_bilinear(img, size[0], size[1])
    prob = model(imaging.normalize(net_in)).data[0, 0]
    mask = imaging.BinaryMask(binarize(prob, threshold))
    if size is not None:
        mask = imaging.resize_mask(mask, img.width, img.height)
    return mask


def cmd_predict(args) -> int:
    model = unet.load_checkpoint(_resolve_checkpoint(Path(args.checkpoint)))
    img = imaging.read_png(args.image)
    size = (args.size, args.size) if args.size else None
    mask = predict_mask(model, img, args.threshold, size)
    imaging.write_mask(mask, args.out)
    print(f"wrote {args.out} ({int(mask.pixels.sum())} vertebra pixels)")
    return EXIT_OK


def cmd_overlay(args) -> int:
    img = imaging.read_png(args.image)
    rgb = render_overlay(img, imaging.read_mask(args.truth), imaging.read_mask(args.pred), args.alpha)
    write_overlay(rgb, args.out)
    print(f"wrote {args.out}")
    return EXIT_OK


# --- argument parsing ------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vertseg", description="Binary vertebra segmentation with a U-Net.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic spine phantoms")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--n-vertebrae", type=int)
    p.add_argument("--noise-sigma", type=float)
    p.add_argument("--texture-amplitude", type=float)
    p.add_argument("--fracture-prob", type=float)
    p.add_argument("--hard-mode", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="CLAHE then bilinear resize a dataset")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--no-clahe", action="store_true")
    p.add_argument("--tiles", type=int)
    p.add_argument("--clip-limit", type=float)
    p.add_argument("--bins", type=int)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a U-Net from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config")
    p.add_argument("--depth", type=int)
    p.add_argument("--base", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", type=float)
    p.add_argument("--augment", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="dice / IoU report for a manifest split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=trainer.SPLITS)
    p.add_argument("--checkpoint", help="checkpoint file or run directory")
    p.add_argument("--pred-dir", help="evaluate precomputed masks (same file names) instead")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default="reports")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict a black/white vertebra mask")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--size", type=int, help="resize to SIZE x SIZE for the network")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("overlay", help="truth in red, prediction in blue")
    p.add_argument("--image", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=float, default=0.5)
    p.set_defaults(func=cmd_overlay)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ParameterError, DimensionError, trainer.DatasetError, unet.ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
