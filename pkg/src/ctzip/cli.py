"""``ctzip`` command-line front end.

Exit codes: 0 success, 1 usage error, 2 data or format error.
"""

from __future__ import annotations

import argparse
import contextlib
import glob
import io
import os
import sys
from dataclasses import fields

import numpy as np

from . import codec, metrics
from .errors import ConfigError, CtzipError
from .imaging import (BinaryImage, FloatImage, binarize, denormalize, load_pgm, mean_shift_filter, normalize,
                      otsu_threshold, porosity, save_pgm)
from .models import DEFAULT_CODEBOOK, build_model, load_checkpoint, save_checkpoint
from .synthdata import PAPER_POROSITY, PorousSpec, gen_noisy_gray, porous_dataset, write_dataset
from .training import TrainConfig, export_loss_csv, split_dataset, train

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def read_config(path: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def _pgm_files(directory: str) -> list[str]:
    files = sorted(glob.glob(os.path.join(directory, "*.pgm")))
    if not files:
        raise FileNotFoundError(f"no .pgm files in {directory}")
    return files


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = PorousSpec(width=args.size, height=args.size, target_porosity=args.porosity,
                      correlation_length=args.correlation, noise_sigma=args.noise if args.gray else 0.0,
                      seed=args.seed)
    images = porous_dataset(args.count, spec)
    extra = {}
    if args.gray:
        images = [gen_noisy_gray(b, args.solid, args.pore, args.noise, args.seed + i) for i, b in enumerate(images)]
        extra = {"gray": True, "solid_level": args.solid, "pore_level": args.pore}
    write_dataset(images, args.output, spec, extra)
    print(f"wrote {len(images)} images to {args.output}")
    return EXIT_OK


_TRAIN_KEYS = {"epochs": int, "batch": int, "lr": float, "seed": int, "kind": str, "level": str,
               "codebook": int, "split": float, "input": str, "output": str, "log": str}


def cmd_train(args) -> int:
    conf = {}
    if args.config:
        for key, value in read_config(args.config).items():
            if key not in _TRAIN_KEYS:
                raise UsageError(f"{args.config}: unknown key {key!r}")
            conf[key] = _TRAIN_KEYS[key](value)
    for key in _TRAIN_KEYS:
        v = getattr(args, key, None)
        if v is not None:
            conf[key] = v
    for required in ("input", "output"):
        if required not in conf:
            raise UsageError(f"train: --{required} is required (flag or config key)")
    kind = conf.get("kind", "dcnn")
    level = conf.get("level", "l1")
    if kind not in ("dcnn", "vqvae"):
        raise UsageError(f"train: unknown kind {kind!r}")
    cfg = TrainConfig(epochs=conf.get("epochs", 100), batch_size=conf.get("batch", 128),
                      lr=conf.get("lr", 1e-3), seed=conf.get("seed", 0),
                      split_fraction=conf.get("split", 0.8), kind=kind, level=level,
                      codebook_size=conf.get("codebook"), record_time=not args.no_timing)

    images = [normalize(load_pgm(p)) for p in _pgm_files(conf["input"])]
    if len(images) >= 2:
        train_set, val_set = split_dataset(images, cfg.split_fraction, cfg.seed)
    else:
        train_set, val_set = images, []
    size = images[0].width
    if any(im.shape != (size, size) for im in images):
        raise ConfigError("training images must all be square and the same size")
    k = cfg.codebook_size or (DEFAULT_CODEBOOK.get(level) if kind == "vqvae" else None)
    model = build_model(kind, level, size, k, seed=cfg.seed)
    log = train(model, train_set, cfg, val_set,
                progress=(lambda e: print(f"epoch {e.epoch} train {e.train_loss:.6f} val {e.val_loss:.6f}",
                                          file=sys.stderr)) if args.verbose else None)
    save_checkpoint(model, conf["output"])
    log_path = conf.get("log") or os.path.splitext(conf["output"])[0] + ".loss.csv"
    export_loss_csv(log, log_path)
    print(f"trained {kind}/{level} for {cfg.epochs} epochs: final train loss {log.epochs[-1].train_loss:.6f}")
    return EXIT_OK


def cmd_compress(args) -> int:
    model = load_checkpoint(args.checkpoint)
    img = load_pgm(args.input)
    art = codec.compress(model, img)
    codec.save_artifact(art, args.output)
    print(f"{args.input}: {img.width * img.height} -> {art.nbytes} bytes "
          f"(ratio {codec.compression_ratio(img, art):.2f}:1)")
    return EXIT_OK


def cmd_decompress(args) -> int:
    model = load_checkpoint(args.checkpoint)
    art = codec.load_artifact(args.input)
    save_pgm(denormalize(codec.decompress(model, art)), args.output)
    return EXIT_OK


def cmd_eval(args) -> int:
    a, b = load_pgm(args.a), load_pgm(args.b)
    report = metrics.evaluate_gray_pair(a, b, args.max, ids=(args.a, args.b))
    if args.output:
        exists = os.path.exists(args.output) and os.path.getsize(args.output) > 0
        with open(args.output, "a" if args.append else "w", newline="") as fh:
            metrics.write_reports_csv([report], fh, header=not (args.append and exists))
    else:
        metrics.write_reports_csv([report], sys.stdout)
    if args.laplacian:
        scale = 255.0 if args.max == 255 else 1.0
        diff = metrics.laplacian_diff_map(a.data / (255.0 / scale), b.data / (255.0 / scale))
        gray, lo, hi = metrics.rescale_to_gray(diff)
        save_pgm(gray, args.laplacian)
        with open(os.path.splitext(args.laplacian)[0] + ".scale.txt", "w") as fh:
            fh.write(f"min={lo!r}\nmax={hi!r}\nmapping=gray=round((value-min)/(max-min)*255)\n")
    return EXIT_OK


def cmd_binarize(args) -> int:
    img = load_pgm(args.input)
    if not args.no_filter:
        img = mean_shift_filter(img, args.spatial_radius, args.range_radius, args.max_iter)
    t = args.threshold if args.threshold is not None else otsu_threshold(img)
    binary = binarize(img, t, invert=args.invert)
    save_pgm(binary, args.output)
    print(f"threshold={t} porosity={porosity(binary):.4f}")
    return EXIT_OK


def cmd_otsu(args) -> int:
    img = load_pgm(args.input)
    t = otsu_threshold(img)
    binary = binarize(img, t, invert=args.invert)
    if args.output:
        save_pgm(binary, args.output)
    print(f"threshold={t} porosity={porosity(binary):.4f}")
    return EXIT_OK


def _maybe_porosity(path: str):
    try:
        gray = load_pgm(path)
    except (OSError, CtzipError):
        return None
    if not set(np.unique(gray.data).tolist()) <= {0, 255}:
        return None
    return porosity(BinaryImage(gray.data == 255))


def build_report(paths: list[str], labels: list[str] | None = None) -> list[list[str]]:
    """Rows shaped like the paper's tables: metrics down, models across.

    Per file: mean MSE, PSNR of that mean MSE, mean MSLE, and mean
    porosity of the decoded images when they are binary PGMs. The
    ``original`` column holds the porosity of the reference images.
    """
    labels = labels or [os.path.splitext(os.path.basename(p))[0] for p in paths]
    if len(labels) != len(paths):
        raise UsageError("report: number of labels must match number of inputs")
    cols, orig_por = [], []
    for path in paths:
        reps = metrics.read_reports_csv(path)
        if not reps:
            raise ConfigError(f"{path}: no metric rows")
        maxes = {r.max_intensity for r in reps}
        if len(maxes) != 1:
            raise ConfigError(f"{path}: mixed max-intensity conventions")
        m = float(np.mean([r.mse for r in reps]))
        por = [_maybe_porosity(r.image_ids[1]) for r in reps]
        orig = [_maybe_porosity(r.image_ids[0]) for r in reps]
        orig_por += [p for p in orig if p is not None]
        cols.append({
            "max": metrics._fmt_max(maxes.pop()),
            "mse": m,
            "psnr": metrics.psnr(m, reps[0].max_intensity),
            "msle": float(np.mean([r.msle for r in reps])),
            "porosity": float(np.mean(por)) if None not in por else None,
        })

    def fmt(v):
        if v is None:
            return ""
        return v if isinstance(v, str) else f"{v:.6g}"

    rows = [["metric", "original"] + labels,
            ["max"] + [""] + [c["max"] for c in cols],
            ["MSE", ""] + [fmt(c["mse"]) for c in cols],
            ["PSNR (dB)", ""] + [fmt(c["psnr"]) for c in cols],
            ["MSLE", ""] + [fmt(c["msle"]) for c in cols]]
    if any(c["porosity"] is not None for c in cols):
        rows.append(["Porosity %", fmt(float(np.mean(orig_por)) if orig_por else None)]
                    + [fmt(c["porosity"]) for c in cols])
    return rows


def cmd_report(args) -> int:
    import csv
    rows = build_report(args.input, args.labels)
    out = open(args.output, "w", newline="") if args.output else contextlib.nullcontext(sys.stdout)
    with out as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctzip", description="Autoencoder compression and quality metrics for CT slices.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic porous dataset")
    s.add_argument("--output", required=True)
    s.add_argument("--count", type=int, default=256)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--porosity", type=float, default=PAPER_POROSITY)
    s.add_argument("--correlation", type=int, default=PorousSpec.correlation_length)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--gray", action="store_true", help="write noisy 8-bit renderings instead of binary")
    s.add_argument("--noise", type=float, default=20.0)
    s.add_argument("--solid", type=float, default=180.0)
    s.add_argument("--pore", type=float, default=60.0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on a directory of PGM slices")
    t.add_argument("--config")
    t.add_argument("--input")
    t.add_argument("--output", help="checkpoint path")
    t.add_argument("--log", help="loss CSV path (default: <output>.loss.csv)")
    t.add_argument("--kind", choices=["dcnn", "vqvae"])
    t.add_argument("--level", choices=["l1", "l2", "l3"])
    t.add_argument("--codebook", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--split", type=float)
    t.add_argument("--no-timing", action="store_true", help="record 0 seconds per epoch for byte-stable logs")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("compress", help="image + checkpoint -> .ctl artifact")
    c.add_argument("--input", required=True)
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--output", required=True)
    c.set_defaults(func=cmd_compress)

    d = sub.add_parser("decompress", help="artifact + checkpoint -> PGM")
    d.add_argument("--input", required=True)
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--output", required=True)
    d.set_defaults(func=cmd_decompress)

    e = sub.add_parser("eval", help="MSE, PSNR and MSLE of an image pair")
    e.add_argument("--a", required=True, help="original image")
    e.add_argument("--b", required=True, help="decoded image")
    e.add_argument("--max", type=int, choices=[1, 255], default=255)
    e.add_argument("--output", help="metrics CSV (default stdout)")
    e.add_argument("--append", action="store_true")
    e.add_argument("--laplacian", help="write the Laplacian difference map here")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("binarize", help="mean-shift filter then threshold")
    b.add_argument("--input", required=True)
    b.add_argument("--output", required=True)
    b.add_argument("--threshold", type=int, help="manual threshold (default: Otsu of the filtered image)")
    b.add_argument("--spatial-radius", type=int, default=2)
    b.add_argument("--range-radius", type=float, default=20.0)
    b.add_argument("--max-iter", type=int, default=10)
    b.add_argument("--no-filter", action="store_true")
    b.add_argument("--invert", action="store_true", help="treat bright pixels as pore")
    b.set_defaults(func=cmd_binarize)

    o = sub.add_parser("otsu", help="Otsu threshold report")
    o.add_argument("--input", required=True)
    o.add_argument("--output", help="write the thresholded image")
    o.add_argument("--invert", action="store_true")
    o.set_defaults(func=cmd_otsu)

    r = sub.add_parser("report", help="aggregate metric CSVs into a models x metrics table")
    r.add_argument("--input", nargs="+", required=True)
    r.add_argument("--labels", nargs="+")
    r.add_argument("--output")
    r.set_defaults(func=cmd_report)
    return p


def _thread_limit():
    value = os.environ.get("CTZIP_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"CTZIP_THREADS must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError("CTZIP_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("ctzip: a command is required")
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"ctzip: configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CtzipError, OSError, ValueError) as exc:
        print(f"ctzip: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
