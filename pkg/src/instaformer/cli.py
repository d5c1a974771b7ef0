"""Command-line entry point.

Exit codes: 0 success, 2 usage/config/I-O errors, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import engine as E
from .data import (
    DOMAINS,
    SceneSpec,
    make_domain,
    read_dataset,
    read_ppm,
    write_dataset,
    write_ppm,
)
from .engine import NonFiniteError, Tensor
from .evaluate import evaluate_samples, reconstruct_images, style_codes, translate_images
from .gradsuite import format_table, run_suite
from .metrics import palette_distance
from .trainer import TrainConfig, load_state, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SEPARATOR = 2

logger = logging.getLogger("instaformer")


class UsageError(Exception):
    pass


def _fail(msg: str, code: int = EXIT_USAGE) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _config_for_checkpoint(ckpt: Path, explicit: str | None) -> TrainConfig:
    """Architecture comes from --config, else run.json beside the checkpoint, else defaults."""
    if explicit:
        return config_mod.load(explicit).train
    run_json = ckpt.parent / "run.json"
    if run_json.exists():
        return config_mod.load(run_json).train
    return TrainConfig()


def _load_state(args):
    ckpt = Path(args.ckpt)
    if not ckpt.exists():
        raise UsageError(f"checkpoint not found: {ckpt}")
    cfg = _config_for_checkpoint(ckpt, getattr(args, "config", None))
    try:
        return load_state(ckpt, cfg)
    except ValueError as err:
        raise UsageError(f"incompatible checkpoint {ckpt}: {err}") from None


# -- subcommands -------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    domains = [d.strip() for d in args.domains.split(",") if d.strip()]
    for d in domains:
        if d not in DOMAINS:
            raise UsageError(f"unknown domain {d!r} (expected some of {','.join(DOMAINS)})")
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    try:
        SceneSpec(seed=0, image_size=args.size)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(args.out)
    try:
        for d in domains:
            samples = make_domain(d, args.n, args.seed, args.size, args.max_instances)
            write_dataset(samples, out / d)
            n_boxes = sum(len(s.boxes) for s in samples)
            print(f"{out / d}: {len(samples)} images, {n_boxes} boxes, {args.size}px, domain {d}")
    except OSError as err:
        raise UsageError(f"cannot write dataset: {err}") from None
    return EXIT_OK


def cmd_train(args) -> int:
    run = config_mod.load(args.config)
    paths = run.paths
    data_a = args.data_a or paths.data_a
    data_b = args.data_b or paths.data_b
    out = args.out or paths.out
    if not (data_a and data_b and out):
        raise UsageError("need --data-a, --data-b and --out (or a 'paths' section in the config)")
    run = config_mod.RunConfig(run.train, config_mod.Paths(str(data_a), str(data_b), str(out)))
    try:
        samples_a, samples_b = read_dataset(data_a), read_dataset(data_b)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read dataset: {err}") from None
    if not samples_a or not samples_b:
        raise UsageError("training datasets must not be empty")
    size = run.train.backbone.image_size
    for s in samples_a + samples_b:
        if s.image.shape[-1] != size or s.image.shape[-2] != size:
            raise UsageError(f"image {s.id} is {s.image.shape[-2:]}, config expects {size}px")
    try:
        state, reports = train(run.train, samples_a, samples_b, out, resume=args.resume,
                               run_record=run.as_dict())
    except NonFiniteError as err:
        return _fail(str(err), EXIT_NUMERIC)
    except ValueError as err:
        raise UsageError(str(err)) from None
    if reports:
        last = reports[-1]
        print(f"trained to step {state.step}: total {last.total:.4f}, recon_img {last.recon_img:.4f}, "
              f"nce_global {last.nce_global:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_translate(args) -> int:
    state = _load_state(args)
    try:
        samples = read_dataset(args.input)
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read input: {err}") from None
    if not samples:
        raise UsageError(f"no images in {args.input}")
    images = np.stack([s.image for s in samples])
    size = state.cfg.backbone.image_size
    if images.shape[-1] != size:
        raise UsageError(f"input images are {images.shape[-1]}px, checkpoint expects {size}px")
    n, style_dim = len(samples), state.cfg.backbone.style_dim
    if args.style_from:
        ref = read_ppm(args.style_from)
        if ref.shape[-1] != size:
            raise UsageError(f"style image is {ref.shape[-1]}px, expected {size}px")
        with E.no_grad(), E.default_dtype(state.dtype):
            code = state.model.style_encoder(Tensor(ref[None].astype(state.dtype))).data
        s = np.repeat(code.astype(np.float64), n, axis=0)
    else:
        s = style_codes(style_dim, n, args.style_seed)
    boxes = [list(smp.boxes) for smp in samples] if args.boxes == "on" else None
    y_hat = translate_images(state, images, s, boxes)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    for smp, img in zip(samples, y_hat):
        write_ppm(out / "images" / f"{smp.id}.ppm", img)
    print(f"translated {n} images into {out / 'images'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    state = _load_state(args)
    try:
        samples_a = read_dataset(args.data_a)
        samples_b = read_dataset(args.data_b) if args.data_b else []
    except (OSError, ValueError) as err:
        raise UsageError(f"cannot read dataset: {err}") from None
    if not samples_a:
        raise UsageError(f"no images in {args.data_a}")
    ev = evaluate_samples(state, samples_a, args.style_seed)
    report = {"aggregate": ev["aggregate"], "images": ev["images"]}
    if samples_b:
        report["reference_B"] = {
            "palette_A": float(np.mean([palette_distance(s.image, "A") for s in samples_b])),
            "palette_B": float(np.mean([palette_distance(s.image, "B") for s in samples_b])),
        }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report, indent=2) + "\n")
    agg = ev["aggregate"]
    ins = agg["instance_ssim"]
    ins_text = "n/a" if ins is None else f"{ins:.4f}"
    print(f"ssim {agg['ssim']:.4f}  instance_ssim {ins_text}  "
          f"palette_B {agg['palette_B']:.4f} (inputs {agg['input_palette_B']:.4f})")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = run_suite(args.seed)
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        return _fail(f"gradient checks failed: {', '.join(failed)}", EXIT_NUMERIC)
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def montage(rows: list[list[np.ndarray]], sep: int = SEPARATOR, fill: float = 1.0) -> np.ndarray:
    """Tile equal-sized 3×H×W images into a grid with ``sep``-pixel separators."""
    h, w = rows[0][0].shape[1:]
    cols = len(rows[0])
    H = len(rows) * h + (len(rows) - 1) * sep
    W = cols * w + (cols - 1) * sep
    canvas = np.full((3, H, W), fill)
    for r, row in enumerate(rows):
        for c, img in enumerate(row):
            y0, x0 = r * (h + sep), c * (w + sep)
            canvas[:, y0:y0 + h, x0:x0 + w] = img
    return canvas


def moving_average(values: np.ndarray, window: int = 10) -> np.ndarray:
    c = np.cumsum(np.insert(values, 0, 0.0))
    out = np.empty(len(values))
    for i in range(len(values)):
        lo = max(0, i + 1 - window)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def cmd_report(args) -> int:
    run = Path(args.run)
    metrics_csv = run / "metrics.csv"
    if not metrics_csv.exists():
        raise UsageError(f"no metrics.csv in {run}")
    with open(metrics_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = ["total", "recon_img", "nce_global"]
    series = {k: moving_average(np.array([float(r[k]) for r in rows])) for k in keys}
    with open(out / "loss_curve.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"{k}_ma10" for k in keys])
        for i, r in enumerate(rows):
            w.writerow([r["step"]] + [f"{series[k][i]:.6g}" for k in keys])
    print(f"wrote {out / 'loss_curve.csv'} ({len(rows)} steps)")

    ckpt = run / "final.ifck"
    run_json = run / "run.json"
    if ckpt.exists() and run_json.exists():
        cfg = config_mod.load(run_json)
        data_a = args.data_a or cfg.paths.data_a
        if data_a:
            state = load_state(ckpt, cfg.train)
            samples = read_dataset(data_a)[:args.rows]
            images = np.stack([s.image for s in samples])
            y_hat = translate_images(state, images, style_codes(cfg.train.backbone.style_dim,
                                                                len(samples), args.style_seed))
            rec = reconstruct_images(state, images)
            grid = montage([[x, y, r] for x, y, r in zip(images, y_hat, rec)])
            write_ppm(out / "montage.ppm", grid)
            print(f"wrote {out / 'montage.ppm'} ({grid.shape[2]}×{grid.shape[1]})")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="instaformer", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic two-domain datasets")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=16)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--domains", default="A,B")
    g.add_argument("--max-instances", type=int, default=4)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--data-a")
    t.add_argument("--data-b")
    t.add_argument("--out")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="translate a dataset directory")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--input", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config")
    style = tr.add_mutually_exclusive_group()
    style.add_argument("--style-seed", type=int, default=0)
    style.add_argument("--style-from")
    tr.add_argument("--boxes", choices=("on", "off"), default="off")
    tr.set_defaults(func=cmd_translate)

    ev = sub.add_parser("eval", help="write metrics.json for a checkpoint")
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--data-a", required=True)
    ev.add_argument("--data-b")
    ev.add_argument("--out", required=True)
    ev.add_argument("--config")
    ev.add_argument("--style-seed", type=int, default=0)
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("grad-check", help="finite-difference gradient suite")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_grad_check)

    rp = sub.add_parser("report", help="loss-curve CSV and image montage for a run")
    rp.add_argument("--run", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--data-a")
    rp.add_argument("--rows", type=int, default=4)
    rp.add_argument("--style-seed", type=int, default=0)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as err:
        return _fail(str(err))
    except NonFiniteError as err:
        return _fail(str(err), EXIT_NUMERIC)


if __name__ == "__main__":
    sys.exit(main())
