"""``polysnake`` command line: gen-data, train, infer, eval, render, grad-check.

Exit codes: 0 success, 1 runtime or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import acm, backbone, data, gradcheck, priors, trainer
from .geometry import Polygon, iou, rasterize

COLORS = {"init": (0, 0, 255), "gt": (0, 255, 0), "pred": (255, 255, 0)}
STROKE = 2


class CliError(Exception):
    pass


def read_config(path) -> list[str]:
    """``key = value`` lines as argv tokens; ``#`` starts a comment."""
    tokens = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        low = value.lower()
        if low in ("true", "yes", "on"):
            tokens.append(flag)
        elif low in ("false", "no", "off"):
            continue
        else:
            tokens += [flag, value]
    return tokens


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_acm_flags(p):
    p.add_argument("--max-iters", type=_positive_int, default=200)
    p.add_argument("--acm-step", type=float, default=0.5, help="snake step (px of the fastest node)")
    p.add_argument("--nodes", type=int, default=60, help="snake node count L")
    p.add_argument("--init-radius", type=float, default=0.2, help="init circle radius / image size")


def _acm_options(args) -> acm.AcmOptions:
    return acm.AcmOptions(max_iters=args.max_iters, step_size=args.acm_step, L=args.nodes,
                          init_radius_frac=args.init_radius)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polysnake", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file; explicit flags take precedence")
        return p

    p = command("gen-data", "write a synthetic blob dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=250)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--texture", type=float, default=0.5)
    p.add_argument("--offcenter-frac", type=float, default=0.5)
    p.add_argument("--roughness", type=float, default=0.1)

    p = command("train", "train the backbone")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="report JSON path (default: <out>.report.json)")
    p.add_argument("--test", help="optional held-out dataset directory")
    p.add_argument("--epochs", type=_positive_int, default=15)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--c", type=float, default=1.0)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--optimizer", choices=trainer.OPTIMIZERS, default="adam")
    p.add_argument("--margin-rule", choices=("literal", "hinge"), default="hinge")
    p.add_argument("--loss-scale", type=float, default=1.0)
    p.add_argument("--update-per-init", action="store_true")
    p.add_argument("--compute-dtype", choices=tuple(trainer.DTYPES), default="float32")
    p.add_argument("--base-channels", type=_positive_int, default=backbone.ArchConfig.desk().base_channels)
    p.add_argument("--encoder-levels", type=int, default=5)
    p.add_argument("--decoder-levels", type=int, default=4)
    p.add_argument("--output-scale", type=float, default=backbone.ArchConfig.desk().output_scale)
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--no-train-iou", action="store_true", help="skip per-epoch train IoU tracking")
    _add_acm_flags(p)

    p = command("infer", "segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="predicted polygon JSON")
    p.add_argument("--gt", help="ground-truth polygon JSON; selects the start by IoU")
    p.add_argument("--dump-maps", help="directory for the four prior-map PNGs")
    p.add_argument("--trace", help="CSV energy trace of the selected start")
    _add_acm_flags(p)

    p = command("eval", "mean IoU over a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--csv", help="per-sample CSV output")
    p.add_argument("--mode", choices=("multi", "center"), default="multi")
    p.add_argument("--min-iou", type=float, help="exit 1 if the mean IoU falls below this")
    _add_acm_flags(p)

    p = command("render", "draw contours over an image")
    p.add_argument("--image", required=True)
    p.add_argument("--pred", help="predicted polygon JSON (yellow)")
    p.add_argument("--gt", help="ground-truth polygon JSON (green)")
    p.add_argument("--init", nargs="*", default=[], help="initial polygon JSON files (blue)")
    p.add_argument("--out", required=True)

    p = command("grad-check", "finite-difference oracles for all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write the results as JSON")
    p.add_argument("--fault", choices=gradcheck.COMPONENTS, help=argparse.SUPPRESS)
    return parser


def parse_args(argv, parser=None):
    parser = parser or build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            extra = read_config(args.config)
        except CliError as exc:
            parser.error(str(exc))
        # config first so that explicit flags, parsed later, win
        argv = list(argv)
        args = parser.parse_args([argv[0]] + extra + argv[1:])
    return args


def print_config(args):
    for key, value in sorted(vars(args).items()):
        if key != "fault":
            print(f"{key} = {value}")
    sys.stdout.flush()


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255
    except OSError as exc:
        raise CliError(f"cannot read image {path}: {exc}") from None


def load_polygon(path) -> Polygon:
    try:
        return Polygon.load(path)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"cannot read polygon {path}: {exc}") from None


def load_ckpt(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return trainer.load_checkpoint(path)


def cmd_gen_data(args) -> int:
    cfg = data.SynthConfig(n=args.n, size=args.size, texture=args.texture,
                           offcenter_frac=args.offcenter_frac, roughness=args.roughness, seed=args.seed)
    samples = data.generate(cfg)
    try:
        data.save_dir(samples, args.out, cfg)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {args.out}: {exc.strerror or exc}") from None
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    arch = backbone.ArchConfig(encoder_levels=args.encoder_levels, decoder_levels=args.decoder_levels,
                               base_channels=args.base_channels, output_scale=args.output_scale,
                               input_size=_dataset_size(args.data))
    cfg = trainer.TrainConfig(epochs=args.epochs, step_size=args.lr, C=args.c, batch=args.batch,
                              seed=args.seed, acm=_acm_options(args), loss_scale=args.loss_scale,
                              margin_rule=args.margin_rule, optimizer=args.optimizer,
                              update_per_init=args.update_per_init, compute_dtype=args.compute_dtype,
                              arch=arch, checkpoint_every=args.checkpoint_every,
                              track_train_iou=not args.no_train_iou)
    train_set = data.load_dir(args.data)
    test_set = data.load_dir(args.test) if args.test else None
    _, report = trainer.train(train_set, cfg, test_set, log=print, checkpoint_path=args.out)
    report_path = args.report or f"{args.out}.report.json"
    report.save(report_path)
    print(f"checkpoint {args.out}, report {report_path}")
    return 0


def _dataset_size(path) -> int:
    pngs = sorted(Path(path).glob("*.png"))
    if not pngs:
        raise CliError(f"no images found in {path}")
    with Image.open(pngs[0]) as im:
        return im.size[0]


def _maps_for(params, image):
    size = params.arch.input_size
    if image.shape[:2] != (size, size):
        raise CliError(f"image is {image.shape[1]}x{image.shape[0]}, checkpoint expects {size}x{size}")
    maps, _ = backbone.forward(params, image, np.float32)
    return maps


def cmd_infer(args) -> int:
    params, _ = load_ckpt(args.ckpt)
    image = load_image(args.image)
    maps = _maps_for(params, image)
    opts = _acm_options(args)
    inits = acm.init_polygons(maps.width, maps.height, opts.init_radius_frac, opts.L)
    runs = [acm.evolve(init, maps, opts) for init in inits]
    if args.gt:
        gt_mask = rasterize(load_polygon(args.gt), maps.width, maps.height)
        winner, score = acm.select_best([p for p, _ in runs], gt_mask)
        print(f"winner {winner}  iou {score:.6f}")
    else:
        winner = acm.select_best_unsupervised([float(t[-1]) for _, t in runs])
        print(f"winner {winner}  energy {float(runs[winner][1][-1]):.6f}")
    runs[winner][0].save(args.out)
    if args.trace:
        acm.write_trace_csv(runs[winner][1], args.trace)
    if args.dump_maps:
        priors.dump_maps(maps, args.dump_maps)
    return 0


def cmd_eval(args) -> int:
    params, _ = load_ckpt(args.ckpt)
    samples = data.load_dir(args.data)
    if not samples:
        raise CliError(f"no samples found in {args.data}")
    mean, records = trainer.evaluate(params, samples, _acm_options(args), mode=args.mode)
    print(f"mean_iou {mean:.6f}  ({len(records)} samples, {args.mode})")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "iou", "winner", "energy"])
            for r in records:
                w.writerow([r.id, repr(r.iou), r.winner, repr(r.energy)])
    if args.min_iou is not None and mean < args.min_iou:
        print(f"mean IoU {mean:.6f} below --min-iou {args.min_iou}", file=sys.stderr)
        return 1
    return 0


def draw_polygon(draw: ImageDraw.ImageDraw, poly: Polygon, color) -> None:
    pts = [tuple(map(float, p)) for p in poly.nodes]
    draw.line(pts + [pts[0]], fill=color, width=STROKE)


def render(image: np.ndarray, pred=None, gt=None, inits=()) -> Image.Image:
    """Overlay with blue starts, green ground truth and a yellow prediction on top."""
    canvas = Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    for poly in inits:
        draw_polygon(draw, poly, COLORS["init"])
    if gt is not None:
        draw_polygon(draw, gt, COLORS["gt"])
    if pred is not None:
        draw_polygon(draw, pred, COLORS["pred"])
    return canvas


def cmd_render(args) -> int:
    image = load_image(args.image)
    pred = load_polygon(args.pred) if args.pred else None
    gt = load_polygon(args.gt) if args.gt else None
    inits = [load_polygon(p) for p in args.init]
    try:
        render(image, pred, gt, inits).save(args.out)
    except OSError as exc:
        raise CliError(f"cannot write {args.out}: {exc}") from None
    print(f"wrote {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(args.seed, fault=args.fault)
    for name, r in results.items():
        status = "ok" if r["passed"] else "FAIL"
        print(f"{name:10s} max_rel_err {r['max_rel_err']:.3e}  threshold {r['threshold']:.0e}  {status}")
    if args.report:
        Path(args.report).write_text(json.dumps(results, indent=2))
    failed = [n for n, r in results.items() if not r["passed"]]
    if failed:
        print(f"gradient check failed: {', '.join(failed)}", file=sys.stderr)
        return 1
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "infer": cmd_infer, "eval": cmd_eval,
            "render": cmd_render, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parse_args(argv, parser)
    except SystemExit as exc:
        return int(exc.code or 0)
    print_config(args)
    try:
        return COMMANDS[args.command](args)
    except (CliError, trainer.CheckpointError, ValueError, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
