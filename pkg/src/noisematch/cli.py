"""Command line entry point: ``noisematch <command> [options]``."""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .errors import DataError, IoError, NoiseMatchError, ShapeError, TrainingDiverged
from .image import ZsConfig, apply_noise, center_crop, psnr, test_card_suite, zs_denoise
from .io import load_model, read_mesh, read_pnm, read_points, save_model, write_pnm, write_points
from .pipeline import (
    ABLATION_FIELDS,
    METRIC_FIELDS,
    STUDIES,
    ExperimentSpec,
    ablate,
    denoise_cloud,
    evaluate,
    gen_data,
    load_dataset,
    parametric_mesh,
    summarize,
    toy_dataset,
    upsample,
    write_csv,
)
from .training import TrainConfig, read_config, train, write_loss_log
from .transport import TriangleMesh

log = logging.getLogger("noisematch")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm")


def _csv_list(text, cast=str):
    return tuple(cast(x) for x in text.split(",") if x.strip())


def _global_options(parser, suppress):
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--seed", type=int, **(kw or {"default": 0}), help="random seed (default 0)")
    parser.add_argument("--config", **(kw or {"default": None}), help="key = value training config file")
    parser.add_argument("--out", **(kw or {"default": "."}), help="output directory (default .)")
    parser.add_argument("--threads", type=int, **(kw or {"default": 1}), help="BLAS threads (default 1)")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisematch", description="Unsupervised point cloud denoising.")
    _global_options(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    shared = argparse.ArgumentParser(add_help=False)
    _global_options(shared, suppress=True)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[shared], help="generate noisy observations of parametric shapes")
    g.add_argument("--shapes", type=_csv_list, default=("sphere", "torus", "gear"))
    g.add_argument("--points", type=lambda s: _csv_list(s, int), default=(1000,))
    g.add_argument("--noise", type=lambda s: _csv_list(s, float), default=(0.02,),
                   help="comma-separated sigma fractions of the bounding-sphere radius")
    g.add_argument("--observations", type=int, default=4)

    t = sub.add_parser("train", parents=[shared], help="train a denoiser on a gen-data directory")
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--lambda-dc", type=float)
    t.add_argument("--loss-metric", choices=("emd", "cd", "dcd"))
    t.add_argument("--steps", type=int)
    t.add_argument("--learning-rate", type=float)
    t.add_argument("--binary", action="store_true", help="write the binary checkpoint encoding")

    d = sub.add_parser("denoise", parents=[shared], help="denoise a point cloud")
    d.add_argument("--in", dest="input", required=True)
    d.add_argument("--model", required=True)
    d.add_argument("--patch-size", type=int, default=1000)
    d.add_argument("--output", help="output file (default <out>/<name>_denoised.xyz)")

    u = sub.add_parser("upsample", parents=[shared], help="upsample by denoising r noisy copies")
    u.add_argument("--in", dest="input", required=True)
    u.add_argument("--model", required=True)
    u.add_argument("--ratio", type=int, default=4)
    u.add_argument("--sigma", type=float, help="noise fraction (default: the training level)")
    u.add_argument("--patch-size", type=int, default=1000)
    u.add_argument("--output")

    e = sub.add_parser("eval", parents=[shared], help="CD / P2M metrics against a clean reference")
    e.add_argument("--pred", nargs="+", required=True)
    e.add_argument("--clean")
    e.add_argument("--mesh")
    e.add_argument("--noise-level", type=float)

    a = sub.add_parser("ablate", parents=[shared], help="run an ablation study grid")
    a.add_argument("--study", choices=sorted(STUDIES), required=True)
    a.add_argument("--data", help="gen-data directory (default: built-in toy set)")
    a.add_argument("--toy-points", type=int, default=1000)
    a.add_argument("--toy-noise", type=float, default=0.03)
    a.add_argument("--toy-shapes", type=_csv_list, default=("sphere", "torus"))
    a.add_argument("--seeds", type=int, default=5, help="number of seeds, starting at --seed")
    a.add_argument("--values", type=_csv_list, help="override the study grid")
    a.add_argument("--epochs", type=int)

    i = sub.add_parser("image-denoise", parents=[shared], help="zero-shot denoise one image")
    i.add_argument("--in", dest="input", required=True)
    i.add_argument("--noise", help="synthesize noise first, e.g. poisson:25 or gaussian:25")
    i.add_argument("--lambda-dc", type=float, default=1.0)
    i.add_argument("--iterations", type=int, default=2000)
    i.add_argument("--learning-rate", type=float, default=1e-3)

    ie = sub.add_parser("image-eval", parents=[shared], help="PSNR of base vs consistency zero-shot runs")
    ie.add_argument("--in", dest="inputs", nargs="*", default=[], help="clean images (PGM/PPM)")
    ie.add_argument("--suite", type=int, default=0, help="also use N synthetic test cards")
    ie.add_argument("--noise", default="gaussian:25")
    ie.add_argument("--iterations", type=int, default=2000)
    ie.add_argument("--lambda-dc", type=float, default=1.0)
    ie.add_argument("--crop", type=int, default=256)
    return p


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create output directory {out}: {exc}") from exc
    return out


def _train_config(args, **overrides) -> TrainConfig:
    values = read_config(args.config) if args.config else {}
    values["seed"] = args.seed
    for key, val in overrides.items():
        if val is not None:
            values[key] = val
    try:
        return TrainConfig.from_mapping(values)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad training config: {exc}") from exc


def cmd_gen_data(args):
    spec = ExperimentSpec(tuple(args.shapes), tuple(args.points), tuple(args.noise),
                          args.observations, args.seed)
    manifest = gen_data(_out_dir(args), spec)
    print(f"wrote {len(manifest['entries'])} shapes to {args.out}")


def cmd_train(args):
    out = _out_dir(args)
    cfg = _train_config(args, epochs=args.epochs, lambda_dc=args.lambda_dc,
                        loss_metric=args.loss_metric, n_steps=args.steps,
                        learning_rate=args.learning_rate)
    data = load_dataset(args.data, with_clean=False)
    levels = [o.noise_level for o in data if o.noise_level is not None]
    extra = {"noise_level": float(np.mean(levels)) if levels else None, "patch_size": cfg.patch_size}
    (out / "train_config.txt").write_text(cfg.to_text(), encoding="utf-8")

    def report(row):
        log.info("epoch %d total %.6g n2n %.6g dc %.6g", row["epoch"], row["total"],
                 row["loss_n2n"], row["loss_dc"])

    try:
        result = train(data, cfg, step_hook=report)
    except TrainingDiverged as exc:
        if exc.params is not None:
            save_model(out / "model.ckpt", exc.params, args.binary, extra)
        write_loss_log(out / "loss_log.csv", exc.log)
        raise
    save_model(out / "model.ckpt", result.params, args.binary, extra)
    write_loss_log(out / "loss_log.csv", result.log)
    last = result.log[-1] if result.log else None
    print(f"trained {cfg.epochs} epochs; final total loss "
          f"{last['total'] if last else float('nan'):.6g}; model at {out / 'model.ckpt'}")


def _output_path(args, suffix):
    if args.output:
        return Path(args.output)
    src = Path(args.input)
    return _out_dir(args) / f"{src.stem}_{suffix}{src.suffix or '.xyz'}"


def cmd_denoise(args):
    params, _ = load_model(args.model)
    pts = read_points(args.input)
    den = denoise_cloud(pts, params, args.patch_size, args.seed)
    path = _output_path(args, "denoised")
    write_points(path, den)
    print(f"denoised {len(den)} points -> {path}")


def cmd_upsample(args):
    params, extra = load_model(args.model)
    sigma = args.sigma if args.sigma is not None else extra.get("noise_level")
    if sigma is None:
        raise DataError("checkpoint has no training noise level; pass --sigma")
    pts = read_points(args.input)
    dense = upsample(pts, args.ratio, sigma, params, args.seed, args.patch_size)
    path = _output_path(args, f"x{args.ratio}")
    write_points(path, dense)
    print(f"upsampled {len(pts)} -> {len(dense)} points -> {path}")


def cmd_eval(args):
    from .errors import NoReference

    if not args.clean:
        raise NoReference("eval needs --clean")
    clean = read_points(args.clean)
    mesh = TriangleMesh(*read_mesh(args.mesh)) if args.mesh else None
    preds = {Path(p).stem: read_points(p) for p in args.pred}
    rows = evaluate(preds, clean, args.noise_level, mesh)
    out = _out_dir(args)
    write_csv(out / "metrics.csv", rows, METRIC_FIELDS)
    write_csv(out / "metrics_summary.csv", summarize(rows))
    for r in rows:
        print(f"{r['shape_id']}: cd_x1e4={r['cd_x1e4']:.6g}"
              + (f" p2m_x1e4={r['p2m_x1e4']:.6g}" if r["p2m_x1e4"] != "" else ""))


def cmd_ablate(args):
    key, default_values = STUDIES[args.study]
    cast = str if key == "loss_metric" else (int if key == "n_steps" else float)
    values = tuple(cast(v) for v in args.values) if args.values else default_values
    base = _train_config(args, epochs=args.epochs)
    meshes = {}
    if args.data:
        dataset = load_dataset(args.data, with_clean=True)
    else:
        dataset = toy_dataset(args.toy_shapes, args.toy_points, args.toy_noise, 4, args.seed)
        for o in dataset:
            meshes[o.source_id] = TriangleMesh(*parametric_mesh(o.source_id))
        base = base.replace(patch_size=min(base.patch_size, args.toy_points))
    seeds = tuple(range(args.seed, args.seed + args.seeds))
    rows = ablate(args.study, dataset, base, seeds, values, meshes,
                  progress=lambda r: log.info("%s=%s seed %d %s cd %.4g", args.study, r["value"],
                                              r["seed"], r["shape_id"], r["cd_x1e4"]))
    path = _out_dir(args) / f"ablate_{args.study}.csv"
    write_csv(path, rows, ABLATION_FIELDS)
    print(f"{len(rows)} rows -> {path}")


def _read_image(path):
    img = read_pnm(path)
    if img.ndim == 3 and np.allclose(img[..., 0], img[..., 1]) and np.allclose(img[..., 1], img[..., 2]):
        return img[..., 0]
    return img


def cmd_image_denoise(args):
    img = _read_image(args.input)
    noisy = apply_noise(img, args.noise, args.seed) if args.noise else img
    cfg = ZsConfig(args.iterations, args.learning_rate, args.lambda_dc, seed=args.seed)
    den = zs_denoise(noisy, cfg)
    target = Path(args.out)
    if target.suffix.lower() not in IMAGE_SUFFIXES:
        target = _out_dir(args) / f"{Path(args.input).stem}_denoised{'.ppm' if den.ndim == 3 else '.pgm'}"
    write_pnm(target, den)
    msg = f"denoised -> {target}"
    if args.noise:
        msg += f" (PSNR noisy {psnr(noisy, img):.2f} dB, denoised {psnr(den, img):.2f} dB)"
    print(msg)


def cmd_image_eval(args):
    images = [(Path(p).stem, _read_image(p)) for p in args.inputs]
    images += [(f"card{k}", im) for k, im in enumerate(test_card_suite(args.suite, args.crop, args.seed))]
    if not images:
        raise DataError("image-eval needs --in images or --suite N")
    rows = []
    for k, (name, img) in enumerate(images):
        img = center_crop(img, args.crop)
        noisy = apply_noise(img, args.noise, args.seed + k)
        base = zs_denoise(noisy, ZsConfig(args.iterations, lambda_dc=0.0, seed=args.seed))
        dc = zs_denoise(noisy, ZsConfig(args.iterations, lambda_dc=args.lambda_dc, seed=args.seed))
        rows.append({"image_id": name, "psnr_noisy": psnr(noisy, img),
                     "psnr_denoised_base": psnr(base, img), "psnr_denoised_dc": psnr(dc, img)})
        log.info("%s: noisy %.2f base %.2f dc %.2f", name, *list(rows[-1].values())[1:])
    path = _out_dir(args) / "image_eval.csv"
    write_csv(path, rows, ("image_id", "psnr_noisy", "psnr_denoised_base", "psnr_denoised_dc"))
    print(f"{len(rows)} images -> {path}")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "upsample": cmd_upsample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "image-denoise": cmd_image_denoise,
    "image-eval": cmd_image_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    from threadpoolctl import threadpool_limits

    try:
        with threadpool_limits(limits=max(1, args.threads)), warnings.catch_warnings():
            warnings.simplefilter("default")
            COMMANDS[args.command](args)
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (DataError, IoError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NoiseMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
