"""``terranet`` command line: synth, train, predict, eval, baseline, sweep, gradcheck."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import baseline as morph
from . import evaluation as ev
from .config import ConfigError, load_config
from .core import NumericError
from .net import CheckpointError, NetConfig, load_checkpoint, network_gradient_check
from .pipeline import infer_scene, make_training_set, train
from .pointcloud import CloudFormatError, load_cloud, read_xyz_table, write_cloud, write_xyz_text
from .synth import gen_scene, split_scene

log = logging.getLogger("terranet")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_NET = NetConfig([8, 8, 16], [8, 16], [16, 1])


class OutputExists(FileExistsError):
    pass


def _claim(paths, force: bool) -> None:
    """Refuse to overwrite existing outputs unless forced."""
    for p in paths:
        if Path(p).exists() and not force:
            raise OutputExists(f"{p} exists (use --force to overwrite)")


def _config(args):
    return load_config(args.config, args.set or (), args.seed, args.workers)


def cmd_synth(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    ext = ".xyz" if args.format == "xyz-text" else ".pct"
    targets = [out / f"scene{ext}", out / f"train{ext}", out / f"test{ext}"]
    _claim(targets, args.force)
    out.mkdir(parents=True, exist_ok=True)
    cloud = gen_scene(cfg.synth)
    left, right = split_scene(cloud)
    for cl, path in zip((cloud, left, right), targets):
        write_cloud(cl, path, args.format)
    log.info("wrote %d + %d points to %s", len(left), len(right), out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    ckpt = Path(args.out)
    history = Path(args.history) if args.history else ckpt.with_suffix(".csv")
    _claim([ckpt, history], args.force)
    cloud = load_cloud(args.cloud)
    tr, va = make_training_set(cloud, cfg.train)
    _, hist = train(tr, va, cfg.net, cfg.train, checkpoint_path=ckpt,
                    metadata={"train": cfg.train.__dict__ | {"workers": 1}})
    hist.write_csv(history)
    log.info("best validation loss %.5f", hist.best_val_loss)
    return EXIT_OK


def cmd_predict(args) -> int:
    cfg = _config(args)
    _claim([args.out], args.force)
    params, _, meta = load_checkpoint(args.checkpoint)
    tcfg = cfg.train
    stored = meta.get("train", {})
    for key in ("block_size", "overlap", "k", "radius"):
        if key in stored and not any(s.startswith(f"train.{key}=") for s in (args.set or ())):
            tcfg = replace(tcfg, **{key: stored[key]})
    cloud = load_cloud(args.cloud)
    pred = infer_scene(cloud, params, tcfg)
    write_xyz_text(cloud, args.out, extra=pred, extra_name="dtm_pred")
    return EXIT_OK


def _load_predictions(path):
    table, names, _ = read_xyz_table(path)
    if "dtm_pred" not in names:
        raise CloudFormatError(f"{path}: no dtm_pred column")
    return table[:, names.index("dtm_pred")]


def cmd_eval(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    targets = [out / "metrics.json", out / "error_map.asc", out / "error_map.ppm"]
    _claim(targets, args.force)
    pred = _load_predictions(args.predictions)
    truth = load_cloud(args.truth)
    if len(pred) != len(truth):
        raise CloudFormatError(
            f"point counts differ: {len(pred)} predictions vs {len(truth)} truth points"
        )
    if not truth.has_truth:
        raise CloudFormatError(f"{args.truth}: no gt_dtm column")
    metrics = ev.evaluate_predictions(truth, pred)
    err = np.abs(truth.raw_gt() - pred)
    raster = ev.rasterize_values(truth, err, cfg.eval.cell_size, "mean")
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_json(targets[0])
    ev.write_ascii_grid(raster, targets[1])
    ev.write_ppm(raster, targets[2])
    print(metrics.to_json())
    return EXIT_OK


def cmd_baseline(args) -> int:
    cfg = _config(args)
    out = Path(args.out_dir)
    targets = [out / "baseline_dtm.asc", out / "baseline_ground.asc", out / "baseline_dtm.ppm"]
    cloud = load_cloud(args.cloud)
    if cloud.has_truth:
        targets.append(out / "baseline_metrics.json")
    _claim(targets, args.force)
    dsm = ev.rasterize_dsm(cloud, cfg.morph.cell_size)
    ground, dtm = morph.tophat_dtm(dsm, cfg.morph)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_ascii_grid(dtm, targets[0])
    ev.write_ascii_grid(ground, targets[1])
    ev.write_ppm(dtm, targets[2])
    if cloud.has_truth:
        raw = cloud.raw_xyz()
        m = ev.evaluate_predictions(cloud, dtm.sample(raw[:, 0], raw[:, 1]))
        m.write_json(targets[3])
        print(m.to_json())
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _claim([args.out], args.force)
    radii = [float(r) for r in args.radii.split(",") if r.strip()]
    if args.train_cloud and args.test_cloud:
        train_cloud, test_cloud = load_cloud(args.train_cloud), load_cloud(args.test_cloud)
    else:
        train_cloud, test_cloud = split_scene(gen_scene(cfg.synth))
    rows = ev.radius_sweep(train_cloud, test_cloud, radii, cfg.net, cfg.train)
    ev.write_sweep_csv(rows, args.out)
    for r, m in rows:
        print(f"{r:g}m  MAE {m.mae:.3f}  sigma {m.sigma:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    net = _config(args).net if args.config or args.set else GRADCHECK_NET
    seed = 0 if args.seed is None else args.seed
    err = network_gradient_check(net, seed=seed, n=args.n, k=args.k, epsilon=args.epsilon)
    print(f"max relative error {err:.3e}")
    if not err < GRADCHECK_TOLERANCE:
        log.error("gradient check failed: %.3e >= %.0e", err, GRADCHECK_TOLERANCE)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="seed for synthesis and training")
    common.add_argument("--workers", type=int, help="block-level parallelism (1 = deterministic)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config field, e.g. train.epochs=8")

    parser = argparse.ArgumentParser(prog="terranet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic scene and split it")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--format", choices=["xyz-text", "binary-tile"], default="xyz-text")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train on a cloud with gt_dtm")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--history", help="CSV training log (default: checkpoint path with .csv)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="predict the DTM of every point")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", parents=[common], help="score predictions against truth")
    p.add_argument("--predictions", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", parents=[common], help="Top-Hat morphological DTM")
    p.add_argument("--cloud", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("sweep", parents=[common], help="MAE as a function of neighborhood radius")
    p.add_argument("--radii", default="5,12,18,25")
    p.add_argument("--train-cloud")
    p.add_argument("--test-cloud")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _setup_logging() -> None:
    level = os.environ.get("TERRANET_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("invalid configuration: %s", exc)
        return EXIT_CONFIG
    except (OSError, CloudFormatError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except (NumericError, FloatingPointError) as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
