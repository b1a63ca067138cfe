"""Desk-scale experiment: train on the left half of a synthetic scene, score the right half.

Compares the network against three references on the held-out half:
identity (predict z), the untrained network (training start point) and the
Top-Hat morphological baseline. Also reports MAE per point class.

    python3 scripts/desk_experiment.py --out-dir runs/desk
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from terranet.baseline import MorphConfig, tophat_dtm
from terranet.evaluation import evaluate_predictions, rasterize_dsm
from terranet.net import NetConfig, save_checkpoint
from terranet.pipeline import TrainConfig, infer_scene, initial_params, make_training_set, train
from terranet.synth import BUILDING, GROUND, VEGETATION, SynthConfig, gen_split

log = logging.getLogger("desk")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/desk")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--epochs", type=int, default=8)
    ap.add_argument("--radius", type=float, default=25.0)
    ap.add_argument("--width-scale", type=float, default=0.25)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    synth = SynthConfig(extent=(200, 200), density=4, terrain_amplitude=8, building_count=12,
                        tree_count=30, seed=args.seed)
    net_cfg = NetConfig().scaled(args.width_scale)
    cfg = TrainConfig(epochs=args.epochs, radius=args.radius, k=32, points_per_block=512,
                      batch_size=4, seed=args.seed)
    train_cloud, test_cloud = gen_split(synth)
    log.info("train %d points, test %d points", len(train_cloud), len(test_cloud))

    t0 = time.perf_counter()
    tr, va = make_training_set(train_cloud, cfg)
    start = initial_params(net_cfg, tr, args.seed)
    params, hist = train(tr, va, net_cfg, cfg)
    del tr, va
    save_checkpoint(out / "model.tnet", params, net_cfg, {"train": cfg.__dict__})
    hist.write_csv(out / "history.csv")
    pred = infer_scene(test_cloud, params, cfg)
    seconds = time.perf_counter() - t0

    raw = test_cloud.raw_xyz()
    morph = MorphConfig()
    _, dtm = tophat_dtm(rasterize_dsm(test_cloud, morph.cell_size), morph)
    references = {
        "network": pred,
        "identity": raw[:, 2],
        "untrained": infer_scene(test_cloud, start, cfg),
        "tophat": dtm.sample(raw[:, 0], raw[:, 1]),
    }
    report = {"seconds": round(seconds, 1), "methods": {}}
    for name, values in references.items():
        m = evaluate_predictions(test_cloud, values)
        err = np.abs(test_cloud.raw_gt() - values)
        per_class = {label: float(err[test_cloud.labels == code].mean())
                     for label, code in (("ground", GROUND), ("building", BUILDING),
                                         ("vegetation", VEGETATION))
                     if np.any(test_cloud.labels == code)}
        report["methods"][name] = {"mae": m.mae, "sigma": m.sigma,
                                   "relative_error": m.relative_error, "per_class_mae": per_class}
        print(f"{name:10s} MAE {m.mae:7.3f}  sigma {m.sigma:7.3f}  "
              + "  ".join(f"{k} {v:.3f}" for k, v in per_class.items()))
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"train + inference {seconds / 60:.1f} min; report in {out / 'report.json'}")


if __name__ == "__main__":
    main()
