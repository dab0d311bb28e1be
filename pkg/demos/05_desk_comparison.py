"""The desk-scale comparison: per seed, pre-train on the source domain, then
adapt with source-only, GAC, GAC-Distill and C-GAC and score target
validation Avg. The full run (three seeds, configs/desk.json) takes about
30 minutes on one core; --seeds 0 gives a single-seed preview. --pin writes
the per-seed scores as the regression fixture read by the acceptance tests."""
import argparse
import json
import logging
from pathlib import Path

from handadapt import pipeline as pl

ap = argparse.ArgumentParser()
ap.add_argument("--config", default=str(Path(__file__).resolve().parents[1] / "configs" / "desk.json"))
ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
ap.add_argument("--out", default="runs/desk_comparison")
ap.add_argument("--pin", help="write per-seed Avg scores to this JSON file")
args = ap.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

cfg = pl.load_config(args.config)
runs = pl.ordering_experiment(cfg, seeds=tuple(args.seeds), out=args.out)
for r in runs:
    print(f"seed {r.seed} {r.method:12s} avg {r.metrics.avg:6.2f}  pck {r.metrics.pck_auc:6.2f}  iou {r.metrics.iou:6.2f}")
print("mean over seeds:", {k: round(v, 2) for k, v in pl.mean_scores(runs).items()})

if args.pin:
    per_seed = {}
    for r in runs:
        per_seed.setdefault(str(r.seed), {})[r.method] = r.metrics.avg
    Path(args.pin).write_text(json.dumps({"config": "configs/desk.json", "per_seed": per_seed,
                                          "mean": pl.mean_scores(runs)}, indent=2, sort_keys=True) + "\n")
