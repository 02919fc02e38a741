"""Run the desk-scale experiment: 8 phantoms at 32^3, T=100, 2000 diffusion iterations, 8 samples.

    python scripts/desk_experiment.py --work runs/desk
"""
import argparse
import json
import logging
import time
from pathlib import Path

from lnddpm.experiment import run_desk_experiment

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--work", default="runs/desk")
    ap.add_argument("--config", default=ROOT / "configs" / "desk.yaml")
    ap.add_argument("--phantom-spec", default=ROOT / "configs" / "desk_phantom.yaml")
    ap.add_argument("--iterations", type=int)
    ap.add_argument("--samples", type=int, default=8)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO)
    tick = time.time()
    res = run_desk_experiment(Path(args.work), args.config, args.phantom_spec, n_samples=args.samples,
                              iterations=args.iterations)
    res["minutes"] = (time.time() - tick) / 60
    print(json.dumps(res, indent=2))
