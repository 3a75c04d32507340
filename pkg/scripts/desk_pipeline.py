"""Run the desk-scale pipeline (gen-data -> train -> sample -> eval-mcd).

    python scripts/desk_pipeline.py --work runs/desk
    python scripts/desk_pipeline.py --work runs/zero --zero-map-input
"""
import argparse
import logging

from panodiff.pipeline import DeskRun, run_desk

p = argparse.ArgumentParser()
p.add_argument("--work", required=True)
p.add_argument("--zero-map-input", action="store_true")
p.add_argument("--train-steps", type=int, default=3000)
p.add_argument("--seed", type=int, default=0)
a = p.parse_args()
logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
run_desk(a.work, DeskRun(zero_map_input=a.zero_map_input, train_steps=a.train_steps, seed=a.seed))
