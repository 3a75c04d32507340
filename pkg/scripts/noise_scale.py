"""Fraction of analog-bit signs surviving forward noising, by map noise std.

    python scripts/noise_scale.py --pixels 10000
"""
import argparse

import torch

from panodiff.bitcodec import encode_map
from panodiff.numerics import Rng
from panodiff.schedule import add_noise_map, make_schedule

p = argparse.ArgumentParser()
p.add_argument("--pixels", type=int, default=10_000)
p.add_argument("--seed", type=int, default=0)
a = p.parse_args()

sched = make_schedule()
ids = Rng(a.seed).child("ids").integers(0, 255, size=(a.pixels,))
m0 = encode_map(ids, torch.float64)
eps = Rng(a.seed).child("eps").normal(m0.shape, dtype=torch.float64)
stds = (0.5, 1.0, 2.0, 4.0)
print("t     " + "  ".join(f"std={s:<4}" for s in stds))
for t in (100, 250, 500, 750, 900, 1000):
    row = []
    for s in stds:
        kept = (torch.sign(add_noise_map(sched, m0, s * eps, t)) == m0).double().mean().item()
        row.append(f"{kept:.4f}  ")
    print(f"{t:<5} " + " ".join(row))
