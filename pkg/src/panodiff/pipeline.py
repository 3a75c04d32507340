"""Desk-scale end-to-end run driven through the CLI.

gen-data -> train -> sample -> eval-mcd, plus the in-run baselines the
acceptance checks compare against.
"""
from __future__ import annotations

import contextlib
import csv
import io
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import cli, data, metrics
from .numerics import Rng


@dataclass
class DeskRun:
    n_train: int = 2000
    n_eval: int = 64
    image_size: int = 16
    patch_factor: int = 2
    train_steps: int = 3000
    batch: int = 32
    hidden: int = 64
    depth: int = 4
    heads: int = 4
    lr: float = 1e-3
    sample_steps: int = 50
    order: int = 1
    gamma: float = 1.0
    seed: int = 0
    zero_map_input: bool = False
    final_window: int = 100


def _cli(*argv) -> str:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.run([str(a) for a in argv])
    if code != 0:
        raise RuntimeError(f"panodiff {' '.join(map(str, argv))} exited with {code}")
    return buf.getvalue()


def read_losses(path) -> tuple[np.ndarray, np.ndarray]:
    lx, lm = [], []
    with open(path) as fh:
        for row in csv.DictReader(fh):
            lx.append(float(row["loss_x"]))
            lm.append(float(row["loss_m"]) if row["loss_m"] else np.nan)
    return np.array(lx), np.array(lm)


def random_map_baseline(refs: list[np.ndarray], seed: int) -> float:
    """Mean MCD of uniformly random id maps (0..255) against ``refs``."""
    rng = Rng(seed).child("random-baseline")
    rand = [rng.integers(0, 255, size=r.shape).astype(np.uint8) for r in refs]
    return metrics.mean_mcd(refs, rand)


def run_desk(work, run: DeskRun | None = None, log=print) -> dict:
    run = run or DeskRun()
    work = Path(work)
    work.mkdir(parents=True, exist_ok=True)
    timings = {}

    t0 = time.time()
    train_dir, eval_dir = work / "train", work / "heldout"
    if not (train_dir / "manifest.txt").exists():
        _cli("gen-data", "--n", run.n_train, "--out", train_dir, "--seed", run.seed,
             "--patch-factor", run.patch_factor, "--image-size", run.image_size)
    if not (eval_dir / "manifest.txt").exists():
        _cli("gen-data", "--n", run.n_eval, "--start", run.n_train, "--out", eval_dir, "--seed", run.seed,
             "--patch-factor", run.patch_factor, "--image-size", run.image_size)
    timings["gen_data"] = time.time() - t0

    cfg_path = work / "train.cfg"
    cfg_path.write_text("\n".join([
        "# desk-scale one-stream run",
        f"image_size={run.image_size}", f"patch_factor={run.patch_factor}",
        f"hidden={run.hidden}", f"depth={run.depth}", f"heads={run.heads}",
        "mode=one-stream", f"zero_map_input={run.zero_map_input}",
        f"batch={run.batch}", f"train_steps={run.train_steps}", f"lr={run.lr}",
        f"seed={run.seed}", f"data={train_dir}", "log_every=250",
    ]) + "\n")
    ck = work / "ckpt"
    t0 = time.time()
    _cli("-v", "train", "--config", cfg_path, "--out", ck)
    timings["train"] = time.time() - t0

    t0 = time.time()
    samples = work / "samples"
    _cli("sample", "--ckpt", ck / "last", "--n", run.n_eval, "--out", samples, "--captions-from", eval_dir,
         "--steps", run.sample_steps, "--order", run.order, "--gamma", run.gamma, "--seed", run.seed + 1)
    timings["sample"] = time.time() - t0

    report = _cli("eval-mcd", "--ref", eval_dir, "--gen", samples)
    mean_line = report.strip().splitlines()[-1].split()
    mcd_gen = float(mean_line[1])

    names = sorted(p.name[:-len(".map.pgm")] for p in eval_dir.glob("*.map.pgm"))
    refs = [data.load_map_pgm(eval_dir / f"{n}.map.pgm") for n in names]
    gens = [data.load_map_pgm(samples / f"{n}.map.pgm") for n in names]
    mcd_random = random_map_baseline(refs, run.seed)
    palette = np.array(sorted(data.SceneConfig().palette))
    in_palette = float(np.mean([np.isin(g, palette).mean() for g in gens]))

    lx, lm = read_losses(ck / "losses.csv")
    w = run.final_window
    result = {
        "config": asdict(run),
        "loss_x_step0": float(lx[0]),
        "loss_m_step0": float(lm[0]),
        "loss_x_final": float(lx[-w:].mean()),
        "loss_m_final": float(lm[-w:].mean()),
        "mcd_generated": mcd_gen,
        "mcd_random": mcd_random,
        "palette_fraction": in_palette,
        "timings": timings,
    }
    (work / "result.json").write_text(json.dumps(result, indent=2))
    log(json.dumps(result, indent=2))
    return result
