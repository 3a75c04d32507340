"""``panodiff`` command line: gen-data, train, sample, eval-mcd, codec, colorize, inspect-ckpt.

Exit status: 0 success, 1 usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

from . import bitcodec, data, mapprep, metrics
from .model import ModelConfig, init_params, load_backbone
from .numerics import Rng
from .sampling import SamplerConfig, sample, sample_given_map
from .schedule import MapNoiseSpec, make_schedule
from .training import TrainConfig, TrainState, load_checkpoint, save_checkpoint, train_steps

log = logging.getLogger("panodiff")

SCHEDULE_KEYS = {"steps": int, "beta_start": float, "beta_end": float, "map_noise_std": float}
MODEL_KEYS = {
    "image_size": int, "patch": int, "patch_factor": int, "hidden": int, "depth": int, "heads": int,
    "mode": str, "cond_tokens": int, "cond_pos_embed": "bool", "zero_map_input": "bool",
}
TRAIN_KEYS = {
    "batch": int, "train_steps": int, "lr": float, "weight_decay": float, "cond_drop_prob": float,
    "loss_m_weight": float, "seed": int, "data": str, "backbone": str, "ckpt_every": int, "log_every": int,
}
CONFIG_KEYS = {**SCHEDULE_KEYS, **MODEL_KEYS, **TRAIN_KEYS}

DEFAULTS = {
    "steps": 1000, "beta_start": 1e-4, "beta_end": 2e-2, "map_noise_std": 2.0,
    "image_size": 16, "patch": 2, "patch_factor": 2, "hidden": 128, "depth": 6, "heads": 4,
    "mode": "one-stream", "cond_tokens": 6, "cond_pos_embed": True, "zero_map_input": False,
    "batch": 32, "train_steps": 3000, "lr": 1e-3, "weight_decay": 0.0, "cond_drop_prob": 0.1,
    "loss_m_weight": 1.0, "seed": 0, "data": "", "backbone": "", "ckpt_every": 0, "log_every": 100,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# config -----------------------------------------------------------------------------

def _coerce(key: str, raw: str):
    kind = CONFIG_KEYS[key]
    if kind == "bool":
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"config key {key!r}: not a boolean: {raw!r}")
    try:
        return kind(raw.strip())
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {kind.__name__}") from None


def parse_config_lines(lines, source: str = "<config>") -> dict:
    """Flat ``key=value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    out = {}
    for n, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{n}: expected key=value, got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise UsageError(f"{source}:{n}: unknown config key {key!r}")
        out[key] = _coerce(key, val)
    return out


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        cfg.update(parse_config_lines(p.read_text().splitlines(), str(p)))
    cfg.update(parse_config_lines(overrides, "--set"))
    return cfg


def write_manifest(path: Path, values: dict) -> None:
    lines = [f"{k}={v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n")


# subcommands -----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = data.SceneConfig(image_size=args.image_size, patch_factor=args.patch_factor, seed=args.seed)
    out = Path(args.out)
    names = data.write_dataset(out, args.n, args.seed, cfg, start=args.start)
    write_manifest(out / "manifest.txt", {
        "command": "gen-data", "n": args.n, "start": args.start, "seed": args.seed,
        "patch_factor": args.patch_factor, "image_size": args.image_size,
    })
    print(f"wrote {len(names)} scenes to {out}")
    return 0


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(**{k: cfg[k] for k in MODEL_KEYS})


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    overrides = list(args.set)
    if args.data:
        overrides.append(f"data={args.data}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.train_steps is not None:
        overrides.append(f"train_steps={args.train_steps}")
    cfg = load_config(args.config, overrides)
    if not cfg["data"]:
        raise UsageError("train: no dataset given (config key data= or --data)")
    MapNoiseSpec(cfg["map_noise_std"])
    sched = {"steps": cfg["steps"], "beta_start": cfg["beta_start"], "beta_end": cfg["beta_end"]}
    make_schedule(sched["steps"], sched["beta_start"], sched["beta_end"])
    mcfg = _model_config(cfg)
    tcfg = TrainConfig.from_dict(cfg)
    dataset = data.Dataset.from_dir(cfg["data"])
    dataset.cond_tokens = mcfg.cond_tokens
    if dataset.maps.shape[1:] != mcfg.map_hw:
        raise RuntimeError(f"dataset maps are {dataset.maps.shape[1:]}, model expects {mcfg.map_hw}")

    last = out / "last"
    if args.resume:
        state = load_checkpoint(args.resume)
        state.train = tcfg
    else:
        backbone = None
        if cfg["backbone"]:
            backbone = load_checkpoint(cfg["backbone"]).params
        params = init_params(mcfg, Rng(tcfg.seed).child("init"))
        if backbone is not None:
            load_backbone(params, backbone)
        state = TrainState(mcfg, sched, tcfg, params)
    write_manifest(out / "manifest.txt", {"command": "train", **cfg, "resume": args.resume or ""})

    losses_path = out / "losses.csv"
    mode = "a" if args.resume and losses_path.exists() else "w"
    t0 = time.time()
    with open(losses_path, mode, newline="") as fh:
        w = csv.writer(fh)
        if mode == "w":
            w.writerow(["step", "loss_x", "loss_m"])

        def on_step(st, lx, lm):
            w.writerow([st.step - 1, repr(lx), "" if lm is None else repr(lm)])
            if cfg["log_every"] and st.step % cfg["log_every"] == 0:
                log.info("step %d loss_x %.4f loss_m %s (%.1fs)", st.step, lx,
                         "-" if lm is None else f"{lm:.4f}", time.time() - t0)
            if cfg["ckpt_every"] and st.step % cfg["ckpt_every"] == 0:
                save_checkpoint(last, st)

        todo = max(0, tcfg.train_steps - state.step)
        train_steps(state, dataset, todo, on_step)
    save_checkpoint(last, state)
    print(f"trained to step {state.step}; checkpoint {last}")
    return 0


def _parse_ids(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise UsageError(f"caption must be space-separated integer ids, got {text!r}") from None


def cmd_sample(args) -> int:
    state = load_checkpoint(args.ckpt)
    mcfg = state.model
    schedule = state.make_schedule()
    scfg = SamplerConfig(steps=args.steps, order=args.order, gamma=args.gamma,
                         map_init_std=args.map_init_std, seed=args.seed)
    params = state.params
    manifest = {"command": "sample", "ckpt": args.ckpt, "ckpt_step": state.step, **asdict(scfg)}

    if args.n is not None:
        if not args.out:
            raise UsageError("sample --n needs --out DIR")
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.captions_from:
            names = sorted(p.name[:-len(".cap.txt")] for p in Path(args.captions_from).glob("*.cap.txt"))[:args.n]
            if len(names) < args.n:
                raise RuntimeError(f"only {len(names)} captions in {args.captions_from}, need {args.n}")
            captions = [data.read_caption(Path(args.captions_from) / f"{n}.cap.txt") for n in names]
        else:
            names = [f"{i:06d}" for i in range(args.n)]
            captions = [_parse_ids(args.caption or "")] * args.n
        bs = max(1, args.batch)
        for lo in range(0, args.n, bs):
            hi = min(args.n, lo + bs)
            imgs, maps = sample(params, mcfg, captions[lo:hi], scfg, schedule, n=hi - lo, first_index=lo)
            for i in range(hi - lo):
                data.save_image_ppm(out / f"{names[lo + i]}.img.ppm", imgs[i])
                data.save_map_pgm(out / f"{names[lo + i]}.map.pgm", maps[i])
        manifest.update(n=args.n, captions_from=args.captions_from or "", caption=args.caption or "")
        write_manifest(out / "manifest.txt", manifest)
        print(f"wrote {args.n} samples to {out}")
        return 0

    if not args.out_image:
        raise UsageError("sample needs --out-image (or --n with --out)")
    caption = _parse_ids(args.caption or "")
    manifest.update(caption=args.caption or "", given_map=args.given_map or "")
    if args.given_map:
        gm = data.load_map_pgm(args.given_map)
        img = sample_given_map(params, mcfg, gm, [caption], scfg, schedule)[0]
    else:
        imgs, maps = sample(params, mcfg, [caption], scfg, schedule, n=1)
        img = imgs[0]
        if args.out_map:
            data.save_map_pgm(args.out_map, maps[0])
    data.save_image_ppm(args.out_image, img)
    out_image = Path(args.out_image)
    write_manifest(out_image.with_name(out_image.name + ".manifest.txt"), manifest)
    return 0


def _map_names(d: Path) -> dict[str, Path]:
    return {p.name[:-len(".map.pgm")]: p for p in d.glob("*.map.pgm")}


def cmd_eval_mcd(args) -> int:
    ref, gen = _map_names(Path(args.ref)), _map_names(Path(args.gen))
    common = sorted(set(ref) & set(gen))
    if not common:
        raise RuntimeError(f"no map names shared by {args.ref} and {args.gen}")
    vals = []
    for name in common:
        v = metrics.mcd(data.load_map_pgm(ref[name]), data.load_map_pgm(gen[name]))
        vals.append(v)
        print(f"{name} {v:.6f}")
    print(f"mean {float(np.mean(vals)):.6f}")
    return 0


def cmd_codec(args) -> int:
    if args.encode:
        if args.id is None:
            raise UsageError("codec --encode needs --id")
        bits = bitcodec.int2bits(args.id)
        print(" ".join("+1" if b > 0 else "-1" for b in bits))
    else:
        if args.bits is None:
            raise UsageError("codec --decode needs --bits")
        try:
            vals = [float(tok) for tok in args.bits.split()]
        except ValueError:
            raise UsageError(f"--bits must be 8 numbers, got {args.bits!r}") from None
        print(bitcodec.bits2int(vals))
    return 0


def cmd_colorize(args) -> int:
    m = data.load_map_pgm(args.inp)
    rgb = mapprep.colorize(m, mapprep.color_table(args.seed))
    data.save_rgb_ppm(args.out, rgb)
    return 0


def cmd_inspect(args) -> int:
    path = Path(args.ckpt)
    if path.is_dir():
        path = path / "last"
    st = load_checkpoint(path)
    print(f"step {st.step}")
    print(f"mode {st.model.mode}")
    print(f"parameters {st.params.numel()}")
    for name, t in st.params.items():
        print(f"{name} {'x'.join(map(str, t.shape))}")
    for name, t in st.moments.items():
        print(f"moment/{name} {'x'.join(map(str, t.shape))}")
    return 0


# parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="panodiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen-data", help="write a procedural scene dataset")
    g.add_argument("--n", type=int, required=True, help="number of scenes")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--patch-factor", type=int, default=2, choices=mapprep.PATCH_FACTORS)
    g.add_argument("--image-size", type=int, default=16)
    g.add_argument("--start", type=int, default=0, help="index of the first scene")
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train a model; writes OUT/last, OUT/losses.csv")
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--data", help="dataset directory (overrides data=)")
    t.add_argument("--seed", type=int)
    t.add_argument("--train-steps", type=int)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sample", help="co-generate images and maps")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--caption", help='space-separated category ids, e.g. "1 101 102"')
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--order", type=int, default=1, choices=(1, 3))
    s.add_argument("--gamma", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--map-init-std", type=float, default=1.0)
    s.add_argument("--out-image")
    s.add_argument("--out-map")
    s.add_argument("--given-map", help="condition on this map (PGM) instead of generating one")
    s.add_argument("--n", type=int, help="number of samples (writes into --out); sample i uses seed+i")
    s.add_argument("--out", help="output directory for --n")
    s.add_argument("--captions-from", help="dataset directory whose captions drive --n samples")
    s.add_argument("--batch", type=int, default=64, help="samples per forward batch")
    s.set_defaults(fn=cmd_sample)

    e = sub.add_parser("eval-mcd", help="per-pair and mean MCD between two map directories")
    e.add_argument("--ref", required=True)
    e.add_argument("--gen", required=True)
    e.set_defaults(fn=cmd_eval_mcd)

    c = sub.add_parser("codec", help="category id <-> analog bits")
    mode = c.add_mutually_exclusive_group(required=True)
    mode.add_argument("--encode", action="store_true")
    mode.add_argument("--decode", action="store_true")
    c.add_argument("--id", type=int)
    c.add_argument("--bits", help='8 values, e.g. "0.3 0.9 -0.2 -0.5 0.1 -0.9 -0.3 -0.4"')
    c.set_defaults(fn=cmd_codec)

    k = sub.add_parser("colorize", help="render a map PGM as a color PPM")
    k.add_argument("--in", dest="inp", required=True)
    k.add_argument("--out", required=True)
    k.add_argument("--seed", type=int, default=0)
    k.set_defaults(fn=cmd_colorize)

    i = sub.add_parser("inspect-ckpt", help="print step count and tensor names")
    i.add_argument("ckpt", help="checkpoint file or directory containing 'last'")
    i.set_defaults(fn=cmd_inspect)
    return p


def _set_threads() -> None:
    n = os.environ.get("PDM_THREADS")
    if n:
        torch.set_num_threads(max(1, int(n)))


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            raise UsageError("panodiff: error: a subcommand is required")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
        _set_threads()
        return args.fn(args)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except Exception as e:  # runtime failures map to exit 2
        print(f"panodiff: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
