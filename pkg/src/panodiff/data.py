"""Procedural image/panoptic-map/caption scenes and netpbm file IO.

Scene geometry lives in continuous image-pixel coordinates. Region
membership is evaluated on a fixed 64x64 lattice of sample points (4x4 per
image pixel); a map pixel at any patch factor takes the smallest id among
the regions hit by its lattice samples. Coarser maps are therefore exactly
the min-pool of finer ones.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .mapprep import PATCH_FACTORS
from .numerics import Rng

LATTICE = 4  # samples per image pixel along each axis (= largest patch factor)

THINGS = {1: "circle", 2: "square", 3: "triangle"}
STUFF = {101: "sky", 102: "grass", 103: "sea", 104: "sand"}

STUFF_COLORS = {
    101: (0.45, 0.65, 0.95),
    102: (0.25, 0.70, 0.25),
    103: (0.10, 0.30, 0.65),
    104: (0.85, 0.78, 0.50),
}
SHAPE_COLORS = np.array([
    (0.90, 0.10, 0.10), (0.95, 0.60, 0.05), (0.95, 0.95, 0.10), (0.60, 0.10, 0.80),
    (0.95, 0.40, 0.70), (0.10, 0.10, 0.10), (0.95, 0.95, 0.95), (0.50, 0.30, 0.10),
])


class FormatError(ValueError):
    pass


@dataclass
class SceneConfig:
    image_size: int = 16
    patch_factor: int = 2
    things: tuple = tuple(THINGS)
    stuff: tuple = tuple(STUFF)
    object_count: tuple = (1, 3)
    object_size: tuple = (3.0, 7.0)
    band_count: tuple = (1, 3)
    texture: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.patch_factor not in PATCH_FACTORS:
            raise ValueError(f"patch factor must be one of {PATCH_FACTORS}")
        if max(self.things, default=0) >= 92 or min(self.stuff) < 92:
            raise ValueError("thing ids must be < 92 <= stuff ids")

    @property
    def palette(self) -> set[int]:
        return set(self.things) | set(self.stuff)


@dataclass
class Shape:
    kind: int  # thing id
    cx: float
    cy: float
    size: float
    color: tuple

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        r = self.size / 2
        dx, dy = x - self.cx, y - self.cy
        if THINGS.get(self.kind) == "circle" or self.kind not in THINGS:
            return dx * dx + dy * dy <= r * r
        if THINGS[self.kind] == "square":
            return (np.abs(dx) <= r) & (np.abs(dy) <= r)
        # upward isoceles triangle inscribed in the bounding square
        return (dy <= r) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 2)

    def bbox(self) -> tuple[float, float, float, float]:
        r = self.size / 2
        return (self.cx - r, self.cy - r, self.cx + r, self.cy + r)


@dataclass
class Scene:
    image: np.ndarray  # (H, W, 3) float32 in [-1, 1]
    map: np.ndarray  # (fH, fW) uint8
    caption: list[int]
    bands: list = field(default_factory=list)  # (top row, stuff id) in image pixels
    shapes: list = field(default_factory=list)


def lattice_points(image_size: int) -> tuple[np.ndarray, np.ndarray]:
    n = image_size * LATTICE
    c = (np.arange(n) + 0.5) / LATTICE
    return np.meshgrid(c, c)  # (x, y) in image-pixel units


def rasterize_ids(bands, shapes, image_size: int) -> np.ndarray:
    """Per-lattice-sample region id, (64, 64) for a 16-pixel image.

    Shapes never overlap, so each sample is in at most one shape; shapes
    beat stuff because thing ids are smaller.
    """
    xs, ys = lattice_points(image_size)
    ids = np.zeros(xs.shape, dtype=np.int64)
    for top, sid in bands:
        ids[ys >= top] = sid
    for s in shapes:
        ids[s.contains(xs, ys)] = s.kind
    return ids


def map_at_factor(sample_ids: np.ndarray, f: int) -> np.ndarray:
    """Pixel id = smallest non-void id among its lattice samples."""
    k = LATTICE // f
    n = sample_ids.shape[0] // k
    blocks = sample_ids.reshape(n, k, n, k)
    blocks = np.where(blocks == 0, 256, blocks)
    out = blocks.min(axis=(1, 3))
    out[out == 256] = 0
    return out.astype(np.uint8)


def render_image(bands, shapes, image_size: int, texture: float, rng: Rng) -> np.ndarray:
    xs, ys = lattice_points(image_size)
    rgb = np.zeros(xs.shape + (3,))
    for top, sid in bands:
        rgb[ys >= top] = STUFF_COLORS.get(sid, (0.5, 0.5, 0.5))
    for s in shapes:
        rgb[s.contains(xs, ys)] = s.color
    # box-filter the lattice down to pixels
    n = image_size
    img = rgb.reshape(n, LATTICE, n, LATTICE, 3).mean(axis=(1, 3))
    img = img * 2.0 - 1.0 + texture * rng.normal((n, n, 3), dtype=torch.float64).numpy()
    return np.clip(img, -1.0, 1.0).astype(np.float32)


def _overlaps(a: Shape, b: Shape, margin: float = 0.5) -> bool:
    ax0, ay0, ax1, ay1 = a.bbox()
    bx0, by0, bx1, by1 = b.bbox()
    return not (ax1 + margin <= bx0 or bx1 + margin <= ax0 or ay1 + margin <= by0 or by1 + margin <= ay0)


def gen_scene(rng: Rng, cfg: SceneConfig) -> Scene:
    n = cfg.image_size
    # stuff: horizontal bands, each at least 3 pixels tall, adjacent ids distinct
    nb = int(rng.integers(*cfg.band_count))
    nb = max(1, min(nb, n // 3))
    cuts = sorted(rng.choice(np.arange(3, n - 2), size=nb - 1, replace=False).tolist()) if nb > 1 else []
    while any(b - a < 3 for a, b in zip([0] + cuts, cuts + [n])):
        cuts = sorted(rng.choice(np.arange(3, n - 2), size=nb - 1, replace=False).tolist())
    bands = []
    prev = None
    for top in [0] + cuts:
        choices = [s for s in cfg.stuff if s != prev]
        sid = int(rng.choice(choices))
        bands.append((float(top), sid))
        prev = sid

    shapes: list[Shape] = []
    want = int(rng.integers(*cfg.object_count))
    colors = rng.permutation(len(SHAPE_COLORS))
    for i in range(want):
        for _ in range(100):
            size = float(rng.uniform(*cfg.object_size))
            r = size / 2
            cand = Shape(
                kind=int(rng.choice(list(cfg.things))),
                cx=float(rng.uniform(r, n - r)),
                cy=float(rng.uniform(r, n - r)),
                size=size,
                color=tuple(SHAPE_COLORS[colors[i % len(colors)]]),
            )
            if not any(_overlaps(cand, s) for s in shapes):
                shapes.append(cand)
                break

    samples = rasterize_ids(bands, shapes, n)
    m = map_at_factor(samples, cfg.patch_factor)
    image = render_image(bands, shapes, n, cfg.texture, rng.child("texture"))
    return Scene(image=image, map=m, caption=caption_for(m, shapes), bands=bands, shapes=shapes)


def caption_for(m: np.ndarray, shapes) -> list[int]:
    """Sorted ids: each stuff category present once, each visible shape instance once."""
    present = set(np.unique(m).tolist()) - {0}
    stuff = [i for i in present if i >= 92]
    things = [s.kind for s in shapes if s.kind in present]
    return sorted(stuff + things)


def scene_at(seed: int, index: int, cfg: SceneConfig) -> Scene:
    """Scene ``index`` of the stream fixed by ``seed`` (independent of other indices)."""
    return gen_scene(Rng(seed).child("scene", index), cfg)


# netpbm IO ------------------------------------------------------------------------

_HEADER = re.compile(rb"\A(P[56])\s+(\d+)\s+(\d+)\s+(\d+)\s")


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    mt = _HEADER.match(data)
    if not mt or mt.group(1) != magic:
        raise FormatError(f"{path}: not a binary {magic.decode()} file")
    w, h, maxval = int(mt.group(2)), int(mt.group(3)), int(mt.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: maxval {maxval} != 255")
    payload = data[mt.end():]
    need = w * h * channels
    if len(payload) < need:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    a = np.frombuffer(payload[:need], dtype=np.uint8)
    return a.reshape(h, w, channels) if channels > 1 else a.reshape(h, w)


def image_to_bytes(image) -> np.ndarray:
    a = np.asarray(image.detach().cpu() if isinstance(image, torch.Tensor) else image, dtype=np.float64)
    return np.clip(np.rint((a + 1.0) * 127.5), 0, 255).astype(np.uint8)


def save_image_ppm(path, image) -> None:
    """(H, W, 3) floats in [-1, 1] -> binary P6."""
    b = image_to_bytes(image)
    if b.ndim != 3 or b.shape[2] != 3:
        raise FormatError(f"expected (H, W, 3) image, got {b.shape}")
    h, w, _ = b.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + b.tobytes())


def save_rgb_ppm(path, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def load_image_ppm(path) -> np.ndarray:
    return (_read_netpbm(path, b"P6", 3).astype(np.float32) / 127.5 - 1.0).astype(np.float32)


def save_map_pgm(path, m) -> None:
    m = np.asarray(m)
    if m.size and (m.min() < 0 or m.max() > 255):
        raise FormatError("map ids must lie in [0, 255]")
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + m.astype(np.uint8).tobytes())


def load_map_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).copy()


# dataset directories --------------------------------------------------------------

def write_dataset(out_dir, n: int, seed: int, cfg: SceneConfig, start: int = 0) -> list[str]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(start, start + n):
        s = scene_at(seed, i, cfg)
        name = f"{i:06d}"
        save_image_ppm(out / f"{name}.img.ppm", s.image)
        save_map_pgm(out / f"{name}.map.pgm", s.map)
        (out / f"{name}.cap.txt").write_text(" ".join(str(c) for c in s.caption) + "\n")
        names.append(name)
    return names


def read_caption(path) -> list[int]:
    return [int(tok) for tok in Path(path).read_text().split()]


class Dataset:
    """In-memory scenes: images (N, H, W, 3), maps (N, fH, fW), captions."""

    def __init__(self, images: np.ndarray, maps: np.ndarray, captions: list[list[int]], names=None,
                 cond_tokens: int = 6):
        self.cond_tokens = cond_tokens
        self.images = torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32))
        self.maps = np.asarray(maps, dtype=np.uint8)
        self.captions = captions
        self.names = names or [f"{i:06d}" for i in range(len(captions))]

    def __len__(self) -> int:
        return len(self.captions)

    @classmethod
    def from_dir(cls, path) -> "Dataset":
        path = Path(path)
        names = sorted(p.name[: -len(".map.pgm")] for p in path.glob("*.map.pgm"))
        if not names:
            raise FileNotFoundError(f"no *.map.pgm files in {path}")
        images = np.stack([load_image_ppm(path / f"{n}.img.ppm") for n in names])
        maps = np.stack([load_map_pgm(path / f"{n}.map.pgm") for n in names])
        caps = [read_caption(path / f"{n}.cap.txt") for n in names]
        return cls(images, maps, caps, names)

    @classmethod
    def generate(cls, n: int, seed: int, cfg: SceneConfig, start: int = 0) -> "Dataset":
        scenes = [scene_at(seed, i, cfg) for i in range(start, start + n)]
        return cls(np.stack([s.image for s in scenes]), np.stack([s.map for s in scenes]),
                   [s.caption for s in scenes], [f"{i:06d}" for i in range(start, start + n)])

    def sample_batch(self, rng: Rng, size: int):
        from .model import condition_tokens
        from .training import Batch

        idx = rng.integers(0, len(self) - 1, size=size)
        caps = [condition_tokens(self.captions[i], self.cond_tokens) for i in idx]
        return Batch(self.images[idx], self.maps[idx], caps)
