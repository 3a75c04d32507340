"""Map resolution handling: min pooling, token-grid alignment, color tables."""
from __future__ import annotations

import hashlib

import numpy as np

PATCH_FACTORS = (1, 2, 4)


class AlignmentError(ValueError):
    pass


def min_pool(m, k: int) -> np.ndarray:
    """Pool k x k blocks to their smallest non-void id (0 only if the block is all void)."""
    m = np.asarray(m)
    h, w = m.shape[-2:]
    if k < 1 or h % k or w % k:
        raise AlignmentError(f"map {h}x{w} is not divisible by pooling factor {k}")
    if k == 1:
        return m.copy()
    blocks = m.reshape(*m.shape[:-2], h // k, k, w // k, k).astype(np.int64)
    blocks = np.where(blocks == 0, 256, blocks)
    out = blocks.min(axis=(-3, -1))
    out[out == 256] = 0
    return out.astype(m.dtype)


def check_alignment(image_hw, image_patch: int, f: int, map_hw) -> tuple[int, int]:
    """Token grid shared by image and map patches; raises if they disagree."""
    ih, iw = image_hw
    mh, mw = map_hw
    map_patch = image_patch * f

    def bad(why):
        return AlignmentError(
            f"{why}: image {ih}x{iw}, image patch {image_patch}, patch factor {f}, map {mh}x{mw}"
        )

    if f not in PATCH_FACTORS:
        raise bad(f"patch factor must be one of {PATCH_FACTORS}")
    if ih % image_patch or iw % image_patch:
        raise bad("image not divisible by its patch")
    if mh % map_patch or mw % map_patch:
        raise bad("map not divisible by map patch")
    grid = (ih // image_patch, iw // image_patch)
    if (mh // map_patch, mw // map_patch) != grid:
        raise bad("token grids differ")
    return grid


def color_table(seed: int = 0) -> np.ndarray:
    """(256, 3) uint8 table; id 0 is black, others hashed from (seed, id)."""
    table = np.zeros((256, 3), dtype=np.uint8)
    for i in range(1, 256):
        d = hashlib.sha256(f"{seed}:{i}".encode()).digest()
        table[i] = np.frombuffer(d[:3], dtype=np.uint8)
        if not table[i].any():
            table[i] = (1, 1, 1)
    return table


def colorize(m, table: np.ndarray | None = None) -> np.ndarray:
    """(H, W) ids -> (H, W, 3) uint8 RGB."""
    if table is None:
        table = color_table()
    return table[np.asarray(m, dtype=np.int64)]
