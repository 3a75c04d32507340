"""Category-id maps <-> +/-1 analog bits (8 channels, MSB first)."""
from __future__ import annotations

import numpy as np
import torch

NUM_BITS = 8
VOID = 0

# bit k of id, MSB first
_SHIFTS = np.arange(NUM_BITS - 1, -1, -1)
_WEIGHTS = 1 << _SHIFTS


class CodecError(ValueError):
    pass


def int2bits(cat_id: int) -> list[float]:
    if not 0 <= int(cat_id) <= 255:
        raise CodecError(f"category id {cat_id} outside [0, 255]")
    return [1.0 if (int(cat_id) >> int(s)) & 1 else -1.0 for s in _SHIFTS]


def bits2int(v) -> int:
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (NUM_BITS,):
        raise CodecError(f"expected {NUM_BITS} values, got shape {v.shape}")
    # exact zero decodes as a 0 bit
    return int(((v > 0).astype(np.int64) * _WEIGHTS).sum())


def encode_map(ids, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(..., H, W) integer grid -> (..., H, W, 8) tensor of exactly +/-1."""
    a = np.asarray(ids)
    if a.size and (a.min() < 0 or a.max() > 255):
        raise CodecError(f"category ids must lie in [0, 255], got range [{a.min()}, {a.max()}]")
    bits = (a.astype(np.int64)[..., None] >> _SHIFTS) & 1
    return torch.from_numpy(bits * 2.0 - 1.0).to(dtype)


def decode_map(t) -> np.ndarray:
    """(..., H, W, 8) reals -> (..., H, W) uint8 ids by thresholding at zero."""
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    t = np.asarray(t)
    if t.ndim < 1 or t.shape[-1] != NUM_BITS:
        raise CodecError(f"expected {NUM_BITS} bit channels in the last axis, got shape {t.shape}")
    return ((t > 0).astype(np.int64) * _WEIGHTS).sum(axis=-1).astype(np.uint8)
