"""Mean Count Difference between category histograms of two maps."""
from __future__ import annotations

import numpy as np


def bincount(m) -> np.ndarray:
    """256-bin histogram of category ids (void included)."""
    m = np.asarray(m)
    return np.bincount(m.astype(np.int64).ravel(), minlength=256)[:256]


def mcd(m_ref, m_gen) -> float:
    """sum |f_ref - f_gen| / (H * W); 0 for equal histograms, 2 for disjoint ones."""
    a, b = np.asarray(m_ref), np.asarray(m_gen)
    if a.shape != b.shape:
        raise ValueError(f"mcd: map shapes differ, {a.shape} vs {b.shape}")
    return float(np.abs(bincount(a) - bincount(b)).sum()) / a.size


def mean_mcd(refs, gens) -> float:
    if len(refs) != len(gens):
        raise ValueError(f"mean_mcd: {len(refs)} reference maps vs {len(gens)} generated")
    return float(np.mean([mcd(r, g) for r, g in zip(refs, gens)]))
