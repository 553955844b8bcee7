"""View generation by feature corruption.

Corruption operates on raw feature matrices (categorical columns hold integer
codes, before one-hot encoding), so a corrupted categorical cell swaps its
whole category.  Each cell is masked by an independent Bernoulli(p) draw;
masked cells are either zeroed or resampled from the same column of a pool
of pretext rows (a fresh pool row per cell).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class CorruptionConfig:
    mode: str = "resample"  # "resample" (VIME) or "zero" (TabNet)
    p_student: float = 0.3
    p_teacher: float = 0.0
    seed: int = 0
    per_cell_donor: bool = True  # False: one donor row per sample

    def __post_init__(self):
        if self.mode not in ("resample", "zero"):
            raise ValueError(f"unknown corruption mode {self.mode!r}")
        for name in ("p_student", "p_teacher"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {p}")


def corrupt(x: np.ndarray, pool: np.ndarray | None, p: float, mode: str,
            rng: np.random.Generator, per_cell_donor: bool = True):
    """Return (corrupted copy of x, boolean mask of corrupted cells)."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"corruption probability must be in [0, 1], got {p}")
    b, f = x.shape
    mask = rng.random((b, f)) < p
    out = x.copy()
    if p == 0.0 or not mask.any():
        return out, mask
    if mode == "zero":
        out[mask] = 0.0
    elif mode == "resample":
        if pool is None or len(pool) == 0:
            raise ValueError("resample corruption requires a nonempty pool")
        if pool.shape[1] != f:
            raise ValueError(f"pool has {pool.shape[1]} features, batch has {f}")
        if per_cell_donor:
            donors = rng.integers(0, len(pool), size=(b, f))
            out[mask] = pool[donors, np.arange(f)[None, :].repeat(b, axis=0)][mask]
        else:
            donors = rng.integers(0, len(pool), size=b)
            donated = pool[donors]
            out[mask] = donated[mask]
    else:
        raise ValueError(f"unknown corruption mode {mode!r}")
    return out, mask


def make_views(x: np.ndarray, pool: np.ndarray | None, config: CorruptionConfig,
               rng: np.random.Generator):
    """Two independent corruptions of x: (student_view, teacher_view)."""
    student, _ = corrupt(x, pool, config.p_student, config.mode, rng,
                         per_cell_donor=config.per_cell_donor)
    teacher, _ = corrupt(x, pool, config.p_teacher, config.mode, rng,
                         per_cell_donor=config.per_cell_donor)
    return student, teacher
