"""Learned scalar quantization: codebook init, nearest-level assignment,
and straight-through gradients.

A Codebook keeps both the training-precision levels and the same values
rounded to IEEE half precision ("coding levels"). Every certified risk
evaluation uses the coding levels, so the evaluated model is byte-identical
to the one reconstructed from the compressed message.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KMEANS_MAX_ITERS = 50
KMEANS_TOL = 1e-8


@dataclass
class Codebook:
    levels: np.ndarray  # float64, length L

    def __post_init__(self):
        self.levels = np.asarray(self.levels, dtype=np.float64)
        if self.levels.ndim != 1 or len(self.levels) < 1:
            raise ValueError("codebook needs at least one level")
        with np.errstate(over="ignore"):
            half = np.float16(self.levels)
        if not np.all(np.isfinite(half)):
            raise ValueError("codebook levels overflow half precision")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def coding_levels(self) -> np.ndarray:
        """Levels rounded to half precision, returned as float64."""
        return np.float16(self.levels).astype(np.float64)


@dataclass
class QuantizedWeights:
    assignments: np.ndarray  # int64, length d, entries in [0, L)
    codebook: Codebook

    def reconstruct(self) -> np.ndarray:
        """The quantized vector w-hat, built from the coding levels."""
        return self.codebook.coding_levels[self.assignments]


def init_levels(w: np.ndarray, num_levels: int, method: str = "uniform") -> Codebook:
    """Uniform spacing on [min w, max w], or 1-D Lloyd k-means seeded from it."""
    w = np.asarray(w, dtype=np.float64)
    if len(w) == 0:
        raise ValueError("empty weight vector")
    if num_levels < 1:
        raise ValueError("need at least one level")
    lo, hi = float(w.min()), float(w.max())
    if num_levels == 1:
        levels = np.array([(lo + hi) / 2.0])
    else:
        levels = np.linspace(lo, hi, num_levels)
    if method == "uniform":
        return Codebook(levels)
    if method != "kmeans":
        raise ValueError(f"unknown init method {method!r}")
    for _ in range(KMEANS_MAX_ITERS):
        assign = _nearest(w, levels)
        new = levels.copy()
        for k in range(num_levels):
            members = w[assign == k]
            if len(members):
                new[k] = members.mean()
        if np.max(np.abs(new - levels)) < KMEANS_TOL:
            levels = new
            break
        levels = new
    return Codebook(np.sort(levels))


def _nearest(w: np.ndarray, levels: np.ndarray) -> np.ndarray:
    # argmin over |w_i - c_k|; np.argmin breaks ties toward the lowest k.
    return np.abs(w[:, None] - levels[None, :]).argmin(axis=1)


def quantize(w: np.ndarray, codebook: Codebook) -> QuantizedWeights:
    """Nearest-coding-level assignment (ties to the lowest index)."""
    w = np.asarray(w, dtype=np.float64)
    assign = _nearest(w, codebook.coding_levels)
    return QuantizedWeights(assign.astype(np.int64), codebook)


def ste_backward(assignments: np.ndarray, upstream: np.ndarray,
                 num_levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Straight-through gradients: d w-hat/d w = I, d w-hat_i/d c_k = [q(i)=k].

    Returns (grad_w, grad_c) where grad_w passes `upstream` through
    unchanged and grad_c[k] sums upstream over the coordinates assigned
    to level k.
    """
    assignments = np.asarray(assignments)
    upstream = np.asarray(upstream, dtype=np.float64)
    if assignments.shape != upstream.shape:
        raise ValueError("assignments and upstream gradient lengths differ")
    grad_c = np.bincount(assignments, weights=upstream, minlength=num_levels)
    return upstream.copy(), grad_c


def repair_empty_levels(w: np.ndarray, codebook: Codebook) -> Codebook:
    """Re-snap any level with no assigned coordinates to the coordinate
    farthest from its current value (standard empty-cluster repair)."""
    w = np.asarray(w, dtype=np.float64)
    levels = codebook.levels.copy()
    assign = _nearest(w, levels)
    for k in range(len(levels)):
        if not np.any(assign == k):
            far = np.abs(w - levels[k]).argmax()
            levels[k] = w[far]
            assign = _nearest(w, levels)
    return Codebook(levels)
