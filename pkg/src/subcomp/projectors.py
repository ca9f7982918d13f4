"""Structured random subspace maps: w in R^d -> delta-theta in R^D.

Six kinds are supported: dense Gaussian, sparse signed-binary, Kronecker
sum, Kronecker product, FiLM (support restricted to batchnorm scale/shift
and head coordinates), and the FiLM + Kronecker-product combination.
All factors are drawn from a Philox counter-based generator keyed by the
spec seed, so the map is reproducible across platforms and process
restarts. The Kronecker kinds are applied through factored
reshape-multiplies and are never materialized densely (the dense matrix
exists only as a test oracle).

Factor shapes use ceilings: with s = ceil(sqrt(D)) and t = ceil(sqrt(d))
the structured block spans s^2 >= D rows and t^2 >= d columns, and the
surplus rows/columns are truncated. This realizes the perfect-square
padding without a separate dense pad block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

KINDS = ("dense", "sparse", "kron_sum", "kron_product", "film", "film_plus_kron")

# Key offset separating the FiLM stream from the Kronecker stream in the
# combined kind (golden-ratio constant, fixed forever).
_FILM_KEY_OFFSET = 0x9E3779B97F4A7C15

# Dense factors above this many entries are regenerated in row blocks at
# apply time instead of being kept in memory.
_DENSE_CACHE_LIMIT = 1 << 24
_DENSE_BLOCK_ROWS = 4096


@dataclass(frozen=True)
class ProjectorSpec:
    kind: str
    big_dim: int  # ambient dimension D
    sub_dim: int  # subspace dimension d
    seed: int
    film_mask: np.ndarray | None = None
    density: float | None = None  # sparse kind; default 1/sqrt(D)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown projector kind {self.kind!r}")
        if not (1 <= self.sub_dim <= self.big_dim):
            raise ValueError(
                f"need 1 <= d <= D, got d={self.sub_dim}, D={self.big_dim}")
        if self.kind in ("film", "film_plus_kron"):
            mask = self.film_mask
            if mask is None or len(mask) == 0:
                raise ValueError(f"{self.kind} projector needs a non-empty film_mask")
            mask = np.asarray(mask, dtype=np.int64)
            if mask.max() >= self.big_dim or mask.min() < 0:
                raise ValueError("film_mask indices out of range")
            if len(np.unique(mask)) != len(mask):
                raise ValueError("film_mask indices must be unique")
            object.__setattr__(self, "film_mask", mask)

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "big_dim": self.big_dim,
             "sub_dim": self.sub_dim, "seed": self.seed}
        if self.film_mask is not None:
            d["film_mask"] = [int(i) for i in self.film_mask]
        if self.density is not None:
            d["density"] = self.density
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectorSpec":
        mask = d.get("film_mask")
        return cls(kind=d["kind"], big_dim=int(d["big_dim"]),
                   sub_dim=int(d["sub_dim"]), seed=int(d["seed"]),
                   film_mask=None if mask is None else np.asarray(mask, np.int64),
                   density=d.get("density"))


def _rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=seed))


class Projector:
    """Immutable linear map; `apply` and `transpose_apply` are pure."""

    def __init__(self, spec: ProjectorSpec):
        self.spec = spec
        D, d, seed = spec.big_dim, spec.sub_dim, spec.seed
        self._dense_factor = None
        self._sparse = None
        if spec.kind == "dense":
            if D * d <= _DENSE_CACHE_LIMIT:
                self._dense_factor = _rng(seed).standard_normal((D, d))
        elif spec.kind == "sparse":
            self._sparse = self._build_sparse(seed, D, d, spec.density)
        elif spec.kind == "kron_sum":
            s = math.isqrt(D - 1) + 1
            g = _rng(seed)
            self.R1 = g.standard_normal((s, d))
            self.R2 = g.standard_normal((s, d))
            self._s = s
        elif spec.kind == "kron_product":
            self._init_kron(seed, D, d)
        elif spec.kind == "film":
            m = len(spec.film_mask)
            self.F = _rng(seed).standard_normal((m, d))
        elif spec.kind == "film_plus_kron":
            m = len(spec.film_mask)
            self.F = _rng(seed).standard_normal((m, d))
            self._init_kron((seed + _FILM_KEY_OFFSET) % (1 << 128), D, d)

    def _init_kron(self, seed, D, d):
        s = math.isqrt(D - 1) + 1
        t = math.isqrt(d - 1) + 1
        g = _rng(seed)
        self.Q1 = g.standard_normal((s, t))
        self.Q2 = g.standard_normal((s, t))
        self._s, self._t = s, t

    @staticmethod
    def _build_sparse(seed, D, d, density):
        # Signed-binary columns with a fixed nonzero count per column,
        # scaled so every column has unit norm exactly.
        rho = density if density is not None else 1.0 / math.sqrt(D)
        k = max(1, round(rho * D))
        g = _rng(seed)
        rows = np.empty(k * d, dtype=np.int64)
        vals = np.empty(k * d)
        scale = 1.0 / math.sqrt(k)
        for c in range(d):
            rows[c * k:(c + 1) * k] = g.choice(D, size=k, replace=False)
            vals[c * k:(c + 1) * k] = scale * (2.0 * g.integers(0, 2, size=k) - 1.0)
        cols = np.repeat(np.arange(d), k)
        return sp.csr_matrix((vals, (rows, cols)), shape=(D, d))

    # -- application ------------------------------------------------------

    def apply(self, w: np.ndarray) -> np.ndarray:
        """Pw, computed without materializing P for the structured kinds."""
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.spec.sub_dim,):
            raise ValueError(
                f"expected length-{self.spec.sub_dim} vector, got {w.shape}")
        kind = self.spec.kind
        D, d = self.spec.big_dim, self.spec.sub_dim
        if kind == "dense":
            return self._dense_apply(w)
        if kind == "sparse":
            return self._sparse @ w
        if kind == "kron_sum":
            u = self.R1 @ w
            v = self.R2 @ w
            out = (v[:, None] + u[None, :]).ravel()[:D]
            return out / math.sqrt(2 * D)
        if kind == "kron_product":
            return self._kron_apply(w)
        if kind == "film":
            return self._film_apply(w)
        # film_plus_kron
        return (self._film_apply(w) + self._kron_apply(w)) / math.sqrt(2)

    def transpose_apply(self, v: np.ndarray) -> np.ndarray:
        """P^T v, the pullback used for subspace gradients."""
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.spec.big_dim,):
            raise ValueError(
                f"expected length-{self.spec.big_dim} vector, got {v.shape}")
        kind = self.spec.kind
        D = self.spec.big_dim
        if kind == "dense":
            return self._dense_transpose_apply(v)
        if kind == "sparse":
            return self._sparse.T @ v
        if kind == "kron_sum":
            s = self._s
            vp = np.zeros(s * s)
            vp[:D] = v
            A = vp.reshape(s, s)
            out = self.R1.T @ A.sum(axis=0) + self.R2.T @ A.sum(axis=1)
            return out / math.sqrt(2 * D)
        if kind == "kron_product":
            return self._kron_transpose(v)
        if kind == "film":
            return self._film_transpose(v)
        return (self._film_transpose(v) + self._kron_transpose(v)) / math.sqrt(2)

    def _kron_apply(self, w):
        s, t = self._s, self._t
        D, d = self.spec.big_dim, self.spec.sub_dim
        wp = np.zeros(t * t)
        wp[:d] = w
        out = self.Q1 @ wp.reshape(t, t) @ self.Q2.T
        return out.ravel()[:D] / math.sqrt(D)

    def _kron_transpose(self, v):
        s, t = self._s, self._t
        D, d = self.spec.big_dim, self.spec.sub_dim
        vp = np.zeros(s * s)
        vp[:D] = v
        out = self.Q1.T @ vp.reshape(s, s) @ self.Q2
        return out.ravel()[:d] / math.sqrt(D)

    def _film_apply(self, w):
        out = np.zeros(self.spec.big_dim)
        m = len(self.spec.film_mask)
        out[self.spec.film_mask] = (self.F @ w) / math.sqrt(m)
        return out

    def _film_transpose(self, v):
        m = len(self.spec.film_mask)
        return (self.F.T @ v[self.spec.film_mask]) / math.sqrt(m)

    def _dense_apply(self, w):
        D, d = self.spec.big_dim, self.spec.sub_dim
        if self._dense_factor is not None:
            return (self._dense_factor @ w) / math.sqrt(D)
        # Stream row blocks; Philox fills arrays in C order, so blockwise
        # regeneration reproduces the materialized matrix exactly.
        g = _rng(self.spec.seed)
        out = np.empty(D)
        for start in range(0, D, _DENSE_BLOCK_ROWS):
            stop = min(start + _DENSE_BLOCK_ROWS, D)
            block = g.standard_normal((stop - start, d))
            out[start:stop] = block @ w
        return out / math.sqrt(D)

    def _dense_transpose_apply(self, v):
        D, d = self.spec.big_dim, self.spec.sub_dim
        if self._dense_factor is not None:
            return (self._dense_factor.T @ v) / math.sqrt(D)
        g = _rng(self.spec.seed)
        out = np.zeros(d)
        for start in range(0, D, _DENSE_BLOCK_ROWS):
            stop = min(start + _DENSE_BLOCK_ROWS, D)
            block = g.standard_normal((stop - start, d))
            out += block.T @ v[start:stop]
        return out / math.sqrt(D)

    # -- test oracle ------------------------------------------------------

    def dense_matrix(self) -> np.ndarray:
        """Materialize P densely. Test oracle only; refuses huge sizes."""
        D, d = self.spec.big_dim, self.spec.sub_dim
        if D * d > (1 << 26):
            raise MemoryError("dense materialization refused at this size")
        kind = self.spec.kind
        if kind == "dense":
            if self._dense_factor is not None:
                return self._dense_factor / math.sqrt(D)
            return _rng(self.spec.seed).standard_normal((D, d)) / math.sqrt(D)
        if kind == "sparse":
            return self._sparse.toarray()
        if kind == "kron_sum":
            s = self._s
            ones = np.ones((s, 1))
            P = (np.kron(ones, self.R1) + np.kron(self.R2, ones)) / math.sqrt(2 * D)
            return P[:D]
        if kind == "kron_product":
            return np.kron(self.Q1, self.Q2)[:D, :d] / math.sqrt(D)
        if kind == "film":
            P = np.zeros((D, d))
            P[self.spec.film_mask] = self.F / math.sqrt(len(self.spec.film_mask))
            return P
        Pf = np.zeros((D, d))
        Pf[self.spec.film_mask] = self.F / math.sqrt(len(self.spec.film_mask))
        Pk = np.kron(self.Q1, self.Q2)[:D, :d] / math.sqrt(D)
        return (Pf + Pk) / math.sqrt(2)


def make_projector(spec: ProjectorSpec) -> Projector:
    return Projector(spec)


def embed(theta0: np.ndarray, P: Projector, w: np.ndarray) -> np.ndarray:
    """theta = theta0 + Pw, in the parameter vector's dtype."""
    theta0 = np.asarray(theta0)
    if theta0.shape != (P.spec.big_dim,):
        raise ValueError(
            f"theta0 has shape {theta0.shape}, projector needs ({P.spec.big_dim},)")
    return (theta0.astype(np.float64) + P.apply(w)).astype(np.float32)


def orthogonality_deviation(P: Projector, trials: int, probe_seed: int) -> dict:
    """Sampled Gram-matrix deviations |<Pe_i, Pe_j> - delta_ij|.

    Returns mean and max over `trials` sampled index pairs (deterministic
    given probe_seed). Applied columns are cached across pairs.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    d = P.spec.sub_dim
    g = np.random.Generator(np.random.Philox(key=probe_seed))
    cols: dict[int, np.ndarray] = {}

    def col(i):
        if i not in cols:
            e = np.zeros(d)
            e[i] = 1.0
            cols[i] = P.apply(e)
        return cols[i]

    devs = []
    for _ in range(trials):
        i, j = (0, 0) if d == 1 else g.integers(0, d, size=2)
        gram = float(col(i) @ col(j))
        devs.append(abs(gram - (1.0 if i == j else 0.0)))
    devs = np.asarray(devs)
    return {"mean": float(devs.mean()), "max": float(devs.max()),
            "trials": trials}
