"""Subspace training (fit w with gradients pulled back through P) and
quantization-aware training (joint straight-through updates of w and the
codebook), plus unconstrained full-space training used for prior
checkpoints and test oracles.

A run is single-threaded and deterministic given its seeds: parameter
updates are float64, data order is driven by a dedicated shuffle seed,
and the gradient reduction order is fixed.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import nets
from .nets import ModelSpec
from .projectors import Projector
from .quantize import Codebook, init_levels, quantize, repair_empty_levels, ste_backward


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int | None = 128  # None = full batch
    lr: float = 0.01
    optimizer: str = "adam"  # "sgd" | "momentum" | "adam"
    momentum: float = 0.9
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = None  # L2 clip on the full gradient
    cosine: bool = False
    warmup_epochs: int = 10
    quant_epochs: int = 30
    quant_lr: float = 0.005
    seed: int = 0
    bn_mode: str = "affine"  # batchnorm handling during training and eval

    def __post_init__(self):
        if self.epochs < 1 or self.quant_epochs < 0:
            raise ValueError("epoch counts must be positive")
        if self.lr <= 0 or self.quant_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip threshold must be positive")
        if self.optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def full_batch(cls, **kw) -> "TrainConfig":
        """Full-batch defaults: clipped gradients, cosine schedule with
        10 warm-up epochs, plain SGD."""
        kw.setdefault("batch_size", None)
        kw.setdefault("clip_norm", 0.25)
        kw.setdefault("cosine", True)
        kw.setdefault("optimizer", "sgd")
        return cls(**kw)


class _Optimizer:
    def __init__(self, cfg: TrainConfig, dim: int, lr: float):
        self.cfg = cfg
        self.base_lr = lr
        self.m = np.zeros(dim)
        self.v = np.zeros(dim)
        self.t = 0

    def lr_at(self, epoch: int, total_epochs: int) -> float:
        if not self.cfg.cosine:
            return self.base_lr
        warm = min(self.cfg.warmup_epochs, total_epochs)
        if epoch < warm:
            return self.base_lr * (epoch + 1) / warm
        span = max(total_epochs - warm, 1)
        return self.base_lr * 0.5 * (1 + math.cos(math.pi * (epoch - warm) / span))

    def step(self, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        cfg = self.cfg
        if cfg.clip_norm is not None:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.clip_norm:
                grad = grad * (cfg.clip_norm / norm)
        if cfg.optimizer == "sgd":
            return param - lr * grad
        if cfg.optimizer == "momentum":
            self.m = cfg.momentum * self.m + grad
            return param - lr * self.m
        self.t += 1
        self.m = cfg.adam_beta1 * self.m + (1 - cfg.adam_beta1) * grad
        self.v = cfg.adam_beta2 * self.v + (1 - cfg.adam_beta2) * grad * grad
        mhat = self.m / (1 - cfg.adam_beta1 ** self.t)
        vhat = self.v / (1 - cfg.adam_beta2 ** self.t)
        return param - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)


def _batches(n: int, batch_size: int | None, rng: np.random.Generator):
    if batch_size is None:
        yield np.arange(n)
        return
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


@dataclass
class TrainResult:
    w: np.ndarray
    loss_curve: list[float] = field(default_factory=list)
    codebook: Codebook | None = None


def train_subspace(spec: ModelSpec, theta0: np.ndarray, P: Projector,
                   dataset, cfg: TrainConfig) -> TrainResult:
    """Minimize training NLL over the subspace coordinates w.

    Gradients w.r.t. w are the transpose-apply pullback P^T grad_theta.
    Raises TrainingDiverged if the loss goes non-finite.
    """
    if P.spec.big_dim != spec.num_params:
        raise ValueError("projector ambient dimension does not match the model")
    d = P.spec.sub_dim
    w = np.zeros(d)
    opt = _Optimizer(cfg, d, cfg.lr)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    theta0 = np.asarray(theta0, dtype=np.float64)
    curve = []
    for epoch in range(cfg.epochs):
        lr = opt.lr_at(epoch, cfg.epochs)
        epoch_loss, seen = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            theta = (theta0 + P.apply(w)).astype(np.float32)
            try:
                nll, gtheta = nets.loss_and_grad(spec, theta, dataset.inputs[idx],
                                                 dataset.labels[idx], mode=cfg.bn_mode)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite forward at epoch {epoch}") from exc
            if not math.isfinite(nll):
                raise TrainingDiverged(f"NLL became {nll} at epoch {epoch}")
            gw = P.transpose_apply(gtheta)
            w = opt.step(w, gw, lr)
            epoch_loss += nll * len(idx)
            seen += len(idx)
        curve.append(epoch_loss / seen)
    return TrainResult(w=w, loss_curve=curve)


def train_quantize(spec: ModelSpec, theta0: np.ndarray, P: Projector,
                   w_init: np.ndarray, num_levels: int, init_method: str,
                   dataset, cfg: TrainConfig) -> TrainResult:
    """Joint straight-through training of (w, c) per the quantized forward
    pass: every step evaluates the network at the quantized coordinates
    and routes gradients with the identity/indicator rules.

    The returned codebook holds the final training-precision levels;
    coding uses its half-precision rounding.
    """
    if num_levels < 1:
        raise ValueError("need at least one quantization level")
    w = np.asarray(w_init, dtype=np.float64).copy()
    cb = init_levels(w, num_levels, init_method)
    levels = cb.levels.copy()
    opt_w = _Optimizer(cfg, len(w), cfg.quant_lr)
    opt_c = _Optimizer(cfg, num_levels, cfg.quant_lr)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed + 1))
    theta0 = np.asarray(theta0, dtype=np.float64)
    curve = []
    for epoch in range(cfg.quant_epochs):
        epoch_loss, seen = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            q = np.abs(w[:, None] - levels[None, :]).argmin(axis=1)
            w_hat = levels[q]
            theta = (theta0 + P.apply(w_hat)).astype(np.float32)
            try:
                nll, gtheta = nets.loss_and_grad(spec, theta, dataset.inputs[idx],
                                                 dataset.labels[idx], mode=cfg.bn_mode)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite forward in quant epoch {epoch}") from exc
            if not math.isfinite(nll):
                raise TrainingDiverged(f"NLL became {nll} in quant epoch {epoch}")
            upstream = P.transpose_apply(gtheta)
            gw, gc = ste_backward(q, upstream, num_levels)
            w = opt_w.step(w, gw, cfg.quant_lr)
            levels = opt_c.step(levels, gc, cfg.quant_lr)
            epoch_loss += nll * len(idx)
            seen += len(idx)
        curve.append(epoch_loss / seen)
        cb = repair_empty_levels(w, Codebook(levels))
        levels = cb.levels
    if num_levels > 1 and np.ptp(levels) == 0.0:
        warnings.warn("all quantization levels collapsed to one value")
    return TrainResult(w=w, loss_curve=curve, codebook=Codebook(levels))


def train_full_space(spec: ModelSpec, theta_init: np.ndarray, dataset,
                     cfg: TrainConfig) -> TrainResult:
    """Unconstrained training of the full parameter vector (prior
    checkpoints, transfer pretraining, and test oracles)."""
    theta = np.asarray(theta_init, dtype=np.float64).copy()
    opt = _Optimizer(cfg, len(theta), cfg.lr)
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))
    curve = []
    for epoch in range(cfg.epochs):
        lr = opt.lr_at(epoch, cfg.epochs)
        epoch_loss, seen = 0.0, 0
        for idx in _batches(len(dataset), cfg.batch_size, rng):
            try:
                nll, g = nets.loss_and_grad(spec, theta.astype(np.float32),
                                            dataset.inputs[idx], dataset.labels[idx],
                                            mode=cfg.bn_mode)
            except FloatingPointError as exc:
                raise TrainingDiverged(f"non-finite forward at epoch {epoch}") from exc
            if not math.isfinite(nll):
                raise TrainingDiverged(f"NLL became {nll} at epoch {epoch}")
            theta = opt.step(theta, g, lr)
            epoch_loss += nll * len(idx)
            seen += len(idx)
        curve.append(epoch_loss / seen)
    return TrainResult(w=theta, loss_curve=curve)
