"""Minimal deterministic neural-network engine over flat parameter vectors.

Supports an MLP and a small ConvNet (3x3 same-padding convs, optional
batchnorm, ReLU, 2x2 max-pooling, global average pooling, linear head).
All parameters of a model live in a single flat float32 vector whose
layout is a pure function of the ModelSpec, so models can be trained in
a random subspace of the flat vector and serialized byte-for-byte.

Weights and activations are float32; losses and other scalars are
accumulated in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

# Batchnorm eval mode: y = gamma * (x - mean) / sqrt(var + EPS) + beta.
BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class ParamBlock(NamedTuple):
    name: str
    offset: int
    size: int
    shape: tuple[int, ...]
    role: str  # "weight" | "bias" | "bn_scale" | "bn_shift"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; the flat parameter layout is derived from it."""

    arch: str  # "mlp" | "convnet"
    input_shape: tuple[int, ...]  # (H, W) or (C, H, W)
    num_classes: int
    hidden: tuple[int, ...] = (32,)  # MLP hidden sizes
    width: int = 16  # ConvNet channel multiplier
    batchnorm: bool = False

    def __post_init__(self):
        if self.arch not in ("mlp", "convnet"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.arch == "convnet" and len(self.input_shape) != 3:
            raise ValueError("convnet input shape must be (C, H, W)")

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layers(self) -> list[dict]:
        """The layer program, in order. Stable across runs by construction."""
        if self.arch == "mlp":
            return self._mlp_layers()
        return self._convnet_layers()

    def _mlp_layers(self) -> list[dict]:
        sizes = [self.input_size, *self.hidden, self.num_classes]
        prog: list[dict] = [{"kind": "flatten"}]
        for i, (nin, nout) in enumerate(zip(sizes[:-1], sizes[1:])):
            prog.append({"kind": "affine", "nin": nin, "nout": nout, "name": f"fc{i}"})
            if i < len(sizes) - 2:
                prog.append({"kind": "relu"})
        return prog

    def _convnet_layers(self) -> list[dict]:
        k = self.width
        cin = self.input_shape[0]
        # Channel plan follows the fixed 9-conv table: three blocks of three
        # convs, pooling after the first two blocks, then GAP + linear head.
        channels = [(cin, k), (k, k), (k, 2 * k),
                    (2 * k, 2 * k), (2 * k, 2 * k), (2 * k, 2 * k),
                    (2 * k, 2 * k), (2 * k, 2 * k), (2 * k, 2 * k)]
        prog: list[dict] = []
        for i, (ci, co) in enumerate(channels):
            prog.append({"kind": "conv", "cin": ci, "cout": co, "name": f"conv{i}"})
            if self.batchnorm:
                prog.append({"kind": "bn", "channels": co, "name": f"bn{i}"})
            prog.append({"kind": "relu"})
            if i in (2, 5):
                prog.append({"kind": "maxpool"})
        prog.append({"kind": "gap"})
        prog.append({"kind": "affine", "nin": 2 * k, "nout": self.num_classes,
                     "name": "head"})
        return prog

    def layout(self) -> list[ParamBlock]:
        blocks: list[ParamBlock] = []
        off = 0

        def add(name, shape, role):
            nonlocal off
            size = int(np.prod(shape))
            blocks.append(ParamBlock(name, off, size, tuple(shape), role))
            off += size

        for layer in self.layers():
            kind = layer["kind"]
            if kind == "affine":
                add(layer["name"] + ".w", (layer["nin"], layer["nout"]), "weight")
                add(layer["name"] + ".b", (layer["nout"],), "bias")
            elif kind == "conv":
                add(layer["name"] + ".w", (layer["cout"], layer["cin"], 3, 3), "weight")
                add(layer["name"] + ".b", (layer["cout"],), "bias")
            elif kind == "bn":
                add(layer["name"] + ".g", (layer["channels"],), "bn_scale")
                add(layer["name"] + ".b", (layer["channels"],), "bn_shift")
        return blocks

    @property
    def num_params(self) -> int:
        return sum(b.size for b in self.layout())

    def head_coords(self) -> np.ndarray:
        """Flat indices of the final linear layer (and batchnorm scale/shift
        when present): the FiLM-eligible coordinate set."""
        idx = []
        head_names = {"head.w", "head.b"} if self.arch == "convnet" else None
        last_fc = f"fc{len(self.hidden)}"
        for b in self.layout():
            film = b.role in ("bn_scale", "bn_shift")
            if head_names is not None:
                film = film or b.name in head_names
            else:
                film = film or b.name.startswith(last_fc + ".")
            if film:
                idx.extend(range(b.offset, b.offset + b.size))
        return np.asarray(idx, dtype=np.int64)


def check_params(spec: ModelSpec, theta: np.ndarray,
                 dtype=np.float32) -> np.ndarray:
    theta = np.asarray(theta)
    if theta.ndim != 1 or theta.shape[0] != spec.num_params:
        raise ValueError(
            f"parameter vector has length {theta.shape}, spec needs {spec.num_params}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("parameter vector contains non-finite entries")
    return theta.astype(dtype, copy=False)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Fan-in-scaled uniform init, drawn block by block from Philox(seed).

    Batchnorm scale starts at 1 and shift at 0. Deterministic and portable:
    Philox is a counter-based generator with fixed published constants.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    theta = np.empty(spec.num_params, dtype=np.float32)
    for b in spec.layout():
        if b.role == "bn_scale":
            theta[b.offset:b.offset + b.size] = 1.0
        elif b.role == "bn_shift":
            theta[b.offset:b.offset + b.size] = 0.0
        else:
            fan_in = b.shape[0] if len(b.shape) == 2 else int(np.prod(b.shape[1:]))
            if b.role == "bias":
                fan_in = max(b.size, 1)
            # sqrt(6 / fan_in) keeps activation variance roughly constant
            # through ReLU stacks; plain 1/sqrt(fan_in) attenuates the
            # inter-sample signal exponentially in depth
            bound = np.sqrt(6.0 / fan_in) if b.role == "weight" else 1.0 / np.sqrt(fan_in)
            theta[b.offset:b.offset + b.size] = rng.uniform(
                -bound, bound, size=b.size).astype(np.float32)
    return theta


def _get(theta, block):
    return theta[block.offset:block.offset + block.size].reshape(block.shape)


# ---------------------------------------------------------------------------
# layer forward / backward primitives


def _affine_fwd(x, w, b):
    return x @ w + b, (x, w)


def _affine_bwd(cache, dout):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, [dw, db]


def _relu_fwd(x):
    return np.maximum(x, 0.0), (x > 0)


def _relu_bwd(mask, dout):
    return dout * mask


def _conv_fwd(x, w, b):
    # 3x3 same padding via sliding windows; w is (cout, cin, 3, 3).
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(2, 3))
    out = np.einsum("ncijuv,ocuv->noij", win, w, optimize=True) + b[None, :, None, None]
    return out, (win, w)


def _conv_bwd(cache, dout):
    win, w = cache
    dw = np.einsum("ncijuv,noij->ocuv", win, dout, optimize=True)
    db = dout.sum(axis=(0, 2, 3))
    # dx is the full correlation of dout with the flipped kernel.
    dp = np.pad(dout, ((0, 0), (0, 0), (1, 1), (1, 1)))
    dwin = np.lib.stride_tricks.sliding_window_view(dp, (3, 3), axis=(2, 3))
    wf = w[:, :, ::-1, ::-1]
    dx = np.einsum("noijuv,ocuv->ncij", dwin, wf, optimize=True)
    return dx, [dw, db]


def _maxpool_fwd(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    xt = x[:, :, :2 * h2, :2 * w2].reshape(n, c, h2, 2, w2, 2)
    flat = xt.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h2, w2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return out, (arg, x.shape)


def _maxpool_bwd(cache, dout):
    arg, shape = cache
    n, c, h, w = shape
    h2, w2 = h // 2, w // 2
    dflat = np.zeros((n, c, h2, w2, 4), dtype=dout.dtype)
    np.put_along_axis(dflat, arg[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, :2 * h2, :2 * w2] = (
        dflat.reshape(n, c, h2, w2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, 2 * h2, 2 * w2))
    return dx


def _gap_fwd(x):
    return x.mean(axis=(2, 3)), x.shape


def _gap_bwd(shape, dout):
    n, c, h, w = shape
    return np.broadcast_to(dout[:, :, None, None] / (h * w), shape).astype(dout.dtype)


def _bn_fwd(x, g, b, mode, stats):
    axes = (0, 2, 3) if x.ndim == 4 else (0,)
    expand = (lambda v: v[None, :, None, None]) if x.ndim == 4 else (lambda v: v[None, :])
    if mode == "train":
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
    elif mode == "affine":
        mean = np.zeros_like(g)
        var = np.ones_like(g)
    else:  # "eval": caller-provided running statistics
        if stats is None:
            raise ValueError("eval-mode batchnorm needs running statistics")
        mean, var = stats
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - expand(mean)) * expand(inv)
    out = expand(g) * xhat + expand(b)
    return out, (xhat, inv, g, mode, axes, expand, x.shape), (mean, var)


def _bn_bwd(cache, dout):
    xhat, inv, g, mode, axes, expand, shape = cache
    m = np.prod([shape[a] for a in axes])
    dg = (dout * xhat).sum(axis=axes)
    db = dout.sum(axis=axes)
    dxhat = dout * expand(g)
    if mode == "train":
        dx = (expand(inv) / m) * (
            m * dxhat
            - expand(dxhat.sum(axis=axes))
            - xhat * expand((dxhat * xhat).sum(axis=axes)))
    else:
        dx = dxhat * expand(inv)
    return dx, [dg, db]


# ---------------------------------------------------------------------------
# whole-model forward / backward


def _check_inputs(spec, x, dtype=np.float32):
    x = np.asarray(x, dtype=dtype)
    if x.shape[1:] != tuple(spec.input_shape):
        raise ValueError(
            f"input shape {x.shape[1:]} does not match spec {spec.input_shape}")
    return x


def forward(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
            mode: str = "eval", bn_stats: dict | None = None,
            with_cache: bool = False, dtype=np.float32):
    """Run the network, returning (batch, C) logits.

    mode controls batchnorm only: "train" uses per-batch statistics,
    "eval" uses the supplied running statistics, "affine" fixes mean=0,
    var=1 so the layer is the pure learned scale/shift (the mode used for
    certified evaluation, where the model must be a function of theta alone).

    dtype sets the activation precision; float64 exists for gradient
    verification against finite differences.
    """
    theta = check_params(spec, theta, dtype)
    x = _check_inputs(spec, x, dtype)
    blocks = {b.name: b for b in spec.layout()}
    caches = []
    batch_stats = {}
    for layer in spec.layers():
        kind = layer["kind"]
        if kind == "flatten":
            caches.append(("flatten", x.shape))
            x = x.reshape(x.shape[0], -1)
        elif kind == "affine":
            w = _get(theta, blocks[layer["name"] + ".w"])
            b = _get(theta, blocks[layer["name"] + ".b"])
            x, cache = _affine_fwd(x, w, b)
            caches.append(("affine", layer["name"], cache))
        elif kind == "conv":
            w = _get(theta, blocks[layer["name"] + ".w"])
            b = _get(theta, blocks[layer["name"] + ".b"])
            x, cache = _conv_fwd(x, w, b)
            caches.append(("conv", layer["name"], cache))
        elif kind == "bn":
            g = _get(theta, blocks[layer["name"] + ".g"])
            b = _get(theta, blocks[layer["name"] + ".b"])
            stats = None if bn_stats is None else bn_stats.get(layer["name"])
            x, cache, stats_out = _bn_fwd(x, g, b, mode, stats)
            batch_stats[layer["name"]] = stats_out
            caches.append(("bn", layer["name"], cache))
        elif kind == "relu":
            x, cache = _relu_fwd(x)
            caches.append(("relu", cache))
        elif kind == "maxpool":
            x, cache = _maxpool_fwd(x)
            caches.append(("maxpool", cache))
        elif kind == "gap":
            x, cache = _gap_fwd(x)
            caches.append(("gap", cache))
    if not np.all(np.isfinite(x)):
        raise FloatingPointError("non-finite logits")
    if with_cache:
        return x, caches, batch_stats
    return x


def _backward(spec, theta, caches, dlogits):
    blocks = spec.layout()
    by_name = {b.name: b for b in blocks}
    grad = np.zeros(spec.num_params, dtype=np.float64)

    def store(name, suffixes, dparams):
        for suf, dp in zip(suffixes, dparams):
            b = by_name[name + suf]
            grad[b.offset:b.offset + b.size] = np.asarray(dp, dtype=np.float64).ravel()

    dx = dlogits
    for entry in reversed(caches):
        kind = entry[0]
        if kind == "flatten":
            dx = dx.reshape(entry[1])
        elif kind == "affine":
            dx, dparams = _affine_bwd(entry[2], dx)
            store(entry[1], (".w", ".b"), dparams)
        elif kind == "conv":
            dx, dparams = _conv_bwd(entry[2], dx)
            store(entry[1], (".w", ".b"), dparams)
        elif kind == "bn":
            dx, dparams = _bn_bwd(entry[2], dx)
            store(entry[1], (".g", ".b"), dparams)
        elif kind == "relu":
            dx = _relu_bwd(entry[1], dx)
        elif kind == "maxpool":
            dx = _maxpool_bwd(entry[1], dx)
        elif kind == "gap":
            dx = _gap_bwd(entry[1], dx)
    return grad


def softmax_nll(logits: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood (float64) and the gradient w.r.t. logits."""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    nll = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return nll, (dlogits / n).astype(logits.dtype)


def loss_and_grad(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
                  y: np.ndarray, mode: str = "train",
                  bn_stats: dict | None = None, dtype=np.float32):
    """Mean NLL over the batch and its gradient w.r.t. the flat parameters."""
    if len(x) == 0:
        raise ValueError("empty batch")
    logits, caches, _ = forward(spec, theta, x, mode=mode, bn_stats=bn_stats,
                                with_cache=True, dtype=dtype)
    nll, dlogits = softmax_nll(logits, np.asarray(y))
    grad = _backward(spec, theta, caches, dlogits)
    return nll, grad


def predict(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
            mode: str = "eval", bn_stats: dict | None = None,
            batch_size: int = 512) -> np.ndarray:
    """Argmax class predictions; argmax ties break toward the lowest index."""
    preds = []
    for start in range(0, len(x), batch_size):
        logits = forward(spec, theta, x[start:start + batch_size],
                         mode=mode, bn_stats=bn_stats)
        preds.append(logits.argmax(axis=1))
    return np.concatenate(preds)


def zero_one_risk(spec: ModelSpec, theta: np.ndarray, x: np.ndarray,
                  y: np.ndarray, mode: str = "eval",
                  bn_stats: dict | None = None) -> float:
    if len(x) == 0:
        raise ValueError("empty dataset")
    preds = predict(spec, theta, x, mode=mode, bn_stats=bn_stats)
    return float(np.mean(preds != np.asarray(y)))


def mean_nll(spec: ModelSpec, theta: np.ndarray, x: np.ndarray, y: np.ndarray,
             mode: str = "eval", bn_stats: dict | None = None,
             batch_size: int = 512) -> float:
    """Mean NLL in nats over a dataset, without gradients."""
    total = 0.0
    y = np.asarray(y)
    for start in range(0, len(x), batch_size):
        logits = forward(spec, theta, x[start:start + batch_size],
                         mode=mode, bn_stats=bn_stats)
        nll, _ = softmax_nll(logits, y[start:start + batch_size])
        total += nll * len(logits)
    return total / len(x)
