"""Encoder/decoder pixel-wise regressor with hand-derived analytic gradients.

Architecture (fixed by this artifact, not tunable per call):

* Every level applies two same-padded ``k x k`` convolutions, each followed
  by ``max(0, .)``.  Feature widths double per level from ``base_features``.
* ``depth`` 2x2 max-poolings contract the encoder; the deepest (bottleneck)
  level counts as part of the encoder so multi-task models share it.
* Each head owns a full decoder: nearest-neighbor 2x upsampling, a ``k x k``
  convolution (+ReLU), concatenation with the same-level encoder output
  (up-path channels first, skip channels second), then the two-convolution
  block.  The head itself is a single 1x1 convolution with *no* nonlinearity
  — outputs are unbounded regression values.
* No batch normalization, no dropout: gradients stay exactly checkable.

Tile sizes that ``2^depth`` does not divide are zero-padded internally to the
next multiple (e.g. 28 -> 32 at depth 3, two pixels on each side) and the
output is center-cropped back; the padding never leaks into the loss.

Precision policy: parameters and activations run in float32 by default; the
loss and the residual scaling that seeds backpropagation are always computed
in float64.  ``grad_check`` builds float64 parameters so the whole pipeline,
forward and backward, runs in 64-bit when checked against finite differences.

Activations use channel-last (N, H, W, C) layout internally — im2col reduces
every convolution to one GEMM and the transposed-kernel identity gives the
input gradient as another im2col GEMM, avoiding scatter-adds.  The public
operations speak the channel-first (N, C, H, W) convention of the rest of
the pipeline.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    DataError,
    FormatError,
    IntegrityError,
    NumericError,
    ShapeError,
    SpecError,
)

CHECKPOINT_MAGIC = b"UNPK"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# specification and parameters


@dataclass(frozen=True)
class UNetSpec:
    """Network shape: channel widths, depth, kernel, and named output heads."""

    input_channels: int
    base_features: int
    depth: int
    kernel_size: int = 3
    heads: tuple[tuple[str, int], ...] = (("urban", 1),)

    @classmethod
    def desk(cls, input_channels: int = 9, heads=(("urban", 1),)) -> "UNetSpec":
        """Small network that trains in minutes on one CPU core."""
        return cls(input_channels=input_channels, base_features=8, depth=2,
                   heads=tuple(heads))

    @classmethod
    def full_scale(cls, input_channels: int = 9, heads=(("urban", 1),)) -> "UNetSpec":
        """Production-size network for real multi-decade grid stacks."""
        return cls(input_channels=input_channels, base_features=32, depth=3,
                   heads=tuple(heads))

    @property
    def out_channels(self) -> int:
        return sum(c for _, c in self.heads)


def validate_spec(spec: UNetSpec) -> None:
    if spec.input_channels < 1:
        raise SpecError(f"input_channels must be >= 1, got {spec.input_channels}")
    if spec.base_features < 1:
        raise SpecError(f"base_features must be >= 1, got {spec.base_features}")
    if spec.depth < 1:
        raise SpecError(f"depth must be >= 1, got {spec.depth}")
    if spec.kernel_size < 1 or spec.kernel_size % 2 == 0:
        raise SpecError(f"kernel_size must be odd, got {spec.kernel_size}")
    if not spec.heads:
        raise SpecError("at least one head is required")
    names = [h for h, _ in spec.heads]
    if len(set(names)) != len(names):
        raise SpecError(f"duplicate head names in {names}")
    for name, out_ch in spec.heads:
        if not name or not name.isascii():
            raise SpecError(f"head name {name!r} must be non-empty ASCII")
        if out_ch < 1:
            raise SpecError(f"head {name!r} must emit >= 1 channel, got {out_ch}")


def expected_shapes(spec: UNetSpec) -> dict[str, tuple[int, ...]]:
    """Canonical parameter map: name -> shape, in deterministic order.

    Conv weights are (out_features, in_channels, k, k); biases (out_features,).
    The order here fixes both initialization draws and checkpoint layout.
    """
    validate_spec(spec)
    shapes: dict[str, tuple[int, ...]] = {}
    k = spec.kernel_size

    def conv(name: str, cin: int, cout: int, kk: int = k) -> None:
        shapes[f"{name}.w"] = (cout, cin, kk, kk)
        shapes[f"{name}.b"] = (cout,)

    cin = spec.input_channels
    for lvl in range(spec.depth + 1):
        width = spec.base_features << lvl
        conv(f"enc{lvl}.conv1", cin, width)
        conv(f"enc{lvl}.conv2", width, width)
        cin = width
    for head, out_ch in spec.heads:
        upper = spec.base_features << spec.depth
        for lvl in range(spec.depth - 1, -1, -1):
            width = spec.base_features << lvl
            conv(f"dec.{head}.{lvl}.up", upper, width)
            conv(f"dec.{head}.{lvl}.conv1", 2 * width, width)
            conv(f"dec.{head}.{lvl}.conv2", width, width)
            upper = width
        conv(f"head.{head}", spec.base_features, out_ch, 1)
    return shapes


def encoder_names(spec: UNetSpec) -> tuple[str, ...]:
    """Shared-path parameters: every encoder level including the bottleneck."""
    return tuple(n for n in expected_shapes(spec) if n.startswith("enc"))


def head_names(spec: UNetSpec, head: str) -> tuple[str, ...]:
    """Parameters owned by one task: its decoder path plus its 1x1 head."""
    if head not in {h for h, _ in spec.heads}:
        raise SpecError(f"spec has no head named {head!r}")
    return tuple(
        n for n in expected_shapes(spec)
        if n.startswith(f"dec.{head}.") or n.startswith(f"head.{head}.")
    )


@dataclass
class UNetParams:
    """All learnable weights, keyed by the expected_shapes naming scheme."""

    spec: UNetSpec
    arrays: dict[str, np.ndarray]

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "UNetParams":
        return UNetParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "UNetParams":
        return UNetParams(self.spec, {k: v.astype(dtype) for k, v in self.arrays.items()})


def validate_params(params: UNetParams) -> None:
    shapes = expected_shapes(params.spec)
    if set(params.arrays) != set(shapes):
        missing = sorted(set(shapes) - set(params.arrays))
        extra = sorted(set(params.arrays) - set(shapes))
        raise IntegrityError(f"parameter set mismatch: missing {missing}, extra {extra}")
    for name, shape in shapes.items():
        arr = params.arrays[name]
        if tuple(arr.shape) != shape:
            raise IntegrityError(
                f"parameter {name!r} has shape {tuple(arr.shape)}, expected {shape}"
            )
        if not np.isfinite(arr).all():
            raise IntegrityError(f"parameter {name!r} contains non-finite values")


def init_params(spec: UNetSpec, seed: int, dtype=np.float32) -> UNetParams:
    """Fan-in-scaled Gaussian weights (std = sqrt(2/fan_in)), zero biases.

    Draws happen in expected_shapes order with one generator, so identical
    (spec, seed) gives bitwise-identical parameters.
    """
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(spec).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            std = math.sqrt(2.0 / fan_in)
            arrays[name] = rng.normal(0.0, std, size=shape).astype(dtype)
    return UNetParams(spec=spec, arrays=arrays)


@dataclass(frozen=True)
class Batch:
    """Channel-first training batch; masks select the pixels the loss sees."""

    inputs: np.ndarray   # (N, C_in, S, S)
    targets: np.ndarray  # (N, C_t, S, S)
    masks: np.ndarray    # (N, S, S), values {0, 1}

    def __post_init__(self):
        if self.inputs.ndim != 4 or self.targets.ndim != 4 or self.masks.ndim != 3:
            raise ShapeError(
                f"batch ranks must be 4/4/3, got {self.inputs.ndim}/"
                f"{self.targets.ndim}/{self.masks.ndim}"
            )
        n, _, h, w = self.inputs.shape
        if self.targets.shape[0] != n or self.targets.shape[2:] != (h, w):
            raise ShapeError(
                f"targets shape {self.targets.shape} inconsistent with inputs "
                f"{self.inputs.shape}"
            )
        if self.masks.shape != (n, h, w):
            raise ShapeError(
                f"masks shape {self.masks.shape} inconsistent with inputs "
                f"{self.inputs.shape}"
            )
        m = np.asarray(self.masks)
        if ((m != 0) & (m != 1)).any():
            raise IntegrityError("masks must be binary")


# ---------------------------------------------------------------------------
# layer primitives (channel-last)


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """(N,H,W,C) -> (N*H*W, k*k*C) patch matrix, rows in (du, dv, c) layout."""
    if k == 1:
        return x.reshape(-1, x.shape[-1])
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))  # (N,H,W,C,k,k)
    n, h, w = x.shape[:3]
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(n * h * w, k * k * x.shape[-1])


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    f, c, k, _ = w.shape
    n, h, wd, _ = x.shape
    cols = _im2col(x, k, k // 2)
    y = cols @ w.transpose(2, 3, 1, 0).reshape(k * k * c, f)
    y += b
    return y.reshape(n, h, wd, f)


def _conv_backward(
    x: np.ndarray, w: np.ndarray, g: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of a same-padded convolution: (d_input, d_weight, d_bias).

    d_input is itself a same-padded convolution of the output gradient with
    the spatially flipped, in/out-swapped kernel — one more im2col GEMM
    instead of a scatter-add.
    """
    f, c, k, _ = w.shape
    n, h, wd, _ = x.shape
    g2 = g.reshape(-1, f)
    dw = (_im2col(x, k, k // 2).T @ g2).reshape(k, k, c, f).transpose(3, 2, 0, 1)
    db = g2.sum(axis=0)
    wflip = w[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * f, c)
    dx = (_im2col(g, k, k // 2) @ wflip).reshape(n, h, wd, c)
    return dx, dw, db


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling; returns (pooled, argmax index within each window)."""
    n, h, w, c = x.shape
    xr = (
        x.reshape(n, h // 2, 2, w // 2, 2, c)
        .transpose(0, 1, 3, 5, 2, 4)
        .reshape(n, h // 2, w // 2, c, 4)
    )
    idx = xr.argmax(axis=-1)  # ties -> first position: deterministic
    y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
    return y, idx


def _pool_backward(g: np.ndarray, idx: np.ndarray, in_shape: tuple) -> np.ndarray:
    n, h, w, c = in_shape
    z = np.zeros((n, h // 2, w // 2, c, 4), g.dtype)
    np.put_along_axis(z, idx[..., None], g[..., None], axis=-1)
    return (
        z.reshape(n, h // 2, w // 2, c, 2, 2)
        .transpose(0, 1, 4, 2, 5, 3)
        .reshape(n, h, w, c)
    )


def _up_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbor 2x upsampling."""
    n, h, w, c = x.shape
    return (
        np.broadcast_to(x[:, :, None, :, None, :], (n, h, 2, w, 2, c))
        .reshape(n, 2 * h, 2 * w, c)
    )


def _up_backward(g: np.ndarray) -> np.ndarray:
    n, h2, w2, c = g.shape
    return g.reshape(n, h2 // 2, 2, w2 // 2, 2, c).sum(axis=(2, 4))


# ---------------------------------------------------------------------------
# forward / backward


def _pad_amounts(size: int, multiple: int) -> tuple[int, int]:
    total = (-size) % multiple
    return total // 2, total - total // 2


def _forward(params: UNetParams, x: np.ndarray, want_margins: bool = False):
    """Channel-last forward pass; returns (output, cache).

    The cache keeps references to every layer input and post-ReLU output so
    the backward pass can gate ReLUs and rebuild im2col matrices without
    storing them.  With ``want_margins`` the cache also records how far the
    batch sits from every ReLU kink and pooling tie — used to pick
    well-conditioned probe points for finite differencing.
    """
    spec = params.spec
    arrays = params.arrays
    if x.ndim != 4 or x.shape[-1] != spec.input_channels:
        raise ShapeError(
            f"expected inputs (N, H, W, {spec.input_channels}), got {x.shape}"
        )
    n, h, w, _ = x.shape
    mult = 1 << spec.depth
    pt, pb = _pad_amounts(h, mult)
    pl, pr = _pad_amounts(w, mult)
    if pt or pb or pl or pr:
        x = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))

    margins: list[float] = []

    def conv_relu(name: str, a: np.ndarray) -> np.ndarray:
        pre = _conv_forward(a, arrays[f"{name}.w"], arrays[f"{name}.b"])
        if want_margins:
            margins.append(float(np.abs(pre).min()))
        return np.maximum(pre, 0.0)

    enc: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
    pools: list[tuple[np.ndarray, tuple]] = []
    a = x
    for lvl in range(spec.depth + 1):
        x1 = a
        y1 = conv_relu(f"enc{lvl}.conv1", x1)
        y2 = conv_relu(f"enc{lvl}.conv2", y1)
        enc.append((x1, y1, y2))
        if lvl < spec.depth:
            if want_margins:
                nn, hh, ww, cc = y2.shape
                xr = (
                    y2.reshape(nn, hh // 2, 2, ww // 2, 2, cc)
                    .transpose(0, 1, 3, 5, 2, 4)
                    .reshape(nn, hh // 2, ww // 2, cc, 4)
                )
                top2 = np.sort(xr, axis=-1)[..., -2:]
                gap = top2[..., 1] - top2[..., 0]
                # Ties among dead units (runner-up exactly 0) cannot flip
                # under a small perturbation; only contested windows matter.
                risky = top2[..., 0] > 0
                margins.append(float(gap[risky].min()) if risky.any() else np.inf)
            a, idx = _pool_forward(y2)
            pools.append((idx, y2.shape))

    bottleneck = enc[-1][2]  # deepest level's output feeds every decoder
    head_outs: list[np.ndarray] = []
    heads_cache: dict[str, tuple[list[dict], np.ndarray]] = {}
    for head, _ in spec.heads:
        d = bottleneck
        stages: list[dict] = []
        for lvl in range(spec.depth - 1, -1, -1):
            xu = _up_forward(d)
            yu = conv_relu(f"dec.{head}.{lvl}.up", xu)
            xc = np.concatenate([yu, enc[lvl][2]], axis=-1)
            y1 = conv_relu(f"dec.{head}.{lvl}.conv1", xc)
            y2 = conv_relu(f"dec.{head}.{lvl}.conv2", y1)
            stages.append({"lvl": lvl, "xu": xu, "yu": yu, "xc": xc, "y1": y1, "y2": y2})
            d = y2
        out = _conv_forward(d, arrays[f"head.{head}.w"], arrays[f"head.{head}.b"])
        head_outs.append(out)
        heads_cache[head] = (stages, d)

    y = head_outs[0] if len(head_outs) == 1 else np.concatenate(head_outs, axis=-1)
    if pt or pb or pl or pr:
        y = y[:, pt : pt + h, pl : pl + w, :]
    cache = {
        "pads": (pt, pb, pl, pr),
        "in_shape": (n, h, w),
        "enc": enc,
        "pools": pools,
        "bottleneck": bottleneck,
        "heads": heads_cache,
        "margins": margins,
    }
    return y, cache


def _backward(
    params: UNetParams,
    cache: dict,
    g_out: np.ndarray,
    trainable: set[str] | None = None,
) -> dict[str, np.ndarray]:
    """Backpropagate d(loss)/d(output) through the cached forward pass.

    Returns gradients for ``trainable`` names (all parameters when None).
    Heads whose output gradient is identically zero and whose parameters are
    all non-trainable are skipped outright; likewise the encoder sweep when
    nothing in it is trainable — the results for the remaining parameters
    are bitwise-identical either way.
    """
    spec = params.spec
    arrays = params.arrays
    wanted = set(expected_shapes(spec)) if trainable is None else set(trainable)
    grads: dict[str, np.ndarray] = {}

    def store(name: str, dw: np.ndarray, db: np.ndarray) -> None:
        if f"{name}.w" in wanted:
            if not (np.isfinite(dw).all() and np.isfinite(db).all()):
                raise NumericError(f"non-finite gradient in layer {name!r}")
            grads[f"{name}.w"] = dw
            grads[f"{name}.b"] = db

    pt, pb, pl, pr = cache["pads"]
    n, h, w = cache["in_shape"]
    if pt or pb or pl or pr:
        g = np.zeros((n, h + pt + pb, w + pl + pr, g_out.shape[-1]), g_out.dtype)
        g[:, pt : pt + h, pl : pl + w, :] = g_out
    else:
        g = g_out

    enc = cache["enc"]
    g_bott = np.zeros_like(cache["bottleneck"])
    g_skip = [np.zeros_like(enc[lvl][2]) for lvl in range(spec.depth)]

    encoder_wanted = any(name in wanted for name in encoder_names(spec))
    offset = 0
    for head, out_ch in spec.heads:
        gh = g[..., offset : offset + out_ch]
        offset += out_ch
        head_params = set(head_names(spec, head))
        # A head's branch can be skipped only when none of its own parameters
        # are trainable AND it cannot feed gradient anywhere trainable (the
        # encoder is frozen too, or this head's loss weight made gh zero).
        if not (head_params & wanted) and (not encoder_wanted or not gh.any()):
            continue
        stages, head_in = cache["heads"][head]
        gd, dw, db = _conv_backward(head_in, arrays[f"head.{head}.w"], gh)
        store(f"head.{head}", dw, db)
        for stage in reversed(stages):
            lvl = stage["lvl"]
            width = spec.base_features << lvl
            gp = gd * (stage["y2"] > 0)
            gd, dw, db = _conv_backward(stage["y1"], arrays[f"dec.{head}.{lvl}.conv2.w"], gp)
            store(f"dec.{head}.{lvl}.conv2", dw, db)
            gp = gd * (stage["y1"] > 0)
            gd, dw, db = _conv_backward(stage["xc"], arrays[f"dec.{head}.{lvl}.conv1.w"], gp)
            store(f"dec.{head}.{lvl}.conv1", dw, db)
            g_skip[lvl] += gd[..., width:]
            gp = gd[..., :width] * (stage["yu"] > 0)
            gd, dw, db = _conv_backward(stage["xu"], arrays[f"dec.{head}.{lvl}.up.w"], gp)
            store(f"dec.{head}.{lvl}.up", dw, db)
            gd = _up_backward(gd)
        g_bott += gd

    if not any(name in wanted for name in encoder_names(spec)):
        return grads

    gd = g_bott
    for lvl in range(spec.depth, -1, -1):
        x1, y1, y2 = enc[lvl]
        if lvl < spec.depth:
            idx, shape = cache["pools"][lvl]
            gd = _pool_backward(gd, idx, shape) + g_skip[lvl]
        gp = gd * (y2 > 0)
        gd, dw, db = _conv_backward(y1, arrays[f"enc{lvl}.conv2.w"], gp)
        store(f"enc{lvl}.conv2", dw, db)
        gp = gd * (y1 > 0)
        gd, dw, db = _conv_backward(x1, arrays[f"enc{lvl}.conv1.w"], gp)
        store(f"enc{lvl}.conv1", dw, db)
    return grads


# ---------------------------------------------------------------------------
# masked loss


def _masked_loss_grad(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    channel_weights: np.ndarray | None,
) -> tuple[float, np.ndarray]:
    """Masked MSE and its gradient w.r.t. pred (channel-last, float64).

    Per sample: the squared residual is summed over masked-in pixels and
    divided by that sample's land-pixel count; per-channel means are combined
    by ``channel_weights`` (uniform when None) and samples averaged.
    """
    p = pred.astype(np.float64, copy=False)
    t = target.astype(np.float64, copy=False)
    n, h, w, c = p.shape
    m = mask.astype(np.float64, copy=False).reshape(n, h, w, 1)
    denom = m.sum(axis=(1, 2, 3))
    if (denom == 0).any():
        k = int(np.argmin(denom))
        raise DataError(f"sample {k} has an all-water mask; the loss is undefined")
    if channel_weights is None:
        wts = np.full(c, 1.0 / c)
    else:
        wts = np.asarray(channel_weights, dtype=np.float64)
        if wts.shape != (c,):
            raise ShapeError(f"channel_weights must have shape ({c},), got {wts.shape}")
        if (wts < 0).any() or wts.sum() <= 0:
            raise DataError("channel_weights must be non-negative and sum to > 0")
        wts = wts / wts.sum()
    with np.errstate(invalid="ignore", over="ignore"):
        # divergent predictions yield a non-finite loss that callers detect
        diff = (p - t) * m
        per = np.einsum("nhwc->nc", diff * diff) / denom[:, None]
        loss = float((per @ wts).mean())
        grad = diff * (2.0 / n) * (wts / denom[:, None])[:, None, None, :]
    return loss, grad


def masked_mse(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    channel_weights: Iterable[float] | None = None,
) -> float:
    """Masked MSE over a channel-first batch; see _masked_loss_grad."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    if pred.ndim != 4 or mask.ndim != 3:
        raise ShapeError("expected pred/target (N,C,S,S) and mask (N,S,S)")
    loss, _ = _masked_loss_grad(
        pred.transpose(0, 2, 3, 1),
        target.transpose(0, 2, 3, 1),
        mask,
        None if channel_weights is None else np.asarray(list(channel_weights)),
    )
    return loss


def forward(params: UNetParams, inputs: np.ndarray) -> np.ndarray:
    """Predict (N, C_t, S, S) from channel-first inputs (N, C_in, S, S)."""
    if inputs.ndim != 4:
        raise ShapeError(f"inputs must be (N, C, S, S), got {inputs.shape}")
    dtype = next(iter(params.arrays.values())).dtype
    x = inputs.transpose(0, 2, 3, 1).astype(dtype, copy=False)
    y, _ = _forward(params, x)
    return y.transpose(0, 3, 1, 2)


def loss_and_grads(
    params: UNetParams,
    x: np.ndarray,
    y: np.ndarray,
    m: np.ndarray,
    channel_weights: np.ndarray | None = None,
    trainable: set[str] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Fused forward + masked loss + backward on channel-last arrays."""
    dtype = next(iter(params.arrays.values())).dtype
    pred, cache = _forward(params, np.ascontiguousarray(x, dtype=dtype))
    loss, g = _masked_loss_grad(pred, y, m, channel_weights)
    if not math.isfinite(loss):
        raise NumericError(f"masked loss is non-finite ({loss})")
    grads = _backward(params, cache, g.astype(dtype, copy=False), trainable)
    return loss, grads


def backward(
    params: UNetParams,
    batch: Batch,
    channel_weights: Iterable[float] | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic parameter gradients for a channel-first batch."""
    return loss_and_grads(
        params,
        batch.inputs.transpose(0, 2, 3, 1),
        batch.targets.transpose(0, 2, 3, 1),
        batch.masks,
        None if channel_weights is None else np.asarray(list(channel_weights), np.float64),
    )


# ---------------------------------------------------------------------------
# gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int
    tolerance: float
    per_array: dict[str, float]
    attempts: int

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {verdict}: max rel err {self.max_rel_err:.3e} "
            f"(worst {self.worst_param}, {self.n_checked} coordinates, "
            f"tolerance {self.tolerance:.1e})"
        )


_CHECK_SPEC = UNetSpec(input_channels=9, base_features=4, depth=1)

# A probe batch is accepted only when every pre-activation and every
# contested pooling gap clears this margin, so no epsilon-perturbation can
# cross a ReLU kink or flip an argmax during finite differencing.
_KINK_MARGIN = 5e-4


def _well_conditioned_batch(
    params: UNetParams, rng: np.random.Generator, n: int, size: int, max_attempts: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    spec = params.spec
    for attempt in range(1, max_attempts + 1):
        m = (rng.random((n, size, size)) < 0.8).astype(np.float64)
        for k in range(n):  # the loss needs at least one land pixel per sample
            if not m[k].any():
                m[k, size // 2, size // 2] = 1.0
        x = rng.normal(size=(n, size, size, spec.input_channels))
        y = rng.normal(size=(n, size, size, spec.out_channels))
        _, cache = _forward(params, x, want_margins=True)
        if min(cache["margins"]) > _KINK_MARGIN:
            return x, y, m, attempt
    raise NumericError(
        f"could not find a finite-difference probe batch clear of ReLU kinks "
        f"in {max_attempts} attempts"
    )


def grad_check(
    spec: UNetSpec | None = None,
    seed: int = 0,
    tolerance: float = 1e-4,
    *,
    epsilon: float = 1e-5,
    batch_size: int = 2,
    tile_size: int = 8,
    max_coords: int | None = None,
    _backward_fn: Callable | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    Runs entirely in float64.  All coordinates are checked when the model is
    small; otherwise a stratified sample of at least 500 coordinates (and at
    least one per parameter array) is drawn.  The probe batch is re-sampled
    until it sits away from every ReLU kink and pooling tie, which keeps the
    quadratic finite-difference error model valid at ``epsilon`` = 1e-5.
    """
    spec = _CHECK_SPEC if spec is None else spec
    params = init_params(spec, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 0x5EED])
    for name, arr in params.arrays.items():
        # Zero biases would leave structurally-zero pre-activations sitting
        # exactly on the ReLU kink; probe at a generic point instead.
        if name.endswith(".b"):
            params.arrays[name] = rng.normal(0.0, 0.2, size=arr.shape)
    x, y, m, attempts = _well_conditioned_batch(
        params, rng, batch_size, tile_size, max_attempts=500
    )

    if _backward_fn is None:
        _, analytic = loss_and_grads(params, x, y, m)
    else:
        _, analytic = _backward_fn(params, x, y, m)

    def loss_only() -> float:
        pred, _ = _forward(params, x)
        loss, _ = _masked_loss_grad(pred, y, m, None)
        return loss

    names = list(expected_shapes(spec))
    sizes = {n: params.arrays[n].size for n in names}
    total = sum(sizes.values())
    budget = total if max_coords is None and total <= 4000 else (max_coords or 500)
    coords: list[tuple[str, int]] = []
    if budget >= total:
        for name in names:
            coords += [(name, i) for i in range(sizes[name])]
    else:
        for name in names:  # at least one coordinate from every array
            coords.append((name, int(rng.integers(sizes[name]))))
        while len(coords) < max(budget, 500):
            name = names[int(rng.integers(len(names)))]
            coords.append((name, int(rng.integers(sizes[name]))))

    max_rel, worst = 0.0, names[0]
    per_array: dict[str, float] = {n: 0.0 for n in names}
    for name, flat in coords:
        arr = params.arrays[name]
        orig = arr.flat[flat]
        arr.flat[flat] = orig + epsilon
        lp = loss_only()
        arr.flat[flat] = orig - epsilon
        lm = loss_only()
        arr.flat[flat] = orig
        fd = (lp - lm) / (2.0 * epsilon)
        an = float(analytic[name].flat[flat])
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        per_array[name] = max(per_array[name], rel)
        if rel > max_rel:
            max_rel, worst = rel, name
    return GradCheckReport(
        max_rel_err=max_rel,
        worst_param=worst,
        n_checked=len(coords),
        tolerance=tolerance,
        per_array=per_array,
        attempts=attempts,
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_params(params: UNetParams, path: str | Path) -> None:
    """Write a UNPK checkpoint: spec block, then named float32 arrays."""
    validate_params(params)
    spec = params.spec
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    buf += struct.pack(
        "<HHHHH", spec.input_channels, spec.base_features, spec.depth,
        spec.kernel_size, len(spec.heads),
    )
    for name, out_ch in spec.heads:
        raw = name.encode("ascii")
        buf += struct.pack("<B", len(raw)) + raw + struct.pack("<H", out_ch)
    for name in expected_shapes(spec):  # canonical array order
        arr = params.arrays[name]
        raw = name.encode("ascii")
        buf += struct.pack("<B", len(raw))
        buf += raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    Path(path).write_bytes(buf)


def load_params(path: str | Path) -> UNetParams:
    """Read a UNPK checkpoint, validating shapes against its spec block."""
    data = Path(path).read_bytes()
    if len(data) < 6 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a UNPK checkpoint")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = 6

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(data):
            raise IntegrityError(f"{path}: file ends inside {what}")
        chunk = data[off : off + n]
        off += n
        return chunk

    cin, base, depth, k, n_heads = struct.unpack("<HHHHH", take(10, "spec block"))
    heads = []
    for _ in range(n_heads):
        (ln,) = struct.unpack("<B", take(1, "head name"))
        name = take(ln, "head name").decode("ascii")
        (out_ch,) = struct.unpack("<H", take(2, "head channels"))
        heads.append((name, out_ch))
    spec = UNetSpec(
        input_channels=cin, base_features=base, depth=depth,
        kernel_size=k, heads=tuple(heads),
    )
    shapes = expected_shapes(spec)

    arrays: dict[str, np.ndarray] = {}
    while off < len(data):
        (ln,) = struct.unpack("<B", take(1, "array name"))
        name = take(ln, "array name").decode("ascii")
        if name in arrays:
            raise IntegrityError(f"{path}: duplicate array {name!r}")
        if name not in shapes:
            raise IntegrityError(f"{path}: array {name!r} not part of the spec")
        (rank,) = struct.unpack("<B", take(1, "array rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "array dims"))
        if dims != shapes[name]:
            raise IntegrityError(
                f"{path}: array {name!r} has shape {dims}, spec requires {shapes[name]}"
            )
        count = int(np.prod(dims, dtype=np.int64))
        raw = take(4 * count, f"array {name!r} values")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims)
    missing = sorted(set(shapes) - set(arrays))
    if missing:
        raise IntegrityError(f"{path}: checkpoint is missing arrays {missing}")
    ordered = {name: arrays[name] for name in shapes}
    return UNetParams(spec=spec, arrays=ordered)
