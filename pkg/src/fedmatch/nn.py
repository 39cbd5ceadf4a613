"""Small feed-forward network core on float64 numpy.

Layers are described declaratively (`LayerSpec`), parameters live in flat
name->array mappings (`ParamSet`), and every layer carries a hand-written
backward rule.  There is intentionally no autodiff: the backward pass is
the artifact under test, checked against finite differences.

Conventions:

* every tensor entering `forward` is batched: shape (B, *input_shape);
* dense weights are (in, out), conv kernels are (out_ch, in_ch, kh, kw),
  transposed-conv kernels are (in_ch, out_ch, kh, kw);
* max-pool layers record which corner of each 2x2 window won (the
  "switches"), so the matching decoders can unpool into the right slots.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """A tensor's shape does not fit what a layer or graph expects."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity showed up in a forward or backward pass."""


class GraphError(ValueError):
    """A ModelGraph or decoder is structurally invalid."""


KINDS = (
    "dense",
    "relu",
    "conv2d",
    "maxpool2x2",
    "flatten",
    "transposed_conv2d",
    "unpool2x2",
)

# ---------------------------------------------------------------------------
# Layer specifications


@dataclass(frozen=True)
class LayerSpec:
    """One layer in a graph (or one learned map in a matching decoder).

    Only the fields relevant to `kind` are meaningful; the rest stay at
    their defaults.  `pool_layer` is the index of the maxpool2x2 layer
    whose switches an unpool2x2 layer replays.
    """

    kind: str
    in_units: int = 0
    out_units: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_h: int = 0
    kernel_w: int = 0
    stride: int = 1
    padding: int = 0
    pool_layer: int = -1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise GraphError(f"unknown layer kind {self.kind!r}")
        if self.kind == "dense":
            if self.in_units <= 0 or self.out_units <= 0:
                raise GraphError("dense layer needs positive in/out units")
        elif self.kind in ("conv2d", "transposed_conv2d"):
            if self.in_channels <= 0 or self.out_channels <= 0:
                raise GraphError(f"{self.kind} needs positive channel counts")
            if self.kernel_h <= 0 or self.kernel_w <= 0:
                raise GraphError(f"{self.kind} kernel sizes must be positive")
            if self.stride <= 0:
                raise GraphError(f"{self.kind} stride must be positive")
            if self.padding < 0:
                raise GraphError(f"{self.kind} padding must be non-negative")
            if self.kind == "transposed_conv2d":
                if self.stride != 1:
                    raise GraphError("transposed_conv2d supports stride 1 only")
                if self.kernel_h != self.kernel_w:
                    raise GraphError("transposed_conv2d supports square kernels only")
                if self.padding > self.kernel_h - 1:
                    raise GraphError("transposed_conv2d padding must be < kernel size")

    @property
    def has_params(self) -> bool:
        return self.kind in ("dense", "conv2d", "transposed_conv2d")


def dense(in_units: int, out_units: int) -> LayerSpec:
    return LayerSpec("dense", in_units=in_units, out_units=out_units)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def conv2d(in_channels: int, out_channels: int, kernel: int | tuple[int, int],
           stride: int = 1, padding: int = 0) -> LayerSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("conv2d", in_channels=in_channels, out_channels=out_channels,
                     kernel_h=kh, kernel_w=kw, stride=stride, padding=padding)


def transposed_conv2d(in_channels: int, out_channels: int,
                      kernel: int | tuple[int, int], padding: int = 0) -> LayerSpec:
    kh, kw = (kernel, kernel) if isinstance(kernel, int) else kernel
    return LayerSpec("transposed_conv2d", in_channels=in_channels,
                     out_channels=out_channels, kernel_h=kh, kernel_w=kw,
                     padding=padding)


def maxpool2x2() -> LayerSpec:
    return LayerSpec("maxpool2x2")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def unpool2x2(pool_layer: int) -> LayerSpec:
    return LayerSpec("unpool2x2", pool_layer=pool_layer)


def output_shape(spec: LayerSpec, in_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape of `spec` applied to `in_shape` (no batch dim)."""
    if spec.kind == "dense":
        if in_shape != (spec.in_units,):
            raise ShapeError(
                f"dense expects input ({spec.in_units},), got {in_shape}")
        return (spec.out_units,)
    if spec.kind == "relu":
        return in_shape
    if spec.kind == "flatten":
        if len(in_shape) < 2:
            raise ShapeError(f"flatten expects a multi-axis input, got {in_shape}")
        return (int(np.prod(in_shape)),)
    if spec.kind == "maxpool2x2":
        if len(in_shape) != 3:
            raise ShapeError(f"maxpool2x2 expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even spatial dims, got {in_shape}")
        return (c, h // 2, w // 2)
    if spec.kind == "unpool2x2":
        if len(in_shape) != 3:
            raise ShapeError(f"unpool2x2 expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, 2 * h, 2 * w)
    if spec.kind == "conv2d":
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ShapeError(
                f"conv2d expects ({spec.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        oh = (h + 2 * spec.padding - spec.kernel_h) // spec.stride + 1
        ow = (w + 2 * spec.padding - spec.kernel_w) // spec.stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"conv2d kernel does not fit input {in_shape}")
        return (spec.out_channels, oh, ow)
    if spec.kind == "transposed_conv2d":
        if len(in_shape) != 3 or in_shape[0] != spec.in_channels:
            raise ShapeError(
                f"transposed_conv2d expects ({spec.in_channels}, H, W), got {in_shape}")
        _, h, w = in_shape
        oh = h + spec.kernel_h - 1 - 2 * spec.padding
        ow = w + spec.kernel_w - 1 - 2 * spec.padding
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"transposed_conv2d output collapses for {in_shape}")
        return (spec.out_channels, oh, ow)
    raise GraphError(f"unknown layer kind {spec.kind!r}")


# ---------------------------------------------------------------------------
# Parameter sets


class ParamSet(Mapping):
    """Immutable-ish ordered mapping of tensor name -> float64 ndarray.

    Functional style: operations return new ParamSets and never mutate the
    arrays in place (client updates must not alias server state).
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, np.ndarray]):
        self._tensors = {k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()}

    def __getitem__(self, key: str) -> np.ndarray:
        return self._tensors[key]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}:{v.shape}" for k, v in self._tensors.items())
        return f"ParamSet({inner})"

    @property
    def n_params(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._tensors.items()})

    def map(self, fn) -> "ParamSet":
        return ParamSet({k: fn(v) for k, v in self._tensors.items()})

    def zip_with(self, other: "ParamSet", fn) -> "ParamSet":
        self.check_structure(other)
        return ParamSet({k: fn(v, other[k]) for k, v in self._tensors.items()})

    def check_structure(self, other: "ParamSet") -> None:
        if list(self) != list(other):
            raise ShapeError(
                f"parameter sets disagree on tensor names: {list(self)} vs {list(other)}")
        for k in self:
            if self[k].shape != other[k].shape:
                raise ShapeError(
                    f"tensor {k!r} shape mismatch: {self[k].shape} vs {other[k].shape}")

    def allclose(self, other: "ParamSet", rtol: float = 1e-12, atol: float = 0.0) -> bool:
        self.check_structure(other)
        return all(np.allclose(self[k], other[k], rtol=rtol, atol=atol) for k in self)


def sgd_step(params: ParamSet, grads: ParamSet, lr: float) -> ParamSet:
    """One vanilla SGD step: params - lr * grads, as a new ParamSet."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    return params.zip_with(grads, lambda p, g: p - lr * g)


# ---------------------------------------------------------------------------
# Graphs


@dataclass(frozen=True)
class ModelGraph:
    """A linear chain of layers with a fixed per-sample input shape."""

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self) -> None:
        if not self.layers:
            raise GraphError("a graph needs at least one layer")
        # Force a full shape walk now so invalid chains fail at build time.
        shapes = self.layer_shapes
        for i, spec in enumerate(self.layers):
            if spec.kind == "unpool2x2":
                j = spec.pool_layer
                if not (0 <= j < i) or self.layers[j].kind != "maxpool2x2":
                    raise GraphError(
                        f"unpool2x2 at layer {i} must reference an earlier maxpool2x2")
                in_shape = shapes[i - 1] if i > 0 else self.input_shape
                pool_out = shapes[j]
                if in_shape != pool_out:
                    raise ShapeError(
                        f"unpool2x2 at layer {i} expects shape {pool_out}, got {in_shape}")

    @cached_property
    def layer_shapes(self) -> tuple[tuple[int, ...], ...]:
        """Per-sample output shape of every layer, in order."""
        shapes = []
        cur = self.input_shape
        for spec in self.layers:
            cur = output_shape(spec, cur)
            shapes.append(cur)
        return tuple(shapes)

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layer_shapes[-1]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for i, spec in enumerate(self.layers):
            if spec.kind == "dense":
                out[f"{i}.w"] = (spec.in_units, spec.out_units)
                out[f"{i}.b"] = (spec.out_units,)
            elif spec.kind == "conv2d":
                out[f"{i}.w"] = (spec.out_channels, spec.in_channels,
                                 spec.kernel_h, spec.kernel_w)
                out[f"{i}.b"] = (spec.out_channels,)
            elif spec.kind == "transposed_conv2d":
                out[f"{i}.w"] = (spec.in_channels, spec.out_channels,
                                 spec.kernel_h, spec.kernel_w)
                out[f"{i}.b"] = (spec.out_channels,)
        return out


def init_layer_params(spec: LayerSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    if spec.kind == "dense":
        fan_in = spec.in_units
        w = rng.uniform(-1.0, 1.0, (spec.in_units, spec.out_units)) / np.sqrt(fan_in)
        b = np.zeros(spec.out_units)
    elif spec.kind == "conv2d":
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        w = rng.uniform(-1.0, 1.0, (spec.out_channels, spec.in_channels,
                                    spec.kernel_h, spec.kernel_w)) / np.sqrt(fan_in)
        b = np.zeros(spec.out_channels)
    elif spec.kind == "transposed_conv2d":
        fan_in = spec.in_channels * spec.kernel_h * spec.kernel_w
        w = rng.uniform(-1.0, 1.0, (spec.in_channels, spec.out_channels,
                                    spec.kernel_h, spec.kernel_w)) / np.sqrt(fan_in)
        b = np.zeros(spec.out_channels)
    else:
        raise GraphError(f"layer kind {spec.kind!r} has no parameters")
    return {"w": w, "b": b}


def init_params(graph: ModelGraph, rng: np.random.Generator) -> ParamSet:
    """Fresh parameters for every parameterized layer of `graph`.

    Draw order is fixed (layer order), so a given generator state yields
    the same parameters every time.
    """
    tensors: dict[str, np.ndarray] = {}
    for i, spec in enumerate(graph.layers):
        if spec.has_params:
            p = init_layer_params(spec, rng)
            tensors[f"{i}.w"] = p["w"]
            tensors[f"{i}.b"] = p["b"]
    return ParamSet(tensors)


# ---------------------------------------------------------------------------
# Primitive forward/backward rules


def _check_finite(name: str, *arrays: np.ndarray) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return x @ w + b


def dense_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray):
    """Returns (dw, db, dx) for y = x @ w + b."""
    dw = x.T @ g
    db = g.sum(axis=0)
    dx = g @ w.T
    return dw, db, dx


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0, matching the forward's max(x, 0).
    return np.where(x > 0.0, g, 0.0)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                   stride: int = 1, padding: int = 0) -> np.ndarray:
    """Cross-correlation of (B, C, H, W) with (O, C, KH, KW) kernels."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    kh, kw = w.shape[2], w.shape[3]
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (B, C, OH, OW, KH, KW); contract C, KH, KW against the kernel.
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b[None, :, None, None]
    return out


def conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                    stride: int = 1, padding: int = 0):
    """Returns (dw, db, dx) for the conv2d above. g is (B, O, OH, OW)."""
    b_, c, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    xp = x
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # dW: contract batch and output positions.
    dw = np.tensordot(win, g, axes=([0, 2, 3], [0, 2, 3]))  # (C, KH, KW, O)
    dw = np.ascontiguousarray(dw.transpose(3, 0, 1, 2))
    db = g.sum(axis=(0, 2, 3))
    # dX: scatter each kernel tap's contribution back onto the padded grid.
    oh, ow = g.shape[2], g.shape[3]
    dxp = np.zeros_like(xp)
    for u in range(kh):
        for v in range(kw):
            contrib = np.tensordot(g, w[:, :, u, v], axes=([1], [0]))  # (B, OH, OW, C)
            dxp[:, :, u:u + stride * oh:stride, v:v + stride * ow:stride] += \
                contrib.transpose(0, 3, 1, 2)
    if padding:
        dx = dxp[:, :, padding:padding + h, padding:padding + wd]
    else:
        dx = dxp
    return dw, db, dx


def _tconv_as_conv(w: np.ndarray) -> np.ndarray:
    # Swap in/out channels and flip spatially: a stride-1 transposed conv is
    # an ordinary conv with this kernel and padding (K-1-p).
    return np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])


def transposed_conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                              padding: int = 0) -> np.ndarray:
    """Stride-1 transposed convolution; w is (C_in, C_out, K, K).

    Implemented via the identity: a stride-1 transposed conv with padding p
    equals an ordinary conv with channel-swapped, spatially flipped kernels
    and padding K-1-p.
    """
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError("transposed_conv2d supports square kernels only")
    return conv2d_forward(x, _tconv_as_conv(w), b, stride=1, padding=k - 1 - padding)


def transposed_conv2d_backward(x: np.ndarray, w: np.ndarray, g: np.ndarray,
                               padding: int = 0):
    """Returns (dw, db, dx) for the stride-1 transposed conv."""
    k = w.shape[2]
    if w.shape[3] != k:
        raise ShapeError("transposed_conv2d supports square kernels only")
    wc = _tconv_as_conv(w)
    dwc, db, dx = conv2d_backward(x, wc, g, stride=1, padding=k - 1 - padding)
    # Undo the kernel transform (it is an involution).
    dw = np.ascontiguousarray(dwc.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    return dw, db, dx


def maxpool2x2_forward(x: np.ndarray):
    """Returns (pooled, switches); switches hold the argmax corner 0..3.

    Corners are numbered row-major within each window (0 = top-left,
    1 = top-right, 2 = bottom-left, 3 = bottom-right); ties go to the
    first (row-major) position, which is numpy argmax behavior.
    """
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {x.shape}")
    oh, ow = h // 2, w // 2
    win = x.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    switches = win.argmax(axis=-1).astype(np.int8)
    pooled = np.take_along_axis(win, switches[..., None].astype(np.intp), axis=-1)[..., 0]
    return pooled, switches


def maxpool2x2_backward(g: np.ndarray, switches: np.ndarray) -> np.ndarray:
    """Route output grads back to the winning input positions."""
    return unpool2x2_forward(g, switches)


def unpool2x2_forward(x: np.ndarray, switches: np.ndarray) -> np.ndarray:
    """Place each value at its recorded corner of a 2x2 window, zeros elsewhere."""
    if x.shape != switches.shape:
        raise ShapeError(
            f"unpool2x2 input {x.shape} must match switches {switches.shape}")
    b, c, oh, ow = x.shape
    win = np.zeros((b, c, oh, ow, 4), dtype=x.dtype)
    np.put_along_axis(win, switches[..., None].astype(np.intp), x[..., None], axis=-1)
    return win.reshape(b, c, oh, ow, 2, 2).transpose(0, 1, 2, 4, 3, 5) \
        .reshape(b, c, 2 * oh, 2 * ow)


def unpool2x2_backward(g: np.ndarray, switches: np.ndarray) -> np.ndarray:
    """Gather grads from the positions the unpool wrote to."""
    b, c, h, w = g.shape
    oh, ow = h // 2, w // 2
    win = g.reshape(b, c, oh, 2, ow, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, oh, ow, 4)
    return np.take_along_axis(win, switches[..., None].astype(np.intp), axis=-1)[..., 0]


# ---------------------------------------------------------------------------
# Graph forward / backward


@dataclass(frozen=True)
class ForwardTrace:
    """Everything the backward pass (and the matching loss) needs.

    `outputs[i]` is layer i's batched output; `switches` maps maxpool layer
    index -> int8 switch tensor.
    """

    x: np.ndarray
    outputs: tuple[np.ndarray, ...]
    switches: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def logits(self) -> np.ndarray:
        return self.outputs[-1]

    def site_output(self, layer_index: int) -> np.ndarray:
        """Activation at a site; -1 means the network input itself."""
        if layer_index == -1:
            return self.x
        return self.outputs[layer_index]


def forward(graph: ModelGraph, params: ParamSet, x: np.ndarray,
            check_finite: bool = True) -> ForwardTrace:
    """Run the graph on a batch, keeping every intermediate activation."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != graph.input_shape:
        raise ShapeError(
            f"input shape {x.shape[1:]} does not match graph input {graph.input_shape}")
    if check_finite:
        _check_finite("input", x)
    outputs: list[np.ndarray] = []
    switches: dict[int, np.ndarray] = {}
    cur = x
    for i, spec in enumerate(graph.layers):
        if spec.kind == "dense":
            cur = dense_forward(cur, params[f"{i}.w"], params[f"{i}.b"])
        elif spec.kind == "relu":
            cur = relu_forward(cur)
        elif spec.kind == "conv2d":
            cur = conv2d_forward(cur, params[f"{i}.w"], params[f"{i}.b"],
                                 stride=spec.stride, padding=spec.padding)
        elif spec.kind == "transposed_conv2d":
            cur = transposed_conv2d_forward(cur, params[f"{i}.w"], params[f"{i}.b"],
                                            padding=spec.padding)
        elif spec.kind == "maxpool2x2":
            cur, sw = maxpool2x2_forward(cur)
            switches[i] = sw
        elif spec.kind == "flatten":
            cur = cur.reshape(cur.shape[0], -1)
        elif spec.kind == "unpool2x2":
            cur = unpool2x2_forward(cur, switches[spec.pool_layer])
        else:  # pragma: no cover - LayerSpec already validates kinds
            raise GraphError(f"unknown layer kind {spec.kind!r}")
        if check_finite:
            _check_finite(f"layer {i} ({spec.kind}) output", cur)
        outputs.append(cur)
    return ForwardTrace(x=x, outputs=tuple(outputs), switches=switches)


def backward(graph: ModelGraph, params: ParamSet, trace: ForwardTrace,
             output_grad: np.ndarray,
             site_grads: dict[int, np.ndarray] | None = None,
             check_finite: bool = True):
    """Backprop through the whole graph.

    `output_grad` is dLoss/d(last layer output).  `site_grads` lets callers
    inject extra gradient at interior layer outputs (the matching loss does
    this); key -1 adds straight to the returned input gradient.

    Returns (param_grads: ParamSet, input_grad: ndarray).
    """
    if len(trace.outputs) != len(graph.layers):
        raise ShapeError("trace does not match graph layer count")
    g = np.asarray(output_grad, dtype=np.float64)
    if g.shape != trace.outputs[-1].shape:
        raise ShapeError(
            f"output_grad shape {g.shape} does not match logits {trace.outputs[-1].shape}")
    site_grads = site_grads or {}
    grads: dict[str, np.ndarray] = {}
    for i in range(len(graph.layers) - 1, -1, -1):
        if i in site_grads:
            g = g + site_grads[i]
        spec = graph.layers[i]
        x_in = trace.x if i == 0 else trace.outputs[i - 1]
        if spec.kind == "dense":
            dw, db, g = dense_backward(x_in, params[f"{i}.w"], g)
            grads[f"{i}.w"] = dw
            grads[f"{i}.b"] = db
        elif spec.kind == "relu":
            g = relu_backward(x_in, g)
        elif spec.kind == "conv2d":
            dw, db, g = conv2d_backward(x_in, params[f"{i}.w"], g,
                                        stride=spec.stride, padding=spec.padding)
            grads[f"{i}.w"] = dw
            grads[f"{i}.b"] = db
        elif spec.kind == "transposed_conv2d":
            dw, db, g = transposed_conv2d_backward(x_in, params[f"{i}.w"], g,
                                                   padding=spec.padding)
            grads[f"{i}.w"] = dw
            grads[f"{i}.b"] = db
        elif spec.kind == "maxpool2x2":
            g = maxpool2x2_backward(g, trace.switches[i])
        elif spec.kind == "flatten":
            g = g.reshape(x_in.shape)
        elif spec.kind == "unpool2x2":
            g = unpool2x2_backward(g, trace.switches[spec.pool_layer])
        if check_finite:
            _check_finite(f"layer {i} ({spec.kind}) gradient", g)
    if -1 in site_grads:
        g = g + site_grads[-1]
    # Key order must mirror the parameter set so the two zip structurally.
    ordered = {k: grads[k] for k in params if k in grads}
    if len(ordered) != len(grads):
        raise ShapeError("gradient keys do not match parameter keys")
    return ParamSet(ordered), g
