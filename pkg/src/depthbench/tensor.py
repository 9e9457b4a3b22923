"""Dense tensors with tape-based reverse-mode automatic differentiation.

The tensor is a thin wrapper over a numpy buffer. Operations are module-level
functions; whenever an input sits on a :class:`Graph`, the output is recorded
on the same graph so :func:`backward` can replay the tape in reverse. Tensors
without a graph node are plain immutable values and safe to share between
threads; a single graph must only ever be touched from one thread.

Images are channels-first (C, H, W). Scalars have shape ().
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import GraphError, ShapeError

DTYPES = {"f32": np.float32, "f64": np.float64}


class Tensor:
    """Dense n-dimensional array, optionally attached to an autodiff graph."""

    __slots__ = ("data", "graph", "node")

    def __init__(self, data, dtype=None, *, graph: "Graph | None" = None,
                 node: int | None = None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        if arr.size == 0:
            raise ShapeError(f"tensor may not be empty (shape {arr.shape})")
        self.data = arr
        self.graph = graph
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of this tensor with no graph attachment."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.graph is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{tag})"


class _Node:
    __slots__ = ("kind", "parents", "ctx")

    def __init__(self, kind: str, parents: tuple[Optional[int], ...], ctx: dict):
        self.kind = kind
        self.parents = parents
        self.ctx = ctx


class Graph:
    """Append-only tape of operation records.

    Parent indices always point at earlier nodes, so the tape is acyclic by
    construction and a single reverse sweep implements backpropagation.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def leaf(self, data, dtype=None) -> Tensor:
        """Register ``data`` as a differentiable leaf (parameter) tensor."""
        t = Tensor(data, dtype=dtype)
        self.nodes.append(_Node("leaf", (), {}))
        t.graph = self
        t.node = len(self.nodes) - 1
        return t

    def _record(self, kind: str, parents: tuple[Optional[int], ...],
                ctx: dict, out: np.ndarray) -> Tensor:
        self.nodes.append(_Node(kind, parents, ctx))
        return Tensor(out, graph=self, node=len(self.nodes) - 1)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(np.asarray(x), dtype=dtype)


def _emit(kind: str, inputs: Sequence[Tensor], out: np.ndarray, ctx: dict) -> Tensor:
    graphs = [t.graph for t in inputs if t.graph is not None]
    if not graphs:
        return Tensor(out)
    first = graphs[0]
    if any(g is not first for g in graphs[1:]):
        raise GraphError(f"{kind}: inputs belong to different graphs")
    parents = tuple(t.node if t.graph is first else None for t in inputs)
    return first._record(kind, parents, ctx, out)


def _check_same_dtype(kind: str, *ts: Tensor) -> None:
    dts = {t.data.dtype for t in ts}
    if len(dts) > 1:
        raise ShapeError(f"{kind}: mixed dtypes {sorted(d.name for d in dts)}")


# ---------------------------------------------------------------------------
# elementwise and reduction primitives
# ---------------------------------------------------------------------------

def _binary_shapes(kind: str, a: Tensor, b: Tensor) -> None:
    # same shape, or one side a scalar () which broadcasts
    if a.shape != b.shape and a.shape != () and b.shape != ():
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not match")


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes("add", a, b)
    _check_same_dtype("add", a, b)
    out = a.data + b.data
    return _emit("add", (a, b), out, {"sa": a.shape, "sb": b.shape})


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes("sub", a, b)
    _check_same_dtype("sub", a, b)
    out = a.data - b.data
    return _emit("sub", (a, b), out, {"sa": a.shape, "sb": b.shape})


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes("mul", a, b)
    _check_same_dtype("mul", a, b)
    out = a.data * b.data
    return _emit("mul", (a, b), out,
                 {"a": a.data, "b": b.data, "sa": a.shape, "sb": b.shape})


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _binary_shapes("div", a, b)
    _check_same_dtype("div", a, b)
    out = a.data / b.data
    return _emit("div", (a, b), out,
                 {"a": a.data, "b": b.data, "sa": a.shape, "sb": b.shape})


def add_scalar(x, c: float) -> Tensor:
    x = _as_tensor(x)
    return _emit("add_scalar", (x,), x.data + x.data.dtype.type(c), {})


def mul_scalar(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(c)
    return _emit("mul_scalar", (x,), x.data * c, {"c": c})


def log(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("log", (x,), np.log(x.data), {"x": x.data})


def clamp_min(x, c: float) -> Tensor:
    x = _as_tensor(x)
    c = x.data.dtype.type(c)
    return _emit("clamp_min", (x,), np.maximum(x.data, c), {"mask": x.data > c})


def relu(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("relu", (x,), np.maximum(x.data, 0), {"mask": x.data > 0})


def silu(x) -> Tensor:
    x = _as_tensor(x)
    with np.errstate(over="ignore"):  # exp overflow saturates correctly
        s = 1.0 / (1.0 + np.exp(-x.data))
    return _emit("silu", (x,), x.data * s, {"x": x.data, "s": s})


def mean_all(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("mean_all", (x,), np.asarray(x.data.mean()),
                 {"shape": x.shape, "n": x.size})


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _emit("sum_all", (x,), np.asarray(x.data.sum()), {"shape": x.shape})


def sum_channels(x) -> Tensor:
    """Sum a (C, H, W) tensor over its channel axis, keeping a 1-channel axis."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"sum_channels: expected (C, H, W), got {x.shape}")
    return _emit("sum_channels", (x,), x.data.sum(axis=0, keepdims=True),
                 {"c": x.shape[0]})


def sum_spatial(x) -> Tensor:
    """Sum a (C, H, W) tensor over H and W, yielding shape (C,)."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeError(f"sum_spatial: expected (C, H, W), got {x.shape}")
    return _emit("sum_spatial", (x,), x.data.sum(axis=(1, 2)),
                 {"hw": x.shape[1:]})


# ---------------------------------------------------------------------------
# image primitives (C, H, W)
# ---------------------------------------------------------------------------

def _check_chw(kind: str, x: Tensor) -> None:
    if x.ndim != 3:
        raise ShapeError(f"{kind}: expected a (C, H, W) tensor, got {x.shape}")


def concat_channels(inputs: Iterable[Tensor]) -> Tensor:
    ts = [(_as_tensor(t)) for t in inputs]
    if not ts:
        raise ShapeError("concat_channels: empty input list")
    for t in ts:
        _check_chw("concat_channels", t)
    hw = ts[0].shape[1:]
    for t in ts[1:]:
        if t.shape[1:] != hw:
            raise ShapeError(
                f"concat_channels: spatial sizes differ, {hw} vs {t.shape[1:]}")
    _check_same_dtype("concat_channels", *ts)
    out = np.concatenate([t.data for t in ts], axis=0)
    return _emit("concat_channels", ts, out,
                 {"channels": [t.shape[0] for t in ts]})


def slice_channels(x, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    _check_chw("slice_channels", x)
    if not (0 <= start < stop <= x.shape[0]):
        raise ShapeError(
            f"slice_channels: range [{start}, {stop}) outside {x.shape[0]} channels")
    return _emit("slice_channels", (x,), x.data[start:stop].copy(),
                 {"start": start, "stop": stop, "c": x.shape[0]})


def conv2d_1x1(x, w) -> Tensor:
    """Pointwise convolution; ``w`` shaped (C_out, C_in, 1, 1)."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_chw("conv2d_1x1", x)
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ShapeError(f"conv2d_1x1: kernel must be (C_out, C_in, 1, 1), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d_1x1: kernel expects {w.shape[1]} input channels, input has {x.shape[0]}")
    _check_same_dtype("conv2d_1x1", x, w)
    k = w.data[:, :, 0, 0]
    out = np.einsum("oc,chw->ohw", k, x.data)
    return _emit("conv2d_1x1", (x, w), out, {"x": x.data, "w": w.data})


def conv2d_3x3_pad1(x, w) -> Tensor:
    """3x3 convolution with zero padding 1; spatial size is preserved."""
    x, w = _as_tensor(x), _as_tensor(w)
    _check_chw("conv2d_3x3_pad1", x)
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"conv2d_3x3_pad1: kernel must be (C_out, C_in, 3, 3), got {w.shape}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv2d_3x3_pad1: kernel expects {w.shape[1]} input channels, "
            f"input has {x.shape[0]}")
    _check_same_dtype("conv2d_3x3_pad1", x, w)
    _, h, wd = x.shape
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd), dtype=x.data.dtype)
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", w.data[:, :, dy, dx],
                             xp[:, dy:dy + h, dx:dx + wd])
    return _emit("conv2d_3x3_pad1", (x, w), out, {"xp": xp, "w": w.data, "hw": (h, wd)})


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic linear interpolation matrix with half-pixel centers."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def resize_bilinear(x, out_hw: tuple[int, int]) -> Tensor:
    """Bilinear resize of a (C, H, W) tensor to ``out_hw`` (half-pixel centers)."""
    x = _as_tensor(x)
    _check_chw("resize_bilinear", x)
    oh, ow = out_hw
    if oh < 1 or ow < 1:
        raise ShapeError(f"resize_bilinear: invalid target size {out_hw}")
    ry = _interp_matrix(x.shape[1], oh, x.data.dtype)
    rx = _interp_matrix(x.shape[2], ow, x.data.dtype)
    out = np.einsum("pw,cow->cop", rx, np.einsum("ob,cbw->cow", ry, x.data))
    return _emit("resize_bilinear", (x,), out, {"ry": ry, "rx": rx})


def upsample_bilinear_x2(x) -> Tensor:
    x = _as_tensor(x)
    _check_chw("upsample_bilinear_x2", x)
    return resize_bilinear(x, (2 * x.shape[1], 2 * x.shape[2]))


def downsample_avg_x2(x) -> Tensor:
    x = _as_tensor(x)
    _check_chw("downsample_avg_x2", x)
    c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"downsample_avg_x2: H and W must be even, got {h}x{w}")
    out = x.data.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    return _emit("downsample_avg_x2", (x,), out, {"hw": (h, w)})


def softmax_channels(x) -> Tensor:
    """Softmax over the channel axis of a (C, H, W) tensor."""
    x = _as_tensor(x)
    _check_chw("softmax_channels", x)
    z = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=0, keepdims=True)
    return _emit("softmax_channels", (x,), y, {"y": y})


def block_mean_pool(x, grid: tuple[int, int]) -> Tensor:
    """Average a (C, H, W) tensor over a (gh, gw) grid of equal blocks."""
    x = _as_tensor(x)
    _check_chw("block_mean_pool", x)
    gh, gw = grid
    c, h, w = x.shape
    if gh < 1 or gw < 1 or h % gh or w % gw:
        raise ShapeError(
            f"block_mean_pool: grid {gh}x{gw} does not divide spatial size {h}x{w}")
    bh, bw = h // gh, w // gw
    out = x.data.reshape(c, gh, bh, gw, bw).mean(axis=(2, 4))
    return _emit("block_mean_pool", (x,), out, {"grid": (gh, gw), "block": (bh, bw)})


def mean_channels(x) -> Tensor:
    """Mean of a (C, H, W) tensor over channels, keeping a 1-channel map."""
    x = _as_tensor(x)
    _check_chw("mean_channels", x)
    return _emit("mean_channels", (x,), x.data.mean(axis=0, keepdims=True),
                 {"c": x.shape[0]})


# ---------------------------------------------------------------------------
# spec-facing dispatcher
# ---------------------------------------------------------------------------

_DISPATCH: dict[str, Callable] = {
    "concat_channels": lambda inputs, params, kw: concat_channels(inputs),
    "conv2d_1x1": lambda inputs, params, kw: conv2d_1x1(inputs[0], params),
    "conv2d_3x3_pad1": lambda inputs, params, kw: conv2d_3x3_pad1(inputs[0], params),
    "silu": lambda inputs, params, kw: silu(inputs[0]),
    "relu": lambda inputs, params, kw: relu(inputs[0]),
    "upsample_bilinear_x2": lambda inputs, params, kw: upsample_bilinear_x2(inputs[0]),
    "downsample_avg_x2": lambda inputs, params, kw: downsample_avg_x2(inputs[0]),
    "softmax_channels": lambda inputs, params, kw: softmax_channels(inputs[0]),
    "add": lambda inputs, params, kw: add(inputs[0], inputs[1]),
    "mul_scalar": lambda inputs, params, kw: mul_scalar(inputs[0], kw["scalar"]),
    "mean_all": lambda inputs, params, kw: mean_all(inputs[0]),
    "block_mean_pool": lambda inputs, params, kw: block_mean_pool(inputs[0], kw["grid"]),
}


def primitive_forward(kind: str, inputs: Sequence[Tensor],
                      params: Tensor | None = None, **kwargs) -> Tensor:
    """Uniform entry point over the primitive set, dispatching on ``kind``."""
    if kind not in _DISPATCH:
        raise ShapeError(f"unknown primitive kind {kind!r}")
    return _DISPATCH[kind](list(inputs), params, kwargs)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _bw_add(node, g):
    return [_reduce_to(g, node.ctx["sa"]), _reduce_to(g, node.ctx["sb"])]


def _bw_sub(node, g):
    return [_reduce_to(g, node.ctx["sa"]), _reduce_to(-g, node.ctx["sb"])]


def _bw_mul(node, g):
    return [_reduce_to(g * node.ctx["b"], node.ctx["sa"]),
            _reduce_to(g * node.ctx["a"], node.ctx["sb"])]


def _bw_div(node, g):
    a, b = node.ctx["a"], node.ctx["b"]
    return [_reduce_to(g / b, node.ctx["sa"]),
            _reduce_to(-g * a / (b * b), node.ctx["sb"])]


def _bw_concat(node, g):
    grads, at = [], 0
    for c in node.ctx["channels"]:
        grads.append(g[at:at + c])
        at += c
    return grads


def _bw_slice(node, g):
    out = np.zeros((node.ctx["c"],) + g.shape[1:], dtype=g.dtype)
    out[node.ctx["start"]:node.ctx["stop"]] = g
    return [out]


def _bw_conv1x1(node, g):
    x, w = node.ctx["x"], node.ctx["w"]
    gx = np.einsum("oc,ohw->chw", w[:, :, 0, 0], g)
    gw = np.einsum("ohw,chw->oc", g, x)[:, :, None, None]
    return [gx, gw]


def _bw_conv3x3(node, g):
    xp, w = node.ctx["xp"], node.ctx["w"]
    h, wd = node.ctx["hw"]
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for dy in range(3):
        for dx in range(3):
            gxp[:, dy:dy + h, dx:dx + wd] += np.einsum(
                "oc,ohw->chw", w[:, :, dy, dx], g)
            gw[:, :, dy, dx] = np.einsum("ohw,chw->oc", g, xp[:, dy:dy + h, dx:dx + wd])
    return [gxp[:, 1:h + 1, 1:wd + 1], gw]


def _bw_resize(node, g):
    ry, rx = node.ctx["ry"], node.ctx["rx"]
    return [np.einsum("ob,cow->cbw", ry, np.einsum("pw,cop->cow", rx, g))]


def _bw_down2(node, g):
    up = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2)
    return [up * g.dtype.type(0.25)]


def _bw_softmax(node, g):
    y = node.ctx["y"]
    return [y * (g - (g * y).sum(axis=0, keepdims=True))]


def _bw_block_pool(node, g):
    gh, gw = node.ctx["grid"]
    bh, bw = node.ctx["block"]
    scale = g.dtype.type(1.0 / (bh * bw))
    up = np.repeat(np.repeat(g, bh, axis=1), bw, axis=2)
    return [up * scale]


_BACKWARD: dict[str, Callable[[_Node, np.ndarray], list[np.ndarray]]] = {
    "add": _bw_add,
    "sub": _bw_sub,
    "mul": _bw_mul,
    "div": _bw_div,
    "add_scalar": lambda n, g: [g],
    "mul_scalar": lambda n, g: [g * n.ctx["c"]],
    "log": lambda n, g: [g / n.ctx["x"]],
    "clamp_min": lambda n, g: [g * n.ctx["mask"]],
    "relu": lambda n, g: [g * n.ctx["mask"]],
    "silu": lambda n, g: [g * (n.ctx["s"] * (1.0 + n.ctx["x"] * (1.0 - n.ctx["s"])))],
    "mean_all": lambda n, g: [np.full(n.ctx["shape"], float(g) / n.ctx["n"], dtype=g.dtype)],
    "sum_all": lambda n, g: [np.full(n.ctx["shape"], float(g), dtype=g.dtype)],
    "sum_channels": lambda n, g: [np.repeat(g, n.ctx["c"], axis=0)],
    "sum_spatial": lambda n, g: [np.broadcast_to(g[:, None, None],
                                                 g.shape + n.ctx["hw"]).copy()],
    "mean_channels": lambda n, g: [np.repeat(g / n.ctx["c"], n.ctx["c"], axis=0)],
    "concat_channels": _bw_concat,
    "slice_channels": _bw_slice,
    "conv2d_1x1": _bw_conv1x1,
    "conv2d_3x3_pad1": _bw_conv3x3,
    "resize_bilinear": _bw_resize,
    "downsample_avg_x2": _bw_down2,
    "softmax_channels": _bw_softmax,
    "block_mean_pool": _bw_block_pool,
}


def backward(loss: Tensor) -> dict[int, Tensor]:
    """Reverse sweep from a scalar loss; returns node index -> gradient tensor.

    Every node reachable from the loss (leaves included) appears in the map;
    the gradient of the loss w.r.t. itself is 1.
    """
    if loss.graph is None:
        raise GraphError("backward: tensor is not on a graph")
    if loss.shape != ():
        raise GraphError(f"backward: loss must be a scalar, got shape {loss.shape}")
    graph = loss.graph
    grads: dict[int, np.ndarray] = {
        loss.node: np.ones((), dtype=loss.data.dtype)}
    for nid in range(loss.node, -1, -1):
        if nid not in grads:
            continue
        node = graph.nodes[nid]
        if node.kind == "leaf":
            continue
        pgrads = _BACKWARD[node.kind](node, grads[nid])
        for pid, pg in zip(node.parents, pgrads):
            if pid is None:
                continue
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg
    return {nid: Tensor(g) for nid, g in grads.items()}


# ---------------------------------------------------------------------------
# numerical verification
# ---------------------------------------------------------------------------

def grad_check(builder: Callable[[Mapping[str, Tensor]], Tensor],
               params: Mapping[str, np.ndarray], *, seed: int = 0,
               step: float = 1e-6, probes: int = 64) -> dict[str, float]:
    """Compare autodiff gradients against central finite differences.

    ``builder`` receives the parameters as graph leaves and must
    deterministically return a scalar loss tensor. For parameters larger than
    ``probes`` elements a seeded random subsample (>= 64 elements) is probed.
    Returns the max relative error per parameter, with
    ``rel = |g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)``.
    """
    base = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def evaluate(values):
        graph = Graph()
        leaves = {k: graph.leaf(values[k]) for k in sorted(values)}
        loss = builder(leaves)
        if loss.shape != ():
            raise GraphError(f"grad_check: builder returned shape {loss.shape}")
        if not np.isfinite(loss.data):
            raise FloatingPointError("grad_check: non-finite loss")
        return loss, leaves

    loss, leaves = evaluate(base)
    # a loss with no graph attachment depends on nothing: all gradients are 0
    gmap = backward(loss) if loss.graph is not None else {}
    rng = np.random.default_rng(seed)
    probes = max(probes, 64)

    errors: dict[str, float] = {}
    for name in sorted(base):
        ad_t = gmap.get(leaves[name].node)
        ad = ad_t.data if ad_t is not None else np.zeros_like(base[name])
        n = base[name].size
        if n <= probes:
            index = np.arange(n)
        else:
            index = rng.choice(n, size=probes, replace=False)
        worst = 0.0
        for i in index:
            sides = []
            for sign in (1.0, -1.0):
                shifted = dict(base)
                pert = base[name].copy()
                pert.flat[i] += sign * step
                shifted[name] = pert
                sides.append(evaluate(shifted)[0].item())
            fd = (sides[0] - sides[1]) / (2.0 * step)
            a = float(ad.flat[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            worst = max(worst, rel)
        errors[name] = worst
    return errors
