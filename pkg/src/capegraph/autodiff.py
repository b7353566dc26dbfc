"""Small reverse-mode autodiff over dense float64 arrays.

Only the primitives the pose model needs are provided. Every primitive has a
forward rule and a vector-Jacobian product; a :class:`Tape` records
applications while it is active and :func:`backward` replays it in reverse.

    >>> x = Tensor([3.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     y = mul(x, x)
    >>> backward(tape, y, Tensor([1.0]))
    >>> x.grad
    array([6.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LAYER_NORM_EPS = 1e-5


class ShapeError(ValueError):
    """Inputs do not conform to a primitive's signature."""


class DegenerateRowError(ValueError):
    """A masked softmax row has no unmasked entry."""


class LineageError(ValueError):
    """A tensor was not produced by the tape it is differentiated on."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_tape", "_index")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._tape: Tape | None = None
        self._index = -1

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the data."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


@dataclass
class Node:
    primitive: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    saved: object
    attrs: dict


@dataclass
class Tape:
    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class BranchLog:
    """Context manager recording which piece of every piecewise-linear primitive was taken.

    Two evaluations with equal logs ran through the same linear pieces of
    relu, abs and clip, so the function is smooth on the segment between
    them as far as those primitives are concerned.
    """

    def __init__(self):
        self.patterns: list[bytes] = []

    def __enter__(self) -> "BranchLog":
        _branch_logs().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _branch_logs().pop()


def _branch_logs() -> list[BranchLog]:
    if not hasattr(_local, "branch_logs"):
        _local.branch_logs = []
    return _local.branch_logs


def _branch_pattern(primitive: str, x: np.ndarray, attrs: dict) -> bytes | None:
    if primitive in ("relu", "abs"):
        return np.packbits(x > 0.0).tobytes()
    if primitive == "clip":
        return (np.packbits(x < attrs["lo"]).tobytes() + b"|" + np.packbits(x > attrs["hi"]).tobytes())
    return None


# --------------------------------------------------------------------------
# primitive rules: forward(arrays, attrs) -> (out, saved)
#                  vjp(g, saved, arrays, attrs) -> tuple of input grads
# --------------------------------------------------------------------------


def _check(cond: bool, name: str, *shapes) -> None:
    if not cond:
        raise ShapeError(f"{name}: non-conforming shapes {', '.join(str(s) for s in shapes)}")


def _matmul_fwd(xs, attrs):
    a, b = xs
    trans_b = attrs.get("trans_b", False)
    inner = b.shape[1] if trans_b else b.shape[0]
    _check(a.ndim == 2 and b.ndim == 2 and a.shape[1] == inner, "matmul", a.shape, b.shape)
    return (a @ b.T if trans_b else a @ b), None


def _matmul_vjp(g, saved, xs, attrs):
    a, b = xs
    if attrs.get("trans_b", False):
        return g @ b, g.T @ a
    return g @ b.T, a.T @ g


def _same_shape(name):
    def fwd(xs, attrs):
        a, b = xs
        _check(a.shape == b.shape, name, a.shape, b.shape)
        if name == "add":
            return a + b, None
        if name == "sub":
            return a - b, None
        return a * b, None

    return fwd


def _add_vjp(g, saved, xs, attrs):
    return g, g


def _sub_vjp(g, saved, xs, attrs):
    return g, -g


def _mul_vjp(g, saved, xs, attrs):
    a, b = xs
    return g * b, g * a


def _scale_fwd(xs, attrs):
    return xs[0] * attrs["factor"], None


def _scale_vjp(g, saved, xs, attrs):
    return (g * attrs["factor"],)


def _affine_fwd(xs, attrs):
    x, w, b = xs
    _check(x.ndim == 2 and w.ndim == 2 and x.shape[1] == w.shape[0] and b.shape == (w.shape[1],),
           "affine", x.shape, w.shape, b.shape)
    return x @ w + b, None


def _affine_vjp(g, saved, xs, attrs):
    x, w, _ = xs
    return g @ w.T, x.T @ g, g.sum(axis=0)


def _relu_fwd(xs, attrs):
    return np.maximum(xs[0], 0.0), None


def _relu_vjp(g, saved, xs, attrs):
    return (g * (xs[0] > 0.0),)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _sigmoid_fwd(xs, attrs):
    y = _sigmoid(xs[0])
    return y, y


def _sigmoid_vjp(g, y, xs, attrs):
    return (g * y * (1.0 - y),)


def _clip_fwd(xs, attrs):
    return np.clip(xs[0], attrs["lo"], attrs["hi"]), None


def _clip_vjp(g, saved, xs, attrs):
    x = xs[0]
    return (g * ((x >= attrs["lo"]) & (x <= attrs["hi"])),)


def _abs_fwd(xs, attrs):
    return np.abs(xs[0]), None


def _abs_vjp(g, saved, xs, attrs):
    return (g * np.sign(xs[0]),)


def _softmax_masked_fwd(xs, attrs):
    x = xs[0]
    mask = np.asarray(attrs["mask"], dtype=bool)
    _check(x.ndim == 2 and mask.shape[-1] == x.shape[1] and mask.ndim <= 2, "softmax_masked",
           x.shape, mask.shape)
    if mask.all():
        z = x - x.max(axis=1, keepdims=True)
    else:
        full = np.broadcast_to(mask, x.shape)
        live = full.any(axis=1)
        if not live.all():
            raise DegenerateRowError(f"softmax_masked: row {int(np.argmin(live))} is fully masked")
        z = np.where(full, x, -np.inf)
        z -= z.max(axis=1, keepdims=True)
    np.exp(z, out=z)  # exp(-inf) is an exact zero on masked entries
    z /= z.sum(axis=1, keepdims=True)
    return z, z


def _softmax_masked_vjp(g, y, xs, attrs):
    return (y * (g - (g * y).sum(axis=1, keepdims=True)),)


def _layer_norm_fwd(xs, attrs):
    x, gain, bias = xs
    _check(x.ndim == 2 and gain.shape == (x.shape[1],) and bias.shape == gain.shape,
           "layer_norm", x.shape, gain.shape, bias.shape)
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + attrs.get("eps", LAYER_NORM_EPS))
    xhat = xc * inv
    return xhat * gain + bias, (xhat, inv)


def _layer_norm_vjp(g, saved, xs, attrs):
    xhat, inv = saved
    gain = xs[1]
    gx = g * gain
    dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def _concat_rows_fwd(xs, attrs):
    _check(all(x.ndim == 2 and x.shape[1] == xs[0].shape[1] for x in xs),
           "concat_rows", *[x.shape for x in xs])
    return np.concatenate(xs, axis=0), None


def _concat_rows_vjp(g, saved, xs, attrs):
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])
    return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(xs)))


def _concat_cols_fwd(xs, attrs):
    _check(all(x.ndim == 2 and x.shape[0] == xs[0].shape[0] for x in xs),
           "concat_cols", *[x.shape for x in xs])
    return np.concatenate(xs, axis=1), None


def _concat_cols_vjp(g, saved, xs, attrs):
    bounds = np.cumsum([0] + [x.shape[1] for x in xs])
    return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(xs)))


def _slice_rows_fwd(xs, attrs):
    x = xs[0]
    start, stop = attrs["start"], attrs["stop"]
    _check(x.ndim == 2 and 0 <= start < stop <= x.shape[0], "slice_rows", x.shape, (start, stop))
    return x[start:stop], None


def _slice_rows_vjp(g, saved, xs, attrs):
    dx = np.zeros_like(xs[0])
    dx[attrs["start"]:attrs["stop"]] = g
    return (dx,)


def _slice_cols_fwd(xs, attrs):
    x = xs[0]
    start, stop = attrs["start"], attrs["stop"]
    _check(x.ndim == 2 and 0 <= start < stop <= x.shape[1], "slice_cols", x.shape, (start, stop))
    return x[:, start:stop], None


def _slice_cols_vjp(g, saved, xs, attrs):
    dx = np.zeros_like(xs[0])
    dx[:, attrs["start"]:attrs["stop"]] = g
    return (dx,)


def _mean_rows_fwd(xs, attrs):
    x = xs[0]
    _check(x.ndim == 2 and x.shape[0] > 0, "mean_rows", x.shape)
    return x.mean(axis=0, keepdims=True), None


def _mean_rows_vjp(g, saved, xs, attrs):
    x = xs[0]
    return (np.broadcast_to(g / x.shape[0], x.shape).copy(),)


def _sum_fwd(xs, attrs):
    return np.asarray(xs[0].sum()), None


def _sum_vjp(g, saved, xs, attrs):
    return (np.full_like(xs[0], float(g)),)


def _reshape_fwd(xs, attrs):
    x = xs[0]
    shape = tuple(attrs["shape"])
    _check(int(np.prod(shape)) == x.size, "reshape", x.shape, shape)
    return x.reshape(shape), None


def _reshape_vjp(g, saved, xs, attrs):
    return (g.reshape(xs[0].shape),)


def _conv_windows(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    rows = []
    for di in range(k):
        for dj in range(k):
            rows.append(xp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :])
    return np.stack(rows, axis=2)  # (ho, wo, k*k, cin)


def _conv2d_fwd(xs, attrs):
    x, w, b = xs
    stride, pad = attrs.get("stride", 2), attrs.get("pad", 1)
    _check(x.ndim == 3 and w.ndim == 4 and w.shape[0] == w.shape[1] and w.shape[2] == x.shape[2]
           and b.shape == (w.shape[3],), "conv2d", x.shape, w.shape, b.shape)
    k = w.shape[0]
    h, wd, cin = x.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    cols = _conv_windows(xp, k, stride, ho, wo).reshape(ho * wo, k * k * cin)
    out = cols @ w.reshape(k * k * cin, -1) + b
    return out.reshape(ho, wo, -1), cols


def _conv2d_vjp(g, cols, xs, attrs):
    x, w, _ = xs
    stride, pad = attrs.get("stride", 2), attrs.get("pad", 1)
    k = w.shape[0]
    h, wd, cin = x.shape
    ho, wo, cout = g.shape
    g2 = g.reshape(ho * wo, cout)
    dw = (cols.T @ g2).reshape(w.shape)
    dcols = (g2 @ w.reshape(k * k * cin, cout).T).reshape(ho, wo, k * k, cin)
    dxp = np.zeros((h + 2 * pad, wd + 2 * pad, cin))
    for t in range(k * k):
        di, dj = divmod(t, k)
        dxp[di:di + stride * ho:stride, dj:dj + stride * wo:stride, :] += dcols[:, :, t, :]
    return dxp[pad:pad + h, pad:pad + wd, :], dw, g2.sum(axis=0)


_RULES: dict[str, tuple[Callable, Callable]] = {
    "matmul": (_matmul_fwd, _matmul_vjp),
    "add": (_same_shape("add"), _add_vjp),
    "sub": (_same_shape("sub"), _sub_vjp),
    "mul": (_same_shape("mul"), _mul_vjp),
    "scale": (_scale_fwd, _scale_vjp),
    "affine": (_affine_fwd, _affine_vjp),
    "relu": (_relu_fwd, _relu_vjp),
    "sigmoid": (_sigmoid_fwd, _sigmoid_vjp),
    "abs": (_abs_fwd, _abs_vjp),
    "clip": (_clip_fwd, _clip_vjp),
    "softmax_masked": (_softmax_masked_fwd, _softmax_masked_vjp),
    "layer_norm": (_layer_norm_fwd, _layer_norm_vjp),
    "concat_rows": (_concat_rows_fwd, _concat_rows_vjp),
    "concat_cols": (_concat_cols_fwd, _concat_cols_vjp),
    "slice_rows": (_slice_rows_fwd, _slice_rows_vjp),
    "slice_cols": (_slice_cols_fwd, _slice_cols_vjp),
    "mean_rows": (_mean_rows_fwd, _mean_rows_vjp),
    "sum": (_sum_fwd, _sum_vjp),
    "reshape": (_reshape_fwd, _reshape_vjp),
    "conv2d": (_conv2d_fwd, _conv2d_vjp),
}

PRIMITIVES = tuple(_RULES)


def forward(primitive: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply ``primitive`` and record it on the active tape if any input needs grad."""
    try:
        fwd, _ = _RULES[primitive]
    except KeyError:
        raise ValueError(f"unknown primitive {primitive!r}") from None
    inputs = tuple(as_tensor(x) for x in inputs)
    out_data, saved = fwd([x.data for x in inputs], attrs)
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(out_data, dtype=np.float64)
    out.grad = None
    out.requires_grad = any(x.requires_grad for x in inputs)
    out._tape = None
    out._index = -1
    logs = _branch_logs()
    if logs:
        pattern = _branch_pattern(primitive, inputs[0].data, attrs)
        if pattern is not None:
            logs[-1].patterns.append(pattern)
    tape = active_tape()
    if out.requires_grad and tape is not None:
        out._tape = tape
        out._index = len(tape.nodes)
        tape.nodes.append(Node(primitive, inputs, out, saved, attrs))
    return out


def backward(tape: Tape, output: Tensor, seed: Tensor | np.ndarray | float = 1.0) -> None:
    """Accumulate d(seed . output)/d(leaf) into every leaf tensor that requires grad."""
    if output._tape is not tape:
        raise LineageError("output was not produced on this tape")
    seed = np.asarray(seed.data if isinstance(seed, Tensor) else seed, dtype=np.float64)
    if seed.shape != output.shape:
        if seed.size == output.data.size:
            seed = seed.reshape(output.shape)
        else:
            raise ShapeError(f"backward: seed shape {seed.shape} != output shape {output.shape}")
    grads: dict[int, np.ndarray] = {output._index: seed}
    for idx in range(output._index, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        node = tape.nodes[idx]
        _, vjp = _RULES[node.primitive]
        in_grads = vjp(g, node.saved, [x.data for x in node.inputs], node.attrs)
        for x, gx in zip(node.inputs, in_grads):
            if not x.requires_grad or gx is None:
                continue
            if x._tape is tape:
                prev = grads.get(x._index)
                grads[x._index] = gx if prev is None else prev + gx
            else:
                x.grad = np.array(gx, dtype=np.float64) if x.grad is None else x.grad + gx


# --------------------------------------------------------------------------
# thin wrappers
# --------------------------------------------------------------------------


def matmul(a, b, trans_b: bool = False) -> Tensor:
    return forward("matmul", (a, b), trans_b=trans_b)


def add(a, b) -> Tensor:
    return forward("add", (a, b))


def sub(a, b) -> Tensor:
    return forward("sub", (a, b))


def mul(a, b) -> Tensor:
    return forward("mul", (a, b))


def scale(a, factor: float) -> Tensor:
    return forward("scale", (a,), factor=float(factor))


def affine(x, w, b) -> Tensor:
    return forward("affine", (x, w, b))


def relu(x) -> Tensor:
    return forward("relu", (x,))


def sigmoid(x) -> Tensor:
    return forward("sigmoid", (x,))


def clip(x, lo: float, hi: float) -> Tensor:
    return forward("clip", (x,), lo=lo, hi=hi)


def absolute(x) -> Tensor:
    return forward("abs", (x,))


def softmax_masked(x, mask) -> Tensor:
    return forward("softmax_masked", (x,), mask=mask)


def layer_norm(x, gain, bias, eps: float = LAYER_NORM_EPS) -> Tensor:
    return forward("layer_norm", (x, gain, bias), eps=eps)


def concat_rows(xs: Sequence) -> Tensor:
    return forward("concat_rows", tuple(xs))


def concat_cols(xs: Sequence) -> Tensor:
    return forward("concat_cols", tuple(xs))


def slice_rows(x, start: int, stop: int) -> Tensor:
    return forward("slice_rows", (x,), start=start, stop=stop)


def slice_cols(x, start: int, stop: int) -> Tensor:
    return forward("slice_cols", (x,), start=start, stop=stop)


def split_rows(x, sizes: Sequence[int]) -> list[Tensor]:
    x = as_tensor(x)
    if sum(sizes) != x.shape[0] or any(s <= 0 for s in sizes):
        raise ShapeError(f"split_rows: sizes {list(sizes)} do not partition {x.shape[0]} rows")
    bounds = np.cumsum([0, *sizes])
    return [slice_rows(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def mean_rows(x) -> Tensor:
    return forward("mean_rows", (x,))


def total(x) -> Tensor:
    return forward("sum", (x,))


def reshape(x, shape) -> Tensor:
    return forward("reshape", (x,), shape=tuple(shape))


def conv2d(x, w, b, stride: int = 2, pad: int = 1) -> Tensor:
    return forward("conv2d", (x, w, b), stride=stride, pad=pad)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: list[float]
    worst_index: list[int]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error)

    @property
    def flagged(self) -> list[int]:
        return [i for i, e in enumerate(self.max_rel_error) if e > self.tolerance]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(f: Callable[..., Tensor], point: Sequence, step: float = 1e-5,
               tolerance: float = 1e-6, floor: float = 1e-8) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f`` with central differences.

    ``f`` receives one tensor per entry of ``point`` and must return a
    single-element tensor. Entries whose analytic and numeric magnitudes are
    both below ``floor`` are compared on an absolute scale.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    base = [np.array(as_tensor(p).data, dtype=np.float64) for p in point]
    leaves = [Tensor(b, requires_grad=True) for b in base]
    with Tape() as tape:
        out = f(*leaves)
    if out.data.size != 1:
        raise ValueError(f"grad_check needs a scalar function, got shape {out.shape}")
    backward(tape, out, np.ones(out.shape))

    errors, worst = [], []
    for i, b in enumerate(base):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(b)
        numeric = np.empty(b.size)
        flat = b.reshape(-1)
        args = [Tensor(x) for x in base]
        probe = args[i].data.reshape(-1)
        for j in range(b.size):
            orig = flat[j]
            probe[j] = orig + step
            up = float(f(*args).data.reshape(-1)[0])
            probe[j] = orig - step
            down = float(f(*args).data.reshape(-1)[0])
            probe[j] = orig
            numeric[j] = (up - down) / (2.0 * step)
        rel = relative_error(analytic.reshape(-1), numeric, floor)
        errors.append(float(rel.max()) if rel.size else 0.0)
        worst.append(int(rel.argmax()) if rel.size else -1)
    return GradCheckReport(errors, worst, tolerance)
