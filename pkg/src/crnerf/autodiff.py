"""Dense tensors with tape-based reverse-mode differentiation.

Every network in this package is composed from the closed set of op kinds in
``OP_KINDS``.  A :class:`Tape` records one node per op application; node ids
are assigned in execution order so the tape is topologically sorted by
construction and :func:`backprop` is a single reverse sweep.

Layout conventions used throughout the package:

* conv2d / adaptive-average-pool take ``N x C x H x W`` arrays.
* spatial-covariance takes a ``C x HW`` matrix.
* bilinear-sample takes ``... x H x W`` and returns ``... x K`` for ``K``
  ``(row, col)`` coordinates.
"""

from __future__ import annotations

import contextlib
import json
import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

OP_KINDS = (
    "matmul",
    "conv2d",
    "add",
    "sub",
    "mul",
    "scalar-mul",
    "relu",
    "softplus",
    "sigmoid",
    "sin",
    "cos",
    "exp",
    "mean",
    "sum",
    "reshape",
    "concat",
    "adaptive-average-pool",
    "spatial-covariance",
    "l1-norm",
    "squared-l2-norm",
    "bilinear-sample",
)

CHECKPOINT_FORMAT = "crossray-ckpt-v1"


class ShapeError(ValueError):
    """Input shapes are incompatible with an op kind."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


_dtype = np.dtype(np.float64)


def default_dtype() -> np.dtype:
    return _dtype


def set_default_dtype(dtype) -> None:
    global _dtype
    dt = np.dtype(dtype)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    _dtype = dt


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily switch the dtype used for new constants."""
    old = _dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


class Tensor:
    """A numpy array, optionally linked to a node on a :class:`Tape`."""

    __slots__ = ("data", "tape", "node")
    __array_priority__ = 1000

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None):
        arr = np.asarray(data)
        if arr.dtype != _dtype and tape is None:
            arr = arr.astype(_dtype)
        self.data = arr
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node}" if self.tracked else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return apply_op("add", [self, other])

    def __radd__(self, other):
        return apply_op("add", [other, self])

    def __sub__(self, other):
        return apply_op("sub", [self, other])

    def __rsub__(self, other):
        return apply_op("sub", [other, self])

    def __mul__(self, other):
        if np.isscalar(other):
            return apply_op("scalar-mul", [self], scalar=float(other))
        return apply_op("mul", [self, other])

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return apply_op("scalar-mul", [self], scalar=-1.0)

    def __matmul__(self, other):
        return apply_op("matmul", [self, other])

    def __rmatmul__(self, other):
        return apply_op("matmul", [other, self])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    kind: str
    inputs: tuple[int, ...]
    # Closure over the saved forward values; maps the output cotangent to one
    # cotangent per input (None where the input needs no gradient).
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None
    shape: tuple[int, ...]


class Tape:
    """Append-only record of op applications for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, value, kind: str = "leaf") -> Tensor:
        """Register ``value`` as a differentiable input."""
        arr = np.array(value, dtype=np.asarray(value).dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype)
        self.nodes.append(Node(kind, (), None, arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def record(self, kind: str, inputs: tuple[int, ...], vjp, shape) -> int:
        for i in inputs:
            assert 0 <= i < len(self.nodes), "tape input id out of order"
        self.nodes.append(Node(kind, inputs, vjp, tuple(shape)))
        return len(self.nodes) - 1

    def leaf_ids(self) -> list[int]:
        return [i for i, n in enumerate(self.nodes) if n.vjp is None]


# --------------------------------------------------------------------------
# op kernels: each returns (forward value, vjp)
# --------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(kind, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None


def _op_add(xs, attrs):
    a, b = xs
    _broadcast_shape("add", a, b)
    return a + b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _op_sub(xs, attrs):
    a, b = xs
    _broadcast_shape("sub", a, b)
    return a - b, lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape))


def _op_mul(xs, attrs):
    a, b = xs
    _broadcast_shape("mul", a, b)
    return a * b, lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))


def _op_scalar_mul(xs, attrs):
    (a,) = xs
    s = attrs["scalar"]
    return a * s, lambda g: (g * s,)


def _op_matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    need_a, need_b = attrs.get("_needs", (True, True))

    def vjp(g):
        return (g @ b.T if need_a else None, a.T @ g if need_b else None)

    return a @ b, vjp


def _op_relu(xs, attrs):
    (a,) = xs
    on = a > 0
    return np.where(on, a, 0).astype(a.dtype), lambda g: (g * on,)


def _sigmoid(a):
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def _op_softplus(xs, attrs):
    (a,) = xs
    return np.logaddexp(0, a).astype(a.dtype), lambda g: (g * _sigmoid(a),)


def _op_sigmoid(xs, attrs):
    (a,) = xs
    s = _sigmoid(a)
    return s, lambda g: (g * s * (1 - s),)


def _op_sin(xs, attrs):
    (a,) = xs
    return np.sin(a), lambda g: (g * np.cos(a),)


def _op_cos(xs, attrs):
    (a,) = xs
    return np.cos(a), lambda g: (-g * np.sin(a),)


def _op_exp(xs, attrs):
    (a,) = xs
    e = np.exp(a)
    return e, lambda g: (g * e,)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def _op_sum(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    out = a.sum(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return out, vjp


def _op_mean(xs, attrs):
    (a,) = xs
    axes = _norm_axis(attrs.get("axis"), a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes]))
    out = a.mean(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g / count, axes), a.shape).copy(),)

    return out, vjp


def _op_reshape(xs, attrs):
    (a,) = xs
    shape = tuple(attrs["shape"])
    try:
        out = a.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    return out, lambda g: (g.reshape(a.shape),)


def _op_concat(xs, attrs):
    axis = attrs.get("axis", 0)
    try:
        out = np.concatenate(xs, axis=axis)
    except ValueError:
        shapes = [x.shape for x in xs]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return out, vjp


def _op_conv2d(xs, attrs):
    x, w = xs
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (3, 3) or w.shape[1] != x.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    n, _, h, wd = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    out = np.zeros((n, w.shape[0], h, wd), dtype=np.result_type(x, w))
    for i in range(3):
        for j in range(3):
            win = xp[:, :, i : i + h, j : j + wd]
            out += np.einsum("oc,nchw->nohw", w[:, :, i, j], win, optimize=True)

    need_x, need_w = attrs.get("_needs", (True, True))

    def vjp(g):
        gxp = np.zeros_like(xp) if need_x else None
        gw = np.zeros_like(w) if need_w else None
        for i in range(3):
            for j in range(3):
                win = xp[:, :, i : i + h, j : j + wd]
                if need_w:
                    gw[:, :, i, j] = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
                if need_x:
                    gxp[:, :, i : i + h, j : j + wd] += np.einsum(
                        "oc,nohw->nchw", w[:, :, i, j], g, optimize=True
                    )
        return (gxp[:, :, 1:-1, 1:-1] if need_x else None), gw

    return out, vjp


def _pool_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    m = np.zeros((n_out, n_in), dtype=dtype)
    for i in range(n_out):
        lo = (i * n_in) // n_out
        hi = -((-(i + 1) * n_in) // n_out)
        m[i, lo:hi] = 1.0 / (hi - lo)
    return m


def _op_adaptive_pool(xs, attrs):
    (x,) = xs
    oh, ow = attrs["output_size"]
    if oh < 1 or ow < 1:
        raise ShapeError(f"adaptive-average-pool: output grid {oh}x{ow} must be >= 1")
    if x.ndim != 4:
        raise ShapeError(f"adaptive-average-pool: expected NCHW input, got {x.shape}")
    ph = _pool_matrix(x.shape[2], oh, x.dtype)
    pw = _pool_matrix(x.shape[3], ow, x.dtype)
    out = np.einsum("ih,nchw,jw->ncij", ph, x, pw, optimize=True)
    return out, lambda g: (np.einsum("ih,ncij,jw->nchw", ph, g, pw, optimize=True),)


def _op_spatial_cov(xs, attrs):
    (x,) = xs
    if x.ndim != 2 or x.shape[1] < 2:
        raise ShapeError(f"spatial-covariance: expected C x N with N >= 2, got {x.shape}")
    denom = x.shape[1] - 1
    xc = x - x.mean(axis=1, keepdims=True)
    cov = (xc @ xc.T) / denom
    cov = 0.5 * (cov + cov.T)
    return cov, lambda g: (((g + g.T) @ xc) / denom,)


def _op_l1(xs, attrs):
    (a,) = xs
    return np.abs(a).sum(), lambda g: (g * np.sign(a),)


def _op_sq_l2(xs, attrs):
    (a,) = xs
    return (a * a).sum(), lambda g: (2.0 * g * a,)


def _bilinear_weights(coords: np.ndarray, h: int, w: int):
    r = np.clip(coords[:, 0], 0, h - 1)
    c = np.clip(coords[:, 1], 0, w - 1)
    r0 = np.floor(r).astype(np.int64)
    c0 = np.floor(c).astype(np.int64)
    r1 = np.minimum(r0 + 1, h - 1)
    c1 = np.minimum(c0 + 1, w - 1)
    fr = r - r0
    fc = c - c0
    return r0, r1, c0, c1, fr, fc


def _op_bilinear(xs, attrs):
    (a,) = xs
    coords = np.asarray(attrs["coords"], dtype=np.float64).reshape(-1, 2)
    if coords.shape[0] == 0:
        raise ShapeError("bilinear-sample: empty coordinate list")
    if a.ndim < 2:
        raise ShapeError(f"bilinear-sample: expected ... x H x W, got {a.shape}")
    h, w = a.shape[-2:]
    r0, r1, c0, c1, fr, fc = _bilinear_weights(coords, h, w)
    fr = fr.astype(a.dtype)
    fc = fc.astype(a.dtype)
    w00 = (1 - fr) * (1 - fc)
    w01 = (1 - fr) * fc
    w10 = fr * (1 - fc)
    w11 = fr * fc
    out = (
        a[..., r0, c0] * w00 + a[..., r0, c1] * w01 + a[..., r1, c0] * w10 + a[..., r1, c1] * w11
    )

    def vjp(g):
        ga = np.zeros_like(a)
        lead = a.shape[:-2]
        flat = ga.reshape(-1, h * w)
        gf = g.reshape(-1, g.shape[-1])
        for rr, cc, ww in ((r0, c0, w00), (r0, c1, w01), (r1, c0, w10), (r1, c1, w11)):
            idx = rr * w + cc
            for k in range(flat.shape[0]):
                np.add.at(flat[k], idx, gf[k] * ww)
        return (flat.reshape(lead + (h, w)),)

    return out, vjp


_OPS: dict[str, Callable] = {
    "matmul": _op_matmul,
    "conv2d": _op_conv2d,
    "add": _op_add,
    "sub": _op_sub,
    "mul": _op_mul,
    "scalar-mul": _op_scalar_mul,
    "relu": _op_relu,
    "softplus": _op_softplus,
    "sigmoid": _op_sigmoid,
    "sin": _op_sin,
    "cos": _op_cos,
    "exp": _op_exp,
    "mean": _op_mean,
    "sum": _op_sum,
    "reshape": _op_reshape,
    "concat": _op_concat,
    "adaptive-average-pool": _op_adaptive_pool,
    "spatial-covariance": _op_spatial_cov,
    "l1-norm": _op_l1,
    "squared-l2-norm": _op_sq_l2,
    "bilinear-sample": _op_bilinear,
}
assert set(_OPS) == set(OP_KINDS)


def apply_op(kind: str, inputs: Sequence, **attrs) -> Tensor:
    """Apply op ``kind`` to ``inputs``; record a tape node if any input is tracked."""
    try:
        fn = _OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    tapes = {id(t.tape): t.tape for t in tensors if t.tracked}
    if len(tapes) > 1:
        raise ValueError(f"{kind}: inputs belong to different tapes")
    attrs["_needs"] = tuple(t.tracked for t in tensors)
    # overflow is reported below as NonFiniteError
    with np.errstate(over="ignore", invalid="ignore"):
        out, vjp = fn([t.data for t in tensors], attrs)
    out = np.asarray(out)
    if not np.all(np.isfinite(out)):
        shapes = [t.shape for t in tensors]
        raise NonFiniteError(f"{kind}: non-finite output for inputs of shape {shapes}")
    if not tapes:
        return Tensor(out)
    tape = next(iter(tapes.values()))
    ids = tuple(t.node if t.tracked else -1 for t in tensors)
    tracked_ids = tuple(i for i in ids if i >= 0)

    def routed(g, _ids=ids, _vjp=vjp):
        grads = _vjp(g)
        return [gr for gr, i in zip(grads, _ids) if i >= 0]

    node = tape.record(kind, tracked_ids, routed, out.shape)
    return Tensor(out, tape, node)


# --------------------------------------------------------------------------
# thin functional wrappers
# --------------------------------------------------------------------------


def matmul(a, b):
    return apply_op("matmul", [a, b])


def conv2d(x, w):
    return apply_op("conv2d", [x, w])


def relu(x):
    return apply_op("relu", [x])


def softplus(x):
    return apply_op("softplus", [x])


def sigmoid(x):
    return apply_op("sigmoid", [x])


def sin(x):
    return apply_op("sin", [x])


def cos(x):
    return apply_op("cos", [x])


def exp(x):
    return apply_op("exp", [x])


def tsum(x, axis=None):
    return apply_op("sum", [x], axis=axis)


def mean(x, axis=None):
    return apply_op("mean", [x], axis=axis)


def reshape(x, shape):
    return apply_op("reshape", [x], shape=tuple(shape))


def concat(xs, axis=0):
    return apply_op("concat", list(xs), axis=axis)


def adaptive_avg_pool(x, output_size):
    return apply_op("adaptive-average-pool", [x], output_size=tuple(output_size))


def spatial_cov(x):
    return apply_op("spatial-covariance", [x])


def l1_norm(x):
    return apply_op("l1-norm", [x])


def sq_l2_norm(x):
    return apply_op("squared-l2-norm", [x])


def bilinear_sample(x, coords):
    return apply_op("bilinear-sample", [x], coords=np.asarray(coords))


# --------------------------------------------------------------------------
# reverse sweep
# --------------------------------------------------------------------------


def backprop(tape: Tape, loss) -> dict[int, np.ndarray]:
    """Gradients of scalar ``loss`` for every leaf on ``tape``.

    ``loss`` may be a tracked Tensor or a node id.  Leaves the loss does not
    depend on get a zero gradient.
    """
    loss_id = loss.node if isinstance(loss, Tensor) else int(loss)
    if loss_id is None or not 0 <= loss_id < len(tape.nodes):
        raise ValueError("loss is not a node on this tape")
    if tape.nodes[loss_id].shape != ():
        raise ShapeError(f"backprop: loss must be scalar, got shape {tape.nodes[loss_id].shape}")
    pending: dict[int, np.ndarray] = {loss_id: np.ones((), dtype=_loss_dtype(loss))}
    leaves: dict[int, np.ndarray] = {}
    for k in range(loss_id, -1, -1):
        g = pending.pop(k, None)
        if g is None:
            continue
        node = tape.nodes[k]
        if node.vjp is None:
            leaves[k] = g
            continue
        for i, gi in zip(node.inputs, node.vjp(g)):
            assert i < k, "cyclic tape"
            if i in pending:
                pending[i] = pending[i] + gi
            else:
                pending[i] = gi
    out = {}
    for i in tape.leaf_ids():
        if i in leaves:
            out[i] = leaves[i]
        else:
            out[i] = np.zeros(tape.nodes[i].shape, dtype=_dtype)
    return out


def _loss_dtype(loss):
    return loss.data.dtype if isinstance(loss, Tensor) else _dtype


# --------------------------------------------------------------------------
# parameters, Adam, checkpoints
# --------------------------------------------------------------------------


class ParamSet:
    """Named parameters with per-parameter Adam state."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.values: dict[str, np.ndarray] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, int] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value) -> None:
        arr = np.array(value, dtype=np.asarray(value).dtype, copy=True)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(_dtype)
        self.values[name] = arr
        self.m[name] = np.zeros_like(arr)
        self.v[name] = np.zeros_like(arr)
        self.steps[name] = 0

    def __contains__(self, name) -> bool:
        return name in self.values

    def __getitem__(self, name) -> np.ndarray:
        return self.values[name]

    def __len__(self) -> int:
        return len(self.values)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.values if n.startswith(prefix)]

    def bind(self, tape: Tape | None, names=None) -> dict[str, Tensor]:
        """Tensors for the parameters; leaves on ``tape`` when given."""
        selected = self.values if names is None else {n: self.values[n] for n in names}
        if tape is None:
            return {n: Tensor(v, None) for n, v in selected.items()}
        return {n: tape.leaf(v, kind="param") for n, v in selected.items()}

    def copy(self) -> "ParamSet":
        other = ParamSet()
        for n in self.values:
            other.values[n] = self.values[n].copy()
            other.m[n] = self.m[n].copy()
            other.v[n] = self.v[n].copy()
            other.steps[n] = self.steps[n]
        return other

    def astype(self, dtype) -> "ParamSet":
        other = self.copy()
        for store in (other.values, other.m, other.v):
            for n in store:
                store[n] = store[n].astype(dtype)
        return other


def adam_update(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
) -> ParamSet:
    """One bias-corrected Adam step, in place; returns ``params``."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    b1, b2 = betas
    for name, g in grads.items():
        p = params.values[name]
        g = np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"adam_update: gradient {g.shape} does not match parameter {name} {p.shape}")
        g = g.astype(p.dtype, copy=False)
        t = params.steps[name] + 1
        m = b1 * params.m[name] + (1 - b1) * g
        v = b2 * params.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        params.values[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
        params.m[name] = m.astype(p.dtype)
        params.v[name] = v.astype(p.dtype)
        params.steps[name] = t
    return params


def save_checkpoint(path, params: ParamSet, meta: Mapping | None = None) -> None:
    """Write parameters and Adam state as a single ``.npz`` container."""
    arrays = {"__format__": np.array(CHECKPOINT_FORMAT)}
    arrays["__meta__"] = np.array(json.dumps(dict(meta or {}), sort_keys=True))
    for n in params.values:
        arrays[f"param/{n}"] = params.values[n]
        arrays[f"adam_m/{n}"] = params.m[n]
        arrays[f"adam_v/{n}"] = params.v[n]
        arrays[f"adam_step/{n}"] = np.array(params.steps[n], dtype=np.int64)
    tmp = f"{os.fspath(path)}.tmp.npz"
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamSet, dict]:
    with np.load(path, allow_pickle=False) as z:
        fmt = str(z["__format__"]) if "__format__" in z else None
        if fmt != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint (format tag {fmt!r})")
        meta = json.loads(str(z["__meta__"]))
        params = ParamSet()
        for key in z.files:
            if key.startswith("param/"):
                n = key[len("param/") :]
                params.values[n] = z[key].copy()
                params.m[n] = z[f"adam_m/{n}"].copy()
                params.v[n] = z[f"adam_v/{n}"].copy()
                params.steps[n] = int(z[f"adam_step/{n}"])
    return params, meta


# --------------------------------------------------------------------------
# finite-difference verification
# --------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    tolerance: float
    errors: dict[str, float] = field(default_factory=dict)
    coords_checked: dict[str, int] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    def summary(self) -> str:
        lines = [f"{n}: {e:.3e}" + ("  FAIL" if not e < self.tolerance else "") for n, e in self.errors.items()]
        return "\n".join(lines)


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    point: ParamSet | Mapping[str, np.ndarray],
    tolerance: float = 1e-4,
    max_coords: int = 256,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of ``f`` with central differences.

    ``f`` receives a dict of Tensors keyed like ``point`` and returns a scalar
    Tensor.  The step per coordinate starts at ``1e-5 * max(1, |x|)`` and is
    cut tenfold (at most three times) while successive estimates disagree by
    more than roundoff, which happens when the step straddles a ReLU kink.  At most
    ``max_coords`` coordinates per parameter are probed, chosen by ``seed``.
    The error reported per parameter is
    ``max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6 * max(1, |f|))``;
    the floor keeps exactly-zero gradients from dividing noise by noise.
    """
    values = point.values if isinstance(point, ParamSet) else dict(point)
    values = {n: np.array(v, dtype=np.float64) for n, v in values.items()}
    for n, v in values.items():
        if not np.all(np.isfinite(v)):
            raise NonFiniteError(f"grad_check: parameter {n} has non-finite entries")

    with precision(np.float64):
        tape = Tape()
        bound = {n: tape.leaf(v) for n, v in values.items()}
        loss = f(bound)
        if not loss.tracked:
            analytic = {n: np.zeros_like(v) for n, v in values.items()}
        else:
            grads = backprop(tape, loss)
            analytic = {n: grads[t.node] for n, t in bound.items()}

        def evaluate(vals) -> float:
            return float(f({n: Tensor(v) for n, v in vals.items()}).data)

        f0 = evaluate(values)
        rng = np.random.default_rng(seed)
        report = GradCheckReport(tolerance)
        for name, v in values.items():
            flat_idx = np.arange(v.size)
            if v.size > max_coords:
                flat_idx = np.sort(rng.choice(v.size, size=max_coords, replace=False))
            a = analytic[name].reshape(-1)[flat_idx]
            num = np.empty(len(flat_idx))
            work = {n: x.copy() for n, x in values.items()}
            target = work[name].reshape(-1)

            def central(idx, h) -> float:
                x0 = target[idx]
                target[idx] = x0 + h
                fp = evaluate(work)
                target[idx] = x0 - h
                fm = evaluate(work)
                target[idx] = x0
                return (fp - fm) / (2 * h)

            for k, idx in enumerate(flat_idx):
                h = 1e-5 * max(1.0, abs(target[idx]))
                est = central(idx, h)
                for _ in range(3):
                    finer = central(idx, h / 10)
                    roundoff = 100 * np.finfo(np.float64).eps * max(1.0, abs(f0)) / (h / 10)
                    if abs(finer - est) <= 0.1 * tolerance * max(abs(finer), abs(est)) + roundoff:
                        break
                    h, est = h / 10, finer
                num[k] = est
            floor = 1e-6 * max(1.0, abs(f0))
            scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(num), initial=0.0), floor)
            err = float(np.max(np.abs(a - num), initial=0.0))
            report.errors[name] = err / scale
            report.coords_checked[name] = len(flat_idx)
    return report
