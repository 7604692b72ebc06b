"""Dense float64 tensors with a tape-based reverse-mode differentiation graph.

Operations record themselves on the innermost active :class:`GraphTape`
when at least one input requires a gradient. Outside a tape, operations are
evaluated eagerly and nothing is recorded, which is how inference and
finite-difference probes run.

Typical use::

    with GraphTape() as tape:
        loss = softmax_cross_entropy(matmul(x, w), label)
    backward(loss, tape)
    w.grad  # dL/dw
"""
from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as K
from ._kernels import _pykernels
from .errors import (
    ConfigurationError,
    DimensionError,
    InputError,
    NumericError,
    UsageError,
)

_TAPES: list["GraphTape"] = []
_MODE = {"dtype": np.float64, "kernels": K}


@contextmanager
def extended_precision():
    """Evaluate new nodes in long double with the pure-numpy kernels.

    Only forward evaluation is supported in this mode; it exists so that
    finite-difference probes are not limited by float64 round-off.
    """
    saved = dict(_MODE)
    _MODE.update(dtype=np.longdouble, kernels=_pykernels)
    try:
        yield
    finally:
        _MODE.update(saved)


class Node:
    """A value in the differentiation graph.

    ``grad`` stays ``None`` until a backward pass touches the node; read it
    through :meth:`grad_or_zeros` when a dense array is needed.
    """

    __slots__ = ("value", "grad", "requires_grad", "parents", "op", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=_MODE["dtype"])
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents: tuple[Node, ...] = ()
        self.op: str | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def grad_or_zeros(self) -> np.ndarray:
        return np.zeros_like(self.value) if self.grad is None else self.grad

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Node{label}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"


def parameter(value, name: str | None = None) -> Node:
    """Trainable leaf holding its own copy of ``value``."""
    return Node(np.array(value, dtype=np.float64, copy=True), requires_grad=True, name=name)


def constant(value) -> Node:
    return Node(value, requires_grad=False)


class GraphTape:
    """Ordered op records appended during a forward pass.

    Each record is ``(outputs, backward_fn)``; records are appended after
    their inputs exist, so the list is already in topological order.
    """

    def __init__(self):
        self.records: list[tuple[tuple[Node, ...], Callable]] = []

    def __enter__(self) -> "GraphTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.records)


def current_tape() -> GraphTape | None:
    return _TAPES[-1] if _TAPES else None


def _check_finite(value: np.ndarray, op: str) -> None:
    if not np.isfinite(value).all():
        raise NumericError(f"{op} produced non-finite values")


def _record(op: str, outputs: tuple[Node, ...], parents: tuple[Node, ...], backward_fn) -> None:
    if not any(p.requires_grad for p in parents):
        return
    for out in outputs:
        out.requires_grad = True
        out.parents = parents
    tape = current_tape()
    if tape is not None:
        tape.records.append((outputs, backward_fn))


def _result(op: str, value: np.ndarray, parents: tuple[Node, ...], backward_fn) -> Node:
    _check_finite(value, op)
    out = Node(value)
    out.op = op
    _record(op, (out,), parents, backward_fn)
    return out


def _accumulate(node: Node, g: np.ndarray) -> None:
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True).reshape(node.value.shape)
    else:
        node.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(op: str, a: Node, b: Node) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# --------------------------------------------------------------------------
# elementwise and linear algebra
# --------------------------------------------------------------------------

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _result("add", a.value + b.value, (a, b), backward)


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("sub", a, b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, -_unbroadcast(g, b.shape))

    return _result("sub", a.value - b.value, (a, b), backward)


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a, b)

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.value, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.value, b.shape))

    return _result("mul", a.value * b.value, (a, b), backward)


def scale(a: Node, c: float) -> Node:
    c = float(c)

    def backward(g):
        _accumulate(a, g * c)

    return _result("scale", a.value * c, (a,), backward)


def matmul(a: Node, b: Node) -> Node:
    """``a @ b`` for ``a`` of shape ``[..., k]`` and a 2-d ``b`` of shape ``[k, n]``."""
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    k, n = b.shape

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.reshape(-1, k).T @ g.reshape(-1, n))

    return _result("matmul", a.value @ b.value, (a, b), backward)


def concat(a: Node, b: Node, axis: int = -1) -> Node:
    return concat_many([a, b], axis)


def concat_many(nodes: Sequence[Node], axis: int = -1) -> Node:
    """Join nodes along ``axis``; empty 1-d inputs are dropped."""
    nodes = [n for n in nodes if not (n.ndim == 1 and n.shape[0] == 0)] or list(nodes[:1])
    first = nodes[0]
    ax = axis % first.ndim if first.ndim else 0
    for n in nodes[1:]:
        if n.ndim != first.ndim or any(
            s1 != s2 for i, (s1, s2) in enumerate(zip(first.shape, n.shape)) if i != ax
        ):
            shapes = ", ".join(str(x.shape) for x in nodes)
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}")
    if len(nodes) == 1:
        return first
    sizes = [n.shape[ax] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        for n, piece in zip(nodes, np.split(g, cuts, axis=ax)):
            _accumulate(n, piece)

    return _result("concat", np.concatenate([n.value for n in nodes], axis=ax), tuple(nodes), backward)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return _pykernels.sigmoid(x) if x.ndim else _pykernels.sigmoid(x.reshape(1))[0]


ACTIVATIONS = ("tanh", "sigmoid", "relu")


def apply_activation(kind: str, x: Node) -> Node:
    """Elementwise tanh, sigmoid or relu."""
    if kind == "tanh":
        y = np.tanh(x.value)
        deriv = lambda: 1.0 - y * y  # noqa: E731
    elif kind == "sigmoid":
        y = _sigmoid(x.value)
        deriv = lambda: y * (1.0 - y)  # noqa: E731
    elif kind == "relu":
        y = np.maximum(x.value, 0.0)
        deriv = lambda: (x.value > 0).astype(np.float64)  # noqa: E731
    else:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")

    def backward(g):
        _accumulate(x, g * deriv())

    return _result(kind, y, (x,), backward)


def sum_all(x: Node) -> Node:
    def backward(g):
        _accumulate(x, np.broadcast_to(g, x.shape))

    return _result("sum", np.asarray(x.value.sum()), (x,), backward)


def sum_squares(x: Node) -> Node:
    def backward(g):
        _accumulate(x, 2.0 * g * x.value)

    return _result("sum_squares", np.asarray(np.sum(x.value * x.value)), (x,), backward)


def where_rows(keep: np.ndarray, a: Node, b: Node) -> Node:
    """Row-wise select: row i of ``a`` where ``keep[i]`` else row i of ``b``."""
    if a.shape != b.shape:
        raise DimensionError(f"where_rows: shapes {a.shape} and {b.shape} differ")
    m = np.asarray(keep, dtype=bool).reshape((-1,) + (1,) * (a.ndim - 1))

    def backward(g):
        if a.requires_grad:
            _accumulate(a, np.where(m, g, 0.0))
        if b.requires_grad:
            _accumulate(b, np.where(m, 0.0, g))

    return _result("where_rows", np.where(m, a.value, b.value), (a, b), backward)


# --------------------------------------------------------------------------
# indexing and sequence plumbing
# --------------------------------------------------------------------------

def take_rows(table: Node, ids, skip_id: int | None = None) -> Node:
    """Gather rows of a 2-d ``table``; output shape is ``ids.shape + (d,)``.

    Gradients scatter back into the touched rows only; row ``skip_id`` never
    receives gradient.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise DimensionError(f"take_rows: table must be 2-d, got {table.shape}")
    V, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise InputError(f"token id out of range for table with {V} rows")
    flat = np.ascontiguousarray(ids.ravel())
    skip = -1 if skip_id is None else int(skip_id)

    def backward(g):
        if not table.requires_grad:
            return
        if table.grad is None:
            table.grad = np.zeros_like(table.value)
        _MODE["kernels"].scatter_add_rows(table.grad, flat, np.ascontiguousarray(g.reshape(-1, d)), skip)

    return _result("take_rows", table.value[ids], (table,), backward)


def select(x: Node, index: int, axis: int = 1) -> Node:
    """Slice one position out of ``axis`` (dropping the axis)."""
    ax = axis % x.ndim
    key = (slice(None),) * ax + (index,)

    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[key] += g

    return _result("select", x.value[key], (x,), backward)


def slice_last(x: Node, start: int, stop: int) -> Node:
    def backward(g):
        if x.grad is None:
            x.grad = np.zeros_like(x.value)
        x.grad[..., start:stop] += g

    return _result("slice", x.value[..., start:stop], (x,), backward)


def pad_time(x: Node, length: int) -> Node:
    """Zero-pad a ``[B, T, d]`` node on the right of the time axis to ``length``."""
    B, T, d = x.shape
    if length <= T:
        return x
    out = np.zeros((B, length, d), dtype=x.value.dtype)
    out[:, :T] = x.value

    def backward(g):
        _accumulate(x, g[:, :T])

    return _result("pad_time", out, (x,), backward)


def masked_mean(x: Node, mask) -> Node:
    """Mean over the time axis of ``[B, T, d]`` using only positions where ``mask`` is true."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != x.shape[:2]:
        raise DimensionError(f"masked_mean: mask {m.shape} does not match {x.shape}")
    counts = m.sum(axis=1)
    if (counts == 0).any():
        raise InputError("masked_mean: sequence with no unmasked positions")
    weights = m[:, :, None] / counts[:, None, None]

    def backward(g):
        _accumulate(x, g[:, None, :] * weights)

    return _result("masked_mean", (x.value * weights).sum(axis=1), (x,), backward)


def unfold(x: Node, h: int) -> Node:
    """Sliding windows of ``h`` consecutive steps: ``[B, T, d] -> [B, T-h+1, h*d]``."""
    B, T, d = x.shape
    if h < 1 or T < h:
        raise DimensionError(f"unfold: window {h} does not fit sequence shape {x.shape}")

    def backward(g):
        _accumulate(x, _MODE["kernels"].unfold_backward(np.ascontiguousarray(g), h, T))

    return _result("unfold", _MODE["kernels"].unfold_windows(np.ascontiguousarray(x.value), h), (x,), backward)


def max_over_time(c: Node, nvalid=None) -> Node:
    """Per-feature maximum over the time axis.

    Accepts ``[T, F]`` or ``[B, T, F]``. ``nvalid[b]`` limits row b to its
    first positions. Gradient goes to the first argmax only.
    """
    squeeze = c.ndim == 2
    v = c.value[None] if squeeze else c.value
    if v.ndim != 3:
        raise DimensionError(f"max_over_time: expected [T, F] or [B, T, F], got {c.shape}")
    B, T, F = v.shape
    if T == 0:
        raise DimensionError("max_over_time: empty time axis")
    if nvalid is None:
        n = np.full(B, T, dtype=np.int64)
    else:
        n = np.clip(np.asarray(nvalid, dtype=np.int64).reshape(B), 1, T)
    out, idx = _MODE["kernels"].max_pool_forward(np.ascontiguousarray(v), np.ascontiguousarray(n))

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(B, F))
        dc = _MODE["kernels"].max_pool_backward(g2, idx, T)
        _accumulate(c, dc[0] if squeeze else dc)

    return _result("max_over_time", out[0] if squeeze else out, (c,), backward)


# --------------------------------------------------------------------------
# model-specific fused ops
# --------------------------------------------------------------------------

def bilinear(x: Node, w: Node, y: Node) -> Node:
    """``out[b, c] = x[b] . w[c] . y[b]`` for ``w`` of shape ``[C, p, q]``."""
    if x.ndim != 2 or y.ndim != 2 or w.ndim != 3 or w.shape[1:] != (x.shape[1], y.shape[1]) \
            or x.shape[0] != y.shape[0]:
        raise DimensionError(f"bilinear: incompatible shapes {x.shape}, {w.shape}, {y.shape}")
    xw = np.einsum("bi,cij->bcj", x.value, w.value)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, np.einsum("bc,cij,bj->bi", g, w.value, y.value))
        if w.requires_grad:
            _accumulate(w, np.einsum("bc,bi,bj->cij", g, x.value, y.value))
        if y.requires_grad:
            _accumulate(y, np.einsum("bc,bcj->bj", g, xw))

    return _result("bilinear", np.einsum("bcj,bj->bc", xw, y.value), (x, w, y), backward)


def gru_cell(x: Node, s: Node, w: Node, u: Node, uh: Node, b: Node) -> Node:
    """One GRU step on a batch.

    ``w`` is ``[d_in, 3S]`` and ``b`` is ``[3S]`` (update, reset, candidate
    blocks); ``u`` is ``[S, 2S]`` for the two gates and ``uh`` is ``[S, S]``
    for the candidate applied to ``r * s``.
    """
    xv = x.value
    sv = np.ascontiguousarray(s.value)
    S = sv.shape[1]
    ax = xv @ w.value + b.value
    ah = sv @ u.value
    z, r = _MODE["kernels"].gru_gates(ax, ah)
    rs = r * sv
    h, s_new = _MODE["kernels"].gru_candidate(ax, rs @ uh.value, z, sv)

    def backward(g):
        dah, dz_pre, ds = _MODE["kernels"].gru_backward_candidate(np.ascontiguousarray(g), z, h, sv)
        drs = dah @ uh.value.T
        dr_pre, ds_add = _MODE["kernels"].gru_backward_reset(drs, r, sv)
        ds += ds_add
        dax = np.concatenate([dz_pre, dr_pre, dah], axis=1)
        dzr = dax[:, :2 * S]
        ds += dzr @ u.value.T
        _accumulate(uh, rs.T @ dah)
        _accumulate(u, sv.T @ dzr)
        _accumulate(w, xv.T @ dax)
        _accumulate(b, dax.sum(axis=0))
        _accumulate(x, dax @ w.value.T)
        _accumulate(s, ds)

    return _result("gru_cell", s_new, (x, s, w, u, uh, b), backward)


def lstm_cell(x: Node, s: Node, c: Node, w: Node, u: Node, b: Node) -> tuple[Node, Node]:
    """One LSTM step; returns ``(hidden, cell)`` nodes.

    Gate blocks of ``w`` ``[d_in, 4S]``, ``u`` ``[S, 4S]`` and ``b`` ``[4S]``
    are ordered input, forget, output, candidate.
    """
    xv = x.value
    sv = s.value
    cv = np.ascontiguousarray(c.value)
    a = np.ascontiguousarray(xv @ w.value + sv @ u.value + b.value)
    gates, c_new, tanh_c, s_new = _MODE["kernels"].lstm_forward(a, cv)
    _check_finite(s_new, "lstm_cell")
    _check_finite(c_new, "lstm_cell")
    s_out, c_out = Node(s_new), Node(c_new)
    s_out.op = c_out.op = "lstm_cell"

    def backward(gs, gc):
        da, dc_prev = _MODE["kernels"].lstm_backward(
            np.ascontiguousarray(gs), np.ascontiguousarray(gc), gates, cv, tanh_c
        )
        _accumulate(w, xv.T @ da)
        _accumulate(u, sv.T @ da)
        _accumulate(b, da.sum(axis=0))
        _accumulate(x, da @ w.value.T)
        _accumulate(s, da @ u.value.T)
        _accumulate(c, dc_prev)

    _record("lstm_cell", (s_out, c_out), (x, s, c, w, u, b), backward)
    return s_out, c_out


def softmax(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a plain array (no graph)."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: Node, labels, class_weights=None) -> Node:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is ``[C]`` with an integer label or ``[B, C]`` with ``B``
    labels. With ``class_weights`` the mean is weighted and normalised by
    the total weight.
    """
    single = logits.ndim == 1
    z = logits.value[None] if single else logits.value
    if z.ndim != 2:
        raise DimensionError(f"softmax_cross_entropy: logits must be [C] or [B, C], got {logits.shape}")
    B, C = z.shape
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != B:
        raise DimensionError(f"softmax_cross_entropy: {B} rows but {y.shape[0]} labels")
    if ((y < 0) | (y >= C)).any():
        raise InputError(f"label out of range for {C} classes: {y.tolist()}")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    nll = log_norm - shifted[np.arange(B), y]
    if class_weights is None:
        wts = np.full(B, 1.0 / B)
    else:
        raw = np.asarray(class_weights, dtype=np.float64)[y]
        wts = raw / raw.sum()
    loss = np.asarray(np.dot(wts, nll))

    def backward(g):
        grad = np.exp(shifted - log_norm[:, None])
        grad[np.arange(B), y] -= 1.0
        grad *= (wts * g)[:, None]
        _accumulate(logits, grad[0] if single else grad)

    return _result("softmax_cross_entropy", loss, (logits,), backward)


# --------------------------------------------------------------------------
# backward pass and gradient checking
# --------------------------------------------------------------------------

def backward(loss: Node, tape: GraphTape) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` of every leaf on the tape.

    Intermediate gradients are reset at the start so that calling this
    twice adds exactly twice the gradient into the leaves.
    """
    if tape is None:
        raise UsageError("backward needs the tape that recorded the forward pass")
    if loss.value.size != 1:
        raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
    for outputs, _ in tape.records:
        for out in outputs:
            out.grad = None
    if not loss.requires_grad:
        return
    loss.grad = np.ones_like(loss.value)
    for outputs, fn in reversed(tape.records):
        if all(out.grad is None for out in outputs):
            continue
        fn(*(out.grad_or_zeros() for out in outputs))
    for outputs, _ in tape.records:
        for out in outputs:
            out.grad = None


def _scalar(value) -> float:
    v = value.value if isinstance(value, Node) else np.asarray(value)
    if v.size != 1:
        raise UsageError(f"finite_difference_check: function returned shape {v.shape}")
    x = float(v.reshape(()))
    if not np.isfinite(x):
        raise NumericError("finite_difference_check: function value is not finite")
    return x


def finite_difference_check(
    f: Callable[[], Node],
    params: Iterable[Node] | dict[str, Node],
    eps: float = 1e-5,
    per_param: bool = False,
    extended: bool = False,
):
    """Worst relative error between analytic and central-difference gradients.

    ``f`` rebuilds the scalar loss from the current parameter values each
    time it is called. Relative error per coordinate uses the denominator
    ``max(|analytic|, |numeric|, 1e-8)``. With ``per_param`` a dict of
    per-parameter maxima is returned instead (keys are dict keys or indices).

    ``extended`` evaluates the perturbed losses in long double through the
    pure-numpy kernels, which removes float64 round-off from the numeric
    side; the analytic gradient always comes from the normal float64 path.
    """
    if eps <= 0:
        raise UsageError("eps must be positive")
    named = dict(params) if isinstance(params, dict) else dict(enumerate(params))
    for p in named.values():
        p.grad = None
    with GraphTape() as tape:
        loss = f()
    _scalar(loss)
    backward(loss, tape)
    analytic = {k: p.grad_or_zeros().copy() for k, p in named.items()}

    originals = {k: p.value for k, p in named.items()}
    errors = {}
    try:
        if extended:
            for p in named.values():
                p.value = p.value.astype(np.longdouble)
        for key, p in named.items():
            v = p.value
            worst = 0.0
            for idx in np.ndindex(v.shape):
                orig = v[idx]
                v[idx] = orig + eps
                fp = _probe(f, extended)
                v[idx] = orig - eps
                fm = _probe(f, extended)
                v[idx] = orig
                num = float((fp - fm) / (2 * eps))
                ana = analytic[key][idx]
                err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
                worst = max(worst, err)
            errors[key] = worst
    finally:
        for key, p in named.items():
            p.value = originals[key]
    if per_param:
        return errors
    return max(errors.values(), default=0.0)


def _probe(f, extended: bool):
    if not extended:
        return _scalar(f())
    with extended_precision():
        out = f()
    v = out.value if isinstance(out, Node) else np.asarray(out)
    if not np.isfinite(v).all():
        raise NumericError("finite_difference_check: function value is not finite")
    return v.reshape(())
