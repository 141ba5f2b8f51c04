"""Tape-based reverse-mode differentiation over dense float64 arrays.

Every forward op appends one node to a :class:`Tape`.  Three reverse passes
read the same tape:

* :func:`backward` with ``BackwardMode.STANDARD`` gives exact gradients;
* :func:`backward` with ``BackwardMode.GUIDED`` masks negative signal at
  rectifier nodes (guided backpropagation);
* :func:`lrp_relevance` redistributes an output value with the epsilon rule.

Composite layers (LSTM cells, TextCNN blocks) live in :mod:`textshield.layers`
and are built from the primitives here only.
"""

from __future__ import annotations

import enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "BackwardMode",
    "GradCoreError",
    "Tape",
    "Tensor",
    "forward",
    "backward",
    "lrp_relevance",
    "finite_difference",
    "embedding",
    "affine",
    "conv1d",
    "max_pool_time",
    "relu",
    "sigmoid",
    "tanh",
    "add",
    "mul",
    "concat",
    "softmax",
    "cross_entropy",
    "slice_",
    "take",
    "total",
    "reshape",
]

DTYPE = np.float64


class BackwardMode(enum.Enum):
    STANDARD = "standard"
    GUIDED = "guided"


class GradCoreError(ValueError):
    """Raised for invalid shapes or misuse of a tape.

    ``op_kind`` names the failing operation and ``dims`` carries the
    offending dimensions when there are any.
    """

    def __init__(self, op_kind: str, message: str, dims=None):
        self.op_kind = op_kind
        self.dims = dims
        text = f"{op_kind}: {message}"
        if dims is not None:
            text += f" (dims={dims})"
        super().__init__(text)


class Tensor:
    """Handle to one node's output on a tape."""

    __slots__ = ("values", "grad", "index", "tape")

    def __init__(self, values: np.ndarray, index: int, tape: "Tape"):
        self.values = values
        self.grad: Optional[np.ndarray] = None
        self.index = index
        self.tape = tape

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"Tensor(index={self.index}, shape={self.values.shape})"


class Node:
    __slots__ = ("op", "parents", "attrs", "out", "saved", "needs_grad")

    def __init__(self, op, parents, attrs, out, saved, needs_grad):
        self.op = op
        self.parents = parents
        self.attrs = attrs
        self.out = out
        self.saved = saved
        self.needs_grad = needs_grad


class Tape:
    """Append-only record of a forward computation."""

    def __init__(self):
        self.nodes: List[Node] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, values, requires_grad: bool = True) -> Tensor:
        arr = np.array(values, dtype=DTYPE)
        self.nodes.append(Node("leaf", (), {}, arr, None, requires_grad))
        return Tensor(arr, len(self.nodes) - 1, self)

    def constant(self, values) -> Tensor:
        return self.leaf(values, requires_grad=False)

    def _record(self, op, parents, attrs, out, saved) -> Tensor:
        needs = any(self.nodes[p].needs_grad for p in parents)
        self.nodes.append(Node(op, parents, attrs, out, saved, needs))
        return Tensor(out, len(self.nodes) - 1, self)

    def replay(self) -> List[np.ndarray]:
        """Recompute every node from the recorded leaf values."""
        outs: List[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                outs.append(node.out.copy())
                continue
            vals = [outs[p] for p in node.parents]
            out, _ = _OPS[node.op].forward(vals, node.attrs)
            outs.append(out)
        return outs

    def leaves(self) -> List[int]:
        return [i for i, n in enumerate(self.nodes) if n.op == "leaf"]


# ---------------------------------------------------------------------------
# helpers


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == tuple(shape):
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _stabilize(z: np.ndarray, eps: float) -> np.ndarray:
    # sign(0) counts as positive so the denominator never vanishes
    return z + eps * np.where(z >= 0, 1.0, -1.0)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def _check_broadcast(op, *shapes):
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise GradCoreError(op, "operands do not broadcast", dims=shapes) from None


# ---------------------------------------------------------------------------
# primitive ops
#
# forward(vals, attrs) -> (out, saved)
# backward(node, g, vals, needs, mode) -> list of parent grads (None = skip)
# lrp(node, r, vals, eps) -> list of parent relevances (None = absorbed)


class _Op:
    name = ""

    @staticmethod
    def forward(vals, attrs):
        raise NotImplementedError

    @staticmethod
    def backward(node, g, vals, needs, mode):
        raise NotImplementedError

    @classmethod
    def lrp(cls, node, r, vals, eps):
        raise GradCoreError(cls.name, "no relevance rule for this op")


class _Embedding(_Op):
    name = "embedding"

    @staticmethod
    def forward(vals, attrs):
        (table,) = vals
        ids = attrs["ids"]
        if table.ndim != 2:
            raise GradCoreError("embedding", "table must be 2-D", dims=table.shape)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise GradCoreError(
                "embedding", "id out of range", dims=(int(ids.max()), table.shape[0])
            )
        return table[ids], None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        gt = np.zeros_like(vals[0])
        np.add.at(gt, node.attrs["ids"], g)
        return [gt]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        rt = np.zeros_like(vals[0])
        np.add.at(rt, node.attrs["ids"], r)
        return [rt]


class _Affine(_Op):
    name = "affine"

    @staticmethod
    def forward(vals, attrs):
        x, w = vals[0], vals[1]
        if w.ndim < 2 or x.shape[-1] != w.shape[-2]:
            raise GradCoreError("affine", "inner dimensions differ", dims=(x.shape, w.shape))
        out = x @ w
        if len(vals) == 3:
            b = vals[2]
            _check_broadcast("affine", out.shape, b.shape)
            out = out + b
        return out, None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        x, w = vals[0], vals[1]
        grads = [None] * len(vals)
        if needs[0]:
            grads[0] = _unbroadcast(g @ _swap(w), x.shape)
        if needs[1]:
            if w.ndim == 2:
                grads[1] = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                grads[1] = _unbroadcast(_swap(x) @ g, w.shape)
        if len(vals) == 3 and needs[2]:
            grads[2] = _unbroadcast(g, vals[2].shape)
        return grads

    @classmethod
    def lrp(cls, node, r, vals, eps):
        x, w = vals[0], vals[1]
        s = r / _stabilize(node.out, eps)
        rx = x * _unbroadcast(s @ _swap(w), x.shape)
        return [rx] + [None] * (len(vals) - 1)


class _Conv1d(_Op):
    """Valid 1-D convolution over the time axis: (B, L, k) * (w, k, F) -> (B, L-w+1, F)."""

    name = "conv1d"

    @staticmethod
    def forward(vals, attrs):
        x, w, b = vals
        if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
            raise GradCoreError("conv1d", "expected x (B,L,k) and W (w,k,F)", dims=(x.shape, w.shape))
        width = w.shape[0]
        if x.shape[1] < width:
            raise GradCoreError("conv1d", "sequence shorter than filter", dims=(x.shape[1], width))
        if b.shape != (w.shape[2],):
            raise GradCoreError("conv1d", "bias width differs from filter count", dims=(b.shape, w.shape[2]))
        bsz, length, k = x.shape
        steps = length - width + 1
        cols = sliding_window_view(x, width, axis=1)  # (B, T, k, w)
        cols = np.ascontiguousarray(cols.transpose(0, 1, 3, 2)).reshape(bsz, steps, width * k)
        out = cols @ w.reshape(width * k, -1) + b
        return out, cols

    @staticmethod
    def _fold(gcols, shape, width):
        bsz, length, k = shape
        steps = length - width + 1
        gcols = gcols.reshape(bsz, steps, width, k)
        gx = np.zeros(shape, dtype=DTYPE)
        for o in range(width):
            gx[:, o : o + steps] += gcols[:, :, o]
        return gx

    @classmethod
    def backward(cls, node, g, vals, needs, mode):
        x, w, b = vals
        cols = node.saved
        width = w.shape[0]
        wr = w.reshape(-1, w.shape[2])
        grads = [None, None, None]
        if needs[0]:
            grads[0] = cls._fold(g @ wr.T, x.shape, width)
        if needs[1]:
            grads[1] = (cols.reshape(-1, cols.shape[-1]).T @ g.reshape(-1, g.shape[-1])).reshape(w.shape)
        if needs[2]:
            grads[2] = g.sum(axis=(0, 1))
        return grads

    @classmethod
    def lrp(cls, node, r, vals, eps):
        x, w, _ = vals
        wr = w.reshape(-1, w.shape[2])
        s = r / _stabilize(node.out, eps)
        rcols = node.saved * (s @ wr.T)
        return [cls._fold(rcols, x.shape, w.shape[0]), None, None]


class _MaxPoolTime(_Op):
    """Max over axis 1; ties route to the first maximal index."""

    name = "max_pool_time"

    @staticmethod
    def forward(vals, attrs):
        (x,) = vals
        if x.ndim != 3:
            raise GradCoreError("max_pool_time", "expected (B, T, F)", dims=x.shape)
        idx = np.argmax(x, axis=1)
        out = np.take_along_axis(x, idx[:, None, :], axis=1)[:, 0, :]
        return out, idx

    @staticmethod
    def _route(node, g, shape):
        gx = np.zeros(shape, dtype=DTYPE)
        np.put_along_axis(gx, node.saved[:, None, :], g[:, None, :], axis=1)
        return gx

    @classmethod
    def backward(cls, node, g, vals, needs, mode):
        return [cls._route(node, g, vals[0].shape)]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [cls._route(node, r, vals[0].shape)]


class _Elementwise(_Op):
    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [r]


class _Relu(_Elementwise):
    name = "relu"

    @staticmethod
    def forward(vals, attrs):
        return np.maximum(vals[0], 0.0), None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        mask = vals[0] > 0
        if mode is BackwardMode.GUIDED:
            mask = mask & (g > 0)
        return [np.where(mask, g, 0.0)]


class _Sigmoid(_Elementwise):
    name = "sigmoid"

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out, None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        y = node.out
        return [g * y * (1.0 - y)]


class _Tanh(_Elementwise):
    name = "tanh"

    @staticmethod
    def forward(vals, attrs):
        return np.tanh(vals[0]), None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        y = node.out
        return [g * (1.0 - y * y)]


class _Add(_Op):
    name = "add"

    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _check_broadcast("add", a.shape, b.shape)
        return a + b, None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        a, b = vals
        return [
            _unbroadcast(g, a.shape) if needs[0] else None,
            _unbroadcast(g, b.shape) if needs[1] else None,
        ]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        a, b = vals
        s = r / _stabilize(node.out, eps)
        return [_unbroadcast(a * s, a.shape), _unbroadcast(b * s, b.shape)]


class _Mul(_Op):
    """Elementwise product.

    For relevance, the operand at ``attrs['signal']`` (default 0) receives
    all of it and the other operand acts as a gate.
    """

    name = "mul"

    @staticmethod
    def forward(vals, attrs):
        a, b = vals
        _check_broadcast("mul", a.shape, b.shape)
        return a * b, None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        a, b = vals
        return [
            _unbroadcast(g * b, a.shape) if needs[0] else None,
            _unbroadcast(g * a, b.shape) if needs[1] else None,
        ]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        signal = node.attrs.get("signal", 0)
        out = [None, None]
        out[signal] = _unbroadcast(r, vals[signal].shape)
        return out


class _Concat(_Op):
    name = "concat"

    @staticmethod
    def forward(vals, attrs):
        axis = attrs["axis"]
        try:
            return np.concatenate(vals, axis=axis), None
        except ValueError:
            raise GradCoreError("concat", "shapes differ off the concat axis", dims=[v.shape for v in vals]) from None

    @staticmethod
    def _split(node, g, vals):
        axis = node.attrs["axis"]
        cuts = np.cumsum([v.shape[axis] for v in vals])[:-1]
        return np.split(g, cuts, axis=axis)

    @classmethod
    def backward(cls, node, g, vals, needs, mode):
        return cls._split(node, g, vals)

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return cls._split(node, r, vals)


class _Softmax(_Op):
    name = "softmax"

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        e = np.exp(x - x.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True), None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        y = node.out
        return [y * (g - (g * y).sum(axis=-1, keepdims=True))]


class _CrossEntropy(_Op):
    """Mean softmax cross-entropy of (B, C) logits against integer labels."""

    name = "cross_entropy"

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        labels = attrs["labels"]
        if x.ndim != 2 or labels.shape != (x.shape[0],):
            raise GradCoreError("cross_entropy", "expected (B, C) logits and B labels", dims=(x.shape, labels.shape))
        shifted = x - x.max(axis=1, keepdims=True)
        logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        logp = shifted - logz
        loss = -logp[np.arange(x.shape[0]), labels].mean()
        return np.array(loss), np.exp(logp)

    @staticmethod
    def backward(node, g, vals, needs, mode):
        probs = node.saved.copy()
        labels = node.attrs["labels"]
        probs[np.arange(len(labels)), labels] -= 1.0
        return [probs * (g / len(labels))]


class _Slice(_Op):
    name = "slice"

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
        if not (0 <= start < stop <= x.shape[axis]):
            raise GradCoreError("slice", "bounds outside axis", dims=(start, stop, x.shape[axis]))
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, stop)
        return x[tuple(idx)], None

    @staticmethod
    def _scatter(node, g, shape):
        out = np.zeros(shape, dtype=DTYPE)
        idx = [slice(None)] * len(shape)
        idx[node.attrs["axis"]] = slice(node.attrs["start"], node.attrs["stop"])
        out[tuple(idx)] = g
        return out

    @classmethod
    def backward(cls, node, g, vals, needs, mode):
        return [cls._scatter(node, g, vals[0].shape)]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [cls._scatter(node, r, vals[0].shape)]


class _Take(_Op):
    """Select one index along an axis, dropping that axis."""

    name = "take"

    @staticmethod
    def forward(vals, attrs):
        x = vals[0]
        axis, index = attrs["axis"], attrs["index"]
        if not -x.shape[axis] <= index < x.shape[axis]:
            raise GradCoreError("take", "index outside axis", dims=(index, x.shape[axis]))
        return np.take(x, index, axis=axis), None

    @staticmethod
    def _scatter(node, g, shape):
        idx = [slice(None)] * len(shape)
        idx[node.attrs["axis"]] = node.attrs["index"]
        return _Scatter(tuple(shape), tuple(idx), g)

    @classmethod
    def backward(cls, node, g, vals, needs, mode):
        return [cls._scatter(node, g, vals[0].shape)]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [cls._scatter(node, r, vals[0].shape)]


class _Total(_Op):
    name = "sum"

    @staticmethod
    def forward(vals, attrs):
        return np.array(vals[0].sum()), None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        return [np.full(vals[0].shape, float(g), dtype=DTYPE)]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [vals[0] * (float(r) / float(_stabilize(node.out, eps)))]


class _Reshape(_Op):
    name = "reshape"

    @staticmethod
    def forward(vals, attrs):
        try:
            return vals[0].reshape(attrs["shape"]), None
        except ValueError:
            raise GradCoreError("reshape", "size mismatch", dims=(vals[0].shape, attrs["shape"])) from None

    @staticmethod
    def backward(node, g, vals, needs, mode):
        return [g.reshape(vals[0].shape)]

    @classmethod
    def lrp(cls, node, r, vals, eps):
        return [r.reshape(vals[0].shape)]


class _LSTM(_Op):
    """Whole-sequence LSTM returning the final hidden state.

    Same arithmetic as the step-by-step composite in ``layers``, but one
    tape node for the entire recurrence with a hand-written
    back-propagation-through-time.  Gate order is (input, forget, output,
    candidate).  There is no relevance rule: use the composite for LRP.
    """

    name = "lstm"

    @staticmethod
    def forward(vals, attrs):
        xproj, w = vals
        hidden = attrs["hidden"]
        if xproj.shape[-1] != 4 * hidden or w.shape[-2:] != (hidden, 4 * hidden):
            raise GradCoreError("lstm", "gate width must be 4*hidden", dims=(xproj.shape, w.shape))
        mask = attrs.get("mask")
        steps = xproj.shape[-2]
        state = np.broadcast_shapes(xproj.shape[:-2] + (hidden,), w.shape[:-2] + (1, hidden))
        h = np.zeros(state, dtype=DTYPE)
        c = np.zeros(state, dtype=DTYPE)
        order = range(steps - 1, -1, -1) if attrs.get("reverse") else range(steps)
        saved = []
        for t in order:
            a = xproj[..., t, :] + h @ w
            sig = 1.0 / (1.0 + np.exp(-a[..., : 3 * hidden]))
            i, f, o = sig[..., :hidden], sig[..., hidden : 2 * hidden], sig[..., 2 * hidden :]
            g = np.tanh(a[..., 3 * hidden :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            h_new = o * tc
            m = None
            if mask is not None:
                m = mask[..., t][..., None].astype(DTYPE)
                c_new = m * c_new + (1.0 - m) * c
                h_new = m * h_new + (1.0 - m) * h
            saved.append((t, h, c, i, f, o, g, tc, m))
            h, c = h_new, c_new
        return h, saved

    @staticmethod
    def backward(node, g_out, vals, needs, mode):
        xproj, w = vals
        hidden = node.attrs["hidden"]
        dx = np.zeros_like(xproj) if needs[0] else None
        dw = np.zeros_like(w) if needs[1] else None
        dh = g_out
        dc = np.zeros_like(g_out)
        w_t = _swap(w)
        for t, h_prev, c_prev, i, f, o, g, tc, m in reversed(node.saved):
            if m is not None:
                dh_carry, dc_carry = dh * (1.0 - m), dc * (1.0 - m)
                dh, dc = dh * m, dc * m
            do = dh * tc
            dct = dc + dh * o * (1.0 - tc * tc)
            da = np.concatenate(
                [
                    dct * g * i * (1.0 - i),
                    dct * c_prev * f * (1.0 - f),
                    do * o * (1.0 - o),
                    dct * i * (1.0 - g * g),
                ],
                axis=-1,
            )
            if dx is not None:
                dx[..., t, :] = _unbroadcast(da, xproj.shape[:-2] + (4 * hidden,))
            if dw is not None:
                if w.ndim == 2:
                    dw += h_prev.reshape(-1, hidden).T @ da.reshape(-1, 4 * hidden)
                else:
                    dw += _unbroadcast(_swap(h_prev) @ da, w.shape)
            dh = da @ w_t
            dc = dct * f
            if m is not None:
                dh = dh + dh_carry
                dc = dc + dc_carry
        return [dx, dw]


_OPS: Dict[str, type] = {
    op.name: op
    for op in (
        _Embedding,
        _Affine,
        _Conv1d,
        _MaxPoolTime,
        _Relu,
        _Sigmoid,
        _Tanh,
        _Add,
        _Mul,
        _Concat,
        _Softmax,
        _CrossEntropy,
        _Slice,
        _Take,
        _Total,
        _Reshape,
        _LSTM,
    )
}
_ARITY = {"embedding": 1, "conv1d": 3, "add": 2, "mul": 2, "lstm": 2}


def forward(op_kind: str, inputs: Sequence[Tensor], tape: Tape, **attrs) -> Tensor:
    """Evaluate ``op_kind`` on ``inputs`` and record it on ``tape``."""
    if op_kind not in _OPS:
        raise GradCoreError(op_kind, "unknown op")
    arity = _ARITY.get(op_kind)
    if arity is not None and len(inputs) != arity:
        raise GradCoreError(op_kind, f"expected {arity} inputs", dims=len(inputs))
    if op_kind == "affine" and len(inputs) not in (2, 3):
        raise GradCoreError(op_kind, "expected (x, W) or (x, W, b)", dims=len(inputs))
    for t in inputs:
        if t.tape is not tape:
            raise GradCoreError(op_kind, "input recorded on a different tape")
    vals = [t.values for t in inputs]
    out, saved = _OPS[op_kind].forward(vals, attrs)
    return tape._record(op_kind, tuple(t.index for t in inputs), attrs, out, saved)


def _validate_output(tape: Tape, output_index: int, op: str) -> Node:
    if not tape.nodes:
        raise GradCoreError(op, "tape is empty")
    if not 0 <= output_index < len(tape.nodes):
        raise GradCoreError(op, "output index not on tape", dims=(output_index, len(tape.nodes)))
    node = tape.nodes[output_index]
    if node.out.size != 1:
        raise GradCoreError(op, "output must be scalar", dims=node.out.shape)
    return node


class _Scatter:
    """A gradient that is zero except on one slice.

    Recurrent graphs take one time step at a time from a long sequence;
    writing each step's gradient into a shared buffer avoids materialising
    a full-size zero array per step.
    """

    __slots__ = ("shape", "where", "values")

    def __init__(self, shape, where, values):
        self.shape = shape
        self.where = where
        self.values = values

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape, dtype=DTYPE)
        out[self.where] = self.values
        return out


def _accumulate(store, key, value, owned):
    """Add ``value`` into ``store[key]``; arrays listed in ``owned`` may be updated in place."""
    prev = store.get(key)
    if isinstance(value, _Scatter):
        if prev is None:
            store[key] = value.dense()
        else:
            if key not in owned:
                prev = prev.copy()
            prev[value.where] += value.values
            store[key] = prev
        owned.add(key)
    elif prev is None:
        store[key] = value
        owned.discard(key)
    else:
        store[key] = prev + value
        owned.add(key)


def backward(tape: Tape, output_index: int, mode: BackwardMode = BackwardMode.STANDARD) -> Dict[int, np.ndarray]:
    """Gradients of a scalar node with respect to every grad-requiring leaf.

    Returns a dict from leaf index to gradient array.  In guided mode the
    signal crossing each rectifier is zeroed where either the rectifier input
    or the incoming gradient is non-positive.
    """
    _validate_output(tape, output_index, "backward")
    nodes = tape.nodes
    grads: Dict[int, np.ndarray] = {output_index: np.ones_like(nodes[output_index].out)}
    owned: set = set()
    result: Dict[int, np.ndarray] = {}
    for i in range(output_index, -1, -1):
        g = grads.pop(i, None)
        if g is None:
            continue
        node = nodes[i]
        if node.op == "leaf":
            if node.needs_grad:
                result[i] = g
            continue
        vals = [nodes[p].out for p in node.parents]
        needs = [nodes[p].needs_grad for p in node.parents]
        pgrads = _OPS[node.op].backward(node, g, vals, needs, mode)
        for p, pg, need in zip(node.parents, pgrads, needs):
            if need and pg is not None:
                _accumulate(grads, p, pg, owned)
    return result


def lrp_relevance(tape: Tape, output_index: int, epsilon: float = 1e-6) -> Dict[int, np.ndarray]:
    """Epsilon-rule relevance of a scalar node, redistributed onto leaves.

    The starting relevance is the node's own value.  Affine and convolution
    nodes share relevance in proportion to ``z_ij / (z_j + eps*sign(z_j))``;
    monotone activations pass it through; max-pool routes it to the winner;
    additions split it proportionally; products give it to their signal
    operand.  Relevance assigned to biases is absorbed.
    """
    if not epsilon > 0:
        raise GradCoreError("lrp", "epsilon must be positive", dims=epsilon)
    node = _validate_output(tape, output_index, "lrp")
    nodes = tape.nodes
    rel: Dict[int, np.ndarray] = {output_index: node.out.copy()}
    owned: set = set()
    result: Dict[int, np.ndarray] = {}
    for i in range(output_index, -1, -1):
        r = rel.pop(i, None)
        if r is None:
            continue
        node = nodes[i]
        if node.op == "leaf":
            result[i] = r
            continue
        vals = [nodes[p].out for p in node.parents]
        for p, pr in zip(node.parents, _OPS[node.op].lrp(node, r, vals, epsilon)):
            if pr is not None:
                _accumulate(rel, p, pr, owned)
    return result


def finite_difference(
    fn: Callable[[np.ndarray], float],
    point: np.ndarray,
    h: float = 1e-5,
    indices: Optional[Sequence[int]] = None,
) -> np.ndarray:
    """Central-difference gradient of a scalar function.

    ``indices`` restricts the estimate to some flat components (the rest are
    returned as NaN).
    """
    if not h > 0:
        raise GradCoreError("finite_difference", "h must be positive", dims=h)
    x = np.array(point, dtype=DTYPE)
    flat = x.reshape(-1)
    grad = np.full(flat.shape, np.nan) if indices is not None else np.empty(flat.shape)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        orig = flat[i]
        flat[i] = orig + h
        fp = float(fn(x))
        flat[i] = orig - h
        fm = float(fn(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise GradCoreError("finite_difference", "function value is not finite", dims=i)
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# convenience wrappers


def embedding(table: Tensor, ids) -> Tensor:
    return forward("embedding", [table], table.tape, ids=np.asarray(ids, dtype=np.int64))


def affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    inputs = [x, w] if b is None else [x, w, b]
    return forward("affine", inputs, x.tape)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return forward("conv1d", [x, w, b], x.tape)


def max_pool_time(x: Tensor) -> Tensor:
    return forward("max_pool_time", [x], x.tape)


def relu(x: Tensor) -> Tensor:
    return forward("relu", [x], x.tape)


def sigmoid(x: Tensor) -> Tensor:
    return forward("sigmoid", [x], x.tape)


def tanh(x: Tensor) -> Tensor:
    return forward("tanh", [x], x.tape)


def add(a: Tensor, b: Tensor) -> Tensor:
    return forward("add", [a, b], a.tape)


def mul(a: Tensor, b: Tensor, signal: int = 0) -> Tensor:
    return forward("mul", [a, b], a.tape, signal=signal)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    return forward("concat", list(xs), xs[0].tape, axis=axis)


def softmax(x: Tensor) -> Tensor:
    return forward("softmax", [x], x.tape)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    return forward("cross_entropy", [logits], logits.tape, labels=np.asarray(labels, dtype=np.int64))


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    return forward("slice", [x], x.tape, axis=axis, start=start, stop=stop)


def take(x: Tensor, index: int, axis: int = -1) -> Tensor:
    return forward("take", [x], x.tape, axis=axis, index=index)


def total(x: Tensor) -> Tensor:
    return forward("sum", [x], x.tape)


def reshape(x: Tensor, shape) -> Tensor:
    return forward("reshape", [x], x.tape, shape=tuple(shape))


def lstm(xproj: Tensor, w_h: Tensor, hidden: int, mask: Optional[np.ndarray] = None, reverse: bool = False) -> Tensor:
    return forward("lstm", [xproj, w_h], xproj.tape, hidden=hidden, mask=mask, reverse=reverse)
