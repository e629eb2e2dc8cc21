"""Reverse-mode automatic differentiation on dense float64 arrays.

Define-by-run tape engine: every operation validates its inputs, computes
the forward value with numpy, and appends one entry to a ``Tape``. The
returned ``Tensor`` is a handle to the recorded node. ``backward`` walks
the tape in reverse topological order (which is simply reverse recording
order) and accumulates adjoints into ``Parameter.grad``.

All values are float64. Reductions run in ascending row order so repeated
evaluations are bit-identical.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "Parameter",
    "ShapeMismatchError",
    "IndexRangeError",
    "add",
    "sub",
    "neg",
    "mul_elementwise",
    "scale",
    "scale_by",
    "row_scale",
    "add_bias",
    "matmul",
    "gather_rows",
    "segment_sum",
    "concat_cols",
    "reshape",
    "sum_all",
    "sqrt",
    "unary",
    "l2_norm",
    "rows_l2_norm",
    "backward",
    "grad_check",
    "ACTIVATION_KINDS",
    "activation_value",
    "activation_derivative",
]


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible; names both shapes."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class IndexRangeError(IndexError):
    """Raised when a gather index or segment id falls outside [0, n)."""

    def __init__(self, op: str, bad: int, n: int):
        self.op = op
        self.bad = bad
        self.n = n
        super().__init__(f"{op}: index {bad} out of range for size {n}")


def _as_f64(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    return arr


class Parameter:
    """Learnable array plus an accumulated gradient of identical shape.

    Gradients accumulate additively across backward calls; callers must
    ``zero_grad`` between optimizer steps.
    """

    __slots__ = ("name", "value", "grad")

    def __init__(self, name: str, value):
        self.name = name
        self.value = _as_f64(value).copy()
        self.grad = np.zeros_like(self.value)

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tensor:
    """Handle to one recorded node; owns the node's forward value."""

    __slots__ = ("tape", "nid", "data")

    def __init__(self, tape: "Tape", nid: int, data: np.ndarray):
        self.tape = tape
        self.nid = nid
        self.data = data

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeMismatchError("item", self.data.shape)
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_elementwise(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(nid={self.nid}, shape={self.data.shape})"


class _Entry:
    __slots__ = ("kind", "inputs", "out", "ctx")

    def __init__(self, kind, inputs, out, ctx):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.ctx = ctx


class Tape:
    """Ordered record of operations for one forward evaluation.

    Entries are appended in execution order, so every input node id
    precedes its consumers. Leaves are constants or parameter bindings;
    parameter leaves receive gradient accumulation during backward.
    """

    def __init__(self):
        self._entries: list[_Entry] = []
        self._values: list[np.ndarray] = []
        self._param_of: dict[int, Parameter] = {}

    def _record(self, kind, inputs, value, ctx=None) -> Tensor:
        nid = len(self._values)
        self._values.append(value)
        self._entries.append(_Entry(kind, inputs, nid, ctx))
        return Tensor(self, nid, value)

    def constant(self, data) -> Tensor:
        """Record a non-learnable leaf (no gradient flows into it)."""
        return self._record("leaf", (), _as_f64(data))

    def leaf(self, p: Parameter) -> Tensor:
        """Bind a Parameter as a leaf; backward accumulates into p.grad."""
        t = self._record("leaf", (), p.value)
        self._param_of[t.nid] = p
        return t

    @property
    def n_nodes(self) -> int:
        return len(self._values)

    def replay(self) -> float:
        """Recompute every non-leaf value from leaves; return max abs deviation.

        Bit-exact forward kernels make this 0.0; the check guards against
        entries whose saved context drifts from their recorded output.
        """
        values: list[np.ndarray] = [None] * len(self._values)
        worst = 0.0
        for e in self._entries:
            if e.kind == "leaf":
                values[e.out] = self._values[e.out]
                continue
            ins = [values[i] for i in e.inputs]
            recomputed = _FORWARD[e.kind](e.ctx, *ins)
            values[e.out] = recomputed
            diff = np.max(np.abs(recomputed - self._values[e.out])) if recomputed.size else 0.0
            worst = max(worst, float(diff))
        return worst


def _same_tape(op: str, *tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError(f"{op}: operands recorded on different tapes")
    return tape


# ---------------------------------------------------------------------------
# activation kernels (stable for |x| up to ~700)

def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softplus(x):
    # max(x,0) + log1p(exp(-|x|)) never exponentiates a positive argument
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def _silu(x):
    return x * _sigmoid(x)


def _silu_d(x):
    s = _sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def _mish(x):
    return x * np.tanh(_softplus(x))


def _mish_d(x):
    t = np.tanh(_softplus(x))
    return t + x * (1.0 - t * t) * _sigmoid(x)


_LN2 = float(np.log(2.0))


def _shifted_softplus(x):
    return _softplus(x) - _LN2


def _bent_identity(x):
    # x*x + 1 cannot overflow on the documented |x| <= 700 domain
    if np.ndim(x) == 0:
        return (np.sqrt(x * x + 1.0) - 1.0) / 2.0 + x
    h = x * x
    h += 1.0
    np.sqrt(h, out=h)
    h -= 1.0
    h *= 0.5
    h += x
    return h


def _bent_identity_d(x):
    if np.ndim(x) == 0:
        return x / (2.0 * np.sqrt(x * x + 1.0)) + 1.0
    h = x * x
    h += 1.0
    np.sqrt(h, out=h)
    h *= 2.0
    np.divide(x, h, out=h)
    h += 1.0
    return h


_ACTIVATIONS = {
    "silu": (_silu, _silu_d),
    "mish": (_mish, _mish_d),
    "shifted_softplus": (_shifted_softplus, _sigmoid),
    "bent_identity": (_bent_identity, _bent_identity_d),
}

ACTIVATION_KINDS = tuple(_ACTIVATIONS)


def activation_value(kind: str, x):
    """Elementwise activation applied to a plain array or scalar."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}; known: {ACTIVATION_KINDS}")
    out = _ACTIVATIONS[kind][0](np.asarray(x, dtype=np.float64))
    return out


def activation_derivative(kind: str, x):
    """Analytic derivative of an activation at x."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}; known: {ACTIVATION_KINDS}")
    return _ACTIVATIONS[kind][1](np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# forward kernels keyed by op kind (used both at record time and by replay)

def _segment_sum_kernel(a: np.ndarray, seg: np.ndarray, n: int) -> np.ndarray:
    """Sum rows of a into n buckets; rows with equal id add in ascending row order."""
    out = np.zeros((n, a.shape[1]), dtype=np.float64)
    if a.shape[0] == 0:
        return out
    if np.all(seg[1:] >= seg[:-1]):
        starts = np.concatenate(([0], np.flatnonzero(seg[1:] != seg[:-1]) + 1))
        out[seg[starts]] = np.add.reduceat(a, starts, axis=0)
        return out
    order = np.argsort(seg, kind="stable")
    sorted_seg = seg[order]
    starts = np.concatenate(([0], np.flatnonzero(sorted_seg[1:] != sorted_seg[:-1]) + 1))
    out[sorted_seg[starts]] = np.add.reduceat(a[order], starts, axis=0)
    return out


_FORWARD = {
    "add": lambda ctx, a, b: a + b,
    "sub": lambda ctx, a, b: a - b,
    "neg": lambda ctx, a: -a,
    "mul": lambda ctx, a, b: a * b,
    "scale": lambda ctx, a: a * ctx,
    "scale_by": lambda ctx, a, s: a * s.reshape(()),
    "row_scale": lambda ctx, a, s: a * s.reshape(-1, 1),
    "add_bias": lambda ctx, a, b: a + b[None, :],
    "matmul": lambda ctx, a, b: a @ b,
    "gather_rows": lambda ctx, a: a[ctx],
    "segment_sum": lambda ctx, a: _segment_sum_kernel(a, ctx[0], ctx[1]),
    "concat_cols": lambda ctx, *ins: np.concatenate(ins, axis=1),
    "reshape": lambda ctx, a: a.reshape(ctx),
    "sum_all": lambda ctx, a: np.asarray(a.sum()),
    "sqrt": lambda ctx, a: np.sqrt(a),
    "unary": lambda ctx, a: _ACTIVATIONS[ctx][0](a),
    "l2_norm": lambda ctx, a: np.asarray(np.sqrt(np.sum(a * a))),
    "rows_l2_norm": lambda ctx, a: np.sqrt(np.sum(a * a, axis=1)),
}


# ---------------------------------------------------------------------------
# recorded operations

def add(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("add", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("add", a.shape, b.shape)
    return tape._record("add", (a.nid, b.nid), a.data + b.data)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("sub", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("sub", a.shape, b.shape)
    return tape._record("sub", (a.nid, b.nid), a.data - b.data)


def neg(a: Tensor) -> Tensor:
    return a.tape._record("neg", (a.nid,), -a.data)


def mul_elementwise(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("mul_elementwise", a, b)
    if a.shape != b.shape:
        raise ShapeMismatchError("mul_elementwise", a.shape, b.shape)
    return tape._record("mul", (a.nid, b.nid), a.data * b.data)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return a.tape._record("scale", (a.nid,), a.data * c, ctx=c)


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply a whole tensor by a scalar node (learnable scale)."""
    tape = _same_tape("scale_by", a, s)
    if s.data.size != 1:
        raise ShapeMismatchError("scale_by(scalar)", s.shape)
    return tape._record("scale_by", (a.nid, s.nid), a.data * s.data.reshape(()))


def row_scale(a: Tensor, s: Tensor) -> Tensor:
    """Scale each row of a [m,k] tensor by the matching entry of s [m] or [m,1]."""
    tape = _same_tape("row_scale", a, s)
    if a.data.ndim != 2 or s.data.reshape(-1).shape[0] != a.shape[0]:
        raise ShapeMismatchError("row_scale", a.shape, s.shape)
    return tape._record("row_scale", (a.nid, s.nid), a.data * s.data.reshape(-1, 1))


def add_bias(a: Tensor, b: Tensor) -> Tensor:
    """Add a length-k bias row to every row of a [m,k] tensor."""
    tape = _same_tape("add_bias", a, b)
    if a.data.ndim != 2 or b.data.ndim != 1 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("add_bias", a.shape, b.shape)
    return tape._record("add_bias", (a.nid, b.nid), a.data + b.data[None, :])


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _same_tape("matmul", a, b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    return tape._record("matmul", (a.nid, b.nid), a.data @ b.data)


def gather_rows(a: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)
    n = a.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        bad = int(idx[(idx < 0) | (idx >= n)][0])
        raise IndexRangeError("gather_rows", bad, n)
    return a.tape._record("gather_rows", (a.nid,), a.data[idx], ctx=idx)


def segment_sum(a: Tensor, seg, n_segments: int) -> Tensor:
    """Sum rows sharing a segment id into an [n_segments, d] tensor.

    Deterministic: rows with equal id are added in ascending row order.
    The adjoint is a gather by segment id.
    """
    seg = np.asarray(seg, dtype=np.int64)
    if a.data.ndim != 2 or seg.shape != (a.shape[0],):
        raise ShapeMismatchError("segment_sum", a.shape, seg.shape)
    if seg.size and (seg.min() < 0 or seg.max() >= n_segments):
        bad = int(seg[(seg < 0) | (seg >= n_segments)][0])
        raise IndexRangeError("segment_sum", bad, n_segments)
    return a.tape._record(
        "segment_sum", (a.nid,), _segment_sum_kernel(a.data, seg, n_segments), ctx=(seg, n_segments)
    )


def concat_cols(tensors: list[Tensor]) -> Tensor:
    tape = _same_tape("concat_cols", *tensors)
    rows = tensors[0].shape[0]
    for t in tensors:
        if t.data.ndim != 2 or t.shape[0] != rows:
            raise ShapeMismatchError("concat_cols", *(u.shape for u in tensors))
    widths = [t.shape[1] for t in tensors]
    value = np.concatenate([t.data for t in tensors], axis=1)
    return tape._record("concat_cols", tuple(t.nid for t in tensors), value, ctx=widths)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.data.size:
        raise ShapeMismatchError("reshape", a.shape, shape)
    return a.tape._record("reshape", (a.nid,), a.data.reshape(shape), ctx=shape)


def sum_all(a: Tensor) -> Tensor:
    return a.tape._record("sum_all", (a.nid,), np.asarray(a.data.sum()))


def sqrt(a: Tensor) -> Tensor:
    """Elementwise square root; domain x >= 0, subgradient 0 taken at 0."""
    if np.any(a.data < 0):
        raise ValueError("sqrt: negative input outside documented domain")
    return a.tape._record("sqrt", (a.nid,), np.sqrt(a.data))


def unary(kind: str, a: Tensor) -> Tensor:
    """Elementwise activation with its analytic derivative recorded."""
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation kind {kind!r}; known: {ACTIVATION_KINDS}")
    return a.tape._record("unary", (a.nid,), _ACTIVATIONS[kind][0](a.data), ctx=kind)


def l2_norm(a: Tensor) -> Tensor:
    """Euclidean norm of a 1-D tensor; adjoint at the origin is zero."""
    if a.data.ndim != 1:
        raise ShapeMismatchError("l2_norm(1-D)", a.shape)
    return a.tape._record("l2_norm", (a.nid,), np.asarray(np.sqrt(np.sum(a.data * a.data))))


def rows_l2_norm(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of an [m,k] tensor; zero rows get zero adjoint."""
    if a.data.ndim != 2:
        raise ShapeMismatchError("rows_l2_norm(2-D)", a.shape)
    return a.tape._record("rows_l2_norm", (a.nid,), np.sqrt(np.sum(a.data * a.data, axis=1)))


# ---------------------------------------------------------------------------
# backward

def _vjp(entry: _Entry, values, g):
    """Adjoints of one entry's inputs given the output adjoint g."""
    kind = entry.kind
    if kind == "add":
        return (g, g)
    if kind == "sub":
        return (g, -g)
    if kind == "neg":
        return (-g,)
    if kind == "mul":
        a, b = (values[i] for i in entry.inputs)
        return (g * b, g * a)
    if kind == "scale":
        return (g * entry.ctx,)
    if kind == "scale_by":
        a, s = (values[i] for i in entry.inputs)
        return (g * s.reshape(()), np.asarray((g * a).sum()).reshape(s.shape))
    if kind == "row_scale":
        a, s = (values[i] for i in entry.inputs)
        return (g * s.reshape(-1, 1), (g * a).sum(axis=1).reshape(s.shape))
    if kind == "add_bias":
        return (g, g.sum(axis=0))
    if kind == "matmul":
        a, b = (values[i] for i in entry.inputs)
        return (g @ b.T, a.T @ g)
    if kind == "gather_rows":
        a = values[entry.inputs[0]]
        idx = entry.ctx
        return (_segment_sum_kernel(g.reshape(len(idx), -1), idx, a.shape[0]).reshape(a.shape),)
    if kind == "segment_sum":
        seg, _ = entry.ctx
        return (g[seg],)
    if kind == "concat_cols":
        outs = []
        at = 0
        for w in entry.ctx:
            outs.append(g[:, at : at + w])
            at += w
        return tuple(outs)
    if kind == "reshape":
        a = values[entry.inputs[0]]
        return (g.reshape(a.shape),)
    if kind == "sum_all":
        a = values[entry.inputs[0]]
        return (np.broadcast_to(g, a.shape).copy() if a.shape else g,)
    if kind == "sqrt":
        out = np.sqrt(values[entry.inputs[0]])
        d = np.where(out > 0.0, 0.5 / np.where(out > 0.0, out, 1.0), 0.0)
        return (g * d,)
    if kind == "unary":
        a = values[entry.inputs[0]]
        if entry.ctx == "bent_identity" and a.ndim > 0:
            # recover sqrt(x^2+1) from the stored output: h = 2 (out - x) + 1
            h = values[entry.out] - a
            h *= 4.0
            h += 2.0
            np.divide(a, h, out=h)
            h += 1.0
            h *= g
            return (h,)
        return (g * _ACTIVATIONS[entry.ctx][1](a),)
    if kind == "l2_norm":
        a = values[entry.inputs[0]]
        n = float(np.sqrt(np.sum(a * a)))
        if n == 0.0:
            return (np.zeros_like(a),)
        return (float(g) * a / n,)
    if kind == "rows_l2_norm":
        a = values[entry.inputs[0]]
        n = np.sqrt(np.sum(a * a, axis=1))
        safe = np.where(n > 0.0, n, 1.0)
        return (g.reshape(-1, 1) * np.where(n[:, None] > 0.0, a / safe[:, None], 0.0),)
    raise AssertionError(f"no adjoint for op kind {kind!r}")


def backward(output: Tensor) -> None:
    """Reverse sweep from a scalar output; adds into Parameter.grad.

    Gradients accumulate across calls; zero them explicitly between steps.
    """
    if output.data.size != 1:
        raise ShapeMismatchError("backward(scalar output)", output.shape)
    tape = output.tape
    adj: list = [None] * tape.n_nodes
    owned = [False] * tape.n_nodes  # True once adj[nid] is an array we allocated
    adj[output.nid] = np.ones_like(tape._values[output.nid])
    owned[output.nid] = True
    for entry in reversed(tape._entries):
        g = adj[entry.out]
        if g is None or entry.kind == "leaf":
            continue
        for nid, contrib in zip(entry.inputs, _vjp(entry, tape._values, g)):
            if adj[nid] is None:
                # may alias g or a view; copy lazily on the first accumulation
                adj[nid] = contrib
            elif owned[nid]:
                adj[nid] += contrib
            else:
                adj[nid] = adj[nid] + contrib
                owned[nid] = True
    for nid, p in tape._param_of.items():
        if adj[nid] is not None:
            p.grad += adj[nid]


def grad_check(f, params: list[Parameter], step: float = 1e-6) -> float:
    """Max relative error between tape gradients and central differences.

    f(tape) must rebuild the scalar output on the given tape, binding each
    parameter with tape.leaf. The per-coordinate step is step*max(1,|x|);
    the relative error denominator is max(1, |analytic|, |numeric|).
    """
    for p in params:
        p.zero_grad()
    out = f(Tape())
    if out.data.size != 1:
        raise ShapeMismatchError("grad_check(scalar f)", out.shape)
    backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, ana in zip(params, analytic):
        flat = p.value.reshape(-1)
        ana_flat = ana.reshape(-1)
        for i in range(flat.size):
            x0 = flat[i]
            h = step * max(1.0, abs(x0))
            flat[i] = x0 + h
            fp = float(f(Tape()).data.reshape(()))
            flat[i] = x0 - h
            fm = float(f(Tape()).data.reshape(()))
            flat[i] = x0
            numeric = (fp - fm) / (2.0 * h)
            err = abs(ana_flat[i] - numeric) / max(1.0, abs(ana_flat[i]), abs(numeric))
            worst = max(worst, err)
    return worst
