"""Tape-based reverse-mode automatic differentiation.

The backward pass is itself expressed in terms of the forward op set, so
gradients are ordinary graph nodes and can be differentiated again
(``grad(..., create_graph=True)`` then ``grad`` of the result). That
closure under differentiation is what the meta-learning outer loop relies
on for gradients through inner gradient steps.

Values are flat ``array('d')`` buffers in row-major order; arithmetic is
delegated to the active kernel backend (compiled or pure Python, selected
at import in :mod:`wormhole_maml.backend`).

Broadcasting follows the trailing-dimension rule: shapes are right-aligned
and each aligned dim must match or be 1 (missing leading dims count as 1).
Anything else is a :class:`StructuralError`.
"""

from __future__ import annotations

import threading
from array import array
from contextlib import contextmanager
from enum import Enum
from typing import Callable, Sequence

from .backend import kernels as K
from .errors import ContractError, DomainError, StructuralError

Shape = tuple[int, ...]


class OpKind(Enum):
    LEAF = "leaf"
    ADD = "add"
    SUB = "sub"
    NEG = "neg"
    MUL = "mul"
    SCALAR_MUL = "scalar_mul"
    MATMUL = "matmul"
    TRANSPOSE = "transpose"
    SUM_ALL = "sum_all"
    SUM_AXIS = "sum_axis"
    MEAN_ALL = "mean_all"
    SQUARE = "square"
    EXP = "exp"
    LOG = "log"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    RELU = "relu"
    SOFTPLUS = "softplus"
    LOGSUMEXP_ROWS = "logsumexp_rows"
    DETACH = "detach"
    CONCAT = "concat"
    INDEX_SELECT = "index_select"
    # plumbing ops that keep the backward rules closed under the op set:
    # reshape is a zero-cost row-major relabel, scatter_rows is the
    # constant-mask adjoint of index_select (and vice versa)
    RESHAPE = "reshape"
    SCATTER_ROWS = "scatter_rows"


def _size(shape: Shape) -> int:
    n = 1
    for d in shape:
        n *= d
    return n


def _zeros_data(n: int) -> array:
    return array("d", bytes(8 * n))


class Tensor:
    """N-d double array, optionally attached to a tape node.

    Tensors are immutable by convention: no op mutates ``data`` after
    construction, so untracked tensors are freely shareable.
    """

    __slots__ = ("shape", "data", "node", "tape")

    def __init__(self, shape: Shape, data: array, node: int | None = None, tape: "Tape | None" = None):
        self.shape = shape
        self.data = data
        self.node = node
        self.tape = tape

    @property
    def size(self) -> int:
        return _size(self.shape)

    def item(self) -> float:
        if _size(self.shape) != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return self.data[0]

    def tolist(self) -> list:
        return _nest(list(self.data), self.shape)

    def __repr__(self) -> str:
        tag = "" if self.node is None else f", node={self.node}"
        return f"Tensor(shape={self.shape}{tag}, data={list(self.data)!r})"

    # elementwise operators (broadcasting); matmul is strict 2-d
    def __add__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.ADD, (self, other))

    def __sub__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.SUB, (self, other))

    def __mul__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.MUL, (self, other))

    def __neg__(self) -> "Tensor":
        return apply(OpKind.NEG, (self,))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return apply(OpKind.MATMUL, (self, other))


def _nest(flat: list, shape: Shape):
    if not shape:
        return flat[0]
    if len(shape) == 1:
        return flat
    step = _size(shape[1:])
    return [_nest(flat[i * step:(i + 1) * step], shape[1:]) for i in range(shape[0])]


class _Node:
    __slots__ = ("op", "parent_ids", "inputs", "out", "attrs")

    def __init__(self, op, parent_ids, inputs, out, attrs):
        self.op = op
        self.parent_ids = parent_ids
        self.inputs = inputs
        self.out = out
        self.attrs = attrs


_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = []
        _state.tapes = stack
    return stack


def _active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _tracking_paused() -> bool:
    return getattr(_state, "pause", 0) > 0


@contextmanager
def no_grad():
    """Suspend node recording; ops inside produce untracked tensors."""
    _state.pause = getattr(_state, "pause", 0) + 1
    try:
        yield
    finally:
        _state.pause -= 1


_generation_counter = [0]


class Tape:
    """Append-only record of ops; parents always precede children.

    Use as a context manager; the innermost active tape receives new
    nodes. A tape is single-threaded.
    """

    __slots__ = ("nodes", "generation")

    def __init__(self):
        self.nodes: list[_Node] = []
        _generation_counter[0] += 1
        self.generation = _generation_counter[0]

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def _append(self, node: _Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1


def tensor_new(shape: Sequence[int], data: Sequence[float], track: bool = False) -> Tensor:
    """Create a tensor; with ``track`` it becomes a leaf on the active tape."""
    shape = tuple(int(d) for d in shape)
    for d in shape:
        if d <= 0:
            raise StructuralError(f"shape dims must be positive, got {shape}")
    buf = array("d", data)
    if len(buf) != _size(shape):
        raise StructuralError(
            f"shape {shape} needs {_size(shape)} values, got {len(buf)}"
        )
    t = Tensor(shape, buf)
    if track:
        tape = _active_tape()
        if tape is None:
            raise StructuralError("cannot track a leaf without an active Tape")
        t.tape = tape
        t.node = tape._append(_Node(OpKind.LEAF, (), (), t, None))
    return t


def constant(data, shape: Sequence[int] | None = None) -> Tensor:
    """Untracked tensor from a scalar, flat list or nested list."""
    if isinstance(data, (int, float)):
        return Tensor((), array("d", [float(data)]))
    flat, inferred = _flatten_nested(data)
    if shape is None:
        shape = inferred
    return tensor_new(shape, flat, track=False)


def _flatten_nested(data):
    if isinstance(data, (int, float)):
        return [float(data)], ()
    first = list(data)
    if not first:
        raise StructuralError("empty data")
    if isinstance(first[0], (int, float)):
        return [float(v) for v in first], (len(first),)
    flats = []
    sub_shape = None
    for row in first:
        f, s = _flatten_nested(row)
        if sub_shape is None:
            sub_shape = s
        elif s != sub_shape:
            raise StructuralError("ragged nested data")
        flats.extend(f)
    return flats, (len(first),) + sub_shape


def zeros(shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor(shape, _zeros_data(_size(shape)))


def ones(shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    return Tensor(shape, array("d", [1.0] * _size(shape)))


def full(shape: Sequence[int], value: float) -> Tensor:
    shape = tuple(shape)
    return Tensor(shape, array("d", [float(value)] * _size(shape)))


# ---------------------------------------------------------------------------
# forward


def _broadcast_shape(a: Shape, b: Shape) -> Shape:
    ra, rb = len(a), len(b)
    r = max(ra, rb)
    out = []
    for i in range(r):
        da = a[i - (r - ra)] if i >= r - ra else 1
        db = b[i - (r - rb)] if i >= r - rb else 1
        if da == db:
            out.append(da)
        elif da == 1 or db == 1:
            out.append(da * db)
        else:
            raise StructuralError(f"shapes {a} and {b} do not broadcast")
    return tuple(out)


def _bcast_strides(shape: Shape, oshape: Shape) -> array:
    """Element strides of ``shape`` right-aligned to ``oshape``, 0 on broadcast dims."""
    r = len(oshape)
    rs = len(shape)
    st = [0] * r
    acc = 1
    for i in range(rs - 1, -1, -1):
        st[r - rs + i] = acc
        acc *= shape[i]
    for i in range(r):
        dim = shape[i - (r - rs)] if i >= r - rs else 1
        if dim == 1 and oshape[i] != 1:
            st[i] = 0
    return array("q", st)


_BIN_CODE = {OpKind.ADD: 0, OpKind.SUB: 1, OpKind.MUL: 2}
_SAME_SHAPE_BIN = {OpKind.ADD: "add", OpKind.SUB: "sub", OpKind.MUL: "mul"}
_UNARY_KERN = {
    OpKind.NEG: "neg",
    OpKind.SQUARE: "square",
    OpKind.EXP: "vexp",
    OpKind.TANH: "vtanh",
    OpKind.SIGMOID: "vsigmoid",
    OpKind.RELU: "vrelu",
    OpKind.SOFTPLUS: "vsoftplus",
}


def _forward(op: OpKind, inputs: tuple, attrs) -> Tensor:
    if op in _SAME_SHAPE_BIN:
        a, b = inputs
        if a.shape == b.shape:
            n = a.size
            out = _zeros_data(n)
            getattr(K, _SAME_SHAPE_BIN[op])(a.data, b.data, out, n)
            return Tensor(a.shape, out)
        oshape = _broadcast_shape(a.shape, b.shape)
        total = _size(oshape)
        out = _zeros_data(total)
        K.bcast(
            _BIN_CODE[op],
            a.data,
            _bcast_strides(a.shape, oshape),
            b.data,
            _bcast_strides(b.shape, oshape),
            out,
            array("q", oshape),
            len(oshape),
            total,
        )
        return Tensor(oshape, out)

    if op in _UNARY_KERN:
        (x,) = inputs
        out = _zeros_data(x.size)
        getattr(K, _UNARY_KERN[op])(x.data, out, x.size)
        return Tensor(x.shape, out)

    if op is OpKind.LOG:
        (x,) = inputs
        if x.size and min(x.data) <= 0.0:
            raise DomainError("log of a non-positive value")
        out = _zeros_data(x.size)
        K.vlog(x.data, out, x.size)
        return Tensor(x.shape, out)

    if op is OpKind.SCALAR_MUL:
        (x,) = inputs
        out = _zeros_data(x.size)
        K.scalar_mul(attrs["scalar"], x.data, out, x.size)
        return Tensor(x.shape, out)

    if op is OpKind.MATMUL:
        a, b = inputs
        if len(a.shape) != 2 or len(b.shape) != 2:
            raise StructuralError(f"matmul needs 2-d operands, got {a.shape} @ {b.shape}")
        m, k = a.shape
        k2, n = b.shape
        if k != k2:
            raise StructuralError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
        out = _zeros_data(m * n)
        K.matmul(a.data, b.data, out, m, k, n)
        return Tensor((m, n), out)

    if op is OpKind.TRANSPOSE:
        (x,) = inputs
        if len(x.shape) != 2:
            raise StructuralError(f"transpose needs a 2-d tensor, got {x.shape}")
        m, n = x.shape
        out = _zeros_data(m * n)
        K.transpose(x.data, out, m, n)
        return Tensor((n, m), out)

    if op is OpKind.SUM_ALL:
        (x,) = inputs
        return Tensor((), array("d", [K.sum_all(x.data, x.size)]))

    if op is OpKind.MEAN_ALL:
        (x,) = inputs
        return Tensor((), array("d", [K.sum_all(x.data, x.size) / x.size]))

    if op is OpKind.SUM_AXIS:
        (x,) = inputs
        axis = attrs["axis"]
        if not 0 <= axis < len(x.shape):
            raise StructuralError(f"axis {axis} out of range for shape {x.shape}")
        outer = _size(x.shape[:axis])
        axlen = x.shape[axis]
        inner = _size(x.shape[axis + 1:])
        out = _zeros_data(outer * inner)
        K.sum_axis(x.data, out, outer, axlen, inner)
        oshape = x.shape[:axis] + (1,) + x.shape[axis + 1:]
        return Tensor(oshape, out)

    if op is OpKind.LOGSUMEXP_ROWS:
        (x,) = inputs
        if len(x.shape) != 2:
            raise StructuralError(f"logsumexp_rows needs a 2-d tensor, got {x.shape}")
        rows, cols = x.shape
        out = _zeros_data(rows)
        K.logsumexp_rows(x.data, out, rows, cols)
        return Tensor((rows, 1), out)

    if op is OpKind.RESHAPE:
        (x,) = inputs
        shape = tuple(attrs["shape"])
        if _size(shape) != x.size:
            raise StructuralError(f"cannot reshape {x.shape} to {shape}")
        return Tensor(shape, x.data)  # row-major relabel, buffer shared

    if op is OpKind.CONCAT:
        if not inputs:
            raise StructuralError("concat of nothing")
        rest = inputs[0].shape[1:]
        rank = len(inputs[0].shape)
        if rank < 1:
            raise StructuralError("concat needs rank >= 1")
        total0 = 0
        for t in inputs:
            if len(t.shape) != rank or t.shape[1:] != rest:
                raise StructuralError("concat inputs must agree on trailing dims")
            total0 += t.shape[0]
        out = _zeros_data(total0 * _size(rest))
        off = 0
        for t in inputs:
            out[off:off + t.size] = t.data
            off += t.size
        return Tensor((total0,) + rest, out)

    if op is OpKind.INDEX_SELECT:
        (x,) = inputs
        if len(x.shape) < 1:
            raise StructuralError("index_select needs rank >= 1")
        idx = attrs["indices"]
        rowlen = _size(x.shape[1:])
        for i in idx:
            if not 0 <= i < x.shape[0]:
                raise StructuralError(f"index {i} out of range for dim {x.shape[0]}")
        out = _zeros_data(len(idx) * rowlen)
        for r, i in enumerate(idx):
            out[r * rowlen:(r + 1) * rowlen] = x.data[i * rowlen:(i + 1) * rowlen]
        return Tensor((len(idx),) + x.shape[1:], out)

    if op is OpKind.SCATTER_ROWS:
        (x,) = inputs
        idx = attrs["indices"]
        dim0 = attrs["dim0"]
        if len(x.shape) < 1 or x.shape[0] != len(idx):
            raise StructuralError("scatter_rows needs one input row per index")
        rowlen = _size(x.shape[1:])
        out = _zeros_data(dim0 * rowlen)
        for r, i in enumerate(idx):
            if not 0 <= i < dim0:
                raise StructuralError(f"index {i} out of range for dim {dim0}")
            base = i * rowlen
            src = r * rowlen
            for c in range(rowlen):
                out[base + c] += x.data[src + c]
        return Tensor((dim0,) + x.shape[1:], out)

    raise StructuralError(f"unknown op {op}")


def apply(op: OpKind, inputs: Sequence[Tensor], **attrs) -> Tensor:
    """Run one op; the result joins the active tape if any input is tracked."""
    inputs = tuple(inputs)
    if op is OpKind.DETACH:
        (x,) = inputs
        return Tensor(x.shape, x.data)

    out = _forward(op, inputs, attrs)

    if not _tracking_paused():
        tape = None
        parent_ids = None
        for t in inputs:
            if t.node is not None:
                if tape is None:
                    tape = t.tape
                elif t.tape is not tape:
                    raise StructuralError("inputs live on different tapes")
        if tape is not None:
            active = _active_tape()
            if active is not tape:
                raise StructuralError("tracked inputs do not belong to the active tape")
            parent_ids = tuple(t.node for t in inputs)
            out.tape = tape
            out.node = tape._append(_Node(op, parent_ids, inputs, out, attrs or None))
    return out


# public op helpers --------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.ADD, (a, b))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.SUB, (a, b))


def neg(x: Tensor) -> Tensor:
    return apply(OpKind.NEG, (x,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.MUL, (a, b))


def scalar_mul(a: float, x: Tensor) -> Tensor:
    return apply(OpKind.SCALAR_MUL, (x,), scalar=float(a))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return apply(OpKind.MATMUL, (a, b))


def transpose(x: Tensor) -> Tensor:
    return apply(OpKind.TRANSPOSE, (x,))


def sum_all(x: Tensor) -> Tensor:
    return apply(OpKind.SUM_ALL, (x,))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    return apply(OpKind.SUM_AXIS, (x,), axis=int(axis))


def mean_all(x: Tensor) -> Tensor:
    return apply(OpKind.MEAN_ALL, (x,))


def square(x: Tensor) -> Tensor:
    return apply(OpKind.SQUARE, (x,))


def exp(x: Tensor) -> Tensor:
    return apply(OpKind.EXP, (x,))


def log(x: Tensor) -> Tensor:
    return apply(OpKind.LOG, (x,))


def tanh(x: Tensor) -> Tensor:
    return apply(OpKind.TANH, (x,))


def sigmoid(x: Tensor) -> Tensor:
    return apply(OpKind.SIGMOID, (x,))


def relu(x: Tensor) -> Tensor:
    return apply(OpKind.RELU, (x,))


def softplus(x: Tensor) -> Tensor:
    return apply(OpKind.SOFTPLUS, (x,))


def logsumexp_rows(x: Tensor) -> Tensor:
    return apply(OpKind.LOGSUMEXP_ROWS, (x,))


def detach(x: Tensor) -> Tensor:
    return apply(OpKind.DETACH, (x,))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return apply(OpKind.RESHAPE, (x,), shape=tuple(shape))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    return apply(OpKind.CONCAT, tuple(tensors))


def index_select(x: Tensor, indices: Sequence[int]) -> Tensor:
    return apply(OpKind.INDEX_SELECT, (x,), indices=tuple(int(i) for i in indices))


def scatter_rows(x: Tensor, indices: Sequence[int], dim0: int) -> Tensor:
    return apply(
        OpKind.SCATTER_ROWS, (x,), indices=tuple(int(i) for i in indices), dim0=int(dim0)
    )


# ---------------------------------------------------------------------------
# backward rules, each expressed with forward ops so they are differentiable


def _unbroadcast(g: Tensor, target: Shape) -> Tensor:
    if g.shape == target:
        return g
    rank_diff = len(g.shape) - len(target)
    for ax in range(len(g.shape)):
        tdim = target[ax - rank_diff] if ax >= rank_diff else 1
        if tdim == 1 and g.shape[ax] != 1:
            g = sum_axis(g, ax)
    if g.shape != target:
        g = reshape(g, target)
    return g


def _bwd_add(g, node):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))


def _bwd_sub(g, node):
    a, b = node.inputs
    return (_unbroadcast(g, a.shape), _unbroadcast(neg(g), b.shape))


def _bwd_neg(g, node):
    return (neg(g),)


def _bwd_mul(g, node):
    a, b = node.inputs
    return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))


def _bwd_scalar_mul(g, node):
    return (scalar_mul(node.attrs["scalar"], g),)


def _bwd_matmul(g, node):
    a, b = node.inputs
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


def _bwd_transpose(g, node):
    return (transpose(g),)


def _bwd_sum_all(g, node):
    (x,) = node.inputs
    return (mul(g, ones(x.shape)),)


def _bwd_mean_all(g, node):
    (x,) = node.inputs
    return (mul(scalar_mul(1.0 / x.size, g), ones(x.shape)),)


def _bwd_sum_axis(g, node):
    (x,) = node.inputs
    return (mul(g, ones(x.shape)),)


def _bwd_square(g, node):
    (x,) = node.inputs
    return (mul(g, scalar_mul(2.0, x)),)


def _bwd_exp(g, node):
    return (mul(g, node.out),)


def _bwd_log(g, node):
    # 1/x = exp(-log x); keeps the rule inside the op set (x > 0 is already
    # guaranteed by the forward domain check)
    return (mul(g, exp(neg(node.out))),)


def _bwd_tanh(g, node):
    return (sub(g, mul(g, square(node.out))),)


def _bwd_sigmoid(g, node):
    s = node.out
    return (mul(g, sub(s, square(s))),)


def _bwd_relu(g, node):
    (x,) = node.inputs
    mask = _zeros_data(x.size)
    K.relu_mask(x.data, mask, x.size)
    return (mul(g, Tensor(x.shape, mask)),)


def _bwd_softplus(g, node):
    (x,) = node.inputs
    return (mul(g, sigmoid(x)),)


def _bwd_logsumexp_rows(g, node):
    (x,) = node.inputs
    return (mul(g, exp(sub(x, node.out))),)


def _bwd_reshape(g, node):
    (x,) = node.inputs
    return (reshape(g, x.shape),)


def _bwd_concat(g, node):
    out_grads = []
    off = 0
    for t in node.inputs:
        out_grads.append(index_select(g, range(off, off + t.shape[0])))
        off += t.shape[0]
    return tuple(out_grads)


def _bwd_index_select(g, node):
    (x,) = node.inputs
    return (scatter_rows(g, node.attrs["indices"], x.shape[0]),)


def _bwd_scatter_rows(g, node):
    return (index_select(g, node.attrs["indices"]),)


_BACKWARD: dict[OpKind, Callable] = {
    OpKind.ADD: _bwd_add,
    OpKind.SUB: _bwd_sub,
    OpKind.NEG: _bwd_neg,
    OpKind.MUL: _bwd_mul,
    OpKind.SCALAR_MUL: _bwd_scalar_mul,
    OpKind.MATMUL: _bwd_matmul,
    OpKind.TRANSPOSE: _bwd_transpose,
    OpKind.SUM_ALL: _bwd_sum_all,
    OpKind.MEAN_ALL: _bwd_mean_all,
    OpKind.SUM_AXIS: _bwd_sum_axis,
    OpKind.SQUARE: _bwd_square,
    OpKind.EXP: _bwd_exp,
    OpKind.LOG: _bwd_log,
    OpKind.TANH: _bwd_tanh,
    OpKind.SIGMOID: _bwd_sigmoid,
    OpKind.RELU: _bwd_relu,
    OpKind.SOFTPLUS: _bwd_softplus,
    OpKind.LOGSUMEXP_ROWS: _bwd_logsumexp_rows,
    OpKind.RESHAPE: _bwd_reshape,
    OpKind.CONCAT: _bwd_concat,
    OpKind.INDEX_SELECT: _bwd_index_select,
    OpKind.SCATTER_ROWS: _bwd_scatter_rows,
}


def grad(output: Tensor, wrt: Sequence[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar ``output`` w.r.t. each of ``wrt``.

    With ``create_graph`` the returned tensors are tracked, so they can be
    differentiated again (second order). Tensors in ``wrt`` that do not
    influence ``output`` get zero gradients.
    """
    if output.node is None:
        raise ContractError("grad output is not tracked on any tape")
    if _size(output.shape) != 1:
        raise ContractError(f"grad output must be scalar, got shape {output.shape}")
    tape = output.tape
    wrt = list(wrt)
    for w in wrt:
        if w.node is None or w.tape is not tape:
            raise StructuralError("wrt tensor is not on the output's tape")

    wanted: dict[int, Tensor | None] = {w.node: None for w in wrt}
    adjoints: dict[int, Tensor] = {output.node: ones(output.shape)}

    def _run():
        nodes = tape.nodes
        for nid in range(output.node, -1, -1):
            g = adjoints.pop(nid, None)
            if g is None:
                continue
            if nid in wanted:
                wanted[nid] = g
            node = nodes[nid]
            if node.op is OpKind.LEAF:
                continue
            pgrads = _BACKWARD[node.op](g, node)
            for pid, pg in zip(node.parent_ids, pgrads):
                if pid is None or pg is None:
                    continue
                acc = adjoints.get(pid)
                adjoints[pid] = pg if acc is None else add(acc, pg)

    if create_graph:
        _run()
    else:
        with no_grad():
            _run()

    results = []
    for w in wrt:
        g = wanted[w.node]
        if g is None:
            g = zeros(w.shape)
        if create_graph and g.node is None:
            # constant gradients (e.g. of linear graphs) still honor the
            # create_graph contract: register as a leaf so a second grad
            # yields exact zeros instead of an error
            g = Tensor(g.shape, g.data)
            g.tape = tape
            g.node = tape._append(_Node(OpKind.LEAF, (), (), g, None))
        results.append(g)
    return results


def check_gradient(f: Callable[[Tensor], Tensor], x: Tensor, eps: float) -> float:
    """Max relative error between reverse-mode and central finite differences.

    The relative error denominator is ``max(|a|, |b|, 1e-8)`` per coordinate.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    with Tape():
        xt = tensor_new(x.shape, x.data, track=True)
        y = f(xt)
        auto = grad(y, [xt])[0]

    base = array("d", x.data)
    worst = 0.0
    for i in range(len(base)):
        orig = base[i]
        base[i] = orig + eps
        fp = f(Tensor(x.shape, array("d", base))).item()
        base[i] = orig - eps
        fm = f(Tensor(x.shape, array("d", base))).item()
        base[i] = orig
        fd = (fp - fm) / (2.0 * eps)
        a = auto.data[i]
        err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
        if err > worst:
            worst = err
    return worst
