"""Randomized finite-difference verification of the autodiff core.

Builds random composite graphs over the differentiable op set and compares
reverse-mode gradients (and gradients-of-gradients) against central finite
differences. The generator keeps graphs well-conditioned on purpose: leaf
values are positive, magnitudes are capped and at most two hard-saturating
nonlinearities sit on any path, so the FD comparison stays far away from
cancellation and rounding floors.
"""

from __future__ import annotations

from array import array
from dataclasses import dataclass
from random import Random

from . import autodiff as ad
from .autodiff import OpKind, Tape, Tensor

FIRST_ORDER_EPS = 1e-5
SECOND_ORDER_EPS = 1e-4

_UNARY = (OpKind.TANH, OpKind.SIGMOID, OpKind.SOFTPLUS, OpKind.SQUARE)
_BINARY = (OpKind.ADD, OpKind.MUL, OpKind.MATMUL)
_REDUCE = (OpKind.SUM_ALL, OpKind.MEAN_ALL)
_SATURATING = (OpKind.TANH, OpKind.SIGMOID)

_MAX_VALUE = 2.5
_SAT_INPUT_CAP = 1.2
_MAX_SAT_PER_PATH = 2


@dataclass
class _Instr:
    op: OpKind
    args: tuple[int, ...]


@dataclass
class GraphProgram:
    """Replayable random graph: pool[0] is the differentiated leaf."""

    leaf_shape: tuple[int, ...]
    leaf_values: list[float]
    const_shapes: list[tuple[int, ...]]
    const_values: list[list[float]]
    instructions: list[_Instr]

    def __call__(self, x: Tensor) -> Tensor:
        pool: list[Tensor] = [x]
        for shape, vals in zip(self.const_shapes, self.const_values):
            pool.append(ad.tensor_new(shape, vals))
        for ins in self.instructions:
            pool.append(ad.apply(ins.op, [pool[i] for i in ins.args]))
        out = pool[-1]
        if out.shape != ():
            out = ad.sum_all(out)
        return out

    def leaf_tensor(self) -> Tensor:
        return ad.tensor_new(self.leaf_shape, self.leaf_values)


def random_program(rng: Random, depth: int = 6) -> GraphProgram:
    dims = (1, 2, 3)
    leaf_shape = (rng.choice(dims), rng.choice(dims))
    leaf_values = [rng.uniform(0.2, 1.0) for _ in range(leaf_shape[0] * leaf_shape[1])]
    n_consts = rng.randint(1, 2)
    const_shapes = []
    const_values = []
    for _ in range(n_consts):
        shape = (rng.choice(dims), rng.choice(dims))
        const_shapes.append(shape)
        const_values.append([rng.uniform(0.2, 1.0) for _ in range(shape[0] * shape[1])])

    prog = GraphProgram(leaf_shape, leaf_values, const_shapes, const_values, [])

    # shadow evaluation tracks values and saturation depth per pool entry
    pool_vals: list[Tensor] = [prog.leaf_tensor()] + [
        ad.tensor_new(s, v) for s, v in zip(const_shapes, const_values)
    ]
    sat: list[int] = [0] * len(pool_vals)

    def try_op() -> bool:
        op = rng.choice(_UNARY + _BINARY + _REDUCE)
        if op in _UNARY:
            idx = rng.randrange(len(pool_vals))
            src = pool_vals[idx]
            if op in _SATURATING:
                if sat[idx] >= _MAX_SAT_PER_PATH or max(map(abs, src.data)) > _SAT_INPUT_CAP:
                    return False
            args = (idx,)
            new_sat = sat[idx] + (1 if op in _SATURATING else 0)
        elif op in _REDUCE:
            idx = rng.randrange(len(pool_vals))
            if pool_vals[idx].shape == ():
                return False
            args = (idx,)
            new_sat = sat[idx]
        else:
            i = rng.randrange(len(pool_vals))
            j = rng.randrange(len(pool_vals))
            a, b = pool_vals[i], pool_vals[j]
            if op is OpKind.MATMUL:
                if len(a.shape) != 2 or len(b.shape) != 2 or a.shape[1] != b.shape[0]:
                    return False
            else:
                try:
                    ad._broadcast_shape(a.shape, b.shape)
                except Exception:
                    return False
            args = (i, j)
            new_sat = max(sat[i], sat[j])
        out = ad.apply(op, [pool_vals[k] for k in args])
        if out.size and max(map(abs, out.data)) > _MAX_VALUE:
            return False
        prog.instructions.append(_Instr(op, args))
        pool_vals.append(out)
        sat.append(new_sat)
        return True

    placed = 0
    attempts = 0
    while placed < depth and attempts < 60:
        attempts += 1
        if try_op():
            placed += 1
    if not prog.instructions:
        prog.instructions.append(_Instr(OpKind.SQUARE, (0,)))
    # guarantee the leaf influences the output: fold it in at the end
    last = len(pool_vals) - 1
    if not _reaches(prog, 0, last):
        prog.instructions.append(_Instr(OpKind.SUM_ALL, (last,)))
        prog.instructions.append(_Instr(OpKind.MEAN_ALL, (0,)))
        prog.instructions.append(
            _Instr(OpKind.ADD, (len(pool_vals), len(pool_vals) + 1))
        )
    return prog


def _reaches(prog: GraphProgram, source: int, target: int) -> bool:
    n_leaves = 1 + len(prog.const_shapes)
    reach = [False] * (n_leaves + len(prog.instructions))
    reach[source] = True
    for k, ins in enumerate(prog.instructions):
        out_idx = n_leaves + k
        if any(reach[a] for a in ins.args):
            reach[out_idx] = True
    return reach[target]


def first_order_suite(n_graphs: int = 100, seed: int = 0,
                      eps: float = FIRST_ORDER_EPS) -> float:
    """Max relative FD error over ``n_graphs`` random graphs."""
    worst = 0.0
    for g in range(n_graphs):
        prog = random_program(Random(seed * 100003 + g))
        err = ad.check_gradient(prog, prog.leaf_tensor(), eps)
        if err > worst:
            worst = err
    return worst


def second_order_suite(n_graphs: int = 30, seed: int = 0,
                       eps: float = SECOND_ORDER_EPS) -> float:
    """Max relative error of grad-of-grad vs finite differences of the
    first gradient, contracted against a random direction v."""
    worst = 0.0
    for g in range(n_graphs):
        rng = Random(seed * 200003 + g)
        prog = random_program(rng)
        x0 = prog.leaf_tensor()
        n = x0.size
        v = ad.tensor_new(x0.shape, [rng.uniform(-1.0, 1.0) for _ in range(n)])

        with Tape():
            xt = ad.tensor_new(x0.shape, x0.data, track=True)
            y = prog(xt)
            h = ad.grad(y, [xt], create_graph=True)[0]
            s = ad.sum_all(ad.mul(h, v))
            hv = ad.grad(s, [xt])[0]

        def grad_at(values) -> list[float]:
            with Tape():
                xt2 = ad.tensor_new(x0.shape, values, track=True)
                y2 = prog(xt2)
                return list(ad.grad(y2, [xt2])[0].data)

        base = array("d", x0.data)
        for j in range(n):
            orig = base[j]
            base[j] = orig + eps
            hp = grad_at(base)
            base[j] = orig - eps
            hm = grad_at(base)
            base[j] = orig
            fd = sum((p - m) * vv for p, m, vv in zip(hp, hm, v.data)) / (2.0 * eps)
            a = hv.data[j]
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
            if err > worst:
                worst = err
    return worst
