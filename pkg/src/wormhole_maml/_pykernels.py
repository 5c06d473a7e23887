"""Pure-Python kernel fallback.

Mirrors ``_ckernels`` exactly: same signatures, same operation order, so
results are bit-identical across backends (both call the platform libm).
All buffers are flat ``array('d')`` in row-major order; shape handling
lives in the autodiff layer.
"""

import math

BACKEND_NAME = "pure"


def neg(x, out, n):
    for i in range(n):
        out[i] = -x[i]


def square(x, out, n):
    for i in range(n):
        v = x[i]
        out[i] = v * v


def vexp(x, out, n):
    for i in range(n):
        out[i] = math.exp(x[i])


def vlog(x, out, n):
    for i in range(n):
        out[i] = math.log(x[i])


def vtanh(x, out, n):
    for i in range(n):
        out[i] = math.tanh(x[i])


def vsigmoid(x, out, n):
    # split on sign so exp() never overflows
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + math.exp(-v))
        else:
            e = math.exp(v)
            out[i] = e / (1.0 + e)


def vrelu(x, out, n):
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def relu_mask(x, out, n):
    # subgradient convention: mask(0) = 0
    for i in range(n):
        out[i] = 1.0 if x[i] > 0.0 else 0.0


def vsoftplus(x, out, n):
    # stable: softplus(x) = max(x, 0) + log1p(exp(-|x|))
    for i in range(n):
        v = x[i]
        if v > 0.0:
            out[i] = v + math.log1p(math.exp(-v))
        else:
            out[i] = math.log1p(math.exp(v))


def add(x, y, out, n):
    for i in range(n):
        out[i] = x[i] + y[i]


def sub(x, y, out, n):
    for i in range(n):
        out[i] = x[i] - y[i]


def mul(x, y, out, n):
    for i in range(n):
        out[i] = x[i] * y[i]


def scalar_mul(a, x, out, n):
    for i in range(n):
        out[i] = a * x[i]


def bcast(op, x, xst, y, yst, out, oshape, rank, total):
    """Broadcast binary op via an odometer walk over the output.

    ``xst``/``yst`` are per-dim element strides with 0 on broadcast dims.
    op: 0 = add, 1 = sub, 2 = mul.
    """
    idx = [0] * rank
    xi = 0
    yi = 0
    for oi in range(total):
        a = x[xi]
        b = y[yi]
        if op == 0:
            out[oi] = a + b
        elif op == 1:
            out[oi] = a - b
        else:
            out[oi] = a * b
        for d in range(rank - 1, -1, -1):
            idx[d] += 1
            xi += xst[d]
            yi += yst[d]
            if idx[d] < oshape[d]:
                break
            idx[d] = 0
            xi -= xst[d] * oshape[d]
            yi -= yst[d] * oshape[d]


def matmul(a, b, out, m, k, n):
    # out must be zero-initialized; (i, p, j) loop order is part of the
    # cross-backend bit-compatibility contract
    for i in range(m):
        arow = i * k
        orow = i * n
        for p in range(k):
            aip = a[arow + p]
            brow = p * n
            for j in range(n):
                out[orow + j] += aip * b[brow + j]


def transpose(x, out, m, n):
    for i in range(m):
        row = i * n
        for j in range(n):
            out[j * m + i] = x[row + j]


def sum_all(x, n):
    s = 0.0
    for i in range(n):
        s += x[i]
    return s


def sum_axis(x, out, outer, axlen, inner):
    # x viewed as [outer, axlen, inner]; out as [outer, inner]
    for o in range(outer):
        obase = o * inner
        xbase = o * axlen * inner
        for a in range(axlen):
            row = xbase + a * inner
            for i in range(inner):
                out[obase + i] += x[row + i]


def logsumexp_rows(x, out, rows, cols):
    # row-max shift for stability; max does not receive gradient
    for r in range(rows):
        base = r * cols
        m = x[base]
        for c in range(1, cols):
            v = x[base + c]
            if v > m:
                m = v
        s = 0.0
        for c in range(cols):
            s += math.exp(x[base + c] - m)
        out[r] = m + math.log(s)
