# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the hot inner loops.

Same signatures and operation order as ``_pykernels`` so both backends
produce bit-identical results (both use the platform libm).
"""

from libc.math cimport exp, log, log1p, tanh

BACKEND_NAME = "compiled"


def neg(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = -x[i]


def square(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = v * v


def vexp(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = exp(x[i])


def vlog(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = log(x[i])


def vtanh(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = tanh(x[i])


def vsigmoid(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v, e
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            out[i] = e / (1.0 + e)


def vrelu(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        out[i] = v if v > 0.0 else 0.0


def relu_mask(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = 1.0 if x[i] > 0.0 else 0.0


def vsoftplus(double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double v
    for i in range(n):
        v = x[i]
        if v > 0.0:
            out[i] = v + log1p(exp(-v))
        else:
            out[i] = log1p(exp(v))


def add(double[::1] x, double[::1] y, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = x[i] + y[i]


def sub(double[::1] x, double[::1] y, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = x[i] - y[i]


def mul(double[::1] x, double[::1] y, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = x[i] * y[i]


def scalar_mul(double a, double[::1] x, double[::1] out, Py_ssize_t n):
    cdef Py_ssize_t i
    for i in range(n):
        out[i] = a * x[i]


def bcast(int op, double[::1] x, long long[::1] xst, double[::1] y,
          long long[::1] yst, double[::1] out, long long[::1] oshape,
          Py_ssize_t rank, Py_ssize_t total):
    cdef Py_ssize_t oi, d
    cdef long long xi = 0, yi = 0
    cdef long long idx[8]
    cdef double a, b
    for d in range(rank):
        idx[d] = 0
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


def matmul(double[::1] a, double[::1] b, double[::1] out,
           Py_ssize_t m, Py_ssize_t k, Py_ssize_t n):
    cdef Py_ssize_t i, p, j, arow, orow, brow
    cdef double aip
    for i in range(m):
        arow = i * k
        orow = i * n
        for p in range(k):
            aip = a[arow + p]
            brow = p * n
            for j in range(n):
                out[orow + j] += aip * b[brow + j]


def transpose(double[::1] x, double[::1] out, Py_ssize_t m, Py_ssize_t n):
    cdef Py_ssize_t i, j, row
    for i in range(m):
        row = i * n
        for j in range(n):
            out[j * m + i] = x[row + j]


def sum_all(double[::1] x, Py_ssize_t n):
    cdef Py_ssize_t i
    cdef double s = 0.0
    for i in range(n):
        s += x[i]
    return s


def sum_axis(double[::1] x, double[::1] out,
             Py_ssize_t outer, Py_ssize_t axlen, Py_ssize_t inner):
    cdef Py_ssize_t o, a, i, obase, xbase, row
    for o in range(outer):
        obase = o * inner
        xbase = o * axlen * inner
        for a in range(axlen):
            row = xbase + a * inner
            for i in range(inner):
                out[obase + i] += x[row + i]


def logsumexp_rows(double[::1] x, double[::1] out, Py_ssize_t rows, Py_ssize_t cols):
    cdef Py_ssize_t r, c, base
    cdef double m, s, v
    for r in range(rows):
        base = r * cols
        m = x[base]
        for c in range(1, cols):
            v = x[base + c]
            if v > m:
                m = v
        s = 0.0
        for c in range(cols):
            s += exp(x[base + c] - m)
        out[r] = m + log(s)
