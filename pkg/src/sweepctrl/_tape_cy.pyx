# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled expression-tape evaluator.

Hot kernel of the package: every right-hand-side, Jacobian and Hessian
evaluation inside the integrators funnels through this loop.  Must stay
operation-for-operation identical to ``_tape_py.evaluate`` so both backends
return bit-identical results (see tests/test_backends.py).
"""

from libc.math cimport exp as c_exp, log as c_log, sqrt as c_sqrt
from libc.math cimport sin as c_sin, cos as c_cos

NAME = "cython"

cdef enum:
    ERR_DIV = 1
    ERR_LN = 2
    ERR_SQRT = 3


cdef inline bint _ipow(double x, long k, double* out) noexcept nogil:
    cdef double r = 1.0
    cdef double b = x
    cdef long kk = k
    if kk < 0:
        kk = -kk
        while kk:
            if kk & 1:
                r *= b
            b *= b
            kk >>= 1
        if r == 0.0:
            return False
        out[0] = 1.0 / r
        return True
    while kk:
        if kk & 1:
            r *= b
        b *= b
        kk >>= 1
    out[0] = r
    return True


def evaluate(int[:, ::1] code, double[::1] consts, int n, int m,
             double t, double[::1] x, double[::1] u, int order,
             double[::1] val, double[:, ::1] grad, double[:, :, ::1] hess):
    """Run the tape; fills val/grad/hess rows, returns 0 or an error code."""
    return _eval_core(code, consts, n, m, t, x, u, order, val, grad, hess)


cdef int _eval_core(int[:, ::1] code, double[::1] consts, int n, int m,
                    double t, double[::1] x, double[::1] u, int order,
                    double[::1] val, double[:, ::1] grad, double[:, :, ::1] hess):
    cdef Py_ssize_t k = code.shape[0]
    cdef bint want_g = order >= 1
    cdef bint want_h = order >= 2
    cdef int d = 1 + n + m
    cdef Py_ssize_t i, l, p, q
    cdef int op, a, b
    cdef double av, bv, fv, sv, cv, c1, c2, p1, p2, coef
    cdef int src

    for i in range(k):
        op = code[i, 0]
        a = code[i, 1]
        b = code[i, 2]
        if op == 0:  # const
            val[i] = consts[a]
            if want_g:
                for l in range(d):
                    grad[i, l] = 0.0
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = 0.0
        elif op <= 3:  # t / x_a / u_a
            if op == 1:
                val[i] = t
            elif op == 2:
                val[i] = x[a]
            else:
                val[i] = u[a]
            if want_g:
                for l in range(d):
                    grad[i, l] = 0.0
                if op == 1:
                    grad[i, 0] = 1.0
                elif op == 2:
                    grad[i, 1 + a] = 1.0
                else:
                    grad[i, 1 + n + a] = 1.0
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = 0.0
        elif op == 4:  # add
            val[i] = val[a] + val[b]
            if want_g:
                for l in range(d):
                    grad[i, l] = grad[a, l] + grad[b, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = hess[a, p, q] + hess[b, p, q]
        elif op == 5:  # sub
            val[i] = val[a] - val[b]
            if want_g:
                for l in range(d):
                    grad[i, l] = grad[a, l] - grad[b, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = hess[a, p, q] - hess[b, p, q]
        elif op == 6:  # mul
            av = val[a]
            bv = val[b]
            val[i] = av * bv
            if want_g:
                for l in range(d):
                    grad[i, l] = bv * grad[a, l] + av * grad[b, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        fv = bv * hess[a, p, q] + av * hess[b, p, q]
                        fv += grad[a, 1 + p] * grad[b, 1 + q]
                        fv += grad[b, 1 + p] * grad[a, 1 + q]
                        hess[i, p, q] = fv
        elif op == 7:  # div
            av = val[a]
            bv = val[b]
            if bv == 0.0:
                return (ERR_DIV << 20) | i
            fv = av / bv
            val[i] = fv
            if want_g:
                for l in range(d):
                    grad[i, l] = (grad[a, l] - fv * grad[b, l]) / bv
            if want_h:
                for p in range(n):
                    for q in range(n):
                        sv = hess[a, p, q] - fv * hess[b, p, q]
                        sv -= grad[i, 1 + p] * grad[b, 1 + q]
                        sv -= grad[b, 1 + p] * grad[i, 1 + q]
                        hess[i, p, q] = sv / bv
        elif op == 8:  # neg
            val[i] = -val[a]
            if want_g:
                for l in range(d):
                    grad[i, l] = -grad[a, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = -hess[a, p, q]
        elif op == 9:  # pow, b = integer exponent
            av = val[a]
            if not _ipow(av, b, &fv):
                return (ERR_DIV << 20) | i
            val[i] = fv
            if want_g:
                if b == 0:
                    for l in range(d):
                        grad[i, l] = 0.0
                    if want_h:
                        for p in range(n):
                            for q in range(n):
                                hess[i, p, q] = 0.0
                else:
                    if not _ipow(av, b - 1, &p1):
                        return (ERR_DIV << 20) | i
                    c1 = b * p1
                    for l in range(d):
                        grad[i, l] = c1 * grad[a, l]
                    if want_h:
                        if b == 1:
                            for p in range(n):
                                for q in range(n):
                                    hess[i, p, q] = c1 * hess[a, p, q]
                        else:
                            if not _ipow(av, b - 2, &p2):
                                return (ERR_DIV << 20) | i
                            c2 = b * (b - 1) * p2
                            for p in range(n):
                                for q in range(n):
                                    sv = c1 * hess[a, p, q]
                                    sv += c2 * (grad[a, 1 + p] * grad[a, 1 + q])
                                    hess[i, p, q] = sv
        elif op == 10:  # exp
            fv = c_exp(val[a])
            val[i] = fv
            if want_g:
                for l in range(d):
                    grad[i, l] = fv * grad[a, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        sv = fv * hess[a, p, q]
                        sv += fv * (grad[a, 1 + p] * grad[a, 1 + q])
                        hess[i, p, q] = sv
        elif op == 11:  # ln
            av = val[a]
            if av <= 0.0:
                return (ERR_LN << 20) | i
            val[i] = c_log(av)
            if want_g:
                for l in range(d):
                    grad[i, l] = grad[a, l] / av
            if want_h:
                for p in range(n):
                    for q in range(n):
                        sv = hess[a, p, q] / av
                        sv -= (grad[a, 1 + p] * grad[a, 1 + q]) / (av * av)
                        hess[i, p, q] = sv
        elif op == 12:  # sqrt
            av = val[a]
            if av < 0.0:
                return (ERR_SQRT << 20) | i
            fv = c_sqrt(av)
            val[i] = fv
            if want_g:
                if fv == 0.0:
                    return (ERR_DIV << 20) | i
                c1 = 0.5 / fv
                for l in range(d):
                    grad[i, l] = c1 * grad[a, l]
                if want_h:
                    coef = 0.25 / (fv * av)
                    for p in range(n):
                        for q in range(n):
                            sv = c1 * hess[a, p, q]
                            sv -= coef * (grad[a, 1 + p] * grad[a, 1 + q])
                            hess[i, p, q] = sv
        elif op == 13:  # sin
            av = val[a]
            sv = c_sin(av)
            cv = c_cos(av)
            val[i] = sv
            if want_g:
                for l in range(d):
                    grad[i, l] = cv * grad[a, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        fv = cv * hess[a, p, q]
                        fv -= sv * (grad[a, 1 + p] * grad[a, 1 + q])
                        hess[i, p, q] = fv
        elif op == 14:  # cos
            av = val[a]
            sv = c_sin(av)
            cv = c_cos(av)
            val[i] = cv
            if want_g:
                for l in range(d):
                    grad[i, l] = -sv * grad[a, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        fv = -sv * hess[a, p, q]
                        fv -= cv * (grad[a, 1 + p] * grad[a, 1 + q])
                        hess[i, p, q] = fv
        elif op == 15:  # max2: left-biased branch selection
            if val[a] >= val[b]:
                src = a
            else:
                src = b
            val[i] = val[src]
            if want_g:
                for l in range(d):
                    grad[i, l] = grad[src, l]
            if want_h:
                for p in range(n):
                    for q in range(n):
                        hess[i, p, q] = hess[src, p, q]
        else:
            raise RuntimeError(f"bad opcode {op}")
    return 0


def penalty_rhs_jac(int[:, ::1] code, double[::1] consts,
                    int[::1] code_off, int[::1] const_off,
                    int n, int m, int r,
                    double gamma, double log_gamma, double log_cap,
                    double t, double[::1] x, double[::1] u, int order,
                    double[::1] val, double[:, ::1] grad, double[:, :, ::1] hess,
                    double[::1] F, double[:, ::1] J, double[:, ::1] B,
                    double[::1] Ft, double[::1] xi_out):
    """Penalized vector field f - grad(potential) - sum_i w_i grad(psi_i).

    Fields are packed as [f_1..f_n, potential, psi_1..psi_r]; code_off and
    const_off delimit each field's slice.  order 0 fills F and xi_out only;
    order 1 additionally fills the state Jacobian J, control Jacobian B and
    time derivative Ft.  Error codes are (field_index << 23) | tape_status.
    """
    cdef int nf = n
    cdef int fld, i, j, p, q, status, last
    cdef double v, w, gw, e1, e2
    for fld in range(nf + 1 + r):
        status = _eval_core(code[code_off[fld]:code_off[fld + 1]],
                            consts[const_off[fld]:const_off[fld + 1]],
                            n, m, t, x, u,
                            (1 if order >= 1 else 0) if fld < nf else (2 if order >= 1 else 1),
                            val, grad, hess)
        if status != 0:
            return (fld << 23) | status
        last = code_off[fld + 1] - code_off[fld] - 1
        if fld < nf:
            F[fld] = val[last]
            if order >= 1:
                Ft[fld] = grad[last, 0]
                for p in range(n):
                    J[fld, p] = grad[last, 1 + p]
                for q in range(m):
                    B[fld, q] = grad[last, 1 + n + q]
        elif fld == nf:
            for p in range(n):
                F[p] -= grad[last, 1 + p]
            if order >= 1:
                for p in range(n):
                    for q in range(n):
                        J[p, q] -= hess[last, p, q]
        else:
            i = fld - nf - 1
            v = val[last]
            e1 = gamma * v + log_gamma
            if e1 > log_cap:
                e1 = log_cap
            w = c_exp(e1)
            xi_out[i] = w
            for p in range(n):
                F[p] -= w * grad[last, 1 + p]
            if order >= 1:
                e2 = gamma * v + 2.0 * log_gamma
                if e2 > log_cap:
                    e2 = log_cap
                gw = c_exp(e2)
                for p in range(n):
                    for q in range(n):
                        J[p, q] -= gw * (grad[last, 1 + p] * grad[last, 1 + q])
                        J[p, q] -= w * hess[last, p, q]
    return 0
