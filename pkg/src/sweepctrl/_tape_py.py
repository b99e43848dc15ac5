"""Pure-Python expression-tape evaluator.

Reference implementation of the kernel in ``_tape_cy.pyx``.  The two are kept
operation-for-operation identical so results agree bit for bit; scalar
transcendentals go through libm (``math``) in both.
"""

import math

import numpy as np

NAME = "python"

_ERR_SHIFT = 1 << 20
_ERR_DIV = 1
_ERR_LN = 2
_ERR_SQRT = 3


def _ipow(x: float, k: int):
    """x**k by binary exponentiation; returns (ok, value)."""
    if k < 0:
        ok, p = _ipow(x, -k)
        if not ok or p == 0.0:
            return False, 0.0
        return True, 1.0 / p
    r = 1.0
    b = x
    while k:
        if k & 1:
            r *= b
        b *= b
        k >>= 1
    return True, r


def evaluate(code, consts, n, m, t, x, u, order, val, grad, hess):
    """Run the tape; fills val/grad/hess rows, returns 0 or an error code.

    Error codes encode (kind << 20) | instruction_index with kind in
    {1: div-by-zero, 2: ln domain, 3: sqrt domain}.
    """
    k = code.shape[0]
    want_g = order >= 1
    want_h = order >= 2
    d = 1 + n + m
    for i in range(k):
        op = int(code[i, 0])
        a = int(code[i, 1])
        b = int(code[i, 2])
        if op == 0:  # const
            val[i] = consts[a]
            if want_g:
                grad[i, :] = 0.0
            if want_h:
                hess[i, :, :] = 0.0
        elif op == 1:  # t
            val[i] = t
            if want_g:
                grad[i, :] = 0.0
                grad[i, 0] = 1.0
            if want_h:
                hess[i, :, :] = 0.0
        elif op == 2:  # x_a
            val[i] = x[a]
            if want_g:
                grad[i, :] = 0.0
                grad[i, 1 + a] = 1.0
            if want_h:
                hess[i, :, :] = 0.0
        elif op == 3:  # u_a
            val[i] = u[a]
            if want_g:
                grad[i, :] = 0.0
                grad[i, 1 + n + a] = 1.0
            if want_h:
                hess[i, :, :] = 0.0
        elif op == 4:  # add
            val[i] = val[a] + val[b]
            if want_g:
                np.add(grad[a], grad[b], out=grad[i])
            if want_h:
                np.add(hess[a], hess[b], out=hess[i])
        elif op == 5:  # sub
            val[i] = val[a] - val[b]
            if want_g:
                np.subtract(grad[a], grad[b], out=grad[i])
            if want_h:
                np.subtract(hess[a], hess[b], out=hess[i])
        elif op == 6:  # mul
            av = val[a]
            bv = val[b]
            val[i] = av * bv
            if want_g:
                grad[i, :] = bv * grad[a] + av * grad[b]
            if want_h:
                ga = grad[a, 1 : 1 + n]
                gb = grad[b, 1 : 1 + n]
                hess[i, :, :] = bv * hess[a] + av * hess[b]
                hess[i, :, :] += np.outer(ga, gb)
                hess[i, :, :] += np.outer(gb, ga)
        elif op == 7:  # div
            av = val[a]
            bv = val[b]
            if bv == 0.0:
                return (_ERR_DIV << 20) | i
            fv = av / bv
            val[i] = fv
            if want_g:
                grad[i, :] = (grad[a] - fv * grad[b]) / bv
            if want_h:
                gf = grad[i, 1 : 1 + n]
                gb = grad[b, 1 : 1 + n]
                hess[i, :, :] = hess[a] - fv * hess[b]
                hess[i, :, :] -= np.outer(gf, gb)
                hess[i, :, :] -= np.outer(gb, gf)
                hess[i, :, :] /= bv
        elif op == 8:  # neg
            val[i] = -val[a]
            if want_g:
                np.negative(grad[a], out=grad[i])
            if want_h:
                np.negative(hess[a], out=hess[i])
        elif op == 9:  # pow, b = integer exponent
            av = val[a]
            ok, pv = _ipow(av, b)
            if not ok:
                return (_ERR_DIV << 20) | i
            val[i] = pv
            if want_g:
                if b == 0:
                    grad[i, :] = 0.0
                    if want_h:
                        hess[i, :, :] = 0.0
                else:
                    ok, p1 = _ipow(av, b - 1)
                    if not ok:
                        return (_ERR_DIV << 20) | i
                    c1 = b * p1
                    grad[i, :] = c1 * grad[a]
                    if want_h:
                        if b == 1:
                            hess[i, :, :] = c1 * hess[a]
                        else:
                            ok, p2 = _ipow(av, b - 2)
                            if not ok:
                                return (_ERR_DIV << 20) | i
                            c2 = b * (b - 1) * p2
                            ga = grad[a, 1 : 1 + n]
                            hess[i, :, :] = c1 * hess[a]
                            hess[i, :, :] += c2 * np.outer(ga, ga)
        elif op == 10:  # exp
            fv = math.exp(val[a])
            val[i] = fv
            if want_g:
                grad[i, :] = fv * grad[a]
            if want_h:
                ga = grad[a, 1 : 1 + n]
                hess[i, :, :] = fv * hess[a]
                hess[i, :, :] += fv * np.outer(ga, ga)
        elif op == 11:  # ln
            av = val[a]
            if av <= 0.0:
                return (_ERR_LN << 20) | i
            val[i] = math.log(av)
            if want_g:
                grad[i, :] = grad[a] / av
            if want_h:
                ga = grad[a, 1 : 1 + n]
                hess[i, :, :] = hess[a] / av
                hess[i, :, :] -= np.outer(ga, ga) / (av * av)
        elif op == 12:  # sqrt
            av = val[a]
            if av < 0.0:
                return (_ERR_SQRT << 20) | i
            fv = math.sqrt(av)
            val[i] = fv
            if want_g:
                if fv == 0.0:
                    return (_ERR_DIV << 20) | i
                c1 = 0.5 / fv
                grad[i, :] = c1 * grad[a]
                if want_h:
                    ga = grad[a, 1 : 1 + n]
                    hess[i, :, :] = c1 * hess[a]
                    hess[i, :, :] -= (0.25 / (fv * av)) * np.outer(ga, ga)
        elif op == 13:  # sin
            av = val[a]
            sv = math.sin(av)
            cv = math.cos(av)
            val[i] = sv
            if want_g:
                grad[i, :] = cv * grad[a]
            if want_h:
                ga = grad[a, 1 : 1 + n]
                hess[i, :, :] = cv * hess[a]
                hess[i, :, :] -= sv * np.outer(ga, ga)
        elif op == 14:  # cos
            av = val[a]
            sv = math.sin(av)
            cv = math.cos(av)
            val[i] = cv
            if want_g:
                grad[i, :] = -sv * grad[a]
            if want_h:
                ga = grad[a, 1 : 1 + n]
                hess[i, :, :] = -sv * hess[a]
                hess[i, :, :] -= cv * np.outer(ga, ga)
        elif op == 15:  # max2: left-biased branch selection
            if val[a] >= val[b]:
                src = a
            else:
                src = b
            val[i] = val[src]
            if want_g:
                grad[i, :] = grad[src]
            if want_h:
                hess[i, :, :] = hess[src]
        else:
            raise RuntimeError(f"bad opcode {op}")
    return 0


def penalty_rhs_jac(code, consts, code_off, const_off, n, m, r,
                    gamma, log_gamma, log_cap, t, x, u, order,
                    val, grad, hess, F, J, B, Ft, xi_out):
    """Pure-Python twin of the fused penalized-field kernel.

    Same packed layout and error encoding as the compiled version; kept
    operation-for-operation identical so both backends agree bit for bit.
    """
    nf = n
    for fld in range(nf + 1 + r):
        sub_order = (1 if order >= 1 else 0) if fld < nf else (2 if order >= 1 else 1)
        status = evaluate(
            code[code_off[fld] : code_off[fld + 1]],
            consts[const_off[fld] : const_off[fld + 1]],
            n, m, t, x, u, sub_order, val, grad, hess,
        )
        if status != 0:
            return (fld << 23) | status
        last = code_off[fld + 1] - code_off[fld] - 1
        if fld < nf:
            F[fld] = val[last]
            if order >= 1:
                Ft[fld] = grad[last, 0]
                J[fld, :] = grad[last, 1 : 1 + n]
                B[fld, :] = grad[last, 1 + n : 1 + n + m]
        elif fld == nf:
            F -= grad[last, 1 : 1 + n]
            if order >= 1:
                J -= hess[last]
        else:
            i = fld - nf - 1
            v = val[last]
            w = math.exp(min(gamma * v + log_gamma, log_cap))
            xi_out[i] = w
            gx = grad[last, 1 : 1 + n]
            F -= w * gx
            if order >= 1:
                gw = math.exp(min(gamma * v + 2.0 * log_gamma, log_cap))
                J -= gw * np.outer(gx, gx)
                J -= w * hess[last]
    return 0
