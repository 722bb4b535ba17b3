"""Fused numba kernels for the PINN training loop.

These compute the same quantities as :func:`t2pinn.net.forward` and
:func:`t2pinn.net.grad_wrt_params`, but over a whole batch of time points at
once, in feature-major layout (``(C, N)`` arrays) so the inner loops run over
points and vectorize. ``tanh`` is left to numpy, whose SIMD implementation is
an order of magnitude faster than the scalar libm call numba would emit.

Flat parameter layout (length ``C*C + 4*C + 2``)::

    w1[C] | b1[C] | w2[C*C] (row-major) | b2[C] | w3[C] | b3 | rho

``tests/test_kernels.py`` pins these against the numpy reference.
"""

from __future__ import annotations

import math

from numba import njit

_JIT = dict(cache=True, nogil=True, fastmath=True, error_model="numpy", boundscheck=False)


@njit(cache=True, nogil=True)
def softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@njit(cache=True, nogil=True)
def sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@njit(**_JIT)
def layer1(theta, c, x, z1):
    n = x.shape[0]
    for j in range(c):
        w = theta[j]
        b = theta[c + j]
        for k in range(n):
            z1[j, k] = w * x[k] + b


@njit(**_JIT)
def layer2(theta, c, dxdt, a1, d1, z2, dz2):
    """Second pre-activation and its tangent; ``d1`` receives the layer-1 tangent."""
    n = a1.shape[1]
    o_w2 = 2 * c
    o_b2 = o_w2 + c * c
    for j in range(c):
        ws = theta[j] * dxdt
        for k in range(n):
            d1[j, k] = (1.0 - a1[j, k] * a1[j, k]) * ws
    for i in range(c):
        b = theta[o_b2 + i]
        for k in range(n):
            z2[i, k] = b
            dz2[i, k] = 0.0
        for j in range(c):
            w = theta[o_w2 + i * c + j]
            for k in range(n):
                z2[i, k] += w * a1[j, k]
                dz2[i, k] += w * d1[j, k]


@njit(**_JIT)
def head(theta, c, a2, dz2, val, der):
    n = a2.shape[1]
    o_w3 = 3 * c + c * c
    b3 = theta[o_w3 + c]
    for k in range(n):
        val[k] = b3
        der[k] = 0.0
    for i in range(c):
        w = theta[o_w3 + i]
        for k in range(n):
            a = a2[i, k]
            val[k] += w * a
            der[k] += w * (1.0 - a * a) * dz2[i, k]


@njit(**_JIT)
def backward(theta, c, x, dxdt, a1, d1, a2, dz2, cv, cd, grad, za, zb, ba, bd):
    """Write d(sum_k cv[k]*N(x_k) + cd[k]*dN/dt(x_k))/dtheta into ``grad[:-1]``.

    Reverse pass through the value path plus the forward-mode tangent path
    (forward-over-reverse). ``za``/``zb``/``ba``/``bd`` are (C, N) scratch.
    """
    n = a1.shape[1]
    o_b1 = c
    o_w2 = 2 * c
    o_b2 = o_w2 + c * c
    o_w3 = o_b2 + c
    o_b3 = o_w3 + c
    acc = 0.0
    for k in range(n):
        acc += cv[k]
    grad[o_b3] = acc
    for i in range(c):
        w = theta[o_w3 + i]
        gw = 0.0
        gb = 0.0
        for k in range(n):
            a = a2[i, k]
            g2 = 1.0 - a * a
            dz = dz2[i, k]
            gw += cv[k] * a + cd[k] * g2 * dz
            zak = (cv[k] * w - 2.0 * cd[k] * w * a * dz) * g2
            za[i, k] = zak
            zb[i, k] = cd[k] * w * g2
            gb += zak
        grad[o_w3 + i] = gw
        grad[o_b2 + i] = gb
    for i in range(c):
        for j in range(c):
            acc = 0.0
            for k in range(n):
                acc += za[i, k] * a1[j, k] + zb[i, k] * d1[j, k]
            grad[o_w2 + i * c + j] = acc
    for j in range(c):
        for k in range(n):
            ba[j, k] = 0.0
            bd[j, k] = 0.0
        for i in range(c):
            w = theta[o_w2 + i * c + j]
            for k in range(n):
                ba[j, k] += w * za[i, k]
                bd[j, k] += w * zb[i, k]
        ws = theta[j] * dxdt
        gw = 0.0
        gb = 0.0
        for k in range(n):
            a = a1[j, k]
            g1 = 1.0 - a * a
            bz = (ba[j, k] - 2.0 * bd[j, k] * a * ws) * g1
            gw += bz * x[k] + bd[j, k] * g1 * dxdt
            gb += bz
        grad[j] = gw
        grad[o_b1 + j] = gb


@njit(**_JIT)
def residual_coeffs(theta, t2_unit, n_colloc, signals, w_bloch, w_data, squared, val, der, cv, cd):
    """Losses at the current forward pass, plus per-point adjoint coefficients.

    Points ``[0, n_colloc)`` are collocation points, the rest are echoes in
    the order of ``signals``. Returns ``(loss_bloch, loss_data, dL/drho)``.
    """
    rho = theta[theta.shape[0] - 1]
    t2 = t2_unit * softplus(rho)
    n_echo = signals.shape[0]
    lb = 0.0
    rho_acc = 0.0
    for k in range(n_colloc):
        r = der[k] + val[k] / t2
        if squared:
            lb += r * r
            gr = 2.0 * r
        else:
            lb += abs(r)
            gr = 1.0 if r > 0.0 else (-1.0 if r < 0.0 else 0.0)
        scale = w_bloch * gr / n_colloc
        cd[k] = scale
        cv[k] = scale / t2
        rho_acc -= scale * val[k] / (t2 * t2)
    ld = 0.0
    for i in range(n_echo):
        k = n_colloc + i
        e = signals[i] - val[k]
        if squared:
            ld += e * e
            ge = 2.0 * e
        else:
            ld += abs(e)
            ge = 1.0 if e > 0.0 else (-1.0 if e < 0.0 else 0.0)
        cv[k] = -w_data * ge / n_echo
        cd[k] = 0.0
    return lb / n_colloc, ld / n_echo, rho_acc * t2_unit * sigmoid(rho)


@njit(cache=True, nogil=True)
def adam_step(theta, grad, m, v, step, lr, beta1, beta2, eps):
    """One Adam update in place; ``step`` counts from 1."""
    bc1 = 1.0 - beta1**step
    bc2 = 1.0 / (1.0 - beta2**step)
    size = lr / bc1
    for q in range(theta.shape[0]):
        g = grad[q]
        m[q] = beta1 * m[q] + (1.0 - beta1) * g
        v[q] = beta2 * v[q] + (1.0 - beta2) * g * g
        theta[q] -= size * m[q] / (math.sqrt(v[q] * bc2) + eps)
