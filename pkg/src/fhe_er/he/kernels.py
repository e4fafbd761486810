"""Compiled modular arithmetic for RNS polynomials.

Residues are stored as int64 in ``[0, p)`` with every prime ``p < 2**50``.
Modular products use a floating-point quotient estimate: for ``a, b < 2**50``
the estimate ``floor(a * b / p)`` computed in double precision is off by at
most one, and the remainder is recovered exactly from the wrapped 64-bit
product.  All kernels release the GIL so batch matching can use threads.
"""

import numpy as np
from numba import njit

MAX_PRIME_BITS = 50


@njit(inline="always")
def _mulmod_pre(a, b, bf, p):
    # bf = b / p precomputed
    q = np.int64(np.float64(a) * bf)
    r = a * b - q * p
    if r < 0:
        r += p
    elif r >= p:
        r -= p
    return r


@njit(inline="always")
def _mulmod(a, b, p, pinv):
    q = np.int64(np.float64(a) * np.float64(b) * pinv)
    r = a * b - q * p
    if r < 0:
        r += p
    elif r >= p:
        r -= p
    return r


@njit(inline="always")
def _ct_butterfly(lo, hi, j, k, s, sf, p):
    u = lo[j]
    b = hi[k]
    q = np.int64(np.float64(b) * sf)
    v = b * s - q * p
    v = v + p if v < 0 else v
    v = v - p if v >= p else v
    x = u + v
    y = u - v
    lo[j] = x - p if x >= p else x
    hi[k] = y + p if y < 0 else y


@njit(inline="always")
def _gs_butterfly(lo, hi, j, k, s, sf, p):
    u = lo[j]
    v = hi[k]
    x = u + v
    y = u - v
    y = y + p if y < 0 else y
    q = np.int64(np.float64(y) * sf)
    z = y * s - q * p
    z = z + p if z < 0 else z
    lo[j] = x - p if x >= p else x
    hi[k] = z - p if z >= p else z


# Stages with long runs go through slices so the inner loop vectorizes; the
# last few short stages index the row directly.
_SLICE_MIN = 16


@njit(nogil=True, cache=True, error_model="numpy")
def ntt_forward(a, moduli, psi, psi_f):
    """In-place negacyclic NTT of each row of ``a`` (Cooley-Tukey, bit-reversed output)."""
    k, n = a.shape
    for r in range(k):
        p = moduli[r]
        row = a[r]
        w = psi[r]
        wf = psi_f[r]
        t = n
        m = 1
        while m < n:
            t >>= 1
            if t >= _SLICE_MIN:
                for i in range(m):
                    j1 = 2 * i * t
                    s = w[m + i]
                    sf = wf[m + i]
                    lo = row[j1:j1 + t]
                    hi = row[j1 + t:j1 + 2 * t]
                    for j in range(t):
                        _ct_butterfly(lo, hi, j, j, s, sf, p)
            else:
                for i in range(m):
                    j1 = 2 * i * t
                    s = w[m + i]
                    sf = wf[m + i]
                    for j in range(j1, j1 + t):
                        _ct_butterfly(row, row, j, j + t, s, sf, p)
            m <<= 1


@njit(nogil=True, cache=True, error_model="numpy")
def ntt_inverse(a, moduli, ipsi, ipsi_f, ninv, ninv_f):
    """In-place inverse of :func:`ntt_forward` (Gentleman-Sande), scaled by 1/n."""
    k, n = a.shape
    for r in range(k):
        p = moduli[r]
        row = a[r]
        w = ipsi[r]
        wf = ipsi_f[r]
        t = 1
        m = n
        while m > 1:
            h = m >> 1
            if t >= _SLICE_MIN:
                for i in range(h):
                    j1 = 2 * i * t
                    s = w[h + i]
                    sf = wf[h + i]
                    lo = row[j1:j1 + t]
                    hi = row[j1 + t:j1 + 2 * t]
                    for j in range(t):
                        _gs_butterfly(lo, hi, j, j, s, sf, p)
            else:
                for i in range(h):
                    j1 = 2 * i * t
                    s = w[h + i]
                    sf = wf[h + i]
                    for j in range(j1, j1 + t):
                        _gs_butterfly(row, row, j, j + t, s, sf, p)
            t <<= 1
            m = h
        c = ninv[r]
        cf = ninv_f[r]
        for j in range(n):
            row[j] = _mulmod_pre(row[j], c, cf, p)


@njit(nogil=True, cache=True, error_model="numpy")
def mul(a, b, moduli, pinv):
    """Elementwise product of two residue arrays of shape (k, n)."""
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        pi = pinv[r]
        for j in range(n):
            out[r, j] = _mulmod(a[r, j], b[r, j], p, pi)
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def mul_add(acc, a, b, moduli, pinv):
    """``acc += a * b`` elementwise, in place."""
    k, n = a.shape
    for r in range(k):
        p = moduli[r]
        pi = pinv[r]
        for j in range(n):
            x = acc[r, j] + _mulmod(a[r, j], b[r, j], p, pi)
            if x >= p:
                x -= p
            acc[r, j] = x


@njit(nogil=True, cache=True, error_model="numpy")
def mul_scalar(a, c, cf, moduli):
    """Multiply row ``r`` of ``a`` by the constant ``c[r]`` (``cf[r] = c[r]/p_r``)."""
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        s = c[r]
        sf = cf[r]
        for j in range(n):
            out[r, j] = _mulmod_pre(a[r, j], s, sf, p)
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def add(a, b, moduli):
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        for j in range(n):
            x = a[r, j] + b[r, j]
            if x >= p:
                x -= p
            out[r, j] = x
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def sub(a, b, moduli):
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        for j in range(n):
            x = a[r, j] - b[r, j]
            if x < 0:
                x += p
            out[r, j] = x
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def neg(a, moduli):
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        for j in range(n):
            x = a[r, j]
            out[r, j] = p - x if x != 0 else 0
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def sub_scaled(a, b, c, cf, moduli):
    """``(a - b) * c[r]`` per row; the rescale and mod-down step."""
    k, n = a.shape
    out = np.empty_like(a)
    for r in range(k):
        p = moduli[r]
        s = c[r]
        sf = cf[r]
        for j in range(n):
            x = a[r, j] - b[r, j]
            if x < 0:
                x += p
            out[r, j] = _mulmod_pre(x, s, sf, p)
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def basis_convert(x, in_mod, hat_inv, hat_inv_f, out_mod, hat, hat_f):
    """Fast (approximate) base conversion of coefficient-form residues.

    Returns ``sum_i [x_i * hat_inv_i]_{b_i} * hat_ij mod c_j``, which equals the
    input value plus a small multiple ``u * B`` with ``0 <= u < len(in_mod)``.
    """
    ki, n = x.shape
    ko = out_mod.shape[0]
    y = np.empty((ki, n), dtype=np.int64)
    for i in range(ki):
        p = in_mod[i]
        c = hat_inv[i]
        cf = hat_inv_f[i]
        xi = x[i]
        yi = y[i]
        for j in range(n):
            a = xi[j]
            q = np.int64(np.float64(a) * cf)
            r = a * c - q * p
            r = r + p if r < 0 else r
            yi[j] = r - p if r >= p else r
    out = np.zeros((ko, n), dtype=np.int64)
    for o in range(ko):
        cm = out_mod[o]
        cinv = 1.0 / cm
        acc = out[o]
        for i in range(ki):
            c = hat[i, o]
            cf = hat_f[i, o]
            yi = y[i]
            for j in range(n):
                a = yi[j]
                q = np.int64(np.float64(a) * cf)
                r = a * c - q * cm
                r = r + cm if r < 0 else r
                acc[j] += r - cm if r >= cm else r
        # acc < ki * 2**50; quotient estimate is off by a few at most
        for j in range(n):
            v = acc[j]
            v -= np.int64(np.float64(v) * cinv) * cm
            while v < 0:
                v += cm
            while v >= cm:
                v -= cm
            acc[j] = v
    return out


@njit(nogil=True, cache=True, error_model="numpy")
def reduce_centered(x, p_from, moduli):
    """Map a residue row mod ``p_from`` (coefficient form) to every modulus, centered lift."""
    n = x.shape[0]
    k = moduli.shape[0]
    out = np.empty((k, n), dtype=np.int64)
    half = p_from >> 1
    for j in range(n):
        v = x[j]
        if v > half:
            v -= p_from
        for r in range(k):
            q = moduli[r]
            w = v % q
            if w < 0:
                w += q
            out[r, j] = w
    return out
