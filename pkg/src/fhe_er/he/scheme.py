"""Leveled approximate (CKKS-style) homomorphic encryption over RNS.

Ciphertexts and keys live in NTT (evaluation) form throughout; only
rescaling, key switching and decryption leave it.  Every object is immutable
and every operation returns a fresh object, so concurrent use needs no locks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels as K
from .errors import DepthError, EncodingError, IncompatibleError, MissingKeyError
from .params import Context, HeParams, context

ERROR_STD = 3.2
SCALE_RTOL = 2.0 ** -30


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Plaintext:
    poly: np.ndarray          # (level+1, N) NTT form
    level: int
    scale: float
    slot_count: int
    params: HeParams


@dataclass(frozen=True, eq=False)
class CipherVector:
    """Packed ciphertext ``(c0, c1)`` decrypting as ``c0 + c1*s``."""

    c0: np.ndarray
    c1: np.ndarray
    level: int
    scale: float
    slot_count: int
    params: HeParams

    @property
    def body(self) -> tuple[np.ndarray, np.ndarray]:
        return self.c0, self.c1

    def replace(self, **kw) -> "CipherVector":
        d = dict(c0=self.c0, c1=self.c1, level=self.level, scale=self.scale,
                 slot_count=self.slot_count, params=self.params)
        d.update(kw)
        return CipherVector(**d)


@dataclass(frozen=True, eq=False)
class KeySet:
    """Key material.  ``secret_key`` is None on evaluation-only copies."""

    params: HeParams
    secret_key: np.ndarray | None          # (k_all, N) NTT form of the ternary secret
    public_key: tuple[np.ndarray, np.ndarray]
    relin_key: tuple[np.ndarray, np.ndarray] | None
    rotation_keys: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)

    def public(self) -> "KeySet":
        """Copy without the secret, safe to hand to the matching server."""
        return KeySet(self.params, None, self.public_key, self.relin_key, dict(self.rotation_keys))

    def rotation_steps(self) -> list[int]:
        ctx = context(self.params)
        slots = self.params.slots
        steps = []
        # map galois elements back to signed steps
        inv = {}
        g = 1
        for s in range(slots):
            inv[g] = s
            g = g * 5 % (2 * ctx.n)
        for gal in self.rotation_keys:
            s = inv[gal]
            steps.append(s if s <= slots // 2 else s - slots)
        return sorted(steps)


# ---------------------------------------------------------------------------
# low-level ring helpers


def _ntt(ctx: Context, a: np.ndarray, lo: int, hi: int) -> np.ndarray:
    K.ntt_forward(a, ctx.moduli[lo:hi], ctx.psi[lo:hi], ctx.psi_f[lo:hi])
    return a


def _intt(ctx: Context, a: np.ndarray, lo: int, hi: int) -> np.ndarray:
    K.ntt_inverse(a, ctx.moduli[lo:hi], ctx.ipsi[lo:hi], ctx.ipsi_f[lo:hi],
                  ctx.ninv[lo:hi], ctx.ninv_f[lo:hi])
    return a


def _small_to_rns(ctx: Context, x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Signed small integer coefficients -> NTT residues for moduli[lo:hi]."""
    mods = ctx.moduli[lo:hi, None]
    out = np.ascontiguousarray(x[None, :] % mods)
    return _ntt(ctx, out, lo, hi)


def _const_residues(ctx: Context, value: int, lo: int, hi: int):
    c = np.array([value % p for p in ctx.all_moduli[lo:hi]], dtype=np.int64)
    return c, c.astype(np.float64) / ctx.moduli[lo:hi].astype(np.float64)


def _mul(ctx, a, b, lo, hi):
    return K.mul(a, b, ctx.moduli[lo:hi], ctx.pinv[lo:hi])


def _gaussian(rng: np.random.Generator, n: int) -> np.ndarray:
    return np.rint(rng.normal(0.0, ERROR_STD, n)).astype(np.int64)


def _ternary(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.integers(-1, 2, n, dtype=np.int64)


def _uniform(ctx: Context, rng: np.random.Generator, lo: int, hi: int) -> np.ndarray:
    out = np.empty((hi - lo, ctx.n), dtype=np.int64)
    for r, p in enumerate(ctx.all_moduli[lo:hi]):
        out[r] = rng.integers(0, p, ctx.n, dtype=np.int64)
    return out


def _to_float_coeffs(ctx: Context, x: np.ndarray, level: int) -> np.ndarray:
    """Centered integer value of NTT-form residues, as float64 (CRT over two primes)."""
    use = min(level, 1) + 1
    c = _intt(ctx, np.array(x[:use], copy=True), 0, use)
    q0 = ctx.all_moduli[0]
    r0 = c[0]
    if use == 1:
        v = r0.astype(np.float64)
        v[r0 > q0 // 2] -= q0
        return v
    q1 = ctx.all_moduli[1]
    diff = ((c[1] - r0) % q1)[None, :]
    inv = pow(q0, -1, q1)
    k = K.mul_scalar(np.ascontiguousarray(diff), np.array([inv], dtype=np.int64),
                     np.array([inv / q1]), np.array([q1], dtype=np.int64))[0]
    kf = k.astype(np.float64)
    kf[k > q1 // 2] -= q1
    return r0.astype(np.float64) + float(q0) * kf


def _embed_inverse(ctx: Context, values) -> np.ndarray:
    """Slot values -> real polynomial coefficients (unscaled)."""
    n = ctx.n
    z = np.zeros(n // 2, dtype=np.complex128)
    vals = np.asarray(values)
    z[: vals.shape[0]] = vals
    v = np.zeros(n, dtype=np.complex128)
    v[ctx.slot_index] = z
    v[ctx.conj_index] = np.conj(z)
    return (np.fft.fft(v) / n * np.conj(ctx.zeta)).real


def _embed(ctx: Context, coeffs: np.ndarray) -> np.ndarray:
    """Real polynomial coefficients -> all N/2 complex slot values."""
    v = np.fft.ifft(coeffs * ctx.zeta) * ctx.n
    return v[ctx.slot_index]


# ---------------------------------------------------------------------------
# keys


def default_rotation_steps(params: HeParams) -> list[int]:
    steps = []
    k = 1
    while k <= params.ring_degree // 4:
        steps += [k, -k]
        k *= 2
    return steps


def _switching_key(ctx: Context, rng, s_all: np.ndarray, target: np.ndarray):
    """Key switching from ``target`` to ``s`` over the full extended basis."""
    L1 = len(ctx.chain)
    kall = len(ctx.all_moduli)
    a = _uniform(ctx, rng, 0, kall)
    e = _small_to_rns(ctx, _gaussian(rng, ctx.n), 0, kall)
    b = K.sub(e, _mul(ctx, a, s_all, 0, kall), ctx.moduli)
    big_p = math.prod(ctx.special)
    pc, pcf = _const_residues(ctx, big_p, 0, L1)
    ps = K.mul_scalar(np.ascontiguousarray(target[:L1]), pc, pcf, ctx.moduli[:L1])
    b[:L1] = K.add(b[:L1], ps, ctx.moduli[:L1])
    return _frozen(b), _frozen(a)


def keygen(params: HeParams, seed: int, rotation_steps=None) -> KeySet:
    """Deterministic key generation from a 64-bit seed.

    Rotation keys default to every signed power-of-two step up to N/4.
    """
    if not isinstance(params, HeParams):
        raise TypeError("params must be HeParams")
    ctx = context(params)
    rng = np.random.default_rng(np.uint64(seed & 0xFFFF_FFFF_FFFF_FFFF))
    n = ctx.n
    kall = len(ctx.all_moduli)
    L1 = len(ctx.chain)
    s = _ternary(rng, n)
    s_all = _small_to_rns(ctx, s, 0, kall)
    a = _uniform(ctx, rng, 0, L1)
    e = _small_to_rns(ctx, _gaussian(rng, n), 0, L1)
    b = K.sub(e, _mul(ctx, a, s_all[:L1], 0, L1), ctx.moduli[:L1])
    pk = (_frozen(b), _frozen(a))
    s2 = _mul(ctx, s_all, s_all, 0, kall)
    rlk = _switching_key(ctx, rng, s_all, s2) if ctx.special else None
    rot = {}
    if ctx.special:
        steps = default_rotation_steps(params) if rotation_steps is None else rotation_steps
        for step in steps:
            gal = ctx.galois_for_step(step)
            if gal == 1 or gal in rot:
                continue
            perm = ctx.galois_permutation(gal)
            rot[gal] = _switching_key(ctx, rng, s_all, np.ascontiguousarray(s_all[:, perm]))
    return KeySet(params, _frozen(s_all), pk, rlk, rot)


# ---------------------------------------------------------------------------
# encoding


def _check_level(params: HeParams, level):
    if level is None:
        return params.levels
    if not 0 <= level <= params.levels:
        raise DepthError(f"level {level} outside [0, {params.levels}]")
    return level


def encode(values, scale: float, params: HeParams, level: int | None = None) -> Plaintext:
    """Encode up to N/2 reals into a plaintext polynomial at ``scale``."""
    ctx = context(params)
    level = _check_level(params, level)
    vals = np.asarray(values, dtype=np.float64).ravel()
    if vals.shape[0] > params.slots:
        raise EncodingError(f"{vals.shape[0]} values exceed the {params.slots} available slots")
    if not np.all(np.isfinite(vals)):
        raise EncodingError("values must be finite")
    coeffs = _embed_inverse(ctx, vals) * scale
    limit = float(min(2 ** 62, math.prod(ctx.chain[: level + 1]) // 2))
    if vals.size and np.max(np.abs(coeffs)) >= limit:
        raise EncodingError("scaled values overflow the coefficient modulus")
    ints = np.rint(coeffs).astype(np.int64)
    poly = _small_to_rns(ctx, ints, 0, level + 1)
    return Plaintext(_frozen(poly), level, float(scale), max(vals.shape[0], 1), params)


def decode(pt: Plaintext) -> np.ndarray:
    ctx = context(pt.params)
    coeffs = _to_float_coeffs(ctx, pt.poly, pt.level)
    return _embed(ctx, coeffs).real[: pt.slot_count] / pt.scale


# ---------------------------------------------------------------------------
# encryption


def encrypt(values, keys: KeySet, level: int | None = None, rng=None,
            slot_count: int | None = None) -> CipherVector:
    """Public-key encryption of a real vector (or a :class:`Plaintext`)."""
    params = keys.params
    ctx = context(params)
    if isinstance(values, Plaintext):
        pt = values
        if pt.params != params:
            raise IncompatibleError("plaintext was encoded under different parameters")
    else:
        level = _check_level(params, level)
        pt = encode(values, ctx.scale_ladder[level], params, level)
    level = pt.level
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    hi = level + 1
    v = _small_to_rns(ctx, _ternary(rng, ctx.n), 0, hi)
    e0 = _small_to_rns(ctx, _gaussian(rng, ctx.n), 0, hi)
    e1 = _small_to_rns(ctx, _gaussian(rng, ctx.n), 0, hi)
    b, a = keys.public_key
    mods = ctx.moduli[:hi]
    c0 = K.add(K.add(_mul(ctx, v, b[:hi], 0, hi), e0, mods), pt.poly, mods)
    c1 = K.add(_mul(ctx, v, a[:hi], 0, hi), e1, mods)
    sc = pt.slot_count if slot_count is None else slot_count
    return CipherVector(_frozen(c0), _frozen(c1), level, pt.scale, sc, params)


def decrypt_plaintext(ct: CipherVector, keys: KeySet) -> Plaintext:
    if keys.secret_key is None:
        raise MissingKeyError("decryption needs the secret key")
    _same_params(ct.params, keys.params)
    ctx = context(ct.params)
    hi = ct.level + 1
    m = K.add(ct.c0, _mul(ctx, ct.c1, keys.secret_key[:hi], 0, hi), ctx.moduli[:hi])
    return Plaintext(m, ct.level, ct.scale, ct.slot_count, ct.params)


def decrypt(ct: CipherVector, keys: KeySet, n: int | None = None,
            complex_slots: bool = False) -> np.ndarray:
    """Decrypt and decode; returns the first ``n`` slots (default ``slot_count``).

    Slots are complex underneath; noise leaves small imaginary parts that
    multiplication mixes back into the real parts.  ``complex_slots`` keeps them.
    """
    if keys.secret_key is None:
        raise MissingKeyError("decryption needs the secret key")
    _same_params(ct.params, keys.params)
    ctx = context(ct.params)
    use = min(ct.level, 1) + 1
    m = K.add(np.ascontiguousarray(ct.c0[:use]),
              _mul(ctx, np.ascontiguousarray(ct.c1[:use]), keys.secret_key[:use], 0, use),
              ctx.moduli[:use])
    coeffs = _to_float_coeffs(ctx, m, ct.level)
    width = ct.slot_count if n is None else n
    z = _embed(ctx, coeffs)[:width] / ct.scale
    return z if complex_slots else z.real


# ---------------------------------------------------------------------------
# homomorphic operations


def _same_params(p: HeParams, q: HeParams):
    if p is not q and p != q:
        raise IncompatibleError("operands use different parameter sets")


def _align(a: CipherVector, b: CipherVector):
    _same_params(a.params, b.params)
    if a.level > b.level:
        a = drop_level(a, b.level)
    elif b.level > a.level:
        b = drop_level(b, a.level)
    if abs(a.scale / b.scale - 1.0) > SCALE_RTOL:
        raise IncompatibleError(f"scale mismatch: {a.scale:.6g} vs {b.scale:.6g}")
    return a, b


def add(a: CipherVector, b: CipherVector) -> CipherVector:
    a, b = _align(a, b)
    ctx = context(a.params)
    mods = ctx.moduli[: a.level + 1]
    return a.replace(c0=_frozen(K.add(a.c0, b.c0, mods)), c1=_frozen(K.add(a.c1, b.c1, mods)),
                     slot_count=max(a.slot_count, b.slot_count))


def sub(a: CipherVector, b: CipherVector) -> CipherVector:
    a, b = _align(a, b)
    ctx = context(a.params)
    mods = ctx.moduli[: a.level + 1]
    return a.replace(c0=_frozen(K.sub(a.c0, b.c0, mods)), c1=_frozen(K.sub(a.c1, b.c1, mods)),
                     slot_count=max(a.slot_count, b.slot_count))


def negate(a: CipherVector) -> CipherVector:
    mods = context(a.params).moduli[: a.level + 1]
    return a.replace(c0=_frozen(K.neg(a.c0, mods)), c1=_frozen(K.neg(a.c1, mods)))


def add_const(a: CipherVector, value) -> CipherVector:
    """Add a real scalar (broadcast to every slot) or a slot vector."""
    ctx = context(a.params)
    hi = a.level + 1
    if np.ndim(value) == 0:
        c, _ = _const_residues(ctx, int(round(float(value) * a.scale)), 0, hi)
        poly = np.ascontiguousarray(np.broadcast_to(c[:, None], (hi, ctx.n)))
    else:
        poly = encode(value, a.scale, a.params, a.level).poly
    return a.replace(c0=_frozen(K.add(a.c0, poly, ctx.moduli[:hi])))


def mul_int(a: CipherVector, k: int) -> CipherVector:
    """Multiply by a small integer; no level is consumed."""
    ctx = context(a.params)
    hi = a.level + 1
    c, cf = _const_residues(ctx, int(k), 0, hi)
    mods = ctx.moduli[:hi]
    return a.replace(c0=_frozen(K.mul_scalar(a.c0, c, cf, mods)),
                     c1=_frozen(K.mul_scalar(a.c1, c, cf, mods)))


def _require_level(a: CipherVector, what: str, need: int = 1):
    if a.level < need:
        raise DepthError(f"{what} needs level >= {need}, ciphertext is at level {a.level}",
                         required=need, available=a.level)


def _rescale_poly(ctx: Context, x: np.ndarray, level: int) -> np.ndarray:
    last = np.array(x[level: level + 1], copy=True)
    _intt(ctx, last, level, level + 1)
    lifted = K.reduce_centered(last[0], ctx.moduli[level], ctx.moduli[:level])
    _ntt(ctx, lifted, 0, level)
    qinv, qinvf = _qinv(ctx, level)
    return K.sub_scaled(np.ascontiguousarray(x[:level]), lifted, qinv, qinvf, ctx.moduli[:level])


def _qinv(ctx: Context, level: int):
    key = ("qinv", level)
    hit = ctx._conv_cache.get(key)
    if hit is None:
        q = ctx.all_moduli[level]
        c = np.array([pow(q, -1, p) for p in ctx.all_moduli[:level]], dtype=np.int64)
        hit = (c, c.astype(np.float64) / ctx.moduli[:level].astype(np.float64))
        ctx._conv_cache[key] = hit
    return hit


def _rescale(ctx: Context, c0, c1, level: int, scale: float, slot_count, params) -> CipherVector:
    q = ctx.all_moduli[level]
    return CipherVector(_frozen(_rescale_poly(ctx, c0, level)), _frozen(_rescale_poly(ctx, c1, level)),
                        level - 1, scale / q, slot_count, params)


def const_plaintext(params: HeParams, level: int, values) -> Plaintext:
    """Pre-encode a slot vector for :func:`mul_const` on level-``level`` ciphertexts.

    The result is only valid for operands at that level's nominal scale, which
    is where every ciphertext produced by this module sits.
    """
    ctx = context(params)
    if level < 1:
        raise DepthError("constant multiplication needs level >= 1", required=1, available=level)
    return encode(values, ctx.scale_ladder[level], params, level)


def _const_product(ctx: Context, a: CipherVector, value):
    """Unrescaled ``a * value`` and the scale of the encoded constant."""
    lv = a.level
    hi = lv + 1
    mods = ctx.moduli[:hi]
    if isinstance(value, Plaintext):
        if value.level != lv:
            raise IncompatibleError(f"constant encoded for level {value.level}, operand at {lv}")
        if abs(value.scale / a.scale - 1.0) > SCALE_RTOL:
            raise IncompatibleError("constant was encoded for a different operand scale")
        return _mul(ctx, a.c0, value.poly, 0, hi), _mul(ctx, a.c1, value.poly, 0, hi), value.scale
    cscale = ctx.scale_ladder[lv - 1] * ctx.all_moduli[lv] / a.scale
    if np.ndim(value) == 0:
        c, cf = _const_residues(ctx, int(round(float(value) * cscale)), 0, hi)
        return K.mul_scalar(a.c0, c, cf, mods), K.mul_scalar(a.c1, c, cf, mods), cscale
    poly = encode(value, cscale, a.params, lv).poly
    return _mul(ctx, a.c0, poly, 0, hi), _mul(ctx, a.c1, poly, 0, hi), cscale


def mul_const(a: CipherVector, value) -> CipherVector:
    """Multiply by a real scalar, slot vector or pre-encoded constant, then rescale.

    Consumes one level.  The constant is encoded so the result lands exactly on
    the next level's nominal scale.
    """
    _require_level(a, "constant multiplication")
    ctx = context(a.params)
    c0, c1, cscale = _const_product(ctx, a, value)
    out = _rescale(ctx, c0, c1, a.level, a.scale * cscale, a.slot_count, a.params)
    return out.replace(scale=ctx.scale_ladder[a.level - 1])


def linear_combination(terms) -> CipherVector:
    """``sum_i a_i * c_i`` for ciphertexts ``a_i`` and constants ``c_i``, one rescale.

    All ciphertexts must share a level and scale.
    """
    terms = list(terms)
    if not terms:
        raise ValueError("empty linear combination")
    a0 = terms[0][0]
    _require_level(a0, "constant multiplication")
    ctx = context(a0.params)
    mods = ctx.moduli[: a0.level + 1]
    acc0 = acc1 = None
    width = 0
    for a, c in terms:
        _same_params(a.params, a0.params)
        if a.level != a0.level or abs(a.scale / a0.scale - 1.0) > SCALE_RTOL:
            raise IncompatibleError("linear combination operands must share level and scale")
        p0, p1, cscale = _const_product(ctx, a, c)
        if acc0 is None:
            acc0, acc1, scale = p0, p1, a.scale * cscale
        else:
            acc0 = K.add(acc0, p0, mods)
            acc1 = K.add(acc1, p1, mods)
        width = max(width, a.slot_count)
    out = _rescale(ctx, acc0, acc1, a0.level, scale, width, a0.params)
    return out.replace(scale=ctx.scale_ladder[a0.level - 1])


def drop_level(a: CipherVector, target: int) -> CipherVector:
    """Bring ``a`` down to ``target`` level at that level's nominal scale."""
    if target == a.level:
        return a
    if target > a.level or target < 0:
        raise DepthError(f"cannot move from level {a.level} to {target}",
                         required=target, available=a.level)
    ctx = context(a.params)
    hi = target + 2
    a = a.replace(c0=np.ascontiguousarray(a.c0[:hi]), c1=np.ascontiguousarray(a.c1[:hi]),
                  level=target + 1)
    return mul_const(a, 1.0)


def _keyswitch(ctx: Context, d: np.ndarray, key, level: int):
    """Switch a single polynomial ``d`` (NTT form, level basis) under ``key``."""
    kq = level + 1
    L1 = len(ctx.chain)
    kall = len(ctx.all_moduli)
    qsrc = tuple(range(kq))
    pidx = tuple(range(L1, kall))
    d_coef = _intt(ctx, np.array(d, copy=True), 0, kq)
    d_p = K.basis_convert(d_coef, *ctx.conversion(qsrc, pidx))
    _ntt(ctx, d_p, L1, kall)
    kb, ka = key
    out = []
    pmods, ppinv = ctx.moduli[L1:], ctx.pinv[L1:]
    qmods, qpinv = ctx.moduli[:kq], ctx.pinv[:kq]
    pinv_c, pinv_f = _pinv(ctx, level)
    for k in (kb, ka):
        tq = K.mul(d, k[:kq], qmods, qpinv)
        tp = K.mul(d_p, k[L1:], pmods, ppinv)
        _intt(ctx, tp, L1, kall)
        corr = K.basis_convert(tp, *ctx.conversion(pidx, qsrc))
        _ntt(ctx, corr, 0, kq)
        out.append(K.sub_scaled(tq, corr, pinv_c, pinv_f, qmods))
    return out


def _pinv(ctx: Context, level: int):
    key = ("pinv", level)
    hit = ctx._conv_cache.get(key)
    if hit is None:
        big_p = math.prod(ctx.special)
        c = np.array([pow(big_p, -1, q) for q in ctx.all_moduli[: level + 1]], dtype=np.int64)
        hit = (c, c.astype(np.float64) / ctx.moduli[: level + 1].astype(np.float64))
        ctx._conv_cache[key] = hit
    return hit


def _tensor(ctx, a: CipherVector, b: CipherVector):
    hi = a.level + 1
    mods, pinv = ctx.moduli[:hi], ctx.pinv[:hi]
    d0 = K.mul(a.c0, b.c0, mods, pinv)
    d2 = K.mul(a.c1, b.c1, mods, pinv)
    if a is b:
        d1 = K.mul(a.c0, b.c1, mods, pinv)
        d1 = K.add(d1, d1, mods)
    else:
        d1 = K.mul(a.c0, b.c1, mods, pinv)
        K.mul_add(d1, a.c1, b.c0, mods, pinv)
    return d0, d1, d2


def mul_relin_rescale(a: CipherVector, b: CipherVector, keys: KeySet) -> CipherVector:
    """Slot-wise product with relinearization and one rescale."""
    a, b = _align(a, b) if a is not b else (a, a)
    _require_level(a, "multiplication")
    if keys.relin_key is None:
        raise MissingKeyError("relinearization key missing")
    _same_params(a.params, keys.params)
    ctx = context(a.params)
    d0, d1, d2 = _tensor(ctx, a, b)
    k0, k1 = _keyswitch(ctx, d2, keys.relin_key, a.level)
    mods = ctx.moduli[: a.level + 1]
    c0 = K.add(d0, k0, mods)
    c1 = K.add(d1, k1, mods)
    return _rescale(ctx, c0, c1, a.level, a.scale * b.scale, max(a.slot_count, b.slot_count), a.params)


def square(a: CipherVector, keys: KeySet) -> CipherVector:
    return mul_relin_rescale(a, a, keys)


def relinearize_sum(pairs, keys: KeySet) -> CipherVector:
    """``sum_i a_i * b_i`` with a single relinearization and rescale."""
    pairs = list(pairs)
    a0, b0 = _align(*pairs[0])
    _require_level(a0, "multiplication")
    ctx = context(a0.params)
    acc = list(_tensor(ctx, a0, b0))
    mods = ctx.moduli[: a0.level + 1]
    for a, b in pairs[1:]:
        a, b = _align(a, b)
        if a.level != a0.level:
            raise IncompatibleError("relinearize_sum operands must share a level")
        for i, t in enumerate(_tensor(ctx, a, b)):
            acc[i] = K.add(acc[i], t, mods)
    k0, k1 = _keyswitch(ctx, acc[2], keys.relin_key, a0.level)
    c0 = K.add(acc[0], k0, mods)
    c1 = K.add(acc[1], k1, mods)
    return _rescale(ctx, c0, c1, a0.level, a0.scale * b0.scale, a0.slot_count, a0.params)


def _apply_galois(a: CipherVector, gal: int, key) -> CipherVector:
    ctx = context(a.params)
    perm = ctx.galois_permutation(gal)
    c0 = np.ascontiguousarray(a.c0[:, perm])
    c1 = np.ascontiguousarray(a.c1[:, perm])
    k0, k1 = _keyswitch(ctx, c1, key, a.level)
    mods = ctx.moduli[: a.level + 1]
    return a.replace(c0=_frozen(K.add(c0, k0, mods)), c1=_frozen(k1))


def _decompose_step(step: int, slots: int, available: set[int]) -> list[int]:
    """Split a rotation into steps that have keys (signed binary, then plain binary)."""
    step %= slots
    if step == 0:
        return []
    if step in available:
        return [step]
    if step - slots in available:
        return [step - slots]
    for cand in (step, step - slots):
        parts = []
        r = cand
        sign = 1 if r > 0 else -1
        r = abs(r)
        bit = 1
        while r:
            if r & 1:
                parts.append(sign * bit)
            r >>= 1
            bit <<= 1
        if all(p in available for p in parts):
            return parts
    return None


def rotate_slots(a: CipherVector, steps: int, keys: KeySet) -> CipherVector:
    """Native cyclic left rotation over all N/2 slots."""
    _same_params(a.params, keys.params)
    ctx = context(a.params)
    slots = a.params.slots
    if steps % slots == 0:
        return a
    gal = ctx.galois_for_step(steps)
    if gal in keys.rotation_keys:
        return _apply_galois(a, gal, keys.rotation_keys[gal])
    avail = {s for s in keys.rotation_steps()}
    parts = _decompose_step(steps, slots, avail)
    if parts is None:
        raise MissingKeyError(f"no rotation key (or decomposition) for step {steps}")
    for p in parts:
        a = _apply_galois(a, ctx.galois_for_step(p), keys.rotation_keys[ctx.galois_for_step(p)])
    return a


def rotate(a: CipherVector, steps: int, keys: KeySet) -> CipherVector:
    """Cyclic left rotation within the first ``slot_count`` slots.

    A full-width vector rotates natively.  A narrower window needs two native
    rotations and a masking multiply, so it consumes one level.
    """
    slots = a.params.slots
    w = a.slot_count
    if w >= slots:
        return rotate_slots(a, steps, keys)
    s = steps % w
    if s == 0:
        return a
    _require_level(a, "windowed rotation")
    head = rotate_slots(a, s, keys)
    tail = rotate_slots(a, s - w, keys)
    m_head = np.zeros(w)
    m_head[: w - s] = 1.0
    return add(mul_const(head, m_head), mul_const(tail, 1.0 - m_head)).replace(slot_count=w)


def inner_sum(a: CipherVector, width: int, keys: KeySet) -> CipherVector:
    """Fold the first ``width`` slots into slot 0 with log2(width) rotate-and-adds."""
    if width < 1 or width & (width - 1):
        raise ValueError(f"width must be a power of two, got {width}")
    if width > max(a.slot_count, 1) and width > 1:
        raise ValueError(f"width {width} exceeds slot_count {a.slot_count}")
    k = 1
    while k < width:
        a = add(a, rotate_slots(a, k, keys))
        k *= 2
    return a
