"""Scheme parameters, prime generation and precomputed ring tables."""

from __future__ import annotations

import functools
import hashlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .kernels import MAX_PRIME_BITS


class ParameterError(ValueError):
    """Invalid or inconsistent scheme parameters."""


_MR_BASES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41)


def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin, exact for n < 3.3e24."""
    if n < 2:
        return False
    for b in _MR_BASES:
        if n % b == 0:
            return n == b
    d, s = n - 1, 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for a in _MR_BASES:
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def ntt_primes(ring_degree: int, bits: int, count: int, *, above: bool = False,
               exclude: tuple[int, ...] = ()) -> list[int]:
    """``count`` primes congruent to 1 mod 2N, walking away from ``2**bits``.

    With ``above=True`` the primes are the smallest ones greater than
    ``2**bits``; otherwise the largest ones below it.
    """
    step = 2 * ring_degree
    out = []
    if above:
        c = (1 << bits) + 1
    else:
        c = (1 << bits) - step + 1
    while len(out) < count:
        if c <= step or c.bit_length() > MAX_PRIME_BITS:
            raise ParameterError(f"ran out of {bits}-bit NTT primes for N={ring_degree}")
        if c not in exclude and is_prime(c):
            out.append(c)
        c = c + step if above else c - step
    return out


@dataclass(frozen=True)
class HeParams:
    """Ring degree, RNS modulus chain and encoding scale.

    ``modulus_chain[0]`` is the base prime kept at level 0; each further prime
    is consumed by one rescale.  ``special_primes`` form the auxiliary modulus
    used only inside key switching.
    """

    ring_degree: int
    modulus_chain: tuple[int, ...]
    scale: float
    special_primes: tuple[int, ...] = field(default=())

    def __post_init__(self):
        n = self.ring_degree
        if n < 2 ** 12 or n & (n - 1):
            raise ParameterError(f"ring_degree must be a power of two >= 4096, got {n}")
        chain = tuple(int(q) for q in self.modulus_chain)
        special = tuple(int(p) for p in self.special_primes)
        object.__setattr__(self, "modulus_chain", chain)
        object.__setattr__(self, "special_primes", special)
        if len(chain) < 1:
            raise ParameterError("modulus chain is empty")
        everything = chain + special
        if len(set(everything)) != len(everything):
            raise ParameterError("moduli must be distinct")
        for q in everything:
            if q.bit_length() > MAX_PRIME_BITS:
                raise ParameterError(f"prime {q} exceeds {MAX_PRIME_BITS} bits")
            if q % (2 * n) != 1:
                raise ParameterError(f"{q} is not 1 mod 2N; no negacyclic NTT of size {n}")
            if not is_prime(q):
                raise ParameterError(f"{q} is not prime")
        if not self.scale > 1:
            raise ParameterError("scale must exceed 1")
        if any(self.scale > q for q in chain):
            raise ParameterError("scale must not exceed any prime of the chain")
        if special and math.prod(special) < math.prod(chain):
            raise ParameterError("special modulus must be at least the full chain modulus")

    @property
    def levels(self) -> int:
        return len(self.modulus_chain) - 1

    @property
    def slots(self) -> int:
        return self.ring_degree // 2

    def to_dict(self) -> dict:
        return {
            "ring_degree": self.ring_degree,
            "modulus_chain": list(self.modulus_chain),
            "scale": self.scale,
            "special_primes": list(self.special_primes),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeParams":
        return cls(int(d["ring_degree"]), tuple(d["modulus_chain"]), float(d["scale"]),
                   tuple(d.get("special_primes", ())))

    @functools.cached_property
    def digest(self) -> bytes:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).digest()


def make_params(ring_degree: int = 2 ** 13, levels: int = 31, scale_bits: int = 40,
                base_bits: int = 50) -> HeParams:
    """Build a parameter set with ``levels`` rescaling primes just above ``2**scale_bits``."""
    if ring_degree < 2 or ring_degree & (ring_degree - 1):
        raise ParameterError(f"ring_degree must be a power of two, got {ring_degree}")
    if levels < 0:
        raise ParameterError("levels must be non-negative")
    base = ntt_primes(ring_degree, base_bits, 1)
    mids = ntt_primes(ring_degree, scale_bits, levels, above=True)
    chain = base + mids
    qbits = sum(math.log2(q) for q in chain)
    n_special = max(1, math.ceil(qbits / (base_bits - 0.5)))
    special = ntt_primes(ring_degree, base_bits, n_special, exclude=tuple(base))
    while math.prod(special) < math.prod(chain):
        n_special += 1
        special = ntt_primes(ring_degree, base_bits, n_special, exclude=tuple(base))
    return HeParams(ring_degree, tuple(chain), float(2 ** scale_bits), tuple(special))


DEFAULT_LEVELS = 31


def default_params() -> HeParams:
    return make_params(2 ** 13, DEFAULT_LEVELS, 40, 50)


# ---------------------------------------------------------------------------
# precomputed tables


def _primitive_root_2n(p: int, n: int) -> int:
    exp = (p - 1) // (2 * n)
    for g in range(2, 10_000):
        psi = pow(g, exp, p)
        if pow(psi, n, p) == p - 1:
            return psi
    raise ParameterError(f"no primitive 2N-th root modulo {p}")


def _bitrev(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


def _powers(base: int, n: int, p: int) -> np.ndarray:
    out = np.empty(n, dtype=np.int64)
    x = 1
    for i in range(n):
        out[i] = x
        x = x * base % p
    return out


class Context:
    """Per-parameter-set lookup tables (twiddles, CRT constants, permutations).

    Moduli are indexed in one flat list: the chain primes first, then the
    special primes.
    """

    def __init__(self, params: HeParams):
        self.params = params
        n = params.ring_degree
        self.n = n
        self.chain = list(params.modulus_chain)
        self.special = list(params.special_primes)
        self.all_moduli = self.chain + self.special
        self.moduli = np.array(self.all_moduli, dtype=np.int64)
        self.pinv = 1.0 / self.moduli.astype(np.float64)
        k = len(self.all_moduli)
        rev = _bitrev(n)
        self.bitrev = rev
        self.psi = np.empty((k, n), dtype=np.int64)
        self.ipsi = np.empty((k, n), dtype=np.int64)
        self.ninv = np.empty(k, dtype=np.int64)
        for r, p in enumerate(self.all_moduli):
            root = _primitive_root_2n(p, n)
            self.psi[r] = _powers(root, n, p)[rev]
            self.ipsi[r] = _powers(pow(root, -1, p), n, p)[rev]
            self.ninv[r] = pow(n, -1, p)
        mf = self.moduli.astype(np.float64)[:, None]
        self.psi_f = self.psi.astype(np.float64) / mf
        self.ipsi_f = self.ipsi.astype(np.float64) / mf
        self.ninv_f = self.ninv.astype(np.float64) / self.moduli.astype(np.float64)
        # NTT slot k evaluates at psi^(2*bitrev(k)+1)
        self.eval_exponent = 2 * rev + 1
        self._exp_index = np.empty(2 * n, dtype=np.int64)
        self._exp_index[self.eval_exponent] = np.arange(n)
        self._perm_cache: dict[int, np.ndarray] = {}
        self._conv_cache: dict = {}
        # scale ladder: level l ciphertexts carry scale_ladder[l]
        ladder = [float(params.scale)]
        for q in self.chain[1:]:
            ladder.append(math.sqrt(ladder[-1] * q))
        self.scale_ladder = ladder
        # encoder
        self.zeta = np.exp(1j * np.pi * np.arange(n) / n)
        g = np.array([pow(5, j, 2 * n) for j in range(n // 2)], dtype=np.int64)
        self.slot_index = (g - 1) // 2
        self.conj_index = ((2 * n - g) - 1) // 2

    # --- sub-bases -------------------------------------------------------
    def q_idx(self, level: int) -> np.ndarray:
        return np.arange(level + 1)

    def p_idx(self) -> np.ndarray:
        return np.arange(len(self.chain), len(self.all_moduli))

    def ext_idx(self, level: int) -> np.ndarray:
        return np.concatenate([self.q_idx(level), self.p_idx()])

    # --- base conversion constants ----------------------------------------
    def conversion(self, src: tuple[int, ...], dst: tuple[int, ...]):
        key = (src, dst)
        hit = self._conv_cache.get(key)
        if hit is not None:
            return hit
        in_mod = [self.all_moduli[i] for i in src]
        out_mod = [self.all_moduli[i] for i in dst]
        big = math.prod(in_mod)
        hat_inv = np.array([pow(big // b % b, -1, b) for b in in_mod], dtype=np.int64)
        hat_inv_f = hat_inv.astype(np.float64) / np.array(in_mod, dtype=np.float64)
        hat = np.array([[(big // b) % c for c in out_mod] for b in in_mod], dtype=np.int64)
        hat_f = hat.astype(np.float64) / np.array(out_mod, dtype=np.float64)[None, :]
        res = (np.array(in_mod, dtype=np.int64), hat_inv, hat_inv_f,
               np.array(out_mod, dtype=np.int64), hat, hat_f)
        self._conv_cache[key] = res
        return res

    def galois_permutation(self, galois: int) -> np.ndarray:
        """Index map so that ``sigma_g(a)[k] == a[perm[k]]`` in NTT form."""
        perm = self._perm_cache.get(galois)
        if perm is None:
            target = (self.eval_exponent * galois) % (2 * self.n)
            perm = self._exp_index[target]
            self._perm_cache[galois] = perm
        return perm

    def galois_for_step(self, step: int) -> int:
        return pow(5, step % self.params.slots, 2 * self.n)


@functools.lru_cache(maxsize=8)
def context(params: HeParams) -> Context:
    return Context(params)
