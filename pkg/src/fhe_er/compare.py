"""Comparison by iterated odd polynomials approximating sign(x).

The basic polynomial is ``f(x) = (3x - x^3) / 2``.  Iterating it pushes every
``x`` in ``[margin, 1]`` towards 1 (and the mirror interval towards -1), and
``comp(a, b) = (sign(a - b) + 1) / 2``.

Under encryption each cubic ``c1*x + c3*x^3`` is evaluated at depth two as
``(c3*x) * (x^2 + c1/c3)``.  The final affine map to ``[0, 1]`` is folded into
the last cubic, so the comparison costs exactly ``2 * iterations`` levels.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from fractions import Fraction

import mpmath
import numpy as np

from . import he

BASIC = (1.5, -0.5)
DEFAULT_MARGIN = 2.0 ** -5
DEFAULT_TARGET_ERROR = 2.0 ** -7
MAX_ITERATIONS = 64

# Above this many denominator bits the exact iteration switches to outward-rounded
# interval arithmetic (still a rigorous bound, just not an exact value).
_EXACT_BITS_LIMIT = 1 << 16


class DomainError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def _cubic_exact(x: Fraction, c1: Fraction, c3: Fraction) -> Fraction:
    return c1 * x + c3 * x * x * x


def _to_fraction(v) -> Fraction:
    man, exp = mpmath.mpf(v).man_exp
    return Fraction(man) * Fraction(2) ** exp


def _iterate_lower_bound(x0: float, schedule):
    """Yield rigorous lower bounds of successive iterates of ``x0`` (exact while cheap)."""
    x = Fraction(x0)
    exact = True
    iv = None
    for c1, c3 in schedule:
        if exact and x.denominator.bit_length() * 3 < _EXACT_BITS_LIMIT:
            x = _cubic_exact(x, Fraction(c1), Fraction(c3))
            yield x
            continue
        if exact:
            exact = False
            mpmath.iv.prec = 512
            iv = mpmath.iv.mpf([mpmath.mpf(x.numerator) / x.denominator] * 2)
        iv = mpmath.iv.mpf(c1) * iv + mpmath.iv.mpf(c3) * iv * iv * iv
        yield _to_fraction(iv.a)


def _monotone_on_unit(c1: float, c3: float) -> bool:
    # derivative c1 + 3*c3*x^2 >= 0 on [0, 1]
    return c1 >= 0 and c1 + 3 * c3 >= 0


@functools.lru_cache(maxsize=256)
def _meets_target(schedule: tuple, margin: float, target_error: float) -> bool:
    return schedule_meets_target(schedule, margin, target_error)


def schedule_meets_target(schedule, margin: float, target_error: float) -> bool:
    """True when the composed schedule maps ``[margin, 1]`` into ``[1-target_error, 1]``.

    Each odd cubic must be nondecreasing on [0, 1] and fix the unit interval,
    so the image of ``[margin, 1]`` is ``[F(margin), F(1)]``.
    """
    if not schedule:
        return margin >= 1 - target_error
    one = Fraction(1)
    for c1, c3 in schedule:
        if not _monotone_on_unit(c1, c3):
            return False
        if _cubic_exact(one, Fraction(c1), Fraction(c3)) > 1:
            return False
    *_, low = _iterate_lower_bound(margin, schedule)
    return low >= 1 - Fraction(target_error)


@functools.lru_cache(maxsize=256)
def minimal_iterations(margin: float = DEFAULT_MARGIN,
                       target_error: float = DEFAULT_TARGET_ERROR) -> int:
    """Smallest n with ``f^n(margin) >= 1 - target_error`` for the basic polynomial."""
    if not 0 < margin < 1:
        raise ConfigError(f"margin must lie in (0, 1), got {margin}")
    if not 0 < target_error < 1:
        raise ConfigError(f"target_error must lie in (0, 1), got {target_error}")
    goal = 1 - Fraction(target_error)
    if Fraction(margin) >= goal:
        return 0
    lows = _iterate_lower_bound(margin, [BASIC] * MAX_ITERATIONS)
    for n, v in enumerate(lows, start=1):
        if v >= goal:
            return n
    raise ConfigError("no iteration count up to the cap reaches the target")


@dataclass(frozen=True)
class CompareConfig:
    """Iteration schedule plus the accuracy contract it must satisfy.

    ``iterations=None`` picks the minimal count for the basic polynomial.  A
    custom ``schedule`` is a list of ``(c1, c3)`` odd-cubic coefficients.
    """

    iterations: int | None = None
    margin: float = DEFAULT_MARGIN
    target_error: float = DEFAULT_TARGET_ERROR
    schedule: tuple = field(default=())

    def __post_init__(self):
        if not 0 < self.margin < 1:
            raise ConfigError(f"margin must lie in (0, 1), got {self.margin}")
        if not 0 < self.target_error < 1:
            raise ConfigError(f"target_error must lie in (0, 1), got {self.target_error}")
        sched = tuple((float(a), float(b)) for a, b in self.schedule)
        if sched:
            if self.iterations is not None and self.iterations != len(sched):
                raise ConfigError("iterations disagrees with the schedule length")
            if any(b == 0 for _, b in sched):
                raise ConfigError("schedule cubics need a nonzero cubic coefficient")
            object.__setattr__(self, "iterations", len(sched))
        else:
            need = minimal_iterations(self.margin, self.target_error)
            n = need if self.iterations is None else int(self.iterations)
            if n < need:
                raise ConfigError(f"{n} iterations cannot reach error {self.target_error} "
                                  f"from margin {self.margin}; at least {need} are needed")
            object.__setattr__(self, "iterations", n)
            sched = (BASIC,) * n
        object.__setattr__(self, "schedule", sched)
        if not _meets_target(sched, self.margin, self.target_error):
            raise ConfigError("schedule does not map [margin, 1] into [1 - target_error, 1]")

    @property
    def depth(self) -> int:
        return 2 * self.iterations

    def to_dict(self) -> dict:
        return {"iterations": self.iterations, "margin": repr(self.margin),
                "target_error": repr(self.target_error),
                "schedule": [[repr(a), repr(b)] for a, b in self.schedule]}

    @classmethod
    def from_dict(cls, d: dict) -> "CompareConfig":
        sched = tuple((float(a), float(b)) for a, b in d.get("schedule", ()))
        return cls(int(d["iterations"]), float(d["margin"]), float(d["target_error"]), sched)


def sign_iterate_plain(x, config: CompareConfig | None = None):
    """Apply the configured cubic schedule to ``x`` (scalar or array) in float64.

    Iterates on ``d = 1 - |x|`` and restores the sign at the end.  This keeps
    full relative precision near the fixed points and makes the float result
    exactly odd and nondecreasing in ``x``.
    """
    config = config or CompareConfig()
    arr = np.asarray(x, dtype=np.float64)
    if np.any(np.abs(arr) > 1) or not np.all(np.isfinite(arr)):
        raise DomainError("sign iteration is defined on [-1, 1]")
    sgn = np.sign(arr)
    d = 1.0 - np.abs(arr)
    for c1, c3 in config.schedule:
        if c1 + c3 == 1.0:
            # p(1 - d) = 1 - d*((c1 + 3*c3) - 3*c3*d + c3*d^2)
            d = d * ((c1 + 3 * c3) + d * (c3 * d - 3 * c3))
        else:
            y = 1.0 - d
            d = 1.0 - (c1 * y + c3 * (y * y * y))
    out = sgn * (1.0 - d)
    return float(out) if out.ndim == 0 else out


def comp_plain(a, b, config: CompareConfig | None = None):
    """Approximate comp(a, b): near 1 when a > b, near 0 when a < b, 0.5 at a == b."""
    a_arr = np.asarray(a, dtype=np.float64)
    b_arr = np.asarray(b, dtype=np.float64)
    if np.any((a_arr < 0) | (a_arr > 1)) or np.any((b_arr < 0) | (b_arr > 1)):
        raise DomainError("comparison inputs must lie in [0, 1]")
    s = np.asarray(sign_iterate_plain(a_arr - b_arr, config))
    out = (s + 1.0) / 2.0
    return float(out) if out.ndim == 0 else out


def _odd_cubic(x: he.CipherVector, c1: float, c3: float, keys: he.KeySet,
               offset: float = 0.0) -> he.CipherVector:
    t = he.mul_const(x, c3)
    u = he.add_const(he.square(x, keys), c1 / c3)
    y = he.mul_relin_rescale(t, u, keys)
    return he.add_const(y, offset) if offset else y


def comp_from_difference(x: he.CipherVector, config: CompareConfig,
                         keys: he.KeySet) -> he.CipherVector:
    """Encrypted ``(sign(x) + 1) / 2`` for a ciphertext already holding ``a - b``."""
    if x.level < config.depth:
        raise he.DepthError(f"comparison needs {config.depth} levels, {x.level} available",
                            required=config.depth, available=x.level)
    sched = config.schedule
    for c1, c3 in sched[:-1]:
        x = _odd_cubic(x, c1, c3, keys)
    c1, c3 = sched[-1]
    return _odd_cubic(x, c1 / 2, c3 / 2, keys, offset=0.5)


def comp_encrypted(a_ct: he.CipherVector, b_ct: he.CipherVector, config: CompareConfig,
                   keys: he.KeySet) -> he.CipherVector:
    """Slot-wise encrypted comp(a, b)."""
    available = min(a_ct.level, b_ct.level)
    if available < config.depth:
        raise he.DepthError(f"comparison needs {config.depth} levels, {available} available",
                            required=config.depth, available=available)
    return comp_from_difference(he.sub(a_ct, b_ct), config, keys)
