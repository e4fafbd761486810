import mpmath
import numpy as np
import pytest

from fhe_er import he
from fhe_er.compare import (CompareConfig, ConfigError, DomainError, comp_encrypted,
                            comp_from_difference, comp_plain, minimal_iterations,
                            schedule_meets_target, sign_iterate_plain)

# Frozen from an independent 200-digit float iteration of (3x - x^3)/2 starting at
# the margin (see test_iteration_count_oracle): 11 iterations reach 1 - 2^-7.
ITERATIONS_DEFAULT = 11


def high_precision_count(margin, target, dps=200):
    with mpmath.workdps(dps):
        x = mpmath.mpf(margin)
        goal = 1 - mpmath.mpf(target)
        n = 0
        while x < goal:
            x = (3 * x - x ** 3) / 2
            n += 1
        return n


def test_iteration_count_oracle():
    assert high_precision_count(2 ** -5, 2 ** -7) == ITERATIONS_DEFAULT
    assert minimal_iterations(2 ** -5, 2 ** -7) == ITERATIONS_DEFAULT


@pytest.mark.parametrize("margin,target", [(2 ** -3, 2 ** -4), (2 ** -8, 2 ** -10),
                                           (2 ** -6, 2 ** -20), (0.3, 0.01)])
def test_minimal_iterations_matches_oracle(margin, target):
    assert minimal_iterations(margin, target) == high_precision_count(margin, target)


def test_default_config():
    cfg = CompareConfig()
    assert cfg.iterations == ITERATIONS_DEFAULT
    assert cfg.depth == 2 * ITERATIONS_DEFAULT
    assert cfg.schedule == ((1.5, -0.5),) * ITERATIONS_DEFAULT


def test_too_few_iterations_rejected():
    with pytest.raises(ConfigError):
        CompareConfig(iterations=ITERATIONS_DEFAULT - 1)
    assert CompareConfig(iterations=ITERATIONS_DEFAULT + 2).iterations == 13


@pytest.mark.parametrize("bad", [dict(margin=0.0), dict(margin=1.5), dict(target_error=0),
                                 dict(schedule=((1.5, 0.0),))])
def test_bad_config(bad):
    with pytest.raises(ConfigError):
        CompareConfig(**bad)


def test_custom_schedule_checked():
    # a steeper cubic (2.0, -1.0) overshoots 1 on [0, 1] and is refused
    assert not schedule_meets_target([(2.0, -1.0)] * 8, 2 ** -5, 2 ** -7)
    with pytest.raises(ConfigError):
        CompareConfig(schedule=((1.5, -0.5),) * 3)
    # fixes 1 but decreases near 1, so the interval image argument fails
    assert not schedule_meets_target(((1.875, -0.875),), 2 ** -5, 2 ** -7)


def test_config_roundtrip():
    cfg = CompareConfig(iterations=12, margin=2 ** -4, target_error=2 ** -9)
    assert CompareConfig.from_dict(cfg.to_dict()) == cfg


def test_sign_accuracy_on_grid():
    cfg = CompareConfig()
    pos = np.linspace(2 ** -5, 1, 5000)
    x = np.concatenate([pos, -pos])
    err = np.max(np.abs(sign_iterate_plain(x, cfg) - np.sign(x)))
    assert err <= 2 ** -7


def test_sign_is_odd_and_monotone():
    x = np.linspace(-1, 1, 200001)
    y = sign_iterate_plain(x)
    assert np.all(np.diff(y) >= 0)
    assert np.array_equal(sign_iterate_plain(-x), -y)
    assert sign_iterate_plain(0.0) == 0.0


def test_sign_domain():
    with pytest.raises(DomainError):
        sign_iterate_plain(1.01)


def test_comp_plain():
    cfg = CompareConfig()
    assert comp_plain(0.7, 0.2, cfg) > 1 - 2 ** -8
    assert comp_plain(0.2, 0.7, cfg) < 2 ** -8
    assert comp_plain(0.4, 0.4, cfg) == 0.5
    with pytest.raises(DomainError):
        comp_plain(1.2, 0.5)
    with pytest.raises(DomainError):
        comp_plain(0.5, -0.1)


def test_encrypted_matches_plain(match_keys):
    cfg = CompareConfig()
    r = np.random.default_rng(8)
    a, b = r.uniform(0, 1, (2, 500))
    ca = he.encrypt(a, match_keys, rng=1)
    cb = he.encrypt(b, match_keys, rng=2)
    out = he.decrypt(comp_encrypted(ca, cb, cfg, match_keys), match_keys)
    assert np.max(np.abs(out - comp_plain(a, b, cfg))) < 2 ** -10


def test_encrypted_depth_error(small_keys):
    ct = he.encrypt([0.1], small_keys, rng=1)
    with pytest.raises(he.DepthError):
        comp_from_difference(ct, CompareConfig(), small_keys)
