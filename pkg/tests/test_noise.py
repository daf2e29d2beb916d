import math

import numpy as np
import pytest

from noisydarts.noise import (NoiseInjector, NoisePolicy, NoiseStream, apply, replay, sample,
                              scheduled_sigma, targets)
from noisydarts.tensor import Tensor


def test_sigma_zero_is_constant_mu():
    s = sample(NoisePolicy(sigma=0.0), (3, 4), NoiseStream(0))
    assert np.all(s.data == 0.0)
    s = sample(NoisePolicy(mode="multiplicative", sigma=0.0), (5,), NoiseStream(0))
    assert np.all(s.data == 1.0)


def test_gaussian_moments():
    n = 10**6
    s = sample(NoisePolicy(sigma=0.2), (n,), NoiseStream(11))
    assert abs(s.data.mean()) <= 3 * 0.2 / math.sqrt(n)
    assert abs(s.data.std() - 0.2) <= 0.01 * 0.2


def test_default_policy():
    p = NoisePolicy()
    assert p.mu == 0.0 and p.sigma == 0.2 and p.placement == "ofs" and p.unbiased


def test_uniform_support_and_moments():
    s = sample(NoisePolicy(distribution="uniform", mode="multiplicative", sigma=0.3), (200_000,),
               NoiseStream(2)).data
    half = math.sqrt(3) * 0.3
    assert s.min() >= 1 - half and s.max() <= 1 + half
    assert abs(s.std() - 0.3) < 0.005
    assert abs(s.mean() - 1.0) < 0.005


def test_replay_is_bitwise():
    pol = NoisePolicy(sigma=0.5)
    stream = NoiseStream(42)
    sample(pol, (4,), stream)
    s = sample(pol, (2, 3), stream)
    assert s.index == 1
    assert replay(pol, (2, 3), s.seed, s.index, s.sigma).tobytes() == s.data.tobytes()


def test_biased_mu_needs_flag():
    with pytest.raises(ValueError, match="unbiased"):
        NoisePolicy(mu=0.5)
    p = NoisePolicy(mu=0.5, allow_biased=True)
    assert not p.unbiased


@pytest.mark.parametrize("kw", [dict(sigma=-1.0), dict(distribution="cauchy"), dict(placement="everywhere"),
                                dict(mode="xor"), dict(drop_rate=1.0), dict(schedule="cosine")])
def test_invalid_policies(kw):
    with pytest.raises(ValueError):
        NoisePolicy(**kw)


def test_negative_sigma_in_sample():
    with pytest.raises(ValueError):
        sample(NoisePolicy(), (2,), NoiseStream(0), sigma=-0.1)


def test_placement_targets():
    ops = ["skip_connect", "nor_conv_3x3", "none"]
    table = {p: [targets(NoisePolicy(placement=p), o) for o in ops]
             for p in ("ofs", "nfa", "es", "droppath", "none")}
    assert table["ofs"] == [True, False, False]
    assert table["nfa"] == [True, True, True]
    assert table["es"] == [False, True, True]
    assert table["droppath"] == [True, False, False]
    assert table["none"] == [False, False, False]


def test_ofs_leaves_other_ops_untouched():
    out = Tensor(np.random.default_rng(0).standard_normal((2, 3)))
    res = apply(NoisePolicy(sigma=0.4), "sep_conv_3x3", out, np.ones((2, 3)))
    assert res is out


def test_multiplicative_ones_is_identity():
    out = Tensor(np.random.default_rng(1).standard_normal((2, 3)))
    res = apply(NoisePolicy(mode="multiplicative"), "skip_connect", out, np.ones((2, 3)))
    assert res.data.tobytes() == out.data.tobytes()


def test_droppath_rescaled_mean():
    pol = NoisePolicy(placement="droppath", drop_rate=0.1, sigma=0.0)
    n = 10**5
    inj = NoiseInjector(pol, NoiseStream(5))
    out = inj("skip_connect", Tensor(np.ones((n, 1))))
    vals = out.data.ravel()
    assert set(np.unique(vals)) <= {0.0, 1.0 / 0.9}
    se = vals.std(ddof=1) / math.sqrt(n)
    assert abs(vals.mean() - 1.0) <= 3 * se


def test_schedules():
    assert scheduled_sigma(NoisePolicy(sigma=0.8), 17, 50) == 0.8
    dec = NoisePolicy(sigma=0.8, schedule="linear_decay", decay_end=50)
    assert scheduled_sigma(dec, 0, 60) == 0.8
    assert scheduled_sigma(dec, 25, 60) == pytest.approx(0.4, abs=1e-15)
    assert scheduled_sigma(dec, 55, 60) == 0.0
    with pytest.raises(ValueError):
        scheduled_sigma(dec, 60, 60)


def test_shape_mismatch_in_apply():
    with pytest.raises(ValueError):
        apply(NoisePolicy(), "skip_connect", Tensor(np.zeros((2, 2))), np.zeros((2, 3)))
