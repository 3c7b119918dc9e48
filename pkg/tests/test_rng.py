"""Counter-based stream determinism and basic statistics."""

import numpy as np

from pointloc.rng import Stream, derive_key, mix64


def test_streams_reproducible():
    a = Stream(42, "x").uniform(1000)
    b = Stream(42, "x").uniform(1000)
    assert np.array_equal(a, b)


def test_different_tags_differ():
    a = Stream(42, "x").uniform(100)
    b = Stream(42, "y").uniform(100)
    assert not np.array_equal(a, b)


def test_counter_stateless():
    s = Stream(7)
    first = s.uniform(10)
    s2 = Stream(7)
    s2.uniform(5)
    rest = s2.uniform(5)
    assert np.array_equal(first[5:], rest)


def test_uniform_range_and_mean():
    u = Stream(1).uniform(200_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.005


def test_normal_moments():
    z = Stream(2).normal(200_000)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01


def test_integers_in_range():
    v = Stream(3).integers(10, 10_000)
    assert v.min() >= 0 and v.max() <= 9
    counts = np.bincount(v, minlength=10)
    assert counts.min() > 800


def test_permutation_is_permutation():
    p = Stream(4).permutation(257)
    assert sorted(p.tolist()) == list(range(257))


def test_mix64_known_values_locked():
    # published splitmix64 outputs for seeds 0 and 1, plus our locked third
    got = mix64(np.array([0, 1, 2], dtype=np.uint64))
    assert got.tolist() == [0xE220A8397B1DCDAF, 0x910A2DEC89025CC1,
                            10905525725756348110]


def test_derive_key_string_vs_int_disjoint():
    assert derive_key(0, "1") != derive_key(0, 1)
