import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from topodiff.cubical import betti_at, brute_force_pd, sublevel_pd
from topodiff.errors import ConfigError, ShapeError, UsageError
from topodiff.wasserstein import wasserstein


def disk(n, r, c=None):
    c = (n - 1) / 2 if c is None else c
    yy, xx = np.mgrid[0:n, 0:n]
    return np.hypot(yy - c, xx - c) <= r


def annulus(n, r_in, r_out):
    return disk(n, r_out) & ~disk(n, r_in)


@pytest.mark.parametrize("shape", [(1, 1), (3, 4), (5, 5)])
def test_constant_field(shape):
    d = sublevel_pd(np.full(shape, 0.3), cap=1.0)
    assert d.multiset() == [(0, 0.3, 1.0)]
    assert brute_force_pd(np.full(shape, 0.3), cap=1.0).multiset() == d.multiset()


def test_ring_closes_and_fills():
    f = np.zeros((3, 3))
    f[1, 1] = 1.0
    d = sublevel_pd(f, cap=1.0)
    assert d.multiset(1) == [(1, 0.0, 1.0)]
    assert d.multiset(0) == [(0, 0.0, 1.0)]
    assert brute_force_pd(f, 1.0).multiset() == d.multiset()


def test_two_basins():
    f = np.array([[0.2, 1.0, 0.4]])
    assert sublevel_pd(f, cap=1.0).multiset(0) == [(0, 0.2, 1.0), (0, 0.4, 1.0)]
    essential = [p for p in sublevel_pd(f, 1.0).points if p.essential]
    assert [(p.birth, p.death) for p in essential] == [(0.2, 1.0)]


def test_five_pixel_strip_has_three_basins():
    f = np.array([[0.2, 1.0, 0.4, 1.0, 0.2]])
    d = sublevel_pd(f, cap=1.0)
    assert d.multiset(0) == [(0, 0.2, 1.0), (0, 0.2, 1.0), (0, 0.4, 1.0)]
    assert d.multiset() == brute_force_pd(f, 1.0).multiset()


def test_monotone_row_single_class():
    f = np.arange(6, dtype=float)[None, :]
    d = brute_force_pd(f, cap=6.0)
    assert d.multiset() == [(0, 0.0, 6.0)]
    assert sublevel_pd(f, cap=6.0).multiset() == d.multiset()


@pytest.mark.parametrize("seed", range(50))
def test_matches_oracle_random_distinct(seed):
    rng = np.random.default_rng(seed)
    f = rng.permutation(36).reshape(6, 6) / 36.0
    assert sublevel_pd(f, 1.0).multiset() == brute_force_pd(f, 1.0).multiset()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5)),
              elements=st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])))
def test_matches_oracle_with_ties(f):
    assert sublevel_pd(f, 1.0).multiset() == brute_force_pd(f, 1.0).multiset()


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 7), st.integers(1, 7)),
              elements=st.floats(0, 1, allow_nan=False)))
def test_witnesses_reproduce_values(f):
    d = sublevel_pd(f, 1.0)
    for p in d.points:
        assert f[p.birth_pixel] == p.birth
        if p.essential:
            assert p.death == 1.0 and p.death_pixel is None
        else:
            assert f[p.death_pixel] == p.death
        assert p.death >= p.birth
    assert sum(1 for p in d.points if p.dim == 0 and p.essential) == 1


def test_structured_shapes():
    for mask, b0, b1 in ((disk(7, 2.2), 1, 0), (annulus(7, 1.2, 3.0), 1, 1)):
        f = 1.0 - mask.astype(float)
        assert betti_at(f, 0.5, 0) == b0
        assert betti_at(f, 0.5, 1) == b1
        assert sublevel_pd(f).multiset() == brute_force_pd(f).multiset()


def test_betti_below_minimum_is_zero():
    f = np.random.default_rng(0).uniform(0.2, 1.0, (6, 6))
    assert betti_at(f, 0.1, 0) == 0 and betti_at(f, 0.1, 1) == 0


def test_betti_accepts_diagram():
    f = 1.0 - annulus(9, 1.5, 4.0).astype(float)
    d = sublevel_pd(f)
    assert betti_at(d, 0.5, 1) == 1


def test_rejections():
    with pytest.raises(ShapeError):
        sublevel_pd(np.array([[0.0, np.nan]]))
    with pytest.raises(ShapeError):
        sublevel_pd(np.zeros(4))
    with pytest.raises(ConfigError):
        sublevel_pd(np.array([[0.0, 2.0]]), cap=1.0)
    with pytest.raises(UsageError):
        brute_force_pd(np.zeros((8, 8)))


@pytest.mark.parametrize("seed", range(10))
def test_stability_under_perturbation(seed):
    rng = np.random.default_rng(seed)
    f = rng.permutation(49).reshape(7, 7) / 60.0
    delta = 0.004
    g = f + rng.uniform(-delta, delta, f.shape)
    d1, d2 = sublevel_pd(f, 1.0), sublevel_pd(g, 1.0)
    r = 50.0
    for dim in (0, 1):
        p, q = d1.array(dim), d2.array(dim)
        value, _ = wasserstein(p, q, r)
        # Euclidean ground metric: a point shifted by delta in both coordinates moves sqrt(2) * delta
        bound = np.sqrt(2.0) * delta * max(1, len(p) + len(q)) ** (1.0 / r)
        assert value <= bound * (1 + 1e-9)
