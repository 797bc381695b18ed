import math

import numpy as np
import pytest

from topodiff.errors import ConfigError, UsageError
from topodiff.wasserstein import brute_force_wasserstein, matching_gradient, wasserstein


def random_diagram(rng, k):
    b = rng.uniform(0, 1, k)
    return np.stack([b, b + rng.uniform(0, 1, k)], axis=1)


def greedy_cost(p, q, r):
    """Match each P point to its nearest free Q point when that beats both diagonals."""
    free = list(range(len(q)))
    total = 0.0
    for pt in p:
        diag_p = abs(pt[1] - pt[0]) / math.sqrt(2)
        best = None
        for j in free:
            d = math.hypot(*(pt - q[j]))
            if best is None or d < best[0]:
                best = (d, j)
        if best is not None and best[0] ** r <= diag_p ** r + (abs(q[best[1]][1] - q[best[1]][0]) / math.sqrt(2)) ** r:
            total += best[0] ** r
            free.remove(best[1])
        else:
            total += diag_p ** r
    for j in free:
        total += (abs(q[j][1] - q[j][0]) / math.sqrt(2)) ** r
    return total


def test_identical_diagrams():
    p = np.array([[0.0, 1.0], [0.2, 0.5], [0.3, 0.9]])
    value, m = wasserstein(p, p.copy(), 2)
    assert value == 0.0
    assert sorted(m.pairs) == [(0, 0), (1, 1), (2, 2)]
    np.testing.assert_array_equal(matching_gradient(p, p.copy(), m, 2), 0.0)


@pytest.mark.parametrize("r", [1.0, 2.0, 3.5])
def test_single_point_to_empty(r):
    value, m = wasserstein([[0.0, 1.0]], np.zeros((0, 2)), r)
    assert value == pytest.approx(1 / math.sqrt(2), abs=1e-12)
    assert m.diagonal_p == [0]


def test_direct_match_beats_diagonals():
    value, m = wasserstein([[0.0, 2.0]], [[0.0, 1.0]], 2)
    assert value == pytest.approx(1.0)
    assert m.pairs == [(0, 0)]
    assert brute_force_wasserstein([[0.0, 2.0]], [[0.0, 1.0]], 2) == pytest.approx(1.0)
    assert math.sqrt(2 + 0.5) > 1.0


def test_empty_vs_empty():
    assert wasserstein(np.zeros((0, 2)), np.zeros((0, 2)))[0] == 0.0
    assert brute_force_wasserstein(np.zeros((0, 2)), np.zeros((0, 2))) == 0.0


@pytest.mark.parametrize("r", [1.0, 2.0])
def test_matches_brute_force_and_symmetric(r):
    rng = np.random.default_rng(int(r))
    for _ in range(100):
        p = random_diagram(rng, rng.integers(0, 5))
        q = random_diagram(rng, rng.integers(0, 5))
        v, _ = wasserstein(p, q, r)
        assert abs(v - brute_force_wasserstein(p, q, r)) <= 1e-9
        assert abs(v - wasserstein(q, p, r)[0]) <= 1e-9


def test_metric_axioms_and_greedy_bound():
    rng = np.random.default_rng(11)
    for _ in range(100):
        a, b, c = (random_diagram(rng, rng.integers(0, 5)) for _ in range(3))
        ab = wasserstein(a, b, 2)[0]
        assert ab >= 0
        assert ab <= wasserstein(a, c, 2)[0] + wasserstein(c, b, 2)[0] + 1e-9
        assert wasserstein(a, b, 2)[1].total <= greedy_cost(a, b, 2) + 1e-12


def test_matching_partitions_points():
    rng = np.random.default_rng(12)
    p, q = random_diagram(rng, 4), random_diagram(rng, 3)
    _, m = wasserstein(p, q)
    assert sorted([i for i, _ in m.pairs] + m.diagonal_p) == list(range(4))
    assert sorted([j for _, j in m.pairs] + m.diagonal_q) == list(range(3))


def test_errors():
    with pytest.raises(ConfigError):
        wasserstein([[0, 1]], [[0, 1]], 0.5)
    with pytest.raises(UsageError):
        brute_force_wasserstein(np.zeros((5, 2)), np.zeros((1, 2)))
    p = np.array([[0.0, 1.0]])
    _, m = wasserstein(p, p)
    with pytest.raises(UsageError):
        matching_gradient(np.array([[0.0, 2.0]]), p, m)


def test_single_pair_quadratic_gradient():
    p, q = np.array([[0.1, 0.9]]), np.array([[0.2, 0.7]])
    _, m = wasserstein(p, q, 2)
    assert m.pairs == [(0, 0)]
    np.testing.assert_allclose(matching_gradient(p, q, m, 2), 2 * (p - q))


@pytest.mark.parametrize("seed", range(20))
def test_gradient_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    p, q = random_diagram(rng, 3), random_diagram(rng, 3)
    r = [1.0, 2.0, 3.0][seed % 3]
    _, m = wasserstein(p, q, r)
    grad = matching_gradient(p, q, m, r)
    h = 1e-6
    for i in range(len(p)):
        for k in range(2):
            pp, pm = p.copy(), p.copy()
            pp[i, k] += h
            pm[i, k] -= h
            fd = (brute_force_wasserstein(pp, q, r) ** r - brute_force_wasserstein(pm, q, r) ** r) / (2 * h)
            assert grad[i, k] == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_gradient_support():
    p = np.array([[0.0, 1.0], [0.4, 0.4], [0.2, 0.6]])
    q = np.array([[0.0, 1.0]])
    _, m = wasserstein(p, q, 2)
    g = matching_gradient(p, q, m, 2)
    np.testing.assert_array_equal(g[0], 0.0)
    np.testing.assert_array_equal(g[1], 0.0)
    assert np.all(g[2] != 0)
