"""r-Wasserstein distance between persistence diagrams and its matching gradient.

Points are (birth, death) pairs in the plane with Euclidean ground metric. A
point left unmatched is sent to its orthogonal projection on the diagonal,
at distance ``|death - birth| / sqrt(2)``.
"""
from __future__ import annotations

import hashlib
import itertools
import math
from dataclasses import dataclass, field
from typing import List, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, UsageError

SQRT2 = math.sqrt(2.0)


def _as_points(d) -> np.ndarray:
    if hasattr(d, "birth") or (isinstance(d, (list, tuple)) and d and hasattr(d[0], "birth")):
        d = [[p.birth, p.death] for p in d]
    arr = np.asarray(d, dtype=np.float64)
    return arr.reshape(-1, 2)


def _fingerprint(p: np.ndarray, q: np.ndarray) -> str:
    return hashlib.sha1(p.tobytes() + b"|" + q.tobytes()).hexdigest()


@dataclass
class Matching:
    pairs: List[Tuple[int, int]] = field(default_factory=list)
    diagonal_p: List[int] = field(default_factory=list)
    diagonal_q: List[int] = field(default_factory=list)
    total: float = 0.0  # sum of cost**r over the assignment
    fingerprint: str = ""


def diagonal_distance(points: np.ndarray) -> np.ndarray:
    return np.abs(points[:, 1] - points[:, 0]) / SQRT2


def cost_matrix(p: np.ndarray, q: np.ndarray, r: float) -> np.ndarray:
    """Diagonal-augmented (m+n) x (m+n) matrix of ``cost**r``."""
    m, n = len(p), len(q)
    c = np.full((m + n, m + n), np.inf)
    if m and n:
        diff = p[:, None, :] - q[None, :, :]
        c[:m, :n] = np.sqrt(np.sum(diff * diff, axis=2)) ** r
    c[np.arange(m), n + np.arange(m)] = diagonal_distance(p) ** r
    c[m + np.arange(n), np.arange(n)] = diagonal_distance(q) ** r
    c[m:, n:] = 0.0
    return c


def wasserstein(P, Q, r: float = 2.0) -> Tuple[float, Matching]:
    """Optimal-matching distance ``(sum cost**r) ** (1/r)`` and the matching attaining it."""
    if not r >= 1:
        raise ConfigError(f"Wasserstein order must be >= 1, got {r}")
    p, q = _as_points(P), _as_points(Q)
    m, n = len(p), len(q)
    matching = Matching(fingerprint=_fingerprint(p, q))
    if m + n == 0:
        return 0.0, matching
    c = cost_matrix(p, q, r)
    rows, cols = linear_sum_assignment(c)
    total = 0.0
    for i, j in zip(rows, cols):
        if i < m and j < n:
            matching.pairs.append((int(i), int(j)))
        elif i < m:
            matching.diagonal_p.append(int(i))
        elif j < n:
            matching.diagonal_q.append(int(j))
        total += c[i, j]
    matching.total = float(total)
    return float(total) ** (1.0 / r), matching


def brute_force_wasserstein(P, Q, r: float = 2.0) -> float:
    """Exhaustive minimum over every partial matching; diagrams of at most 4 points."""
    p, q = _as_points(P), _as_points(Q)
    m, n = len(p), len(q)
    if m > 4 or n > 4:
        raise UsageError("brute_force_wasserstein supports at most 4 points per diagram")

    def to_diag(pt) -> float:
        return abs(pt[1] - pt[0]) / math.sqrt(2.0)

    best = math.inf
    for k in range(min(m, n) + 1):
        for left in itertools.combinations(range(m), k):
            for right in itertools.permutations(range(n), k):
                total = 0.0
                for i, j in zip(left, right):
                    total += math.hypot(p[i, 0] - q[j, 0], p[i, 1] - q[j, 1]) ** r
                for i in set(range(m)) - set(left):
                    total += to_diag(p[i]) ** r
                for j in set(range(n)) - set(right):
                    total += to_diag(q[j]) ** r
                best = min(best, total)
    return best ** (1.0 / r)


def matching_gradient(P, Q, matching: Matching, r: float = 2.0) -> np.ndarray:
    """Gradient of ``sum cost**r`` w.r.t. the (birth, death) coordinates of ``P``.

    The matching is held fixed, so this is the derivative of the piecewise
    smooth objective on the piece where ``matching`` stays optimal.
    """
    p, q = _as_points(P), _as_points(Q)
    if matching.fingerprint != _fingerprint(p, q):
        raise UsageError("matching was computed for different diagrams")
    grad = np.zeros_like(p)
    for i, j in matching.pairs:
        delta = p[i] - q[j]
        d = math.hypot(delta[0], delta[1])
        if d > 0:
            grad[i] = r * d ** (r - 2) * delta
    for i in matching.diagonal_p:
        b, d = p[i]
        c = abs(d - b) / SQRT2
        if c > 0:
            s = math.copysign(1.0, d - b) / SQRT2
            grad[i] = r * c ** (r - 1) * np.array([-s, s])
    return grad
