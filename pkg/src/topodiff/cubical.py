"""Sublevel-set persistent homology of 2-D scalar fields on a cubical complex.

Pixels are vertices, 4-neighbours share an edge and every 2x2 block spans a
unit square; a cell's value is the maximum over its vertices. Vertices are
ranked by (value, row-major index), and each cell is witnessed by its
highest-ranked vertex, which is the pixel that gradients are routed to.

Zero-persistence pairs (birth == death) are omitted from diagrams.
Essential classes are kept and receive ``death = cap``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ShapeError, UsageError

Pixel = Tuple[int, int]


@dataclass(frozen=True)
class PersistencePoint:
    dim: int
    birth: float
    death: float
    birth_pixel: Optional[Pixel] = None
    death_pixel: Optional[Pixel] = None
    essential: bool = False

    @property
    def persistence(self) -> float:
        return self.death - self.birth


@dataclass
class PersistenceDiagram:
    points: List[PersistencePoint] = field(default_factory=list)
    cap: float = 1.0

    def by_dim(self, dim: int) -> List[PersistencePoint]:
        return [p for p in self.points if p.dim == dim]

    def array(self, dim: int) -> np.ndarray:
        pts = self.by_dim(dim)
        return np.array([[p.birth, p.death] for p in pts], dtype=np.float64).reshape(len(pts), 2)

    def multiset(self, dim: Optional[int] = None) -> List[Tuple[int, float, float]]:
        return sorted((p.dim, p.birth, p.death) for p in self.points if dim is None or p.dim == dim)

    def without_essential(self) -> "PersistenceDiagram":
        return PersistenceDiagram([p for p in self.points if not p.essential], self.cap)

    def __len__(self) -> int:
        return len(self.points)


def _as_field(f) -> np.ndarray:
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.size == 0:
        raise ShapeError(f"expected a nonempty 2-d field, got shape {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ShapeError("filtration contains non-finite values")
    return f


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        parent = self.parent
        root = a
        while parent[root] != root:
            root = parent[root]
        while parent[a] != root:
            parent[a], a = root, parent[a]
        return root


def _edge_tables(h: int, w: int):
    """Endpoint arrays for horizontal then vertical edges, and square->edge ids."""
    idx = np.arange(h * w).reshape(h, w)
    hu, hv = idx[:, :-1].ravel(), idx[:, 1:].ravel()
    vu, vv = idx[:-1, :].ravel(), idx[1:, :].ravel()
    eu = np.concatenate([hu, vu])
    ev = np.concatenate([hv, vv])
    n_h = h * (w - 1)
    hid = np.arange(n_h).reshape(h, w - 1) if w > 1 else np.zeros((h, 0), dtype=int)
    vid = (n_h + np.arange((h - 1) * w)).reshape(h - 1, w) if h > 1 else np.zeros((0, w), dtype=int)
    if h > 1 and w > 1:
        sq_edges = np.stack([hid[:-1, :], hid[1:, :], vid[:, :-1], vid[:, 1:]], axis=-1).reshape(-1, 4)
        sq_verts = np.stack([idx[:-1, :-1], idx[:-1, 1:], idx[1:, :-1], idx[1:, 1:]], axis=-1).reshape(-1, 4)
    else:
        sq_edges = np.zeros((0, 4), dtype=int)
        sq_verts = np.zeros((0, 4), dtype=int)
    return eu, ev, sq_edges, sq_verts


def sublevel_pd(f, cap: float = 1.0) -> PersistenceDiagram:
    """Persistence diagram (dimensions 0 and 1) of the sublevel filtration of ``f``.

    Dimension 0 uses union-find with the elder rule; dimension 1 reduces the
    square-to-edge boundary matrix over GF(2), with columns held as Python
    integers used as bit vectors.
    """
    f = _as_field(f)
    if cap < f.max():
        raise ConfigError(f"cap {cap} is below the field maximum {f.max()}")
    h, w = f.shape
    flat = f.ravel()
    order = np.argsort(flat, kind="stable")
    rank = np.empty(flat.size, dtype=np.int64)
    rank[order] = np.arange(flat.size)

    def pix(v: int) -> Pixel:
        return (int(v) // w, int(v) % w)

    points: List[PersistencePoint] = []

    # dimension 0: add vertices in rank order, merge with lower-ranked neighbours
    uf = _UnionFind(flat.size)
    birth_of = list(range(flat.size))  # root -> oldest vertex of its component
    killer_edges = set()
    n_h = h * (w - 1)
    for v in order:
        v = int(v)
        r, c = divmod(v, w)
        nbrs = []
        if c > 0:
            nbrs.append((v - 1, r * (w - 1) + c - 1))
        if c < w - 1:
            nbrs.append((v + 1, r * (w - 1) + c))
        if r > 0:
            nbrs.append((v - w, n_h + (r - 1) * w + c))
        if r < h - 1:
            nbrs.append((v + w, n_h + r * w + c))
        # same edge order as the boundary matrix: by the other endpoint's rank
        nbrs.sort(key=lambda ue: rank[ue[0]])
        for u, eid in nbrs:
            if rank[u] > rank[v]:
                continue
            ru, rv = uf.find(u), uf.find(v)
            if ru == rv:
                continue
            killer_edges.add(eid)
            bu, bv = birth_of[ru], birth_of[rv]
            old, young = (ru, rv) if rank[bu] < rank[bv] else (rv, ru)
            yb = birth_of[young]
            if flat[v] > flat[yb]:
                points.append(PersistencePoint(0, float(flat[yb]), float(flat[v]), pix(yb), pix(v)))
            uf.parent[young] = old
    for root in {uf.find(v) for v in range(flat.size)}:
        b = birth_of[root]
        points.append(PersistencePoint(0, float(flat[b]), float(cap), pix(b), None, essential=True))

    # dimension 1: boundary matrix of squares over edges, both in filtration order
    eu, ev, sq_edges, sq_verts = _edge_tables(h, w)
    if len(eu):
        ru_, rv_ = rank[eu], rank[ev]
        e_wit = np.where(ru_ > rv_, eu, ev)
        e_order = np.lexsort((np.minimum(ru_, rv_), np.maximum(ru_, rv_)))
        e_pos = np.empty(len(eu), dtype=np.int64)
        e_pos[e_order] = np.arange(len(eu))
        paired_edges = set()
        if len(sq_edges):
            sr = np.sort(rank[sq_verts], axis=1)
            s_order = np.lexsort((sr[:, 0], sr[:, 1], sr[:, 2], sr[:, 3]))
            s_wit = sq_verts[np.arange(len(sq_verts)), np.argmax(rank[sq_verts], axis=1)]
            pivots: Dict[int, int] = {}
            for s in s_order:
                col = 0
                for e in sq_edges[s]:
                    col ^= 1 << int(e_pos[e])
                while col:
                    low = col.bit_length() - 1
                    other = pivots.get(low)
                    if other is None:
                        break
                    col ^= other
                if not col:
                    continue
                low = col.bit_length() - 1
                pivots[low] = col
                edge = int(e_order[low])
                paired_edges.add(edge)
                bv, dv = int(e_wit[edge]), int(s_wit[s])
                if flat[dv] > flat[bv]:
                    points.append(PersistencePoint(1, float(flat[bv]), float(flat[dv]), pix(bv), pix(dv)))
        for edge in range(len(eu)):
            if edge not in killer_edges and edge not in paired_edges:
                bv = int(e_wit[edge])
                points.append(PersistencePoint(1, float(flat[bv]), float(cap), pix(bv), None, essential=True))
    return PersistenceDiagram(points, float(cap))


# -- brute-force oracle -------------------------------------------------------

def _echelon_insert(basis: Dict[int, int], vec: int) -> bool:
    while vec:
        top = vec.bit_length() - 1
        if top not in basis:
            basis[top] = vec
            return True
        vec ^= basis[top]
    return False


def _cycle_basis(edges: Sequence[Tuple[int, int, int]]) -> List[int]:
    """Basis of the GF(2) kernel of the edge boundary map, as edge-id bit vectors."""
    basis: Dict[int, Tuple[int, int]] = {}
    cycles = []
    for eid, u, v in edges:
        vec, combo = (1 << u) | (1 << v), 1 << eid
        while vec:
            top = vec.bit_length() - 1
            if top not in basis:
                basis[top] = (vec, combo)
                break
            bvec, bcombo = basis[top]
            vec ^= bvec
            combo ^= bcombo
        if not vec:
            cycles.append(combo)
    return cycles


def brute_force_pd(f, cap: float = 1.0) -> PersistenceDiagram:
    """Reference diagram from persistent Betti numbers of every threshold pair.

    For thresholds ``a <= b`` the rank of ``H_k(K_a) -> H_k(K_b)`` is computed
    directly (components of ``K_b`` meeting ``K_a`` for k=0; cycle space of
    ``K_a`` modulo boundaries of ``K_b`` for k=1) and point multiplicities
    follow by inclusion-exclusion. Only practical for tiny fields.
    """
    f = _as_field(f)
    if f.size > 49:
        raise UsageError(f"brute_force_pd is limited to 49 pixels, got {f.size}")
    if cap < f.max():
        raise ConfigError(f"cap {cap} is below the field maximum {f.max()}")
    h, w = f.shape
    flat = f.ravel()
    values = np.unique(flat)
    n = len(values)

    edges = []
    for r in range(h):
        for c in range(w):
            v = r * w + c
            if c + 1 < w:
                edges.append((v, v + 1))
            if r + 1 < h:
                edges.append((v, v + w))
    edge_id = {e: i for i, e in enumerate(edges)}
    edge_val = [max(flat[u], flat[v]) for u, v in edges]
    squares = []
    for r in range(h - 1):
        for c in range(w - 1):
            a, b, cc, d = r * w + c, r * w + c + 1, (r + 1) * w + c, (r + 1) * w + c + 1
            bd = (1 << edge_id[(a, b)]) | (1 << edge_id[(cc, d)]) | (1 << edge_id[(a, cc)]) | (1 << edge_id[(b, d)])
            squares.append((max(flat[[a, b, cc, d]]), bd))

    beta = {0: np.zeros((n + 1, n + 1), dtype=np.int64), 1: np.zeros((n + 1, n + 1), dtype=np.int64)}
    labels = []
    for j in range(n):
        lab, _ = ndimage.label(f <= values[j])  # 4-connectivity
        labels.append(lab)
    for i in range(1, n + 1):
        a = values[i - 1]
        in_a = f <= a
        cycles = _cycle_basis([(k, u, v) for k, (u, v) in enumerate(edges) if edge_val[k] <= a])
        z_dim = len(cycles)
        basis: Dict[int, int] = {}
        for cyc in cycles:
            _echelon_insert(basis, cyc)
        added = [False] * len(squares)
        b_basis: Dict[int, int] = {}
        for j in range(i, n + 1):
            b = values[j - 1]
            beta[0][i, j] = len(np.unique(labels[j - 1][in_a]))
            for k, (sv, bd) in enumerate(squares):
                if not added[k] and sv <= b:
                    added[k] = True
                    _echelon_insert(basis, bd)
                    _echelon_insert(b_basis, bd)
            # dim(Z_a ∩ B_b) = |Z_a| + |B_b| - |Z_a + B_b|
            inter = z_dim + len(b_basis) - len(basis)
            beta[1][i, j] = z_dim - inter

    points: List[PersistencePoint] = []
    for dim in (0, 1):
        bt = beta[dim]
        for i in range(1, n + 1):
            for j in range(i + 1, n + 1):
                mult = bt[i, j - 1] - bt[i, j] - bt[i - 1, j - 1] + bt[i - 1, j]
                if mult < 0:
                    raise AssertionError("negative multiplicity in brute-force diagram")
                points.extend(PersistencePoint(dim, float(values[i - 1]), float(values[j - 1])) for _ in range(mult))
            ess = bt[i, n] - bt[i - 1, n]
            points.extend(PersistencePoint(dim, float(values[i - 1]), float(cap), essential=True) for _ in range(ess))
    return PersistenceDiagram(points, float(cap))


def betti_at(f, threshold: float, dim: int, cap: Optional[float] = None) -> int:
    """Number of ``dim``-classes alive at ``threshold``; essential classes never die."""
    if isinstance(f, PersistenceDiagram):
        diagram = f
    else:
        f = _as_field(f)
        diagram = sublevel_pd(f, max(f.max(), cap if cap is not None else f.max()))
    return sum(1 for p in diagram.by_dim(dim)
               if p.birth <= threshold and (p.essential or threshold < p.death))
