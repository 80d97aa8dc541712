"""Reliable token mining.

Pipeline: |X1 - X2| -> spatial graph weighted by difference-feature dot
products -> GCN -> coarse change map P -> the K positions with smallest P ->
K-means (per branch) -> L anchor tokens.

Selection indices and cluster assignments are constants on the tape; the
anchors are differentiable functions of the gathered feature values because
each centroid is written as an averaging matrix times the selected rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import numerics as nx
from .backbone import FeatureMap
from .numerics import ParameterRegistry, ShapeError, Tensor, ops

VALID_KNN = (4, 8, 16)

_VON_NEUMANN = [(-1, 0), (0, -1), (0, 1), (1, 0)]
_MOORE = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if (di, dj) != (0, 0)]
_KNIGHT = [(-2, -1), (-2, 1), (-1, -2), (-1, 2), (1, -2), (1, 2), (2, -1), (2, 1)]
STENCILS = {4: _VON_NEUMANN, 8: _MOORE, 16: _MOORE + _KNIGHT}


@dataclass
class RTMConfig:
    k: int = 1000
    l: int = 10  # noqa: E741
    layers: int = 1
    knn: int = 8
    seed: int = 0
    max_iters: int = 50
    aux_loss: bool = False
    aux_weight: float = 0.1
    restarts: int = 10

    def validate(self) -> None:
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.knn not in VALID_KNN:
            raise ValueError(f"knn must be one of 4, 8, 16 (got {self.knn})")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.l < 1 or self.l > self.k:
            raise ValueError("l must satisfy 1 <= l <= k")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class DifferenceMap:
    data: Tensor  # HW x C
    grid: tuple


@dataclass
class SpatialGraph:
    n: int
    grid: tuple
    neighbor_lists: list
    weights: list  # weights[i][t] pairs with neighbor_lists[i][t]

    def edges(self) -> dict:
        """Undirected edges {(i, j): w} with i < j."""
        out = {}
        for i, (nbrs, ws) in enumerate(zip(self.neighbor_lists, self.weights)):
            for j, w in zip(nbrs, ws):
                if i < j:
                    out[(i, int(j))] = float(w)
        return out

    def dense(self) -> np.ndarray:
        a = np.zeros((self.n, self.n))
        for i, (nbrs, ws) in enumerate(zip(self.neighbor_lists, self.weights)):
            a[i, nbrs] = ws
        return a

    def degree(self, i: int) -> int:
        return len(self.neighbor_lists[i])


@dataclass
class CoarseChangeMap:
    data: Tensor  # HW x 1, values in [0, 1]
    grid: tuple

    def as_image(self) -> np.ndarray:
        return self.data.data.reshape(self.grid)


@dataclass
class AnchorTokens:
    tokens: Tensor  # L x C
    branch: int
    assignments: np.ndarray
    sse_history: list = field(default_factory=list)


@dataclass
class RTMOutput:
    t1: AnchorTokens
    t2: AnchorTokens
    p: CoarseChangeMap
    indices: np.ndarray
    f1: Tensor
    f2: Tensor
    xbar: DifferenceMap
    k: int


# -- difference map and graph -------------------------------------------------


def _flatten(x: FeatureMap | Tensor) -> tuple[Tensor, tuple]:
    t = x.data if isinstance(x, FeatureMap) else x
    if t.ndim == 3:
        grid = t.shape[:2]
        return nx.reshape(t, (grid[0] * grid[1], t.shape[2])), grid
    if t.ndim == 2:
        return t, (t.shape[0], 1)
    raise ShapeError(f"expected H x W x C or HW x C features, got {t.shape}")


def difference_map(x1: FeatureMap | Tensor, x2: FeatureMap | Tensor) -> DifferenceMap:
    a, grid = _flatten(x1)
    b, grid2 = _flatten(x2)
    if a.shape != b.shape or grid != grid2:
        raise ShapeError(f"feature maps differ in shape: {a.shape} vs {b.shape}")
    return DifferenceMap(nx.absolute(nx.sub(a, b)), tuple(grid))


def grid_neighbors(grid: tuple, knn: int) -> list:
    if knn not in STENCILS:
        raise ValueError(f"knn must be one of 4, 8, 16 (got {knn})")
    h, w = grid
    out = []
    for i in range(h):
        for j in range(w):
            nbrs = [
                (i + di) * w + (j + dj)
                for di, dj in STENCILS[knn]
                if 0 <= i + di < h and 0 <= j + dj < w
            ]
            out.append(np.array(sorted(nbrs), dtype=np.int64))
    return out


def build_adjacency(xbar: DifferenceMap | np.ndarray | Tensor, grid: tuple, knn: int = 8) -> SpatialGraph:
    """Weighted grid graph with ``A_ij = xbar_i . xbar_j`` on spatially adjacent pairs."""
    if isinstance(xbar, DifferenceMap):
        feats = xbar.data.data
    elif isinstance(xbar, Tensor):
        feats = xbar.data
    else:
        feats = np.asarray(xbar, dtype=float)
    n = grid[0] * grid[1]
    if feats.shape[0] != n:
        raise ShapeError(f"{feats.shape[0]} feature rows for a {grid} grid")
    nbrs = grid_neighbors(grid, knn)
    weights = [feats[nl] @ feats[i] if len(nl) else np.zeros(0) for i, nl in enumerate(nbrs)]
    return SpatialGraph(n, tuple(grid), nbrs, weights)


def normalized_operator(graph: SpatialGraph) -> np.ndarray:
    """``D^-1/2 (I + A) D^-1/2`` with ``D`` the row sums of ``I + A``."""
    a_tilde = graph.dense() + np.eye(graph.n)
    d = a_tilde.sum(axis=1)
    inv_sqrt = 1.0 / np.sqrt(d)
    return inv_sqrt[:, None] * a_tilde * inv_sqrt[None, :]


def normalized_operator_sparse(graph: SpatialGraph, dtype=np.float64) -> sparse.csr_matrix:
    """Sparse form of :func:`normalized_operator`; used on the forward path."""
    rows = np.concatenate([np.full(len(nl), i) for i, nl in enumerate(graph.neighbor_lists)] + [np.arange(graph.n)])
    cols = np.concatenate(list(graph.neighbor_lists) + [np.arange(graph.n)])
    vals = np.concatenate([np.asarray(w, dtype=float) for w in graph.weights] + [np.ones(graph.n)])
    a_tilde = sparse.csr_matrix((vals, (rows, cols)), shape=(graph.n, graph.n))
    inv_sqrt = 1.0 / np.sqrt(np.asarray(a_tilde.sum(axis=1)).ravel())
    scale = sparse.diags(inv_sqrt)
    return (scale @ a_tilde @ scale).astype(dtype).tocsr()


# -- GCN ----------------------------------------------------------------------


def init_gcn(reg: ParameterRegistry, channels: int, layers: int, rng: np.random.Generator, prefix="gcn") -> None:
    # nonnegative weights keep P monotone in the smoothed difference magnitude
    for l in range(layers):  # noqa: E741
        cout = 1 if l == layers - 1 else channels
        reg.add(f"{prefix}.w{l}", np.abs(rng.standard_normal((channels, cout))) * np.sqrt(2.0 / channels))


def gcn_weights(reg: ParameterRegistry, layers: int, prefix="gcn") -> list:
    return [reg[f"{prefix}.w{l}"] for l in range(layers)]  # noqa: E741


def gcn_forward(graph: SpatialGraph, h: Tensor, weights: list, layers: int | None = None) -> CoarseChangeMap:
    """Stacked ``sigma(A_hat @ H @ W)``; ReLU on hidden layers, sigmoid on the last."""
    layers = len(weights) if layers is None else layers
    if layers < 1 or layers > len(weights):
        raise ValueError(f"need 1 <= layers <= {len(weights)}, got {layers}")
    if h.shape[0] != graph.n:
        raise ShapeError(f"{h.shape[0]} node features for a graph of {graph.n} nodes")
    a_hat = normalized_operator_sparse(graph, h.dtype)
    x = h
    for l in range(layers):  # noqa: E741
        z = nx.matmul(ops.constant_matmul(a_hat, x), weights[l])
        x = nx.sigmoid(z) if l == layers - 1 else nx.relu(z)
    if x.shape[1] != 1:
        raise ShapeError(f"final GCN layer must project to 1 channel, got {x.shape[1]}")
    return CoarseChangeMap(x, graph.grid)


# -- selection ----------------------------------------------------------------


def topk_indices(p: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` smallest values, ties by index, returned in ascending index order."""
    p = np.asarray(p).reshape(-1)
    if not 1 <= k <= p.size:
        raise ValueError(f"k must lie in [1, {p.size}], got {k}")
    order = np.lexsort((np.arange(p.size), p))
    return np.sort(order[:k])


def select_topk_unchanged(p: CoarseChangeMap | np.ndarray, x1, x2, k: int):
    pv = p.data.data if isinstance(p, CoarseChangeMap) else np.asarray(p)
    idx = topk_indices(pv, k)
    a, _ = _flatten(x1)
    b, _ = _flatten(x2)
    return nx.take_rows(a, idx), nx.take_rows(b, idx), idx


# -- K-means ------------------------------------------------------------------


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def kmeanspp_init(x: np.ndarray, l: int, rng: np.random.Generator) -> np.ndarray:  # noqa: E741
    n = x.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen])[:, 0]
    for _ in range(1, l):
        total = d2.sum()
        nxt = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return np.array(chosen, dtype=np.int64)


def _averaging_matrix(assign: np.ndarray, l: int, n: int, fallback: dict) -> np.ndarray:  # noqa: E741
    m = np.zeros((l, n))
    m[assign, np.arange(n)] = 1.0
    counts = m.sum(1)
    for c in range(l):
        if counts[c] == 0:
            m[c, fallback[c]] = 1.0
            counts[c] = 1.0
    return m / counts[:, None]


def lloyd_once(x: np.ndarray, l: int, max_iters: int, rng: np.random.Generator):  # noqa: E741
    """One Lloyd run from k-means++ seeds drawn with ``rng``.

    Returns ``(averaging_matrix, assignments, sse_history, seeds)``. Empty
    clusters are re-seeded to the point farthest from its current centroid.
    """
    n = x.shape[0]
    seeds = kmeanspp_init(x, l, rng)
    fallback = {c: int(s) for c, s in enumerate(seeds)}
    centers = x[seeds].copy()
    assign = np.argmin(_sq_dists(x, centers), axis=1)
    history = []
    for _ in range(max_iters):
        counts = np.bincount(assign, minlength=l)
        empty = np.flatnonzero(counts == 0)
        m = _averaging_matrix(assign, l, n, fallback)
        centers = m @ x
        if empty.size:
            resid = ((x - centers[assign]) ** 2).sum(1)
            for c in empty:
                p = int(np.argmax(resid))
                fallback[int(c)] = p
                centers[c] = x[p]
                resid[p] = -1.0
        history.append(float(((x - centers[assign]) ** 2).sum()))
        new_assign = np.argmin(_sq_dists(x, centers), axis=1)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
    else:
        history.append(float(((x - (_averaging_matrix(assign, l, n, fallback) @ x)[assign]) ** 2).sum()))
    return _averaging_matrix(assign, l, n, fallback), assign, history, seeds


def restart_rng(seed: int, r: int) -> np.random.Generator:
    return np.random.default_rng(seed if r == 0 else [seed, r])


def lloyd(x: np.ndarray, l: int, max_iters: int, seed: int, restarts: int = 10):  # noqa: E741
    """Best of ``restarts`` seeded Lloyd runs by final SSE (ties keep the earliest).

    Returns ``(averaging_matrix, assignments, sse_history)`` of the kept run.
    """
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    best = None
    for r in range(restarts):
        run = lloyd_once(x, l, max_iters, restart_rng(seed, r))
        if best is None or run[2][-1] < best[2][-1]:
            best = run
    return best[:3]


def kmeans_cluster(
    f: Tensor, l: int, max_iters: int = 50, seed: int = 0, branch: int = 1, restarts: int = 10  # noqa: E741
) -> AnchorTokens:
    if l < 1 or l > f.shape[0]:
        raise ValueError(f"l must lie in [1, {f.shape[0]}], got {l}")
    m, assign, history = lloyd(np.asarray(f.data, dtype=np.float64), l, max_iters, seed, restarts)
    tokens = nx.matmul(Tensor(m.astype(f.dtype)), f)
    return AnchorTokens(tokens, branch, assign, history)


def sse(x: np.ndarray, centers: np.ndarray, assign: np.ndarray) -> float:
    return float(((x - centers[assign]) ** 2).sum())


# -- composition --------------------------------------------------------------


def mine_reliable_tokens(x1: FeatureMap, x2: FeatureMap, cfg: RTMConfig, weights: list) -> RTMOutput:
    cfg.validate()
    xbar = difference_map(x1, x2)
    n = xbar.data.shape[0]
    k = min(cfg.k, n)
    l = min(cfg.l, k)  # noqa: E741
    graph = build_adjacency(xbar, xbar.grid, cfg.knn)
    p = gcn_forward(graph, xbar.data, weights, cfg.layers)
    f1, f2, idx = select_topk_unchanged(p, x1, x2, k)
    t1 = kmeans_cluster(f1, l, cfg.max_iters, cfg.seed, branch=1, restarts=cfg.restarts)
    t2 = kmeans_cluster(f2, l, cfg.max_iters, cfg.seed, branch=2, restarts=cfg.restarts)
    return RTMOutput(t1, t2, p, idx, f1, f2, xbar, k)


def uniform_tokens(x: FeatureMap, l: int) -> Tensor:  # noqa: E741
    """``l`` rows at uniform stride over the flattened map (no-mining fallback)."""
    flat, _ = _flatten(x)
    n = flat.shape[0]
    l = min(l, n)  # noqa: E741
    idx = (np.arange(l) * n) // l
    return nx.take_rows(flat, idx)
