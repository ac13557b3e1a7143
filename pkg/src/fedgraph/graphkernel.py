"""Pyramid match graph kernel over adjacency-eigenvector node embeddings."""

from __future__ import annotations

from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np

from fedgraph.errors import ConfigError
from fedgraph.graphmap import TopoGraph

DEFAULT_DIM = 6
DEFAULT_LEVELS = 4


def embed_nodes(g: TopoGraph, d: int = DEFAULT_DIM) -> np.ndarray:
    """``(n_nodes, d)`` embedding with entries in [0, 1].

    Columns are the absolute values of the ``d`` adjacency eigenvectors with
    largest ``|eigenvalue|``, zero-padded when the graph has fewer than ``d``
    nodes. Ties in ``|eigenvalue|`` put positive eigenvalues first, then the
    vector whose largest component sits at the lower node index.
    """
    if d < 1:
        raise ConfigError(f"embedding dimension must be >= 1, got {d}")
    n = g.n_nodes
    out = np.zeros((n, d))
    if n == 0:
        return out
    adj = (g.adjacency() != 0).astype(np.float64)
    if not adj.any():
        return out
    vals, vecs = np.linalg.eigh(adj)
    absvecs = np.abs(vecs)
    mags = np.round(np.abs(vals), 10)
    order = sorted(
        range(n), key=lambda i: (-mags[i], -np.sign(vals[i]), int(np.argmax(absvecs[:, i])))
    )
    k = min(d, n)
    out[:, :k] = np.clip(absvecs[:, order[:k]], 0.0, 1.0)
    return out


def cell_indices(emb: np.ndarray, level: int) -> np.ndarray:
    """Integer cell coordinates at ``level``; a coordinate of exactly 1.0 goes to the last cell."""
    cells = 2 ** level
    idx = np.floor(np.asarray(emb) * cells).astype(np.int64)
    return np.clip(idx, 0, cells - 1)


def build_pyramid(emb: np.ndarray, L: int = DEFAULT_LEVELS) -> list[Counter]:
    """Sparse histograms for levels ``0..L`` keyed by cell-coordinate tuples."""
    if L < 0:
        raise ConfigError(f"pyramid depth must be >= 0, got {L}")
    return [Counter(map(tuple, cell_indices(emb, lvl).tolist())) for lvl in range(L + 1)]


def histogram_intersection(h1: Counter, h2: Counter) -> int:
    if len(h1) > len(h2):
        h1, h2 = h2, h1
    return sum(min(c, h2[cell]) for cell, c in h1.items() if cell in h2)


def pyramid_match_histograms(p1: Sequence[Counter], p2: Sequence[Counter]) -> float:
    """New matches at coarser level ``l`` weigh ``1 / 2**(L - l)``; finest-level matches weigh 1."""
    if len(p1) != len(p2):
        raise ConfigError("pyramids have different depths")
    L = len(p1) - 1
    inter = [histogram_intersection(a, b) for a, b in zip(p1, p2)]
    k = float(inter[L])
    for lvl in range(L):
        k += (inter[lvl] - inter[lvl + 1]) / 2 ** (L - lvl)
    return k


def pyramid_match(g1: TopoGraph, g2: TopoGraph, d: int = DEFAULT_DIM, L: int = DEFAULT_LEVELS) -> float:
    return pyramid_match_histograms(
        build_pyramid(embed_nodes(g1, d), L), build_pyramid(embed_nodes(g2, d), L)
    )


def gravity_matrix(
    graphs: Sequence[TopoGraph],
    d: int = DEFAULT_DIM,
    L: int = DEFAULT_LEVELS,
    workers: int = 1,
) -> np.ndarray:
    """Symmetric ``K x K`` matrix of pairwise kernel values, diagonal included."""
    K = len(graphs)
    if K < 2:
        raise ConfigError(f"gravity matrix needs K >= 2 graphs, got {K}")
    pyramids = [build_pyramid(embed_nodes(g, d), L) for g in graphs]
    pairs = [(i, j) for i in range(K) for j in range(i, K)]

    def one(pair):
        return pyramid_match_histograms(pyramids[pair[0]], pyramids[pair[1]])

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            values = list(pool.map(one, pairs))
    else:
        values = [one(p) for p in pairs]
    C = np.zeros((K, K))
    for (i, j), v in zip(pairs, values):
        C[i, j] = C[j, i] = v
    return C
