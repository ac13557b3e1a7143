"""Map model weights (or weight deltas) to a layered topology graph and binarize it.

Each layer becomes a complete bipartite block between its input and output
nodes. A conv kernel slice ``W[:, :, i, o]`` collapses to a single edge
weight; dense weights are used as-is. Consecutive layers share their node
set when the output width of one equals the input width of the next.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedgraph.errors import ConfigError
from fedgraph.nn import ModelParams

# "sum" or "mean"; sum is the default reduction of a kernel to one edge weight
SCALARIZE = "sum"

MODES = ("similarity", "dissimilarity")


@dataclass(frozen=True)
class TopoGraph:
    """Undirected graph with canonical ``u < v`` edges stored as parallel arrays."""

    n_nodes: int
    src: np.ndarray
    dst: np.ndarray
    weight: np.ndarray
    binary: bool = False

    def __post_init__(self):
        for name in ("src", "dst"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float64))
        for a in (self.src, self.dst, self.weight):
            a.flags.writeable = False
        if not (len(self.src) == len(self.dst) == len(self.weight)):
            raise ConfigError("edge arrays differ in length")
        if len(self.src):
            if self.src.min() < 0 or self.dst.max() >= self.n_nodes:
                raise ConfigError("edge endpoint out of range")
            if np.any(self.src >= self.dst):
                raise ConfigError("edges must be canonical (u < v, no self-loops)")
            if len(np.unique(self.src * self.n_nodes + self.dst)) != len(self.src):
                raise ConfigError("duplicate edge")
        if self.binary and np.any(self.weight != 1.0):
            raise ConfigError("binary graph carries a non-unit edge weight")

    @property
    def n_edges(self) -> int:
        return len(self.src)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return list(zip(self.src.tolist(), self.dst.tolist(), self.weight.tolist()))

    def same_structure(self, other: "TopoGraph") -> bool:
        return (
            self.n_nodes == other.n_nodes
            and np.array_equal(self.src, other.src)
            and np.array_equal(self.dst, other.dst)
        )

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.n_nodes, self.n_nodes))
        a[self.src, self.dst] = self.weight
        a[self.dst, self.src] = self.weight
        return a

    def with_weights(self, weight, binary=False) -> "TopoGraph":
        return TopoGraph(self.n_nodes, self.src, self.dst, weight, binary)

    def to_edgelist(self) -> str:
        lines = [f"{self.n_nodes} {self.n_edges}"]
        lines += [f"{u} {v} {w!r}" for u, v, w in self.edges]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_edgelist(cls, text: str, binary=False) -> "TopoGraph":
        rows = text.split("\n")
        n_nodes, n_edges = map(int, rows[0].split())
        body = [r.split() for r in rows[1:1 + n_edges]]
        if len(body) != n_edges:
            raise ConfigError(f"edge list declares {n_edges} edges, found {len(body)}")
        src = [int(r[0]) for r in body]
        dst = [int(r[1]) for r in body]
        w = [float(r[2]) for r in body]
        return cls(n_nodes, src, dst, w, binary)

    def dump(self, path) -> None:
        Path(path).write_text(self.to_edgelist(), encoding="utf-8")


@dataclass(frozen=True)
class PruneConfig:
    mode: str = "dissimilarity"
    delta: float | None = 0.01
    lam: float | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"prune mode must be one of {MODES}, got {self.mode!r}")
        if (self.delta is None) == (self.lam is None):
            raise ConfigError("exactly one of prune.delta and prune.lambda must be set")
        if self.delta is not None and not self.delta >= 0:
            raise ConfigError(f"prune.delta must be >= 0, got {self.delta}")
        if self.lam is not None and not 0 <= self.lam <= 1:
            raise ConfigError(f"prune.lambda must be in [0, 1], got {self.lam}")


def scalarize_kernel(kernel, how: str | None = None) -> float:
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.size == 0:
        raise ConfigError("cannot scalarize an empty kernel")
    how = how or SCALARIZE
    if how == "sum":
        return float(kernel.sum())
    if how == "mean":
        return float(kernel.mean())
    raise ConfigError(f"unknown scalarization {how!r}")


def layer_edge_matrix(weight: np.ndarray, kind: str, how: str | None = None) -> np.ndarray:
    """``(n_in, n_out)`` matrix of edge weights for one layer."""
    if kind == "conv2d":
        how = how or SCALARIZE
        if how not in ("sum", "mean"):
            raise ConfigError(f"unknown scalarization {how!r}")
        return weight.sum(axis=(0, 1)) if how == "sum" else weight.mean(axis=(0, 1))
    return np.abs(weight)


def graph_map(model: ModelParams, how: str | None = None) -> TopoGraph:
    """Chain all layers into a single graph (biases ignored).

    Intended for absolute deltas ``|w_k - w_g|``; dense edges take ``|w|``,
    conv edges the scalarized kernel slice.
    """
    src, dst, wts = [], [], []
    n_nodes = 0
    prev_out = None  # (offset, width) of the previous layer's output nodes
    for j, layer in enumerate(model.layers):
        n_in, n_out = layer.spec.channels
        if n_in < 1 or n_out < 1:
            raise ConfigError(f"layer {j} has zero channels")
        if prev_out is not None and prev_out[1] == n_in:
            in_off = prev_out[0]
        else:
            in_off = n_nodes
            n_nodes += n_in
        out_off = n_nodes
        n_nodes += n_out
        mat = layer_edge_matrix(layer.weight, layer.spec.kind, how)
        ii, oo = np.meshgrid(np.arange(n_in), np.arange(n_out), indexing="ij")
        src.append((in_off + ii).ravel())
        dst.append((out_off + oo).ravel())
        wts.append(mat.ravel())
        prev_out = (out_off, n_out)
    return TopoGraph(n_nodes, np.concatenate(src), np.concatenate(dst), np.concatenate(wts))


def quantile_threshold(diffs, lam: float) -> float:
    """Value at index ``floor(lam * l)`` of the ascending sort, clamped to ``l - 1``."""
    diffs = np.sort(np.asarray(diffs, dtype=np.float64))
    if diffs.size == 0:
        raise ConfigError("quantile threshold of an empty list")
    if not 0 <= lam <= 1:
        raise ConfigError(f"lambda must be in [0, 1], got {lam}")
    idx = min(math.floor(lam * diffs.size), diffs.size - 1)
    return float(diffs[idx])


def kept_mask(diffs: np.ndarray, cfg: PruneConfig) -> np.ndarray:
    if cfg.delta is not None:
        delta = cfg.delta
    elif diffs.size == 0:
        return np.zeros(0, dtype=bool)
    else:
        delta = quantile_threshold(diffs, cfg.lam)
    if cfg.mode == "similarity":
        return diffs < delta
    return diffs >= delta


def graph_prune(g_local: TopoGraph, g_global: TopoGraph, cfg: PruneConfig) -> TopoGraph:
    """Binary graph keeping the edges whose weight difference passes the threshold.

    Similarity keeps ``d < delta``; dissimilarity keeps ``d >= delta``. All
    nodes are preserved.
    """
    if not g_local.same_structure(g_global):
        raise AssertionError("graph_prune needs structurally identical graphs")
    diffs = np.abs(g_local.weight - g_global.weight)
    keep = kept_mask(diffs, cfg)
    return TopoGraph(
        g_local.n_nodes, g_local.src[keep], g_local.dst[keep], np.ones(int(keep.sum())), True
    )


def prune_delta_graph(g_delta: TopoGraph, cfg: PruneConfig) -> TopoGraph:
    """Prune a graph mapped from a weight delta against a zero-weighted twin."""
    return graph_prune(g_delta, g_delta.with_weights(np.zeros(g_delta.n_edges)), cfg)
