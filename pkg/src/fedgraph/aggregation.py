"""Aggregation weights and strategies: FedAvg, FedCostWAvg and FedGraph."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fedgraph import graphkernel, graphmap
from fedgraph.errors import ConfigError, NumericError
from fedgraph.nn import ModelParams, param_l1_distance

DIST_EPS = 1e-12
SIMPLEX_TOL = 1e-9
STRATEGIES = ("fedavg", "fedcostwavg", "fedgraph")


@dataclass(frozen=True)
class FactorMix:
    s: float = 0.4
    top: float = 0.3
    w: float = 0.3

    def __post_init__(self):
        if min(self.s, self.top, self.w) < 0:
            raise ConfigError(f"mix weights must be >= 0, got {self.as_tuple()}")
        if abs(self.s + self.top + self.w - 1.0) > 1e-12:
            raise ConfigError(f"mix weights must sum to 1, got {self.as_tuple()}")

    def as_tuple(self):
        return (self.s, self.top, self.w)


@dataclass(frozen=True)
class AggregationWeights:
    alpha_s: np.ndarray
    alpha_top: np.ndarray | None
    alpha_w: np.ndarray | None
    alpha: np.ndarray
    gravity: np.ndarray | None = None


@dataclass(frozen=True)
class FedGraphSettings:
    mix: FactorMix = FactorMix()
    prune: graphmap.PruneConfig = graphmap.PruneConfig()
    d: int = graphkernel.DEFAULT_DIM
    L: int = graphkernel.DEFAULT_LEVELS
    gravity_reduce: str = "sum"

    def __post_init__(self):
        if self.gravity_reduce not in ("sum", "mean"):
            raise ConfigError(f"gravity_reduce must be sum or mean, got {self.gravity_reduce!r}")


def on_simplex(v, tol: float = SIMPLEX_TOL) -> bool:
    v = np.asarray(v, dtype=np.float64)
    return bool(np.all(v >= 0) and abs(v.sum() - 1.0) <= tol)


def sample_weights(sizes: Sequence[int]) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes < 1):
        raise ConfigError(f"every client needs >= 1 sample, got {sizes.tolist()}")
    return sizes / sizes.sum()


def softmax(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    e = np.exp(c - c.max())
    return e / e.sum()


def topo_weights(C: np.ndarray, reduce: str = "sum") -> np.ndarray:
    """Softmax of each graph's total gravity (row sum, diagonal included)."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1] or C.shape[0] < 2:
        raise ConfigError(f"gravity matrix must be K x K with K >= 2, got {C.shape}")
    c = C.sum(axis=1)
    if reduce == "mean":
        c = c / C.shape[0]
    return softmax(c)


def inverse_distance_weights(distances) -> np.ndarray:
    d = np.asarray(distances, dtype=np.float64)
    if d.size < 2:
        raise ConfigError("inverse distance weights need K >= 2")
    if np.any(d < 0) or not np.all(np.isfinite(d)):
        raise NumericError(f"distances must be finite and >= 0, got {d.tolist()}")
    inv = 1.0 / np.maximum(d, DIST_EPS)
    return inv / inv.sum()


def combine(alpha_s, alpha_top, alpha_w, mix: FactorMix) -> np.ndarray:
    return (
        mix.s * np.asarray(alpha_s)
        + mix.top * np.asarray(alpha_top)
        + mix.w * np.asarray(alpha_w)
    )


def aggregate(models: Sequence[ModelParams], alpha) -> ModelParams:
    """Element-wise ``sum_k alpha[k] * models[k]``, accumulated in client order."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if len(models) != len(alpha) or not models:
        raise ConfigError(f"{len(models)} models but {len(alpha)} weights")

    def weighted_sum(*arrays):
        out = alpha[0] * arrays[0]
        for a_k, arr in zip(alpha[1:], arrays[1:]):
            out = out + a_k * arr
        return out

    return models[0].map(weighted_sum, *models[1:])


def fedgraph_round_weights(
    local_models: Sequence[ModelParams],
    global_model: ModelParams,
    sizes: Sequence[int],
    settings: FedGraphSettings = FedGraphSettings(),
    workers: int = 1,
) -> AggregationWeights:
    """Three-factor weights from sample counts, pruned-delta topology and L1 distance."""
    if len(local_models) < 2:
        raise ConfigError("FedGraph needs at least two clients")
    deltas = [abs(m - global_model) for m in local_models]
    graphs = [graphmap.prune_delta_graph(graphmap.graph_map(dw), settings.prune) for dw in deltas]
    C = graphkernel.gravity_matrix(graphs, settings.d, settings.L, workers)
    alpha_top = topo_weights(C, settings.gravity_reduce)
    distances = [param_l1_distance(m, global_model) for m in local_models]
    alpha_w = inverse_distance_weights(distances)
    alpha_s = sample_weights(sizes)
    alpha = combine(alpha_s, alpha_top, alpha_w, settings.mix)
    return AggregationWeights(alpha_s, alpha_top, alpha_w, alpha, C)


def fedcostwavg_weights(sizes, prev_losses, curr_losses, mix_a: float = 0.5) -> np.ndarray:
    """Blend of sample share and each client's loss-improvement ratio prev/curr.

    Pass ``prev_losses=None`` on the first round to get plain sample weights.
    """
    alpha_s = sample_weights(sizes)
    if prev_losses is None:
        return alpha_s
    if not 0 <= mix_a <= 1:
        raise ConfigError(f"mix_a must be in [0, 1], got {mix_a}")
    prev = np.asarray(prev_losses, dtype=np.float64)
    curr = np.asarray(curr_losses, dtype=np.float64)
    if np.any(prev <= 0) or np.any(curr <= 0) or not all(map(math.isfinite, [*prev, *curr])):
        raise NumericError(f"losses must be finite and > 0 (prev={prev}, curr={curr})")
    r = prev / curr
    return mix_a * alpha_s + (1.0 - mix_a) * (r / r.sum())
