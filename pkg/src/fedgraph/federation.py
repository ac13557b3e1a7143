"""Round-synchronous federated training loop with pluggable aggregation."""

from __future__ import annotations

import csv
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from fedgraph import aggregation as agg
from fedgraph import datagen, nn
from fedgraph.config import FederationConfig
from fedgraph.errors import ConfigError, FedGraphError

logger = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "scope", "metric", "value")
GLOBAL_METRICS = ("loss", "accuracy", "dice")
CLIENT_METRICS = ("local_loss", "n_samples", "alpha_s", "alpha_top", "alpha_w", "alpha")


class RoundError(FedGraphError):
    pass


def is_registered(scope: str, metric: str) -> bool:
    if scope == "global":
        return metric in GLOBAL_METRICS or metric.startswith("gravity_")
    return scope.startswith("client:") and metric in CLIENT_METRICS


@dataclass
class RoundRecord:
    round: int
    global_loss: float
    global_metric: float
    metric_name: str
    local_losses: list[float]
    sizes: list[int]
    alpha: np.ndarray
    alpha_s: np.ndarray
    alpha_top: np.ndarray | None = None
    alpha_w: np.ndarray | None = None
    gravity: np.ndarray | None = None

    def rows(self) -> list[tuple[int, str, str, float]]:
        t = self.round
        out = [
            (t, "global", "loss", self.global_loss),
            (t, "global", self.metric_name, self.global_metric),
        ]
        if self.gravity is not None:
            K = len(self.gravity)
            out += [
                (t, "global", f"gravity_{i}_{j}", float(self.gravity[i, j]))
                for i in range(K) for j in range(i, K)
            ]
        for k in range(len(self.sizes)):
            scope = f"client:{k}"
            out.append((t, scope, "local_loss", self.local_losses[k]))
            out.append((t, scope, "n_samples", self.sizes[k]))
            out.append((t, scope, "alpha_s", float(self.alpha_s[k])))
            if self.alpha_top is not None:
                out.append((t, scope, "alpha_top", float(self.alpha_top[k])))
            if self.alpha_w is not None:
                out.append((t, scope, "alpha_w", float(self.alpha_w[k])))
            out.append((t, scope, "alpha", float(self.alpha[k])))
        return out

    def weight_vectors(self) -> list[np.ndarray]:
        return [v for v in (self.alpha_s, self.alpha_top, self.alpha_w, self.alpha) if v is not None]


@dataclass
class FederationState:
    cfg: FederationConfig
    train: datagen.Dataset
    val: datagen.Dataset
    partition: datagen.Partition
    clients: list[datagen.Dataset]
    global_model: nn.ModelParams
    prev_losses: list[float] | None = None
    # stream id per client for mini-batch shuffling; defaults to the client index
    shuffle_ids: list[int] | None = None


def make_dataset(cfg: FederationConfig) -> datagen.Dataset:
    d = cfg.data
    if d.task == "classification":
        return datagen.make_classification(d.n, d.classes, d.dim, cfg.seed, separation=d.separation)
    return datagen.make_toy_segmentation(d.n, d.hw, cfg.seed)


def build_specs(cfg: FederationConfig) -> list[nn.LayerSpec]:
    d = cfg.data
    if d.task == "classification":
        widths = [d.dim, *cfg.hidden]
        specs = [nn.LayerSpec.dense(a, b, "relu") for a, b in zip(widths, widths[1:])]
        specs.append(nn.LayerSpec.dense(widths[-1], d.classes, "softmax"))
        return specs
    chans = [1, *cfg.channels]
    specs = [nn.LayerSpec.conv2d(3, 3, a, b, "relu") for a, b in zip(chans, chans[1:])]
    specs.append(nn.LayerSpec.conv2d(3, 3, chans[-1], 1, "sigmoid"))
    return specs


def setup(cfg: FederationConfig) -> FederationState:
    """Generate data, split, partition and initialise the global model.

    All configuration problems (including empty client shards) surface here.
    """
    ds = make_dataset(cfg)
    train, val = datagen.train_val_split(ds, 1.0 - cfg.data.val_ratio, cfg.seed)
    if cfg.K > len(train):
        raise ConfigError(f"federation.K={cfg.K} exceeds {len(train)} training samples")
    part = datagen.partition_noniid(
        train, cfg.K, cfg.seed, cfg.data.dirichlet_beta, cfg.data.size_skew
    )
    clients = [train.subset(s) for s in part.shards]
    for k, c in enumerate(clients):
        if len(c) == 0:
            raise ConfigError(f"client {k} received no samples")
    specs = build_specs(cfg)
    nn.check_architecture(specs, train.inputs.shape[1:])
    model = nn.init_model(specs, cfg.seed)
    return FederationState(cfg, train, val, part, clients, model)


def evaluate(model: nn.ModelParams, ds: datagen.Dataset) -> tuple[float, str, float]:
    batch = nn.Batch(ds.inputs, ds.targets)
    loss = nn.loss_value(model, batch)
    pred = nn.forward(model, batch)
    if ds.task == "classification":
        return loss, "accuracy", float(np.mean(pred.argmax(axis=1) == ds.targets))
    return loss, "dice", dice_score(pred[..., 0] >= 0.5, ds.targets >= 0.5)


def dice_score(pred: np.ndarray, truth: np.ndarray) -> float:
    """Hard Dice 2|A & B| / (|A| + |B|); 1.0 when both are empty."""
    inter = np.logical_and(pred, truth).sum()
    total = pred.sum() + truth.sum()
    return 1.0 if total == 0 else float(2.0 * inter / total)


AlphaFn = Callable[[int, Sequence[nn.ModelParams]], Sequence[float]]


def compute_weights(state: FederationState, locals_: Sequence[nn.ModelParams], losses, workers=1):
    cfg = state.cfg
    sizes = state.partition.sizes
    if cfg.strategy == "fedavg":
        a = agg.sample_weights(sizes)
        return agg.AggregationWeights(a, None, None, a)
    if cfg.strategy == "fedcostwavg":
        a = agg.fedcostwavg_weights(sizes, state.prev_losses, losses, cfg.mix_a)
        return agg.AggregationWeights(agg.sample_weights(sizes), None, None, a)
    return agg.fedgraph_round_weights(locals_, state.global_model, sizes, cfg.fedgraph, workers)


def run_round(
    state: FederationState,
    round_idx: int,
    workers: int = 1,
    alpha_fn: AlphaFn | None = None,
) -> tuple[nn.ModelParams, RoundRecord]:
    """Train every client from the current global model, aggregate, evaluate.

    ``state`` is advanced in place. ``alpha_fn`` replaces the strategy's
    combined weight vector (used to pin aggregation in experiments).
    """
    cfg = state.cfg
    start = state.global_model

    def train_client(k):
        data = state.clients[k]
        try:
            return nn.local_train(
                data.inputs, data.targets, start, cfg.E, cfg.lr, cfg.batch_size,
                seed=cfg.seed,
                client=k if state.shuffle_ids is None else state.shuffle_ids[k],
                round_idx=round_idx,
            )
        except Exception as exc:
            raise RoundError(f"round {round_idx}: client {k} failed: {exc}") from exc

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(train_client, range(cfg.K)))
    else:
        results = [train_client(k) for k in range(cfg.K)]
    locals_ = [r.model for r in results]
    losses = [r.final_loss for r in results]

    w = compute_weights(state, locals_, losses, workers)
    alpha = w.alpha
    if alpha_fn is not None:
        alpha = np.asarray(alpha_fn(round_idx, locals_), dtype=np.float64)
    new_global = agg.aggregate(locals_, alpha)
    g_loss, metric_name, g_metric = evaluate(new_global, state.val)

    record = RoundRecord(
        round=round_idx,
        global_loss=g_loss,
        global_metric=g_metric,
        metric_name=metric_name,
        local_losses=losses,
        sizes=state.partition.sizes,
        alpha=alpha,
        alpha_s=w.alpha_s,
        alpha_top=w.alpha_top,
        alpha_w=w.alpha_w,
        gravity=w.gravity,
    )
    state.global_model = new_global
    state.prev_losses = losses
    return new_global, record


class MetricsWriter:
    """Append-only CSV; one flush + fsync per round so a killed run leaves a parseable prefix."""

    def __init__(self, path, header_lines: Sequence[str]):
        self.path = Path(path)
        self.fh = open(self.path, "w", encoding="utf-8", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.fh.write(f"# started: {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        for line in header_lines:
            self.fh.write(f"# {line}\n")
        self.writer.writerow(CSV_COLUMNS)
        self._sync()

    def write_round(self, record: RoundRecord) -> None:
        for t, scope, metric, value in record.rows():
            if not is_registered(scope, metric):
                raise FedGraphError(f"unregistered metric {scope}/{metric}")
            self.writer.writerow((t, scope, metric, repr(value) if isinstance(value, float) else value))
        self._sync()

    def _sync(self):
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def close(self):
        self.fh.close()


def run_experiment(
    cfg: FederationConfig,
    workers: int = 1,
    on_round: Callable[[RoundRecord], None] | None = None,
    alpha_fn: AlphaFn | None = None,
) -> list[RoundRecord]:
    """Run ``cfg.T`` rounds, writing ``metrics.csv`` and ``final.fgck`` under ``cfg.out_dir``."""
    state = setup(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datagen.write_partition_csv(state.train, state.partition, out / "partition.csv")
    writer = MetricsWriter(out / "metrics.csv", cfg.resolved_lines())
    records = []
    try:
        for t in range(1, cfg.T + 1):
            try:
                _, rec = run_round(state, t, workers, alpha_fn)
            except RoundError:
                logger.error("aborted in round %d; last durable round is %d", t, t - 1)
                raise
            try:
                writer.write_round(rec)
                if cfg.round_checkpoints:
                    nn.save_checkpoint(state.global_model, out / f"round_{t:03d}.fgck")
            except OSError as exc:
                raise FedGraphError(
                    f"I/O failure writing round {t} ({exc}); last durable round is {t - 1}"
                ) from exc
            records.append(rec)
            if on_round is not None:
                on_round(rec)
        nn.save_checkpoint(state.global_model, out / "final.fgck")
    finally:
        writer.close()
    return records
