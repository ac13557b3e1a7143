"""Run configuration: TOML files, dotted-key overrides and validation.

Recognised keys (dotted form, as accepted by ``--set``)::

    seed
    federation.K  federation.T  federation.E
    train.lr  train.batch_size
    strategy.name                       fedavg | fedcostwavg | fedgraph
    strategy.mix.s  strategy.mix.top  strategy.mix.w     (fedgraph only)
    strategy.gravity_reduce             (fedgraph only)  sum | mean
    strategy.mix_a                      (fedcostwavg only)
    prune.mode  prune.delta | prune.lambda
    kernel.d  kernel.L
    data.task  data.n  data.classes  data.dim  data.separation  data.hw
    data.dirichlet_beta  data.size_skew  data.val_ratio
    model.hidden  model.channels
    output.dir  output.round_checkpoints
"""

from __future__ import annotations

import copy
import json
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from fedgraph.aggregation import STRATEGIES, FactorMix, FedGraphSettings
from fedgraph.datagen import TASKS
from fedgraph.errors import ConfigError
from fedgraph.graphmap import PruneConfig

PROFILES = ("desk", "fullscale", "smoke")

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "federation": {"K": 5, "T": 20, "E": 3},
    "train": {"lr": 0.05, "batch_size": 16},
    "prune": {"mode": "dissimilarity", "delta": 0.01},
    "kernel": {"d": 6, "L": 4},
    "data": {
        "task": "classification",
        "n": 341,
        "classes": 3,
        "dim": 10,
        "separation": 1.0,
        "hw": 12,
        "dirichlet_beta": 0.5,
        "size_skew": 1.3,
        "val_ratio": 0.2,
    },
    "model": {"hidden": [16], "channels": [4, 4]},
    "output": {"dir": "runs/default", "round_checkpoints": False},
}

_STRATEGY_KEYS = {
    "fedavg": {"name"},
    "fedcostwavg": {"name", "mix_a"},
    "fedgraph": {"name", "mix", "gravity_reduce"},
}


@dataclass(frozen=True)
class DataConfig:
    task: str = "classification"
    n: int = 341
    classes: int = 3
    dim: int = 10
    separation: float = 1.0
    hw: int = 12
    dirichlet_beta: float | None = 0.5
    size_skew: float | None = 1.3
    val_ratio: float = 0.2


@dataclass(frozen=True)
class FederationConfig:
    K: int = 5
    T: int = 20
    E: int = 3
    lr: float = 0.05
    batch_size: int = 16
    strategy: str = "fedgraph"
    fedgraph: FedGraphSettings = FedGraphSettings()
    mix_a: float = 0.5
    data: DataConfig = DataConfig()
    hidden: tuple[int, ...] = (16,)
    channels: tuple[int, ...] = (4, 4)
    seed: int = 0
    out_dir: str = "runs/default"
    round_checkpoints: bool = False
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.K < 2:
            raise ConfigError(f"federation.K must be >= 2, got {self.K}")
        if self.T < 1:
            raise ConfigError(f"federation.T must be >= 1, got {self.T}")
        if self.E < 1:
            raise ConfigError(f"federation.E must be >= 1, got {self.E}")
        if not self.lr > 0:
            raise ConfigError(f"train.lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy.name must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.data.task not in TASKS:
            raise ConfigError(f"data.task must be one of {TASKS}, got {self.data.task!r}")

    def resolved_lines(self) -> list[str]:
        return [f"{k} = {json.dumps(v)}" for k, v in flatten(self.raw).items()]


def flatten(tree: dict, prefix: str = "") -> dict[str, Any]:
    out = {}
    for k in sorted(tree):
        v = tree[k]
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def deep_merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_value(text: str) -> Any:
    """TOML literal if it parses as one (``3``, ``0.5``, ``true``, ``[16, 8]``), else a string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def set_dotted(tree: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    node = tree
    for p in parts[:-1]:
        nxt = node.setdefault(p, {})
        if not isinstance(nxt, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a table")
        node = nxt
    node[parts[-1]] = value


def profile_path(name: str):
    return resources.files("fedgraph").joinpath("profiles", f"{name}.toml")


def read_config_file(path) -> dict:
    """Parse a TOML config file or a built-in profile name."""
    p = Path(path)
    if not p.is_file() and str(path) in PROFILES:
        text = profile_path(str(path)).read_text(encoding="utf-8")
        where = f"profile {path}"
    else:
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        where = str(path)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def apply_overrides(tree: dict, overrides: list[str] | None = None, seed=None, out=None) -> dict:
    tree = copy.deepcopy(tree)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        set_dotted(tree, key.strip(), parse_value(value.strip()))
    if seed is not None:
        tree["seed"] = int(seed)
    if out is not None:
        set_dotted(tree, "output.dir", str(out))
    return tree


def _take(section: dict, name: str, allowed: set[str]) -> dict:
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key {name}.{sorted(unknown)[0]}")
    return section


def _typed(tree: dict, key: str, kind):
    node = tree
    for p in key.split("."):
        node = node[p]
    if kind is float and isinstance(node, int) and not isinstance(node, bool):
        node = float(node)
    if kind is int and isinstance(node, bool):
        raise ConfigError(f"{key} must be an integer, got {node!r}")
    if not isinstance(node, kind):
        raise ConfigError(f"{key} must be {kind.__name__}, got {node!r}")
    return node


def build_config(user: dict) -> FederationConfig:
    """Validate a parsed config tree (defaults filled in) into a FederationConfig."""
    top_allowed = {"seed", "federation", "train", "strategy", "prune", "kernel", "data", "model", "output"}
    unknown = set(user) - top_allowed
    if unknown:
        raise ConfigError(f"unknown key {sorted(unknown)[0]}")
    strat = user.get("strategy")
    if not isinstance(strat, dict) or "name" not in strat:
        raise ConfigError("missing required field strategy.name")
    name = strat["name"]
    if name not in STRATEGIES:
        raise ConfigError(f"strategy.name must be one of {STRATEGIES}, got {name!r}")
    extra = set(strat) - _STRATEGY_KEYS[name]
    if extra:
        raise ConfigError(f"strategy.{sorted(extra)[0]} is not valid for strategy {name!r}")

    tree = deep_merge(DEFAULTS, user)
    if "lambda" in tree["prune"] and "delta" not in user.get("prune", {}):
        tree["prune"].pop("delta", None)
    _take(tree["federation"], "federation", {"K", "T", "E"})
    _take(tree["train"], "train", {"lr", "batch_size"})
    _take(tree["prune"], "prune", {"mode", "delta", "lambda"})
    _take(tree["kernel"], "kernel", {"d", "L"})
    _take(tree["data"], "data", set(DEFAULTS["data"]))
    _take(tree["model"], "model", {"hidden", "channels"})
    _take(tree["output"], "output", {"dir", "round_checkpoints"})

    if name == "fedgraph":
        mix = _take(strat.get("mix", {}), "strategy.mix", {"s", "top", "w"})
        mix_t = FactorMix(
            float(mix.get("s", 0.4)), float(mix.get("top", 0.3)), float(mix.get("w", 0.3))
        )
        tree["strategy"]["mix"] = dict(zip(("s", "top", "w"), mix_t.as_tuple()))
        tree["strategy"].setdefault("gravity_reduce", "sum")
    elif name == "fedcostwavg":
        tree["strategy"].setdefault("mix_a", 0.5)

    prune = tree["prune"]
    prune_cfg = PruneConfig(
        mode=prune.get("mode", "dissimilarity"),
        delta=float(prune["delta"]) if "delta" in prune else None,
        lam=float(prune["lambda"]) if "lambda" in prune else None,
    )
    d, L = _typed(tree, "kernel.d", int), _typed(tree, "kernel.L", int)
    if d < 1 or L < 0:
        raise ConfigError(f"kernel.d must be >= 1 and kernel.L >= 0, got d={d}, L={L}")
    settings = FedGraphSettings(
        mix=FactorMix(**tree["strategy"]["mix"]) if name == "fedgraph" else FactorMix(),
        prune=prune_cfg,
        d=d,
        L=L,
        gravity_reduce=tree["strategy"].get("gravity_reduce", "sum"),
    )
    dd = tree["data"]
    beta = dd["dirichlet_beta"]
    skew = dd["size_skew"]
    data = DataConfig(
        task=dd["task"],
        n=_typed(tree, "data.n", int),
        classes=_typed(tree, "data.classes", int),
        dim=_typed(tree, "data.dim", int),
        separation=_typed(tree, "data.separation", float),
        hw=_typed(tree, "data.hw", int),
        dirichlet_beta=None if beta in (False, "none", 0) else float(beta),
        size_skew=None if skew in (False, "none", 0) else float(skew),
        val_ratio=_typed(tree, "data.val_ratio", float),
    )
    return FederationConfig(
        K=_typed(tree, "federation.K", int),
        T=_typed(tree, "federation.T", int),
        E=_typed(tree, "federation.E", int),
        lr=_typed(tree, "train.lr", float),
        batch_size=_typed(tree, "train.batch_size", int),
        strategy=name,
        fedgraph=settings,
        mix_a=float(tree["strategy"].get("mix_a", 0.5)),
        data=data,
        hidden=tuple(int(h) for h in tree["model"]["hidden"]),
        channels=tuple(int(c) for c in tree["model"]["channels"]),
        seed=_typed(tree, "seed", int),
        out_dir=str(tree["output"]["dir"]),
        round_checkpoints=bool(tree["output"]["round_checkpoints"]),
        raw=tree,
    )


def load_config(path, overrides=None, seed=None, out=None) -> FederationConfig:
    return build_config(apply_overrides(read_config_file(path), overrides, seed, out))


def config_from_dict(tree: dict, overrides=None) -> FederationConfig:
    return build_config(apply_overrides(tree, overrides))
