"""Command-line entry point: ``fedgraph run | sweep | inspect``."""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from fedgraph import nn
from fedgraph.config import FederationConfig, apply_overrides, build_config, read_config_file
from fedgraph.errors import CheckpointError, ConfigError, FedGraphError
from fedgraph.federation import RoundRecord, run_experiment

logger = logging.getLogger("fedgraph")

SWEEP_DEFAULTS = {
    "delta": ["0.001", "0.01", "0.1"],
    "mode": ["similarity", "dissimilarity"],
    "mix": ["1:0:0", "0.5:0.5:0", "0.4:0.3:0.3"],
    "strategy": ["fedavg", "fedcostwavg", "fedgraph"],
}


def setup_logging():
    level = os.environ.get("FEDGRAPH_LOG", "info").lower()
    if level not in ("error", "info", "debug"):
        level = "info"
    logging.basicConfig(
        level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s"
    )


def with_strategy(tree: dict, name: str, **extra) -> dict:
    tree = copy.deepcopy(tree)
    tree["strategy"] = {"name": name, **extra}
    return tree


def print_round(rec: RoundRecord) -> None:
    alpha = " ".join(f"{a:.3f}" for a in rec.alpha)
    print(
        f"round {rec.round:3d}  loss {rec.global_loss:.4f}  "
        f"{rec.metric_name} {rec.global_metric:.4f}  alpha [{alpha}]",
        flush=True,
    )


def print_banner(cfg: FederationConfig) -> None:
    print("resolved config:")
    for line in cfg.resolved_lines():
        print(f"  {line}")


def _load_tree(args) -> dict:
    tree = read_config_file(args.config)
    return apply_overrides(tree, args.set, args.seed, args.out)


def cmd_run(args) -> int:
    cfg = build_config(_load_tree(args))
    print_banner(cfg)
    run_experiment(cfg, workers=args.workers, on_round=print_round)
    print(f"wrote {Path(cfg.out_dir) / 'metrics.csv'} and {Path(cfg.out_dir) / 'final.fgck'}")
    return 0


def _parse_mix(text: str) -> dict:
    parts = [float(x) for x in text.replace(",", ":").split(":")]
    if len(parts) != 3:
        raise ConfigError(f"mix values look like s:top:w, got {text!r}")
    return dict(zip(("s", "top", "w"), parts))


def sweep_settings(tree: dict, axis: str, values: list[str]) -> list[tuple[str, dict]]:
    out = []
    for v in values:
        t = copy.deepcopy(tree)
        if axis == "strategy":
            t = with_strategy(t, v)
        else:
            if t.get("strategy", {}).get("name") != "fedgraph":
                t = with_strategy(t, "fedgraph")
            if axis == "delta":
                t.setdefault("prune", {}).pop("lambda", None)
                t["prune"]["delta"] = float(v)
            elif axis == "mode":
                t.setdefault("prune", {})["mode"] = v
            elif axis == "mix":
                t["strategy"]["mix"] = _parse_mix(v)
            else:
                raise ConfigError(f"unknown sweep axis {axis!r}")
        label = f"{axis}={v.replace(':', '-')}"
        out.append((label, t))
    return out


def cmd_sweep(args) -> int:
    base = _load_tree(args)
    base_out = Path(base.get("output", {}).get("dir", "runs/default")) / f"sweep_{args.axis}"
    values = args.values.split(",") if args.values and args.axis != "mix" else None
    if args.axis == "mix" and args.values:
        values = args.values.split(";")
    values = values or SWEEP_DEFAULTS[args.axis]
    settings = sweep_settings(base, args.axis, values)
    cfgs = []
    for label, tree in settings:
        tree.setdefault("output", {})["dir"] = str(base_out / label)
        cfgs.append((label, build_config(tree)))

    results = []
    for label, cfg in cfgs:
        print(f"== {label}")
        print_banner(cfg)
        recs = run_experiment(cfg, workers=args.workers, on_round=print_round)
        results.append((label, cfg, recs))

    status = 0
    if args.axis == "mix":
        status = _check_fedavg_reduction(base, base_out, results, args.workers)

    base_out.mkdir(parents=True, exist_ok=True)
    ranked = sorted(results, key=lambda r: (-r[2][-1].global_metric, r[0]))
    with open(base_out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "setting", "final_loss", "metric", "final_value"])
        for rank, (label, _, recs) in enumerate(ranked, 1):
            last = recs[-1]
            w.writerow([rank, label, repr(last.global_loss), last.metric_name, repr(last.global_metric)])
            print(f"{rank}. {label:28s} {last.metric_name} {last.global_metric:.4f}  loss {last.global_loss:.4f}")
    print(f"wrote {base_out / 'comparison.csv'}")
    return status


def _check_fedavg_reduction(base, base_out, results, workers) -> int:
    sample_only = [r for r in results if tuple(r[1].fedgraph.mix.as_tuple()) == (1.0, 0.0, 0.0)]
    if not sample_only:
        return 0
    tree = with_strategy(base, "fedavg")
    tree.setdefault("output", {})["dir"] = str(base_out / "fedavg-reference")
    ref_cfg = build_config(tree)
    print("== fedavg reference (cross-check for mix 1:0:0)")
    ref = run_experiment(ref_cfg, workers=workers)
    label, cfg, recs = sample_only[0]
    same_alpha = all(np.array_equal(a.alpha, b.alpha) for a, b in zip(recs, ref))
    same_model = (Path(cfg.out_dir) / "final.fgck").read_bytes() == (
        Path(ref_cfg.out_dir) / "final.fgck"
    ).read_bytes()
    if same_alpha and same_model:
        print(f"cross-check ok: {label} is bit-identical to fedavg")
        return 0
    print(f"cross-check FAILED: {label} differs from fedavg", file=sys.stderr)
    return 1


def cmd_inspect(args) -> int:
    model = nn.load_checkpoint(args.checkpoint)
    zero = nn.zeros_like(model)
    print(f"checkpoint {args.checkpoint}: {len(model.layers)} layers, {model.n_params} parameters")
    for j, layer in enumerate(model.layers):
        spec = layer.spec
        single = nn.ModelParams((layer,))
        l1 = nn.param_l1_distance(single, nn.ModelParams((zero.layers[j],)))
        dims = "x".join(map(str, spec.dims))
        n = layer.weight.size + layer.bias.size
        print(f"  [{j}] {spec.kind:6s} {dims:14s} {spec.activation:8s} params={n:6d} l1={l1!r}")
    print(f"  total l1={nn.param_l1_distance(model, zero)!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedgraph", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="TOML file or profile name (desk, fullscale, smoke)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--workers", type=int, default=1)

    p_run = sub.add_parser("run", help="run one experiment")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run an ablation sweep")
    common(p_sweep)
    p_sweep.add_argument("--axis", required=True, choices=sorted(SWEEP_DEFAULTS))
    p_sweep.add_argument(
        "--values", help="comma-separated values; mixes as s:top:w separated by ';'"
    )
    p_sweep.set_defaults(func=cmd_sweep)

    p_inspect = sub.add_parser("inspect", help="describe a checkpoint")
    p_inspect.add_argument("checkpoint")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    setup_logging()
    args = build_parser().parse_args(argv)
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FedGraphError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
