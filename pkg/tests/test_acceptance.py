"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py`` (the summary lines appear at the end of
the report) or ``python3 tests/test_acceptance.py`` for the lines alone.
"""

import copy
import functools
import math
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_graph  # noqa: E402
from fedgraph import aggregation as agg  # noqa: E402
from fedgraph import graphkernel as gk  # noqa: E402
from fedgraph import graphmap, nn  # noqa: E402
from fedgraph.config import build_config, read_config_file  # noqa: E402
from fedgraph.federation import run_experiment  # noqa: E402
from fedgraph.graphmap import PruneConfig  # noqa: E402
from fedgraph.nn import Batch, Layer, LayerSpec, ModelParams  # noqa: E402

RESULTS: list[str] = []


def criterion(num, title, budget=None):
    """Record a PASS/FAIL line for the wrapped check, with wall time and budget."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            t0 = time.perf_counter()
            detail = ""
            try:
                detail = fn(*args, **kwargs) or ""
                elapsed = time.perf_counter() - t0
                if budget is not None:
                    assert elapsed < budget, f"took {elapsed:.1f}s, budget {budget}s"
            except BaseException as exc:
                line = f"FAIL [{num}] {title}: {type(exc).__name__}: {exc}"
                RESULTS.append(line)
                print(line)
                raise
            line = f"PASS [{num}] {title} ({time.perf_counter() - t0:.2f}s) {detail}".rstrip()
            RESULTS.append(line)
            print(line)

        return inner

    return wrap


def desk_tree(strategy=None, **sections):
    tree = read_config_file("desk")
    if strategy is not None:
        tree["strategy"] = {"name": strategy}
    for dotted, value in sections.items():
        head, _, key = dotted.partition("__")
        tree.setdefault(head, {})[key] = value
    return tree


def data_lines(path):
    return [
        line for line in Path(path).read_text(encoding="utf-8").split("\n")
        if not line.startswith("# started:") and not line.startswith("# output.dir")
    ]


def dense_oracle(e1, e2, L):
    d = e1.shape[1]
    inter = []
    for lvl in range(L + 1):
        edges = [np.linspace(0.0, 1.0, 2 ** lvl + 1)] * d
        h1, _ = np.histogramdd(e1, bins=edges)
        h2, _ = np.histogramdd(e2, bins=edges)
        inter.append(np.minimum(h1, h2).sum())
    k = inter[L]
    for lvl in range(L):
        k += (inter[lvl] - inter[lvl + 1]) * 0.5 ** (L - lvl)
    return k


# ---------------------------------------------------------------------------


@criterion(1, "FedAvg reduction: mix (1,0,0) checkpoints bit-identical to fedavg, K=5, T=10", budget=120)
def test_fedavg_reduction(tmp_path):
    common = dict(federation__K=5, federation__T=10, output__round_checkpoints=True)
    runs = {}
    for label, strat in (("fedavg", {"name": "fedavg"}),
                         ("fedgraph", {"name": "fedgraph", "mix": {"s": 1.0, "top": 0.0, "w": 0.0}})):
        tree = desk_tree(**common, output__dir=str(tmp_path / label))
        tree["strategy"] = strat
        runs[label] = run_experiment(build_config(tree))
    for t in range(1, 11):
        a = (tmp_path / "fedavg" / f"round_{t:03d}.fgck").read_bytes()
        b = (tmp_path / "fedgraph" / f"round_{t:03d}.fgck").read_bytes()
        assert a == b, f"round {t} checkpoints differ"
    assert (tmp_path / "fedavg" / "final.fgck").read_bytes() == (tmp_path / "fedgraph" / "final.fgck").read_bytes()
    return "10/10 rounds identical"


@criterion(2, "Kernel oracle: 50 random pairs vs dense histogram oracle, rel 1e-10", budget=30)
def test_kernel_oracle():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(50):
        d = int(rng.integers(1, 4))
        L = int(rng.integers(0, 4))
        g1 = random_graph(rng, 1, 8, p=float(rng.uniform(0.1, 0.9)))
        g2 = random_graph(rng, 1, 8, p=float(rng.uniform(0.1, 0.9)))
        got = gk.pyramid_match(g1, g2, d, L)
        want = dense_oracle(gk.embed_nodes(g1, d), gk.embed_nodes(g2, d), L)
        err = abs(got - want) / max(abs(want), 1e-300)
        worst = max(worst, err)
        assert err <= 1e-10, f"pair {i}: {got} vs {want}"
    return f"worst rel err {worst:.1e}"


@criterion(3, "Gram PSD: min eig >= -1e-8 * max eig over 20 random graphs")
def test_gram_psd():
    rng = np.random.default_rng(3)
    graphs = [random_graph(rng, 2, 8, p=float(rng.uniform(0.2, 0.8))) for _ in range(20)]
    C = gk.gravity_matrix(graphs)
    vals = np.linalg.eigvalsh(C)
    assert vals[0] >= -1e-8 * vals[-1], f"min {vals[0]}, max {vals[-1]}"
    return f"eig range [{vals[0]:.3g}, {vals[-1]:.3g}]"


@criterion(4, "Simplex (1e-9) for all strategies/rounds; workers 1 vs 8 CSVs identical", budget=180)
def test_simplex_and_determinism(tmp_path):
    checked = 0
    for strategy in agg.STRATEGIES:
        csvs = []
        for workers in (1, 8):
            out = tmp_path / f"{strategy}-w{workers}"
            recs = run_experiment(build_config(desk_tree(strategy, output__dir=str(out))), workers=workers)
            for r in recs:
                for v in r.weight_vectors():
                    assert abs(v.sum() - 1.0) <= 1e-9 and np.all(v >= 0), f"{strategy} round {r.round}"
                    checked += 1
            csvs.append(data_lines(out / "metrics.csv"))
        assert csvs[0] == csvs[1], f"{strategy}: CSVs differ between worker counts"
    return f"{checked} weight vectors"


def _fd_worst(model, batch, rng, per_kind, h=1e-5):
    """Central differences on up to ``per_kind`` weights (and a quarter as many biases) per layer."""
    _, grads = nn.loss_and_grad(model, batch)
    counts = {"dense": 0, "conv2d": 0}
    worst = {"dense": 0.0, "conv2d": 0.0}
    for li, layer in enumerate(model.layers):
        kind = layer.spec.kind
        for which in ("weight", "bias"):
            arr = np.array(getattr(layer, which))
            g = getattr(grads.layers[li], which)
            take = min(arr.size, per_kind if which == "weight" else max(1, per_kind // 4))
            for f in rng.choice(arr.size, size=take, replace=False):
                idx = np.unravel_index(f, arr.shape)

                def at(v):
                    a = arr.copy()
                    a[idx] = v
                    layers = list(model.layers)
                    kw = {"weight": layer.weight, "bias": layer.bias, which: a}
                    layers[li] = Layer(layer.spec, **kw)
                    return nn.loss_value(ModelParams(tuple(layers)), batch)

                fd = (at(arr[idx] + h) - at(arr[idx] - h)) / (2 * h)
                an = g[idx]
                err = abs(fd - an) / max(abs(fd), abs(an), 1e-8)
                worst[kind] = max(worst[kind], err)
                counts[kind] += 1
    return worst, counts


@criterion(5, "Gradient check: >=100 coords per layer kind, rel err < 1e-3")
def test_gradient_check():
    rng = np.random.default_rng(5)
    # conv feeding dense, cross-entropy head
    specs = [LayerSpec.conv2d(3, 3, 2, 4, "sigmoid"), LayerSpec.conv2d(3, 3, 4, 2, "relu"),
             LayerSpec.dense(2 * 5 * 5, 12, "sigmoid"), LayerSpec.dense(12, 3, "softmax")]
    m = nn.init_model(specs, 1)
    batch = Batch(rng.normal(size=(6, 5, 5, 2)), rng.integers(0, 3, 6))
    w1, c1 = _fd_worst(m, batch, rng, 100)
    # all-conv segmentation head, soft Dice loss
    seg = nn.init_model([LayerSpec.conv2d(3, 3, 1, 4, "relu"), LayerSpec.conv2d(3, 3, 4, 1, "sigmoid")], 2)
    sb = Batch(rng.normal(size=(3, 6, 6, 1)), (rng.random((3, 6, 6)) < 0.3).astype(float))
    w2, c2 = _fd_worst(seg, sb, rng, 100)
    counts = {k: c1[k] + c2[k] for k in c1}
    worst = {k: max(w1[k], w2[k]) for k in w1}
    assert counts["dense"] >= 100 and counts["conv2d"] >= 100, counts
    assert max(worst.values()) < 1e-3, worst
    return f"coords {counts}, worst {max(worst.values()):.1e}"


@criterion(6, "Pruning complement + monotonicity over 200 random graphs")
def test_pruning_properties():
    rng = np.random.default_rng(6)
    for i in range(200):
        g = random_graph(rng, 2, 10, p=0.5, binary=False)
        ref = g.with_weights(rng.random(g.n_edges))
        deltas = np.sort(rng.random(3))
        all_edges = set(zip(g.src.tolist(), g.dst.tolist()))
        prev_sim, prev_dis = None, None
        for delta in deltas:
            sim = graphmap.graph_prune(g, ref, PruneConfig("similarity", delta=float(delta)))
            dis = graphmap.graph_prune(g, ref, PruneConfig("dissimilarity", delta=float(delta)))
            s = set(zip(sim.src.tolist(), sim.dst.tolist()))
            d = set(zip(dis.src.tolist(), dis.dst.tolist()))
            assert s | d == all_edges and not (s & d), f"graph {i}"
            assert sim.n_nodes == dis.n_nodes == g.n_nodes
            if prev_sim is not None:
                assert prev_sim <= s and d <= prev_dis, f"graph {i} not monotone"
            prev_sim, prev_dis = s, d
    return "200 graphs x 3 thresholds"


@criterion(7, "Identity: k(G, G) == n_nodes exactly for 50 random graphs")
def test_self_kernel_is_node_count():
    rng = np.random.default_rng(7)
    for _ in range(50):
        g = random_graph(rng, 1, 12, p=float(rng.uniform(0, 1)))
        d, L = int(rng.integers(1, 7)), int(rng.integers(0, 5))
        assert gk.pyramid_match(g, g, d, L) == g.n_nodes
    return "50/50"


@criterion(8, "Desk experiment: 3 strategies x 3 seeds complete, finite, fedgraph non-uniform", budget=900)
def test_desk_experiment(tmp_path):
    base = desk_tree()
    assert base["federation"] == {"K": 5, "T": 20, "E": 3}
    assert base["data"]["dirichlet_beta"] == 0.3 and base["data"]["size_skew"] == 1.5
    table = {}
    nonuniform_rounds = 0
    for strategy in agg.STRATEGIES:
        for seed in (0, 1, 2):
            tree = copy.deepcopy(base)
            if strategy != "fedgraph":
                tree["strategy"] = {"name": strategy}
            tree["seed"] = seed
            tree["output"]["dir"] = str(tmp_path / f"{strategy}-{seed}")
            recs = run_experiment(build_config(tree))
            assert len(recs) == 20
            for r in recs:
                vals = [r.global_loss, r.global_metric, *r.local_losses]
                for v in r.weight_vectors():
                    vals.extend(v.tolist())
                assert all(math.isfinite(x) for x in vals), f"{strategy} seed {seed} round {r.round}"
                if strategy == "fedgraph" and not np.allclose(r.alpha, r.alpha[0], rtol=0, atol=1e-6):
                    nonuniform_rounds += 1
            table[(strategy, seed)] = recs[-1].global_metric
    assert nonuniform_rounds >= 1

    print()
    print(f"  {'strategy':12s} {'seed 0':>8s} {'seed 1':>8s} {'seed 2':>8s} {'mean':>8s}")
    for strategy in agg.STRATEGIES:
        accs = [table[(strategy, s)] for s in (0, 1, 2)]
        print(f"  {strategy:12s} " + " ".join(f"{a:8.4f}" for a in accs) + f" {np.mean(accs):8.4f}")
    return f"fedgraph alpha non-uniform in {nonuniform_rounds}/60 rounds"


@criterion(9, "Quantile threshold: lambda 0 / 0.5 / 1 -> min / index 2 / max")
def test_quantile_threshold():
    diffs = [0.4, 0.1, 0.3, 0.2]
    got = [graphmap.quantile_threshold(diffs, lam) for lam in (0.0, 0.5, 1.0)]
    s = sorted(diffs)
    assert got == [s[0], s[2], s[3]], got
    return f"{got}"


if __name__ == "__main__":
    import tempfile

    checks = [
        (test_fedavg_reduction, True), (test_kernel_oracle, False), (test_gram_psd, False),
        (test_simplex_and_determinism, True), (test_gradient_check, False),
        (test_pruning_properties, False), (test_self_kernel_is_node_count, False),
        (test_desk_experiment, True), (test_quantile_threshold, False),
    ]
    failed = 0
    for fn, needs_dir in checks:
        try:
            if needs_dir:
                with tempfile.TemporaryDirectory() as d:
                    fn(Path(d))
            else:
                fn()
        except BaseException:
            failed += 1
    sys.exit(1 if failed else 0)
