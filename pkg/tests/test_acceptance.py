"""Acceptance gate: one test per shipping criterion, one printed line each.

Run with `pytest tests/test_acceptance.py -s` to see the verdict lines.
Every oracle used here is local to this module and independent of the
library's own arithmetic.
"""

import json
import time

import numpy as np

from reptree.baselines import (
    ExperimentSetup,
    fedavg_rounds,
    run_fedavg,
    run_reptree,
    run_standalone,
    standalone_rounds,
)
from reptree.cli import main
from reptree.data import Dataset, generate_synthetic, perturb_random, perturb_stratified
from reptree.federation import (
    AggregationWeights,
    aggregate_diversity,
    aggregate_simple,
    build_forest,
    compute_div_aggregation_weights,
    run_federation,
)
from reptree.models import (
    LayerTensor,
    ModelSpec,
    backward_and_loss,
    init_params,
    layer_l2_distance,
)
from reptree.tree import FederationConfig, total_model_count


def report(index: int, name: str, problems: list) -> None:
    verdict = "FAIL" if problems else "PASS"
    print(f"[{verdict}] criterion {index}: {name}", flush=True)
    assert not problems, f"criterion {index}: " + "; ".join(str(p) for p in problems)


def params_equal(a, b) -> bool:
    return all(
        np.array_equal(la.values, lb.values) for la, lb in zip(a.layers, b.layers)
    )


def random_model(rng, *, personalized=False, outputs=3):
    spec = ModelSpec(4, (5,), outputs, personalized_head=personalized)
    model = init_params(spec, seed=int(rng.integers(0, 2**31)))
    for layer in model.layers:
        layer.values += rng.normal(scale=0.5, size=layer.values.shape)
    return model


# 1 -----------------------------------------------------------------------

def test_c01_degenerate_trees_match_flat_baselines():
    started = time.perf_counter()
    problems = []
    spec = ModelSpec(4, (8,), 3)
    for seed in range(5):
        datasets = [
            generate_synthetic("gaussian_blobs", 40, 4, 3, 100 + 7 * seed + i)
            for i in range(3)
        ]
        config = FederationConfig(
            3, replicas=0, rounds=3, local_epochs=2, lr=0.05, batch_size=10, seed=seed
        )
        tree_rounds, flat_rounds = [], []
        run_federation(
            config, datasets, [spec] * 3,
            round_hook=lambda t, models: tree_rounds.append(models),
        )
        fedavg_rounds(
            config, datasets, [spec] * 3,
            round_hook=lambda t, models: flat_rounds.append(models),
        )
        for t, (tree_models, flat_models) in enumerate(zip(tree_rounds, flat_rounds)):
            for i, (a, b) in enumerate(zip(tree_models, flat_models)):
                if not params_equal(a, b):
                    problems.append(f"fedavg mismatch seed {seed} round {t} client {i}")
        solo_config = FederationConfig(
            1, replicas=0, rounds=3, local_epochs=2, lr=0.05, batch_size=10, seed=seed
        )
        tree_rounds, flat_rounds = [], []
        run_federation(
            solo_config, datasets[:1], [spec],
            round_hook=lambda t, models: tree_rounds.append(models),
        )
        standalone_rounds(
            solo_config, datasets[:1], [spec],
            round_hook=lambda t, models: flat_rounds.append(models),
        )
        for t, (tree_models, flat_models) in enumerate(zip(tree_rounds, flat_rounds)):
            if not params_equal(tree_models[0], flat_models[0]):
                problems.append(f"standalone mismatch seed {seed} round {t}")
    elapsed = time.perf_counter() - started
    if elapsed >= 60:
        problems.append(f"took {elapsed:.1f}s, budget 60s")
    report(1, f"degenerate trees match flat baselines bitwise ({elapsed:.1f}s)", problems)


# 2 -----------------------------------------------------------------------

def test_c02_forest_size_matches_formula():
    problems = []
    rng = np.random.default_rng(42)
    dataset = generate_synthetic("gaussian_blobs", 40, 4, 3, 0)
    spec = ModelSpec(4, (4,), 3)
    for trial in range(50):
        m = int(rng.integers(1, 6))
        r = int(rng.integers(0, 5))
        d = int(rng.integers(1, 4))
        config = FederationConfig(m, replicas=r, perturbation=20.0, depth=d, seed=trial)
        anchors = build_forest(config, [dataset] * m, [spec] * m)
        grown = sum(len(list(anchor.subtree())) for anchor in anchors)
        expected = m + m * sum(r**level for level in range(1, d + 1))
        if grown != expected or total_model_count(config) != expected:
            problems.append(
                f"m={m} r={r} d={d}: grew {grown}, formula {total_model_count(config)}, "
                f"expected {expected}"
            )
    report(2, "forest size equals m + sum over anchors of r + r^2 + ... + r^d", problems)


# 3 -----------------------------------------------------------------------

def test_c03_replica_perturbation_contract():
    problems = []
    parent = Dataset(np.zeros((20, 2)), np.zeros(20, dtype=np.int64), np.arange(20))
    first = perturb_random(parent, 10.0, 1)
    second = perturb_random(parent, 10.0, 2)
    if sorted(set(range(20)) - set(first.sample_ids.tolist())) != [0, 1]:
        problems.append(f"replica 1 removed {sorted(set(range(20)) - set(first.sample_ids))}")
    if sorted(set(range(20)) - set(second.sample_ids.tolist())) != [2, 3]:
        problems.append(f"replica 2 removed {sorted(set(range(20)) - set(second.sample_ids))}")
    rng = np.random.default_rng(7)
    checked = 0
    while checked < 200:
        n = int(rng.integers(5, 101))
        p = float(rng.uniform(1.0, 99.0))
        k = int(p * n // 100)
        if k < 1 or k >= n:
            continue
        checked += 1
        index = int(rng.integers(1, 13))
        parent = Dataset(
            rng.normal(size=(n, 2)), np.zeros(n, dtype=np.int64), np.arange(n)
        )
        kept = perturb_random(parent, p, index).sample_ids
        if len(kept) != n - k:
            problems.append(f"n={n} p={p:.1f} l={index}: kept {len(kept)}, expected {n - k}")
        if not np.all(np.diff(kept) > 0):
            problems.append(f"n={n} p={p:.1f} l={index}: order not preserved")
        removed_here = set(range(n)) - set(kept.tolist())
        neighbour = set(range(n)) - set(
            perturb_random(parent, p, index + 1).sample_ids.tolist()
        )
        if removed_here == neighbour:
            problems.append(f"n={n} p={p:.1f}: windows {index} and {index + 1} coincide")
    report(3, "replica windows remove floor(p*n/100) consecutive samples", problems)


# 4 -----------------------------------------------------------------------

def largest_remainder(weights, total):
    quotas = [total * w for w in weights]
    counts = [int(q) for q in quotas]
    remainders = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(len(weights)), key=lambda i: (-remainders[i], i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def test_c04_stratified_perturbation_apportionment():
    problems = []
    rng = np.random.default_rng(11)
    checked = 0
    while checked < 100:
        n_classes = int(rng.integers(2, 7))
        class_counts = [int(rng.integers(3, 41)) for _ in range(n_classes)]
        n = sum(class_counts)
        p = float(rng.uniform(5.0, 50.0))
        k = int(p * n // 100)
        if k < 1 or any(
            quota >= count
            for quota, count in zip(largest_remainder([c / n for c in class_counts], k),
                                    class_counts)
        ):
            continue
        checked += 1
        labels = np.repeat(np.arange(n_classes), class_counts)
        parent = Dataset(rng.normal(size=(n, 2)), labels, np.arange(n))
        child = perturb_stratified(parent, p, int(rng.integers(1, 9)))
        removed_total = parent.n - child.n
        expected = largest_remainder([c / n for c in class_counts], k)
        kept_counts = [int(np.sum(child.targets == c)) for c in range(n_classes)]
        removed = [class_counts[c] - kept_counts[c] for c in range(n_classes)]
        if removed_total != k:
            problems.append(f"counts {class_counts} p={p:.1f}: removed {removed_total} != {k}")
        if removed != expected:
            problems.append(
                f"counts {class_counts} p={p:.1f}: removed {removed}, apportionment {expected}"
            )
        share = 1.0 - k / n
        for c in range(n_classes):
            if abs(kept_counts[c] - class_counts[c] * share) > 1.0:
                problems.append(
                    f"counts {class_counts} p={p:.1f}: class {c} kept {kept_counts[c]}, "
                    f"proportional {class_counts[c] * share:.2f}"
                )
    report(4, "stratified removal follows largest-remainder apportionment", problems)


# 5 -----------------------------------------------------------------------

def test_c05_diversity_weights_and_distance():
    problems = []
    rng = np.random.default_rng(23)
    for trial in range(1000):
        size = int(rng.integers(1, 9))
        divs = np.abs(rng.normal(size=size)) * 10.0 ** rng.uniform(-3, 3)
        alpha = np.asarray(compute_div_aggregation_weights(divs.tolist()).alpha)
        if abs(alpha.sum() - 1.0) > 1e-9:
            problems.append(f"trial {trial}: weights sum to {alpha.sum()!r}")
        oracle = divs / divs.sum()
        if not np.allclose(alpha, oracle, rtol=1e-9, atol=1e-12):
            problems.append(f"trial {trial}: weights off proportional oracle")
        ranked = np.argsort(divs)
        if not np.all(np.diff(alpha[ranked]) >= -1e-15):
            problems.append(f"trial {trial}: weights not monotone in divergence")
    uniform = compute_div_aggregation_weights([0.0, 0.0, 0.0, 0.0]).alpha
    if list(uniform) != [0.25, 0.25, 0.25, 0.25]:
        problems.append(f"all-zero input gave {uniform}")
    for trial in range(50):
        shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
        a = LayerTensor("w", shape, rng.normal(size=shape).ravel())
        b = LayerTensor("w", shape, rng.normal(size=shape).ravel())
        total = 0.0
        for x, y in zip(a.values.tolist(), b.values.tolist()):
            total += (x - y) ** 2
        oracle = total ** 0.5
        if abs(layer_l2_distance(a, b) - oracle) > 1e-12:
            problems.append(f"distance trial {trial}: {layer_l2_distance(a, b)} vs {oracle}")
    report(5, "diversity weights proportional and layer distance exact", problems)


# 6 -----------------------------------------------------------------------

def test_c06_diversity_blend_and_fixed_point():
    problems = []
    rng = np.random.default_rng(31)
    for trial in range(30):
        personalized = bool(rng.integers(0, 2))
        parent = random_model(rng, personalized=personalized)
        children = [random_model(rng, personalized=personalized) for _ in range(int(rng.integers(1, 5)))]
        weights = compute_div_aggregation_weights(
            [float(rng.uniform(0.1, 2.0)) for _ in children]
        )
        blended = aggregate_diversity(parent, children, weights)
        for k, flag in enumerate(parent.common_mask):
            direct = parent.layers[k].values * 0.5
            if flag:
                for alpha, child in zip(weights.alpha, children):
                    direct = direct + 0.5 * alpha * child.layers[k].values
            else:
                direct = parent.layers[k].values
            if not np.allclose(blended.layers[k].values, direct, rtol=0, atol=1e-12):
                problems.append(f"trial {trial}: blend off at layer {k}")
        clones = [parent.copy() for _ in range(3)]
        fixed = aggregate_diversity(
            parent, clones, AggregationWeights((0.5, 0.3, 0.2))
        )
        if not params_equal(fixed, parent):
            problems.append(f"trial {trial}: fixed point violated")
    report(6, "diversity blend is half parent, half weighted children", problems)


# 7 -----------------------------------------------------------------------

def finite_difference(params, batch, targets, loss_kind, step=1e-5):
    grads = []
    for k, layer in enumerate(params.layers):
        grad = np.zeros_like(layer.values)
        for j in range(layer.values.size):
            for sign in (1.0, -1.0):
                shifted = params.copy()
                shifted.layers[k].values[j] += sign * step
                loss, _ = backward_and_loss(shifted, batch, targets, loss_kind)
                grad[j] += sign * loss
        grads.append(grad / (2 * step))
    return grads


def test_c07_gradients_match_finite_differences():
    problems = []
    rng = np.random.default_rng(5)
    for trial in range(20):
        regression = trial % 2 == 1
        features = int(rng.integers(2, 5))
        hidden = int(rng.integers(3, 6))
        outputs = int(rng.integers(2, 4))
        spec = ModelSpec(
            features, (hidden,), outputs,
            head="regression" if regression else "classification",
            activation="tanh",
        )
        params = init_params(spec, seed=trial)
        if params.n_parameters > 100:
            problems.append(f"trial {trial}: {params.n_parameters} parameters")
            continue
        batch = rng.normal(size=(5, features))
        if regression:
            targets = rng.normal(size=(5, outputs))
            loss_kind = "l1"
        else:
            targets = rng.integers(0, outputs, size=5)
            loss_kind = "cross_entropy"
        _, analytic = backward_and_loss(params, batch, targets, loss_kind)
        numeric = finite_difference(params, batch, targets, loss_kind)
        for layer, fd in zip(analytic.layers, numeric):
            err = np.abs(layer.values - fd)
            scale = np.maximum(np.maximum(np.abs(layer.values), np.abs(fd)), 1.0)
            worst = float((err / scale).max())
            if worst > 1e-4:
                problems.append(
                    f"trial {trial} ({loss_kind}) layer {layer.name}: rel err {worst:.2e}"
                )
    report(7, "analytic gradients match central finite differences", problems)


# 8 -----------------------------------------------------------------------

def test_c08_heterogeneous_heads_federate_common_layers():
    started = time.perf_counter()
    problems = []
    head_sizes = [3, 3, 5, 5]
    datasets = [
        generate_synthetic("gaussian_blobs", 40, 6, classes, 50 + i)
        for i, classes in enumerate(head_sizes)
    ]
    specs = [
        ModelSpec(6, (10,), classes, personalized_head=True) for classes in head_sizes
    ]
    config = FederationConfig(
        4, replicas=2, perturbation=10.0, depth=1,
        rounds=3, local_epochs=2, lr=0.05, batch_size=10, seed=9,
    )
    snapshots = []
    run_federation(
        config, datasets, specs, round_hook=lambda t, models: snapshots.append(models)
    )
    for t, models in enumerate(snapshots):
        reference = models[0]
        for i, other in enumerate(models[1:], start=1):
            for ours, theirs in zip(reference.common_layers(), other.common_layers()):
                if not np.array_equal(ours.values, theirs.values):
                    problems.append(f"round {t}: common layers differ on anchor {i}")
        heads = [model.layers[-2].values for model in models]
        # anchors 0/1 and 2/3 share a head size; personalization must keep them apart
        if np.array_equal(heads[0], heads[1]) or np.array_equal(heads[2], heads[3]):
            problems.append(f"round {t}: personalized heads identical across anchors")
    elapsed = time.perf_counter() - started
    if elapsed >= 120:
        problems.append(f"took {elapsed:.1f}s, budget 120s")
    report(8, f"heterogeneous anchors share common layers bitwise ({elapsed:.1f}s)", problems)


# 9 -----------------------------------------------------------------------

def test_c09_directional_desk_scale_ordering():
    started = time.perf_counter()
    problems = []
    spec = ModelSpec(8, (32,), 4, activation="tanh")
    means = {"reptreefl": [], "fedavg": [], "standalone": []}
    for seed in range(5):
        pool = generate_synthetic("gaussian_blobs", 800, 8, 4, seed, class_sep=3.0)
        setup = ExperimentSetup(pool, 4, [spec] * 3)
        config = FederationConfig(
            3, replicas=3, perturbation=10.0, depth=1,
            local_epochs=10, rounds=10, lr=0.5, batch_size=10, seed=seed,
        )
        means["reptreefl"].append(run_reptree(config, setup, max_workers=3).mean_primary())
        means["fedavg"].append(run_fedavg(config, setup, max_workers=3).mean_primary())
        means["standalone"].append(run_standalone(config, setup).mean_primary())
    tree = float(np.mean(means["reptreefl"]))
    fedavg = float(np.mean(means["fedavg"]))
    solo = float(np.mean(means["standalone"]))
    if not tree >= fedavg:
        problems.append(f"replica tree {tree:.2f} below fedavg {fedavg:.2f}")
    if not fedavg >= solo:
        problems.append(f"fedavg {fedavg:.2f} below standalone {solo:.2f}")
    if not tree - solo >= 1.0:
        problems.append(f"tree-standalone gap {tree - solo:.2f} under 1 point")
    elapsed = time.perf_counter() - started
    if elapsed >= 600:
        problems.append(f"took {elapsed:.1f}s, budget 600s")
    report(
        9,
        f"accuracy ordering tree {tree:.2f} >= fedavg {fedavg:.2f} >= "
        f"standalone {solo:.2f} ({elapsed:.0f}s)",
        problems,
    )


# 10 ----------------------------------------------------------------------

RUN_INI = """\
[federation]
clients = 2
replicas = 2
perturbation = 10
depth = 1
local_epochs = 2
rounds = 3
lr = 0.05
batch_size = 10
seed = 12

[data]
kind = gaussian_blobs
samples_per_fold = 20
features = 4
classes = 3

[model]
hidden = 8
"""


def test_c10_cli_runs_are_byte_identical(tmp_path):
    problems = []
    config = tmp_path / "run.ini"
    config.write_text(RUN_INI)
    payloads = {}
    for label, extra in {
        "serial": [], "repeat": [], "threaded": ["--parallel", "4"]
    }.items():
        out = tmp_path / label
        code = main(["run", "--config", str(config), "--out", str(out), *extra])
        if code != 0:
            problems.append(f"{label} run exited {code}")
            continue
        payloads[label] = (out / "results.json").read_bytes()
    if len(payloads) == 3:
        if payloads["serial"] != payloads["repeat"]:
            problems.append("rerun changed results.json")
        if payloads["serial"] != payloads["threaded"]:
            problems.append("--parallel changed results.json")
        json.loads(payloads["serial"])
    report(10, "results.json byte-identical across reruns and --parallel", problems)


# 11 ----------------------------------------------------------------------

def test_c11_simple_mode_reproduces_uniform_mean():
    problems = []
    rng = np.random.default_rng(17)
    for trial in range(30):
        personalized = bool(rng.integers(0, 2))
        parent = random_model(rng, personalized=personalized)
        children = [
            random_model(rng, personalized=personalized)
            for _ in range(int(rng.integers(1, 6)))
        ]
        merged = aggregate_simple(parent, children)
        family = [parent] + children
        for k, flag in enumerate(parent.common_mask):
            if flag:
                expected = np.mean([member.layers[k].values for member in family], axis=0)
            else:
                expected = parent.layers[k].values
            if not np.allclose(merged.layers[k].values, expected, rtol=0, atol=1e-12):
                problems.append(f"trial {trial}: layer {k} off uniform mean")
    report(11, "simple mode averages anchor and replicas uniformly", problems)
