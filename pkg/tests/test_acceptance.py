"""Acceptance gate: one test per shipping criterion, one printed verdict each.

Run with output visible to read the verdict lines:

    pytest tests/test_acceptance.py -v -s

Criteria 1-4 train on full MNIST and criterion 5a on a CIFAR-10 subset.
Those datasets are not bundled; the tests skip (with the provisioning
command in the skip message) until the binary files exist under the data
root.  The data root is $FEDMATCH_DATA_DIR, defaulting to <repo>/data,
and `python3 tools/fetch_data.py` fills it.  Everything else runs
self-contained in seconds to a couple of minutes.

The MNIST runs are genuine desk-scale training jobs (minutes to tens of
minutes each on one CPU); criterion 1 also enforces its wall-clock bound.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from fedmatch import nn
from fedmatch.cli import main
from fedmatch.config import from_dict
from fedmatch.federation import (
    ClientResult,
    aggregate,
    run_experiment,
)
from fedmatch.losses import (
    LossBreakdown,
    LossSettings,
    cross_entropy,
    er_loss,
    matching_loss,
    softmax,
    total_loss_and_grads,
)
from fedmatch.metrics import MetricsSink, export_trajectory
from fedmatch.models import build_arch, build_matching_decoder
from fedmatch.nn import ParamSet
from fedmatch.tuner import (
    HyperAxis,
    HyperGrid,
    HyperDist,
    RewardWindow,
    grid_probs,
    initial_dist,
    reinforce_update,
    sample,
    score,
)

from oracles import fd_gradient_at, grad_close

DATA_ROOT = Path(os.environ.get("FEDMATCH_DATA_DIR",
                                Path(__file__).resolve().parents[1] / "data"))
MNIST_DIR = DATA_ROOT / "mnist"
CIFAR_DIR = DATA_ROOT / "cifar10"

MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")
CIFAR_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6)) + ("test_batch.bin",)


def verdict(criterion: int, ok: bool, detail: str) -> None:
    word = "PASS" if ok else "FAIL"
    print(f"[criterion {criterion:2d}] {word}: {detail}", flush=True)
    assert ok, f"criterion {criterion}: {detail}"


def gate_on_data(criterion: int, directory: Path, files) -> None:
    missing = [f for f in files if not (directory / f).exists()]
    if missing:
        msg = (f"dataset files missing under {directory} "
               f"(first: {missing[0]}); run `python3 tools/fetch_data.py` "
               f"or point FEDMATCH_DATA_DIR at provisioned data")
        print(f"[criterion {criterion:2d}] SKIP: {msg}", flush=True)
        pytest.skip(msg)


# ---------------------------------------------------------------------------
# 1-4: MNIST desk-scale training runs


def mnist_base(seed: int) -> dict:
    return {
        "task": "mnist",
        "seed": seed,
        "data_dir": str(MNIST_DIR),
        "n_clients": 10,
        "client_fraction": 1.0,
        "rounds": 200,
        "batch_size": 64,
        "validation_size": 1000,
        "eval_every": 20,
    }


@pytest.fixture(scope="module")
def mnist_tuned_runs(tmp_path_factory):
    """Three seeded non-iid tuned runs, shared by criteria 2 and 4.

    Returned as a thunk so each criterion gates on the dataset (and prints
    its own skip line) before the expensive training happens.
    """
    cache: list = []

    def get():
        if not cache:
            for seed in (0, 1, 2):
                cfg = from_dict({**mnist_base(seed), "partition": "non_iid",
                                 "use_tuner": True})
                run_dir = tmp_path_factory.mktemp(f"mnist-tuned-{seed}")
                with MetricsSink(run_dir) as sink:
                    result = run_experiment(cfg, sink=sink)
                cache.append((run_dir, result))
        return cache

    return get


def test_criterion_01_mnist_iid_fixed_schedule():
    gate_on_data(1, MNIST_DIR, MNIST_FILES)
    cfg = from_dict({**mnist_base(0), "partition": "iid",
                     "schedule": {"initial_lr": 0.1, "iterations": 30}})
    start = time.monotonic()
    result = run_experiment(cfg)
    minutes = (time.monotonic() - start) / 60
    acc = result.final_test_accuracy
    verdict(1, acc >= 0.97 and minutes <= 45,
            f"mnist iid fixed-schedule accuracy {acc:.4f} (need >= 0.97) "
            f"in {minutes:.1f} min (need <= 45)")


def test_criterion_02_mnist_noniid_tuned_accuracy(mnist_tuned_runs):
    gate_on_data(2, MNIST_DIR, MNIST_FILES)
    accs = [r.final_test_accuracy for _, r in mnist_tuned_runs()]
    mean = sum(accs) / len(accs)
    verdict(2, mean >= 0.93 and min(accs) >= 0.80,
            f"mnist non-iid tuned mean accuracy {mean:.4f} over seeds 0-2 "
            f"(need >= 0.93), worst {min(accs):.4f} (need >= 0.80)")


def test_criterion_03_mnist_noniid_matching():
    gate_on_data(3, MNIST_DIR, MNIST_FILES)
    cfg = from_dict({**mnist_base(0), "partition": "non_iid",
                     "use_matching": True,
                     "schedule": {"initial_lr": 0.05, "iterations": 30}})
    result = run_experiment(cfg)
    acc = result.final_test_accuracy
    verdict(3, acc >= 0.92,
            f"mnist non-iid matching accuracy {acc:.4f} (need >= 0.92)")


def test_criterion_04_tuned_lr_mean_drifts_down(mnist_tuned_runs):
    gate_on_data(4, MNIST_DIR, MNIST_FILES)
    down = 0
    finals = []
    for run_dir, _ in mnist_tuned_runs():
        csv_path = export_trajectory(run_dir)
        rows = csv_path.read_text().strip().splitlines()
        header = rows[0].split(",")
        col = header.index("mu_learning_rate_raw")
        first = float(rows[1].split(",")[col])
        last = float(rows[-1].split(",")[col])
        finals.append((first, last))
        down += bool(last < first)
    verdict(4, down >= 2,
            f"learning-rate mean ended below start in {down}/3 seeds "
            f"(need >= 2); (start, end) pairs {finals}")


# ---------------------------------------------------------------------------
# 5: CIFAR smoke plus gradient checks for every architecture


def test_criterion_05a_cifar_smoke_loss_drop():
    gate_on_data(5, CIFAR_DIR, CIFAR_FILES)
    cfg = from_dict({
        "task": "cifar10",
        "seed": 0,
        "data_dir": str(CIFAR_DIR),
        "partition": "non_iid",
        "use_matching": True,
        "n_clients": 10,
        "rounds": 20,
        "train_subset": 5000,
        "batch_size": 64,
        "validation_size": 1000,
        "eval_every": 20,
        "schedule": {"initial_lr": 0.05, "iterations": 30},
    })
    result = run_experiment(cfg)
    first = result.records[0].loss_after
    last = result.records[-1].loss_after
    drop = (first - last) / first
    verdict(5, drop >= 0.20,
            f"cifar smoke validation loss fell {100 * drop:.1f}% from round 1 "
            f"({first:.4f} -> {last:.4f}, need >= 20%)")


def fd_where_differentiable(f_and_regions, tensor, want: int,
                            coord_rng, h: float = 1e-5):
    """Central differences at coordinates that stay inside one smooth piece.

    The composite loss is only piecewise smooth: max-pool argmax flips make
    the unpooled reconstruction jump, and ReLU or entropy-hinge crossings
    kink the slope.  At such coordinates finite differences measure the
    jump or the blended slopes, not the one-sided derivative the backward
    pass computes.  A probe counts only when both evaluation points report
    the identical region signature (switches, ReLU masks, hinge activity);
    others are redrawn.
    """
    flat = tensor.reshape(-1)
    order = coord_rng.permutation(flat.size)
    chosen: list[int] = []
    numeric: list[float] = []
    for i in order[:max(4 * want, 32)]:
        keep = flat[i]
        flat[i] = keep + h
        up, region_up = f_and_regions()
        flat[i] = keep - h
        down, region_down = f_and_regions()
        flat[i] = keep
        if region_up != region_down:
            continue
        chosen.append(int(i))
        numeric.append((up - down) / (2 * h))
        if len(chosen) == want:
            break
    return np.array(chosen, dtype=int), np.array(numeric)


def test_criterion_05b_composite_gradients_all_architectures():
    settings = LossSettings(use_matching=True, use_wd=False, use_er=True,
                            matching_coeff=1.0, wd_coeff=0.0, min_entropy=0.5)
    coord_rng = np.random.default_rng(1234)
    worst = 0.0
    for name in ("mnist_mlp", "cifar_cnn", "kws_cnn"):
        arch = build_arch(name)
        rng = np.random.default_rng(11)
        x = 0.5 * rng.normal(size=(2,) + arch.graph.input_shape)
        y = rng.integers(0, 10, 2)
        w_round = nn.init_params(arch.graph, np.random.default_rng(12))
        w = w_round.map(lambda a: a + 0.01 * rng.normal(size=a.shape))
        decoder, theta = build_matching_decoder(arch, np.random.default_rng(13))

        _, w_grads, theta_grads = total_loss_and_grads(
            arch.graph, x, y, w, w_round, decoder, theta, settings)

        fixed_trace = nn.forward(arch.graph, w_round, x)

        relu_layers = [i for i, spec in enumerate(arch.graph.layers)
                       if spec.kind == "relu"]

        def composite_and_regions():
            trace = nn.forward(arch.graph, w, x)
            ce, _ = cross_entropy(trace.logits, y)
            er, _ = er_loss(trace.logits, settings.min_entropy)
            match, _ = matching_loss(trace, fixed_trace, decoder, theta)
            total = ce + settings.matching_coeff * match + er
            probs = softmax(trace.logits)
            with np.errstate(divide="ignore", invalid="ignore"):
                ent = -np.sum(np.where(probs > 0, probs * np.log(probs), 0.0),
                              axis=1)
            region = (
                b"".join(s.tobytes() for s in trace.switches.values())
                + b"".join((trace.outputs[i] > 0).tobytes()
                           for i in relu_layers)
                + (ent < settings.min_entropy).tobytes()
            )
            return total, region

        for params, grads in ((w, w_grads), (theta, theta_grads)):
            for key in params:
                tensor = params[key]
                want = min(8, tensor.size)
                idx, numeric = fd_where_differentiable(
                    composite_and_regions, tensor, want, coord_rng)
                assert idx.size >= min(want, 4), \
                    f"{name} {key}: too few flip-free probe coordinates"
                analytic = grads[key].reshape(-1)[idx]
                assert grad_close(analytic, numeric, tol=1e-5), \
                    f"{name} {key}: analytic {analytic} vs numeric {numeric}"
                denom = np.maximum(1.0, np.maximum(np.abs(analytic),
                                                   np.abs(numeric)))
                worst = max(worst, float((np.abs(analytic - numeric) / denom).max()))
    verdict(5, True,
            f"composite-loss gradient checks pass for all three "
            f"architectures (worst rel err {worst:.2e}, need < 1e-5)")


# ---------------------------------------------------------------------------
# 6-7: tuning distribution oracles


def bandit_grid() -> HyperGrid:
    return HyperGrid(axes=(
        HyperAxis("a", (1.0, 2.0, 3.0, 4.0, 5.0), False),
        HyperAxis("b", (1.0, 2.0, 3.0, 4.0), False),
    ))


def test_criterion_06_reinforce_estimator_matches_exact_gradient():
    grid = bandit_grid()
    pts = grid.points()
    dist = HyperDist(mu=np.array([0.17, 0.10]),
                     log_precision=np.array([0.43, 0.53]))
    rewards = (1.0 + 6.4 * (pts[:, 0] - 0.24) ** 2
               + 12.5 * (pts[:, 1] - 0.17) ** 2
               - 1.2 * pts[:, 0] - 0.3 * pts[:, 1])

    probs = grid_probs(grid, dist)
    scores = np.stack([score(grid, dist, pts[i]) for i in range(pts.shape[0])])
    exact = np.tensordot(probs * rewards, scores, axes=1)
    baseline = float(probs @ rewards)

    rng = np.random.default_rng(13)
    total = np.zeros_like(exact)
    n = 100_000
    for _ in range(n):
        idx, h, _ = sample(grid, dist, rng)
        total += (rewards[idx] - baseline) * score(grid, dist, h)
    mc = total / n
    rel = np.abs(mc - exact) / np.abs(exact)
    verdict(6, bool(np.all(rel < 0.02)),
            f"mean of {n} sampled update directions within "
            f"{100 * rel.max():.2f}% of the exact grid gradient "
            f"(need < 2% per component)")


def test_criterion_07_distribution_properties():
    grid = bandit_grid()
    pts = grid.points()
    rng = np.random.default_rng(99)
    worst_sum = 0.0
    worst_id = 0.0
    worst_fd = 0.0
    for _ in range(100):
        dist = HyperDist(mu=rng.uniform(-0.5, 0.5, 2),
                         log_precision=rng.uniform(-1.0, 4.0, 2))
        probs = grid_probs(grid, dist)
        worst_sum = max(worst_sum, abs(float(probs.sum()) - 1.0))

        scores = np.stack([score(grid, dist, pts[i])
                           for i in range(pts.shape[0])])
        identity = np.tensordot(probs, scores, axes=1)
        worst_id = max(worst_id, float(np.abs(identity).max()))

        # score row/column (2, D) must match finite differences of
        # log grid_probs through (mu, log_precision)
        i = int(rng.integers(pts.shape[0]))
        psi = np.concatenate([dist.mu, dist.log_precision])

        def logp() -> float:
            d = HyperDist(mu=psi[:2], log_precision=psi[2:])
            return float(np.log(grid_probs(grid, d)[i]))

        numeric = fd_gradient_at(logp, psi, range(4), h=1e-6)
        analytic = score(grid, dist, pts[i]).reshape(-1)
        assert grad_close(analytic, numeric, tol=1e-6), \
            f"score vs fd: {analytic} vs {numeric}"
        denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
        worst_fd = max(worst_fd, float((np.abs(analytic - numeric) / denom).max()))
    ok = worst_sum <= 1e-12 and worst_id < 1e-10
    verdict(7, ok,
            f"100 random (mu, A): probability sums off by <= {worst_sum:.2e} "
            f"(need <= 1e-12), expected score <= {worst_id:.2e} "
            f"(need < 1e-10), score-vs-fd rel err <= {worst_fd:.2e} "
            f"(need < 1e-6)")


# ---------------------------------------------------------------------------
# 8: aggregation oracle


def test_criterion_08_aggregation_matches_hand_computation():
    rng = np.random.default_rng(5)
    w = ParamSet({"0.w": rng.normal(size=(4, 3)), "0.b": rng.normal(size=3)})
    sizes = (3, 5, 2, 10)
    locals_ = [w.map(lambda a: a + rng.normal(size=a.shape)) for _ in sizes]

    def result(cid):
        return ClientResult(client_id=cid, n_samples=sizes[cid],
                            params=locals_[cid], theta=None,
                            losses=LossBreakdown(0, 0, 0, 0, 0),
                            short_batch=False)

    total = sum(sizes)

    def hand(selected):
        # vectorized, loop-free: w + sum_k (n_k / N) (w_k - w)
        out = {}
        coef = np.array([sizes[c] for c in selected], dtype=float) / total
        for key in w:
            deltas = np.stack([locals_[c][key] - w[key] for c in selected])
            out[key] = w[key] + np.tensordot(coef, deltas, axes=1)
        return out

    full = aggregate(w, [result(c) for c in range(4)], total, "literal")
    expect_full = hand(range(4))
    ok_full = all(np.allclose(full[k], expect_full[k], rtol=0, atol=1e-12)
                  for k in w)

    damped = aggregate(w, [result(1), result(3)], total, "literal")
    expect_damped = hand((1, 3))
    ok_damped = all(np.allclose(damped[k], expect_damped[k], rtol=0, atol=1e-12)
                    for k in w)

    renorm = aggregate(w, [result(c) for c in range(4)], total, "renormalized")
    ok_bitwise = all(np.array_equal(full[k], renorm[k]) for k in w)

    verdict(8, ok_full and ok_damped and ok_bitwise,
            "literal aggregation equals the loop-free hand computation at "
            "full and half participation, and renormalized mode is bitwise "
            "identical to literal at full participation")


# ---------------------------------------------------------------------------
# 9: determinism


def test_criterion_09_reruns_and_thread_pool_are_byte_identical(tmp_path):
    base = {
        "task": "synthetic",
        "seed": 17,
        "partition": "non_iid",
        "use_tuner": True,
        "use_matching": True,
        "tuner": {"axes": [
            {"name": "learning_rate", "values": [0.01, 0.02, 0.05],
             "integer": False},
            {"name": "sgd_iterations", "values": [3, 6], "integer": True},
        ]},
        "n_clients": 4,
        "rounds": 3,
        "batch_size": 16,
        "validation_size": 20,
        "eval_every": 2,
        "synthetic": {"classes": 4, "per_class": 30, "test_per_class": 10},
    }

    def run(tag, parallel):
        cfg_path = tmp_path / f"{tag}.json"
        cfg_path.write_text(json.dumps({
            **base,
            "parallel_clients": parallel,
            "output_dir": str(tmp_path / tag),
        }))
        assert main(["run", str(cfg_path), "--quiet"]) == 0
        return (tmp_path / tag / "rounds.jsonl").read_bytes()

    first = run("first", 1)
    second = run("second", 1)
    pooled = run("pooled", 4)
    verdict(9, first == second and first == pooled,
            f"rounds.jsonl identical across reruns and across serial vs "
            f"4-thread clients ({len(first)} bytes, tuner+matching config)")


# ---------------------------------------------------------------------------
# 10: toy-bandit convergence


def test_criterion_10_bandit_mean_converges_to_optimum():
    grid = bandit_grid()
    pts = grid.points()
    coords_a = np.unique(pts[:, 0])
    coords_b = np.unique(pts[:, 1])
    target = np.array([coords_a[2], coords_b[1]])  # an interior cell
    cell = np.array([coords_a[1] - coords_a[0], coords_b[1] - coords_b[0]])

    hits = 0
    finals = []
    for seed in range(1, 6):
        rng = np.random.default_rng(seed)
        dist = initial_dist(grid, 0.2)
        window = RewardWindow(10)
        for _ in range(2000):
            idx, h, _ = sample(grid, dist, rng)
            r = 0.05 * (1.0 - 2.0 * float(np.sum((pts[idx] - target) ** 2))) \
                + float(rng.normal(0.0, 0.005))
            window.push(r, score(grid, dist, h))
            dist = reinforce_update(dist, window, 0.01, sign=1.0)
        ok = bool(np.all(np.abs(dist.mu - target) <= cell))
        hits += ok
        finals.append(np.round(dist.mu, 3).tolist())
    verdict(10, hits >= 4,
            f"bandit mean within one grid cell of the optimum {target.tolist()} "
            f"after 2000 rounds in {hits}/5 seeds (need >= 4); finals {finals}")
