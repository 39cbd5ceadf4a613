"""Synchronous federated averaging rounds.

One round, in order: sample this round's hyper-parameters (tuned or from
the fixed schedule), select clients, run local SGD on each selected client
from the broadcast parameters, aggregate the deltas, evaluate the
validation loss, score the reward, and update the tuning distribution.

Clients can run serially or on a thread pool; results reduce in client-id
order either way, so both paths are bitwise identical.  Every random draw
comes from a named substream of the experiment seed (see `seeding`), which
pins the whole run, including the bytes of its metrics files.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import nn, seeding
from .config import ExperimentConfig
from .data import (
    Dataset,
    load_cifar10,
    load_features,
    load_mnist,
    make_synthetic,
    partition_by_class,
    partition_iid,
    stratified_holdout,
    stratified_subset,
)
from .losses import LossBreakdown, LossSettings, cross_entropy, total_loss_and_grads
from .models import MatchingDecoder, ModelArch, build_arch, build_matching_decoder
from .nn import ModelGraph, ParamSet
from .tuner import (
    HyperDist,
    HyperGrid,
    RewardWindow,
    initial_dist,
    mu_raw,
    reinforce_update,
    reward,
    sample,
    score,
)


@dataclass
class ClientState:
    """One simulated client: its shard and its persistent decoder params."""

    client_id: int
    x: np.ndarray
    y: np.ndarray
    theta: ParamSet | None = None

    @property
    def n_samples(self) -> int:
        return int(self.y.shape[0])


@dataclass
class ServerState:
    """Everything the server carries between rounds."""

    params: ParamSet
    val_x: np.ndarray
    val_y: np.ndarray
    total_datapoints: int
    round: int = 0  # rounds completed so far
    current_loss: float = float("nan")  # validation loss at `params`
    grid: HyperGrid | None = None
    dist: HyperDist | None = None
    window: RewardWindow | None = None


@dataclass(frozen=True)
class SampledHypers:
    """The hyper-parameters one round actually trains with."""

    lr: float
    iterations: int
    h_norm: np.ndarray | None = None  # grid coords when tuned, None when fixed


@dataclass(frozen=True)
class ClientResult:
    client_id: int
    n_samples: int
    params: ParamSet
    theta: ParamSet | None
    losses: LossBreakdown
    short_batch: bool


@dataclass(frozen=True)
class RoundRecord:
    """Everything worth keeping about one round.

    `wall_time_sec` is informational only and is deliberately left out of
    the serialized metrics so reruns of the same seed write identical
    files.
    """

    round: int
    selected: tuple[int, ...]
    lr: float
    iterations: int
    h_norm: tuple[float, ...] | None
    mu_norm: tuple[float, ...] | None
    mu_raw: dict[str, float] | None
    loss_before: float
    loss_after: float
    reward: float | None
    client_losses: tuple[dict, ...]
    wall_time_sec: float = 0.0


@dataclass(frozen=True)
class EvalRecord:
    round: int
    test_accuracy: float


@dataclass
class ExperimentResult:
    records: list[RoundRecord]
    evals: list[EvalRecord]
    params: ParamSet
    final_test_accuracy: float
    final_validation_loss: float


# ---------------------------------------------------------------------------
# Round building blocks


def select_clients(n_clients: int, fraction: float,
                   rng: np.random.Generator) -> tuple[int, ...]:
    """Choose max(1, round(fraction * n_clients)) distinct ids, ascending."""
    if not 0 < fraction <= 1:
        raise ValueError("client fraction must be in (0, 1]")
    m = max(1, round(fraction * n_clients))
    picked = rng.choice(n_clients, size=m, replace=False)
    return tuple(sorted(int(i) for i in picked))


def _batch_indices(n: int, batch_size: int, iterations: int,
                   rng: np.random.Generator):
    """Yield `iterations` batches of sample indices.

    Shuffled epochs are chained: a permutation's leftover tail joins the
    head of the next permutation, so every batch has exactly `batch_size`
    samples.  A shard smaller than one batch is used whole every step
    (flagged by the second yield element).
    """
    if n < batch_size:
        whole = np.arange(n)
        for _ in range(iterations):
            yield whole, True
        return
    perm = rng.permutation(n)
    pos = 0
    for _ in range(iterations):
        if pos + batch_size <= n:
            yield perm[pos:pos + batch_size], False
            pos += batch_size
        else:
            tail = perm[pos:]
            perm = rng.permutation(n)
            pos = batch_size - tail.size
            yield np.concatenate([tail, perm[:pos]]), False


def train_client(client: ClientState, w_round: ParamSet, graph: ModelGraph,
                 decoder: MatchingDecoder | None, hypers: SampledHypers,
                 settings: LossSettings, batch_size: int,
                 rng: np.random.Generator) -> ClientResult:
    """Run local SGD from the broadcast parameters.

    Model and decoder parameters step together at the sampled rate.  The
    returned breakdown is from the last iteration (the loss the client
    ended on).
    """
    w = w_round
    theta = client.theta
    breakdown = None
    short = False
    for idx, is_short in _batch_indices(client.n_samples, batch_size,
                                        hypers.iterations, rng):
        short = short or is_short
        xb = client.x[idx]
        yb = client.y[idx]
        breakdown, w_grads, theta_grads = total_loss_and_grads(
            graph, xb, yb, w, w_round, decoder, theta, settings)
        w = nn.sgd_step(w, w_grads, hypers.lr)
        if theta_grads is not None:
            theta = nn.sgd_step(theta, theta_grads, hypers.lr)
    if breakdown is None:  # zero iterations: nothing moved
        breakdown = LossBreakdown(0.0, 0.0, 0.0, 0.0, 0.0)
    return ClientResult(client_id=client.client_id, n_samples=client.n_samples,
                        params=w, theta=theta, losses=breakdown, short_batch=short)


def aggregate(w_round: ParamSet, results: list[ClientResult],
              total_datapoints: int, mode: str = "literal") -> ParamSet:
    """Weighted average of client deltas applied to the broadcast params.

    literal mode weighs each client by n_k / N (N = all datapoints across
    all clients); renormalized mode weighs by n_k / sum of the selected
    clients' n_k.  Accumulation runs in ascending client order, so the
    result does not depend on who computed what where.
    """
    if not results:
        raise ValueError("cannot aggregate zero client results")
    if mode not in ("literal", "renormalized"):
        raise ValueError(f"unknown aggregation mode {mode!r}")
    ordered = sorted(results, key=lambda r: r.client_id)
    if mode == "literal":
        denom = float(total_datapoints)
    else:
        denom = float(sum(r.n_samples for r in ordered))
    new = {k: w_round[k].copy() for k in w_round}
    for r in ordered:
        coef = r.n_samples / denom
        for k in new:
            new[k] += coef * (r.params[k] - w_round[k])
    return ParamSet(new)


def evaluate_loss(graph: ModelGraph, params: ParamSet, x: np.ndarray,
                  y: np.ndarray, batch_size: int = 512) -> float:
    """Mean cross-entropy over a dataset, batched to bound memory."""
    if x.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty set")
    total = 0.0
    for lo in range(0, x.shape[0], batch_size):
        xb = x[lo:lo + batch_size]
        yb = y[lo:lo + batch_size]
        trace = nn.forward(graph, params, xb)
        ce, _ = cross_entropy(trace.logits, yb)
        total += ce * xb.shape[0]
    return total / x.shape[0]


def evaluate_accuracy(graph: ModelGraph, params: ParamSet, x: np.ndarray,
                      y: np.ndarray, batch_size: int = 512) -> float:
    hits = 0
    for lo in range(0, x.shape[0], batch_size):
        trace = nn.forward(graph, params, x[lo:lo + batch_size])
        hits += int((trace.logits.argmax(axis=1) == y[lo:lo + batch_size]).sum())
    return hits / x.shape[0]


def _schedule_lr(cfg: ExperimentConfig, t: int) -> float:
    """Fixed baseline: halve the lr each third of the round budget."""
    stage_len = max(1, cfg.rounds // 3)
    stage = min((t - 1) // stage_len, 2) if cfg.rounds >= 3 else 0
    return cfg.schedule.initial_lr * (0.5 ** stage)


def run_round(server: ServerState, clients: list[ClientState],
              arch: ModelArch, decoder: MatchingDecoder | None,
              cfg: ExperimentConfig) -> RoundRecord:
    """Advance the federation by one synchronous round (in place)."""
    t = server.round + 1
    start = time.perf_counter()
    settings = cfg.loss_settings()

    # 1. hyper-parameters for this round
    if cfg.use_tuner:
        rng = seeding.substream(cfg.seed, seeding.HYPER_SAMPLE, t)
        _, h_norm, raw = sample(server.grid, server.dist, rng)
        hypers = SampledHypers(lr=float(raw["learning_rate"]),
                               iterations=int(raw["sgd_iterations"]),
                               h_norm=h_norm)
        dist_before = server.dist
        mu_norm = tuple(float(v) for v in dist_before.mu)
        mu_raw_now = mu_raw(server.grid, dist_before)
    else:
        hypers = SampledHypers(lr=_schedule_lr(cfg, t),
                               iterations=cfg.schedule.iterations)
        mu_norm = None
        mu_raw_now = None

    # 2. participating clients
    sel_rng = seeding.substream(cfg.seed, seeding.CLIENT_SELECT, t)
    selected = select_clients(cfg.n_clients, cfg.client_fraction, sel_rng)

    # 3. local work (serial or thread pool; same reduction order either way)
    def work(cid: int) -> ClientResult:
        crng = seeding.substream(cfg.seed, seeding.CLIENT_TRAIN, t, cid)
        return train_client(clients[cid], server.params, arch.graph, decoder,
                            hypers, settings, cfg.batch_size, crng)

    if cfg.parallel_clients > 1 and len(selected) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallel_clients) as pool:
            results = list(pool.map(work, selected))
    else:
        results = [work(cid) for cid in selected]
    results.sort(key=lambda r: r.client_id)

    # 4. aggregate and persist decoder params
    new_params = aggregate(server.params, results, server.total_datapoints,
                           cfg.aggregation)
    for r in results:
        if r.theta is not None:
            clients[r.client_id].theta = r.theta

    # 5. reward and tuner update
    loss_before = server.current_loss
    loss_after = evaluate_loss(arch.graph, new_params, server.val_x, server.val_y)
    r_t = None
    if cfg.use_tuner:
        r_t = reward(loss_before, loss_after)
        s_t = score(server.grid, server.dist, hypers.h_norm)
        server.window.push(r_t, s_t)
        server.dist = reinforce_update(
            server.dist, server.window, cfg.tuner.hyper_lr,
            sign=1.0 if cfg.tuner.update_sign == "ascent" else -1.0,
            freeze_precision=cfg.tuner.freeze_precision)

    server.params = new_params
    server.current_loss = loss_after
    server.round = t

    client_losses = tuple(
        {"client": r.client_id,
         "cross_entropy": r.losses.cross_entropy,
         "matching": r.losses.matching,
         "er": r.losses.er,
         "wd": r.losses.wd,
         "total": r.losses.total,
         "short_batch": r.short_batch}
        for r in results)
    return RoundRecord(
        round=t,
        selected=selected,
        lr=hypers.lr,
        iterations=hypers.iterations,
        h_norm=tuple(float(v) for v in hypers.h_norm) if hypers.h_norm is not None else None,
        mu_norm=mu_norm,
        mu_raw=mu_raw_now,
        loss_before=loss_before,
        loss_after=loss_after,
        reward=r_t,
        client_losses=client_losses,
        wall_time_sec=time.perf_counter() - start,
    )


# ---------------------------------------------------------------------------
# Whole experiments


def _load_task_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.task == "synthetic":
        s = cfg.synthetic
        rng = seeding.substream(cfg.seed, seeding.SYNTHETIC_DATA)
        full = make_synthetic(rng, classes=s.classes,
                              per_class=s.per_class + s.test_per_class,
                              input_dim=s.input_dim, spread=s.spread)
        train, test = stratified_holdout(full, s.classes * s.test_per_class, rng)
        return (Dataset(train.samples, train.labels, "train"),
                Dataset(test.samples, test.labels, "test"))
    if cfg.task == "mnist":
        return load_mnist(cfg.data_dir)
    if cfg.task == "cifar10":
        return load_cifar10(cfg.data_dir)
    if cfg.task == "kws":
        from pathlib import Path
        d = Path(cfg.data_dir)
        return (load_features(d / "kws_train.fedf", "train"),
                load_features(d / "kws_test.fedf", "test"))
    raise ValueError(f"unknown task {cfg.task!r}")


def setup_experiment(cfg: ExperimentConfig):
    """Build server, clients, arch and decoder for a fresh run.

    Returns (server, clients, arch, decoder, test_set).
    """
    train, test = _load_task_data(cfg)
    arch = build_arch(cfg.arch_name)
    if train.samples.shape[1:] != arch.graph.input_shape:
        raise ValueError(
            f"task data shape {train.samples.shape[1:]} does not fit "
            f"{arch.name} input {arch.graph.input_shape}")

    if cfg.train_subset is not None and cfg.train_subset < train.n:
        sub_rng = seeding.substream(cfg.seed, seeding.TRAIN_SUBSET)
        train = stratified_subset(train, cfg.train_subset, sub_rng)

    val_rng = seeding.substream(cfg.seed, seeding.VALIDATION_SPLIT)
    if cfg.validation_size >= train.n:
        raise ValueError(
            f"validation_size {cfg.validation_size} does not leave training "
            f"data (train size {train.n})")
    train, val = stratified_holdout(train, cfg.validation_size, val_rng)

    if cfg.partition == "iid":
        part_rng = seeding.substream(cfg.seed, seeding.PARTITION)
        part = partition_iid(train.n, cfg.n_clients, part_rng)
    else:
        part = partition_by_class(train.labels, cfg.n_clients)

    decoder = None
    clients: list[ClientState] = []
    for k in range(cfg.n_clients):
        idx = part.client_indices[k]
        theta = None
        if cfg.use_matching:
            drng = seeding.substream(cfg.seed, seeding.INIT_DECODER, k)
            decoder_k, theta = build_matching_decoder(
                arch, drng, include_input_site=cfg.loss.match_input_site)
            decoder = decoder_k  # same structure for every client
        clients.append(ClientState(client_id=k, x=train.samples[idx],
                                   y=train.labels[idx], theta=theta))

    init_rng = seeding.substream(cfg.seed, seeding.INIT_PARAMS)
    params = nn.init_params(arch.graph, init_rng)

    server = ServerState(
        params=params,
        val_x=val.samples,
        val_y=val.labels,
        total_datapoints=train.n,
        round=0,
    )
    if cfg.use_tuner:
        server.grid = cfg.hyper_grid()
        server.dist = initial_dist(server.grid, cfg.tuner.init_std)
        server.window = RewardWindow(cfg.tuner.window)
    server.current_loss = evaluate_loss(arch.graph, params, val.samples, val.labels)
    return server, clients, arch, decoder, test


def run_experiment(cfg: ExperimentConfig, sink=None,
                   progress=None) -> ExperimentResult:
    """Run a full experiment; stream records to `sink` if given.

    `sink` needs write_round(RoundRecord) and write_eval(EvalRecord);
    `progress` is an optional callable(str) for status lines.
    """
    server, clients, arch, decoder, test = setup_experiment(cfg)
    records: list[RoundRecord] = []
    evals: list[EvalRecord] = []

    def run_eval(t: int) -> None:
        acc = evaluate_accuracy(arch.graph, server.params, test.samples, test.labels)
        ev = EvalRecord(round=t, test_accuracy=acc)
        evals.append(ev)
        if sink is not None:
            sink.write_eval(ev)
        if progress is not None:
            progress(f"round {t}: test accuracy {acc:.4f}")

    run_eval(0)
    for t in range(1, cfg.rounds + 1):
        rec = run_round(server, clients, arch, decoder, cfg)
        records.append(rec)
        if sink is not None:
            sink.write_round(rec)
        if progress is not None and (t % 10 == 0 or t == cfg.rounds):
            progress(f"round {t}/{cfg.rounds}: val loss {rec.loss_after:.4f} "
                     f"lr {rec.lr:g} iters {rec.iterations} "
                     f"({rec.wall_time_sec:.2f}s)")
        if t % cfg.eval_every == 0:
            run_eval(t)

    if cfg.rounds % cfg.eval_every == 0 and cfg.rounds > 0:
        final_acc = evals[-1].test_accuracy
    else:
        final_acc = evaluate_accuracy(arch.graph, server.params,
                                      test.samples, test.labels)
    return ExperimentResult(records=records, evals=evals, params=server.params,
                            final_test_accuracy=final_acc,
                            final_validation_loss=server.current_loss)
