"""Loss terms and their gradients.

Per-batch objective on a client:

    total = CE + matching_coeff * matching + ER + wd_coeff * WD

* CE: softmax cross-entropy on the logits, mean over the batch.
* matching: sum over decoder stages of the squared L2 distance between the
  stage's reconstruction (from the local model's activations) and the
  round-start model's activation at the target site; mean over the batch.
* ER: entropy hinge max(0, min_entropy - H(softmax(logits))), mean over the
  batch, in nats.  Pushes per-example predictive entropy up to a floor,
  which counters overconfident drift on skewed shards.
* WD: squared L2 distance between local and round-start parameters, summed
  over all tensors (not batch-averaged).

Everything returns analytic gradients; finite differences check all of it
in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .models import MapOp, MatchingDecoder, ReshapeOp, UnpoolOp
from .nn import ForwardTrace, ModelGraph, ParamSet


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean softmax cross-entropy and its gradient w.r.t. the logits.

    Returns (loss, grad); grad already includes the 1/B factor.
    """
    b = logits.shape[0]
    if labels.shape != (b,):
        raise nn.ShapeError(f"labels shape {labels.shape} does not match batch {b}")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(b), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(b), labels] -= 1.0
    return loss, grad / b


def predict(logits: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((predict(logits) == labels).mean())


def er_loss(logits: np.ndarray, min_entropy: float):
    """Entropy-floor hinge, mean over the batch, with logits gradient.

    For one example with p = softmax(z) and H = -sum_j p_j log p_j:
    dH/dz_j = -p_j (log p_j + H), so where H < min_entropy the hinge
    contributes p_j (log p_j + H) / B to the logits gradient.
    """
    if min_entropy < 0:
        raise ValueError("min_entropy must be non-negative")
    b = logits.shape[0]
    p = softmax(logits)
    # p log p -> 0 as p -> 0; clamp only inside the log.
    plogp = p * np.log(np.maximum(p, 1e-300))
    ent = -plogp.sum(axis=1)
    active = ent < min_entropy
    loss = float(np.where(active, min_entropy - ent, 0.0).mean())
    grad = np.where(active[:, None], plogp + p * ent[:, None], 0.0) / b
    return loss, grad


def wd_loss(w_round: ParamSet, w_local: ParamSet):
    """Squared L2 divergence between parameter sets, with grad w.r.t. w_local."""
    w_round.check_structure(w_local)
    loss = 0.0
    grads: dict[str, np.ndarray] = {}
    for k in w_round:
        d = w_local[k] - w_round[k]
        loss += float((d * d).sum())
        grads[k] = 2.0 * d
    return loss, ParamSet(grads)


# ---------------------------------------------------------------------------
# Matching loss


def _stage_forward(stage, theta: ParamSet, src: np.ndarray,
                   local_trace: ForwardTrace):
    """Run one decoder stage; returns (output, cache for backward)."""
    cur = src
    cache = []
    for op in stage.ops:
        if isinstance(op, MapOp):
            spec = op.spec
            w = theta[f"{stage.index}.w"]
            b = theta[f"{stage.index}.b"]
            cache.append(("map", cur))
            if spec.kind == "dense":
                cur = nn.dense_forward(cur, w, b)
            else:
                cur = nn.transposed_conv2d_forward(cur, w, b, padding=spec.padding)
        elif isinstance(op, ReshapeOp):
            cache.append(("reshape", cur.shape))
            cur = cur.reshape(cur.shape[0], *op.shape)
        elif isinstance(op, UnpoolOp):
            sw = local_trace.switches[op.pool_layer]
            cache.append(("unpool", sw))
            cur = nn.unpool2x2_forward(cur, sw)
    return cur, cache


def _stage_backward(stage, theta: ParamSet, cache, g: np.ndarray):
    """Backprop one stage; returns (dtheta_w, dtheta_b, grad w.r.t. src)."""
    dw = db = None
    for op, entry in zip(reversed(stage.ops), reversed(cache)):
        kind = entry[0]
        if kind == "map":
            _, x_in = entry
            spec = op.spec
            w = theta[f"{stage.index}.w"]
            if spec.kind == "dense":
                dw, db, g = nn.dense_backward(x_in, w, g)
            else:
                dw, db, g = nn.transposed_conv2d_backward(x_in, w, g,
                                                          padding=spec.padding)
        elif kind == "reshape":
            g = g.reshape(entry[1])
        else:
            g = nn.unpool2x2_backward(g, entry[1])
    return dw, db, g


def matching_loss(local_trace: ForwardTrace, fixed_trace: ForwardTrace,
                  decoder: MatchingDecoder, theta: ParamSet):
    """Total reconstruction error across stages, plus per-stage caches.

    Each stage feeds on the *local* model's source-site activation and is
    scored against the *fixed* (round-start) model's target-site
    activation.  Per-stage losses are summed over feature dimensions and
    averaged over the batch.

    Returns (value, stage_data) where stage_data drives
    `matching_backward`.
    """
    total = 0.0
    stage_data = []
    for stage in decoder.stages:
        src = local_trace.site_output(stage.source_site)
        target = fixed_trace.site_output(stage.target_site)
        out, cache = _stage_forward(stage, theta, src, local_trace)
        if out.shape != target.shape:
            raise nn.ShapeError(
                f"stage {stage.index} output {out.shape} vs target {target.shape}")
        resid = out - target
        b = resid.shape[0]
        total += float((resid * resid).sum()) / b
        stage_data.append((stage, cache, resid))
    return total, stage_data


def matching_backward(decoder: MatchingDecoder, theta: ParamSet, stage_data):
    """Gradients of the matching loss.

    Returns (theta_grads: ParamSet, site_grads: dict layer index -> grad of
    the loss w.r.t. the *local* model's activation at that site).  Sites
    shared by several stages accumulate.
    """
    theta_grads: dict[str, np.ndarray] = {}
    site_grads: dict[int, np.ndarray] = {}
    for stage, cache, resid in stage_data:
        b = resid.shape[0]
        g = (2.0 / b) * resid
        dw, db, gsrc = _stage_backward(stage, theta, cache, g)
        theta_grads[f"{stage.index}.w"] = dw
        theta_grads[f"{stage.index}.b"] = db
        s = stage.source_site
        if s in site_grads:
            site_grads[s] = site_grads[s] + gsrc
        else:
            site_grads[s] = gsrc
    ordered = {k: theta_grads[k] for k in theta if k in theta_grads}
    if len(ordered) != len(theta_grads):
        raise nn.ShapeError("decoder gradient keys do not match theta keys")
    return ParamSet(ordered), site_grads


# ---------------------------------------------------------------------------
# Combined objective


@dataclass(frozen=True)
class LossSettings:
    """Which terms are active and their weights."""

    use_matching: bool = False
    use_wd: bool = False
    use_er: bool = True
    matching_coeff: float = 1.0
    wd_coeff: float = 0.1
    min_entropy: float = 0.5  # nats

    def __post_init__(self) -> None:
        if self.use_matching and self.use_wd:
            raise ValueError("matching and weight-divergence terms are exclusive")


@dataclass(frozen=True)
class LossBreakdown:
    """Unweighted term values; `total` applies the configured weights."""

    cross_entropy: float
    matching: float
    er: float
    wd: float
    total: float


def total_loss_and_grads(graph: ModelGraph, x: np.ndarray, y: np.ndarray,
                         w_local: ParamSet, w_round: ParamSet,
                         decoder: MatchingDecoder | None, theta: ParamSet | None,
                         settings: LossSettings):
    """Evaluate the full objective on one batch.

    Returns (breakdown, w_grads, theta_grads); theta_grads is None when the
    matching term is off.  `w_round` supplies both the fixed activations
    for matching and the anchor for weight divergence.
    """
    local_trace = nn.forward(graph, w_local, x)
    logits = local_trace.logits
    ce, logits_grad = cross_entropy(logits, y)

    er = 0.0
    if settings.use_er:
        er, er_grad = er_loss(logits, settings.min_entropy)
        logits_grad = logits_grad + er_grad

    match_val = 0.0
    theta_grads = None
    site_grads: dict[int, np.ndarray] = {}
    if settings.use_matching:
        if decoder is None or theta is None:
            raise ValueError("matching term enabled but decoder/theta missing")
        fixed_trace = nn.forward(graph, w_round, x)
        match_val, stage_data = matching_loss(local_trace, fixed_trace, decoder, theta)
        theta_grads, site_grads = matching_backward(decoder, theta, stage_data)
        if settings.matching_coeff != 1.0:
            c = settings.matching_coeff
            theta_grads = theta_grads.map(lambda a: c * a)
            site_grads = {k: c * v for k, v in site_grads.items()}

    top = len(graph.layers) - 1
    if top in site_grads:
        # The logits site's matching grad folds into the top gradient.
        logits_grad = logits_grad + site_grads.pop(top)

    w_grads, _ = nn.backward(graph, w_local, local_trace, logits_grad,
                             site_grads=site_grads or None)

    wd = 0.0
    if settings.use_wd:
        wd, wd_grads = wd_loss(w_round, w_local)
        w_grads = w_grads.zip_with(wd_grads, lambda g, d: g + settings.wd_coeff * d)

    total = (ce + settings.matching_coeff * match_val + er
             + settings.wd_coeff * wd)
    breakdown = LossBreakdown(cross_entropy=ce, matching=match_val, er=er,
                              wd=wd, total=total)
    return breakdown, w_grads, theta_grads
