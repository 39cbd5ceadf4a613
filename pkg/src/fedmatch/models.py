"""Model architectures and their matching decoders.

Three fixed architectures cover the tasks:

* ``mnist_mlp``  - 784 -> dense 100 -> relu -> dense 100 -> relu -> dense 10
* ``cifar_cnn``  - two conv(5x5, same)+relu+pool blocks (32 then 64 maps),
                   flatten 4096, dense 1024 -> relu, dense 10
* ``kws_cnn``    - four conv(3x3, same, 64 maps)+relu with a pool after each
                   pair, on 1x32x32 inputs; flatten 4096, dense 1024 -> relu,
                   dense 10

Matching sites are the network input, every relu output, and the raw
logits.  For consecutive sites (j, j+1) the decoder owns one stage f_j
that maps the site-(j+1) activation of the *local* model back to the
site-j activation of the *round-start* model.  A stage reverses the ops
between the two sites in reverse order: exactly one learned map (an
affine map where the forward chain was dense, a stride-1 transposed conv
where it was conv), a reshape wherever a flatten sat, and an unpool
(replaying the local model's pool switches) wherever a pool sat.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .nn import (
    GraphError,
    LayerSpec,
    ModelGraph,
    ParamSet,
    conv2d,
    dense,
    flatten,
    maxpool2x2,
    relu,
    transposed_conv2d,
)

ARCH_NAMES = ("mnist_mlp", "cifar_cnn", "kws_cnn")


@dataclass(frozen=True)
class ModelArch:
    name: str
    graph: ModelGraph
    n_classes: int


def build_arch(name: str) -> ModelArch:
    """Construct one of the three fixed architectures by name."""
    if name == "mnist_mlp":
        graph = ModelGraph(
            input_shape=(784,),
            layers=(
                dense(784, 100), relu(),
                dense(100, 100), relu(),
                dense(100, 10),
            ),
        )
    elif name == "cifar_cnn":
        graph = ModelGraph(
            input_shape=(3, 32, 32),
            layers=(
                conv2d(3, 32, 5, padding=2), relu(), maxpool2x2(),
                conv2d(32, 64, 5, padding=2), relu(), maxpool2x2(),
                flatten(),
                dense(4096, 1024), relu(),
                dense(1024, 10),
            ),
        )
    elif name == "kws_cnn":
        graph = ModelGraph(
            input_shape=(1, 32, 32),
            layers=(
                conv2d(1, 64, 3, padding=1), relu(),
                conv2d(64, 64, 3, padding=1), relu(), maxpool2x2(),
                conv2d(64, 64, 3, padding=1), relu(),
                conv2d(64, 64, 3, padding=1), relu(), maxpool2x2(),
                flatten(),
                dense(4096, 1024), relu(),
                dense(1024, 10),
            ),
        )
    else:
        raise GraphError(f"unknown architecture {name!r}; expected one of {ARCH_NAMES}")
    return ModelArch(name=name, graph=graph, n_classes=10)


def arch_for_task(task: str) -> str:
    """The architecture each task trains."""
    table = {"mnist": "mnist_mlp", "cifar10": "cifar_cnn",
             "kws": "kws_cnn", "synthetic": "mnist_mlp"}
    if task not in table:
        raise ValueError(f"unknown task {task!r}")
    return table[task]


def match_sites(graph: ModelGraph, include_input: bool = True) -> tuple[int, ...]:
    """Layer indices of the matching sites, in forward order.

    -1 stands for the network input; every relu output is a site; the last
    layer (raw logits) is the top site.
    """
    sites = [-1] if include_input else []
    for i, spec in enumerate(graph.layers):
        if spec.kind == "relu":
            sites.append(i)
    top = len(graph.layers) - 1
    if graph.layers[top].kind == "relu":
        raise GraphError("top layer must produce raw logits, not a relu output")
    sites.append(top)
    if len(sites) < 2:
        raise GraphError("need at least two matching sites")
    return tuple(sites)


def site_shape(graph: ModelGraph, site: int) -> tuple[int, ...]:
    return graph.input_shape if site == -1 else graph.layer_shapes[site]


# ---------------------------------------------------------------------------
# Decoder stage ops


@dataclass(frozen=True)
class MapOp:
    """The stage's single learned map (dense or transposed conv)."""
    spec: LayerSpec


@dataclass(frozen=True)
class ReshapeOp:
    """Undo a flatten: reshape the batch back to `shape` per sample."""
    shape: tuple[int, ...]


@dataclass(frozen=True)
class UnpoolOp:
    """Undo a maxpool using the trainable model's switches at `pool_layer`."""
    pool_layer: int


StageOp = MapOp | ReshapeOp | UnpoolOp


@dataclass(frozen=True)
class MatchStage:
    """Decoder stage f_j: rebuild site j-1's activation from site j's."""

    index: int  # 1-based stage number; parameters live under "{index}.w/.b"
    source_site: int  # layer index fed into the stage (site j)
    target_site: int  # layer index the stage reconstructs (site j-1)
    ops: tuple[StageOp, ...]

    @property
    def map_spec(self) -> LayerSpec:
        for op in self.ops:
            if isinstance(op, MapOp):
                return op.spec
        raise GraphError(f"stage {self.index} has no learned map")


@dataclass(frozen=True)
class MatchingDecoder:
    """All stages plus which pool switches each one replays."""

    arch_name: str
    stages: tuple[MatchStage, ...]

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        out: dict[str, tuple[int, ...]] = {}
        for st in self.stages:
            spec = st.map_spec
            if spec.kind == "dense":
                out[f"{st.index}.w"] = (spec.in_units, spec.out_units)
                out[f"{st.index}.b"] = (spec.out_units,)
            else:
                out[f"{st.index}.w"] = (spec.in_channels, spec.out_channels,
                                        spec.kernel_h, spec.kernel_w)
                out[f"{st.index}.b"] = (spec.out_channels,)
        return out


def _segment_ops(graph: ModelGraph, lo_site: int, hi_site: int) -> list[StageOp]:
    """Reverse the forward chain (lo_site, hi_site] into decoder ops."""
    chain = list(range(lo_site + 1, hi_site + 1))
    # A site at a relu output is reconstructed directly; the relu itself is
    # not inverted (the learned map absorbs it).
    if graph.layers[hi_site].kind == "relu":
        chain = chain[:-1]
    ops: list[StageOp] = []
    n_maps = 0
    for i in reversed(chain):
        spec = graph.layers[i]
        in_shape = graph.input_shape if i == 0 else graph.layer_shapes[i - 1]
        if spec.kind == "dense":
            ops.append(MapOp(dense(spec.out_units, spec.in_units)))
            n_maps += 1
        elif spec.kind == "conv2d":
            if spec.stride != 1:
                raise GraphError("decoder mirroring requires stride-1 convs")
            ops.append(MapOp(transposed_conv2d(spec.out_channels, spec.in_channels,
                                               spec.kernel_h, padding=spec.padding)))
            n_maps += 1
        elif spec.kind == "flatten":
            ops.append(ReshapeOp(in_shape))
        elif spec.kind == "maxpool2x2":
            ops.append(UnpoolOp(pool_layer=i))
        elif spec.kind == "relu":
            raise GraphError(
                f"relu at layer {i} sits between matching sites; sites must "
                f"cover every pointwise nonlinearity")
        else:
            raise GraphError(f"cannot mirror layer kind {spec.kind!r} in a decoder")
    if n_maps != 1:
        raise GraphError(
            f"segment ({lo_site}, {hi_site}] yields {n_maps} learned maps; "
            f"expected exactly one per stage")
    return ops


def _stage_output_shape(graph: ModelGraph, stage: MatchStage,
                        in_shape: tuple[int, ...]) -> tuple[int, ...]:
    cur = in_shape
    for op in stage.ops:
        if isinstance(op, MapOp):
            cur = nn.output_shape(op.spec, cur)
        elif isinstance(op, ReshapeOp):
            if int(np.prod(cur)) != int(np.prod(op.shape)):
                raise nn.ShapeError(
                    f"stage {stage.index}: cannot reshape {cur} to {op.shape}")
            cur = op.shape
        else:
            pool_out = graph.layer_shapes[op.pool_layer]
            if cur != pool_out:
                raise nn.ShapeError(
                    f"stage {stage.index}: unpool expects {pool_out}, got {cur}")
            cur = (cur[0], 2 * cur[1], 2 * cur[2])
    return cur


def build_matching_decoder(arch: ModelArch, rng: np.random.Generator,
                           include_input_site: bool = True
                           ) -> tuple[MatchingDecoder, ParamSet]:
    """Build the decoder structure for `arch` and draw initial parameters.

    Returns (decoder, theta).  The structure is deterministic; theta uses
    the same uniform fan-in init as model layers, drawn stage by stage in
    order, so a fixed generator gives fixed parameters.

    Every stage's output shape is audited against the activation it must
    reconstruct; a mismatch is a programming error and raises.
    """
    graph = arch.graph
    sites = match_sites(graph, include_input=include_input_site)
    stages: list[MatchStage] = []
    for k in range(len(sites) - 1):
        lo, hi = sites[k], sites[k + 1]
        stage = MatchStage(index=k + 1, source_site=hi, target_site=lo,
                           ops=tuple(_segment_ops(graph, lo, hi)))
        got = _stage_output_shape(graph, stage, site_shape(graph, hi))
        want = site_shape(graph, lo)
        if got != want:
            raise nn.ShapeError(
                f"stage {stage.index} of {arch.name} rebuilds shape {got}, "
                f"but site {lo} has shape {want}")
        stages.append(stage)
    decoder = MatchingDecoder(arch_name=arch.name, stages=tuple(stages))
    tensors: dict[str, np.ndarray] = {}
    for st in decoder.stages:
        p = nn.init_layer_params(st.map_spec, rng)
        tensors[f"{st.index}.w"] = p["w"]
        tensors[f"{st.index}.b"] = p["b"]
    return decoder, ParamSet(tensors)
