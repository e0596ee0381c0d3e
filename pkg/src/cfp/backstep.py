"""Back-step engine: class seeding, per-layer back-steps and pyramid assembly.

The walk starts at the prediction layer, gates the class-weighted activation
vector, and then repeatedly steps backwards through convolution layers.
Selections route transparently through relu/pool nodes, duplicate across
residual adds, split across concat branches by channel offset, and wait on
identity padding so uneven branches stay aligned with the deepest one. Each
materialized kernel gets its own gate over the previous layer (those gates
produce the edges), while recursion to the next level uses the aggregated
combination over all selected kernels.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np

from .errors import ConfigError, InvalidInputError
from .inference import ActivationStore
from .model_io import INPUT_ID, LayerNode, ModelGraph, validate_graph
from .pyramid import PyramidGraph
from .tensor_ops import (
    GateResult,
    elementwise_product_reduce,
    global_avg_pool,
    minmax_normalize,
    sigmoid_gate,
    softmax_argmax,
)

__all__ = [
    "BackstepConfig",
    "SelectionResult",
    "class_seed",
    "backstep_layer",
    "adapt_block",
    "build_pyramid",
]

AGGREGATIONS = ("product", "sum_mean")
TAPS = ("post_nonlinearity", "pre_nonlinearity")
PASS_KINDS = ("relu", "avg_pool3d", "max_pool3d", "global_avg_pool", "softmax")


@dataclass(frozen=True)
class BackstepConfig:
    """User-facing knobs of the back-step.

    theta is the global gate threshold in (0, 1); per-layer overrides win
    where present. depth counts convolution layers (pass-through nodes are
    free). class_mode is "argmax" or an explicit class index.
    """

    theta: float = 0.6
    depth: int = 1
    class_mode: int | str = "argmax"
    aggregation: str = "product"
    activation_tap: str = "post_nonlinearity"
    theta_overrides: Mapping[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if not (0.0 < self.theta < 1.0):
            raise ConfigError(f"theta must be in (0, 1), got {self.theta}")
        for layer, th in self.theta_overrides.items():
            if not (0.0 < th < 1.0):
                raise ConfigError(f"theta override for '{layer}' must be in (0, 1), got {th}")
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.aggregation not in AGGREGATIONS:
            raise ConfigError(f"aggregation must be one of {AGGREGATIONS}")
        if self.activation_tap not in TAPS:
            raise ConfigError(f"activation_tap must be one of {TAPS}")
        if self.class_mode != "argmax" and not isinstance(self.class_mode, int):
            raise ConfigError("class_mode must be 'argmax' or an integer class index")

    def theta_for(self, layer_id: str) -> float:
        return float(self.theta_overrides.get(layer_id, self.theta))


@dataclass
class SelectionResult:
    """Gated selection over one layer's channel indices."""

    layer_id: str
    class_map: np.ndarray
    gate: GateResult
    selected_kernels: frozenset[int]


# ---------------------------------------------------------------------------
# numeric primitives, in a vectorized and a deliberately naive flavour
#
# The naive flavour iterates scalar-by-scalar over every location, like a
# sliding local implementation would; it exists so the CLI bench can compare
# wall times against the pooled vectorized route on identical semantics.


class _VectorizedImpl:
    name = "vectorized"

    @staticmethod
    def pool(t: np.ndarray) -> np.ndarray:
        return global_avg_pool(t)

    @staticmethod
    def normalize(v: np.ndarray) -> np.ndarray:
        return minmax_normalize(v)

    @staticmethod
    def gate(v: np.ndarray, theta: float) -> GateResult:
        return sigmoid_gate(v, theta)

    @staticmethod
    def combine(a: np.ndarray, ws: list[np.ndarray], aggregation: str) -> np.ndarray:
        if aggregation == "product":
            return elementwise_product_reduce(a, ws)
        return np.mean([a * w for w in ws], axis=0)


class _NaiveImpl:
    name = "naive"

    @staticmethod
    def pool(t: np.ndarray) -> np.ndarray:
        if t.size == 0:
            raise InvalidInputError("cannot pool an empty tensor")
        flat = t.reshape(t.shape[0], -1)
        out = []
        for row in flat:
            acc = 0.0
            for x in row.tolist():
                acc += x
            out.append(acc / row.size)
        return np.array(out, dtype=np.float64)

    @staticmethod
    def normalize(v: np.ndarray) -> np.ndarray:
        vals = list(np.asarray(v, dtype=np.float64).tolist())
        lo = min(vals)
        hi = max(vals)
        if hi == lo:
            return np.zeros(len(vals), dtype=np.float64)
        return np.array([(x - lo) / (hi - lo) for x in vals], dtype=np.float64)

    @staticmethod
    def gate(v: np.ndarray, theta: float) -> GateResult:
        if not (0.0 < theta < 1.0):
            raise ConfigError(f"theta must be in (0, 1), got {theta}")
        import math

        vals = np.asarray(v, dtype=np.float64).tolist()
        scores = [1.0 / (1.0 + math.exp(-(x - theta))) for x in vals]
        selected = frozenset(i for i, x in enumerate(vals) if x > theta)
        return GateResult(scores=np.array(scores, dtype=np.float64), selected=selected)

    @staticmethod
    def combine(a: np.ndarray, ws: list[np.ndarray], aggregation: str) -> np.ndarray:
        avals = np.asarray(a, dtype=np.float64).tolist()
        wvals = [np.asarray(w, dtype=np.float64).tolist() for w in ws]
        if not wvals:
            raise InvalidInputError("ws must contain at least one vector")
        out = []
        for i, x in enumerate(avals):
            if aggregation == "product":
                acc = x
                for w in wvals:
                    acc *= w[i]
            else:
                acc = 0.0
                for w in wvals:
                    acc += x * w[i]
                acc /= len(wvals)
            out.append(acc)
        return np.array(out, dtype=np.float64)


IMPLS = {"vectorized": _VectorizedImpl, "naive": _NaiveImpl}


def _impl(name_or_impl):
    if isinstance(name_or_impl, str):
        try:
            return IMPLS[name_or_impl]
        except KeyError:
            raise ConfigError(f"unknown impl '{name_or_impl}'") from None
    return name_or_impl


# ---------------------------------------------------------------------------
# pooled kernel vectors


def pooled_kernel_vector(
    kernels: np.ndarray, j: int, groups: int, in_channels: int, impl=_VectorizedImpl
) -> np.ndarray:
    """Pool kernel j to one value per input channel, inflated to full extent.

    Grouped kernels are zero outside their own input-channel slice, so
    channels of other groups can never be selected through this kernel.
    """
    cout = kernels.shape[0]
    if not (0 <= j < cout):
        raise InvalidInputError(f"kernel index {j} out of range [0, {cout})")
    per_channel = impl.pool(kernels[j])
    if groups == 1:
        if per_channel.shape[0] != in_channels:
            raise InvalidInputError(
                f"kernel covers {per_channel.shape[0]} channels, layer has {in_channels}"
            )
        return per_channel
    cin_g = per_channel.shape[0]
    full = np.zeros(in_channels, dtype=np.float64)
    group = j // (cout // groups)
    full[group * cin_g : (group + 1) * cin_g] = per_channel
    return full


def _store_value(store: ActivationStore, tensor_id: str) -> np.ndarray:
    if tensor_id == INPUT_ID:
        clip = getattr(store, "input_tensor", None)
        if clip is None:
            raise InvalidInputError("activation store has no captured input tensor")
        return clip
    return store[tensor_id]


def _tap_source(g: ModelGraph, node: LayerNode, cfg: BackstepConfig) -> str:
    """Resolve which tensor feeds `node`, honouring the activation tap."""
    src = node.inputs[0]
    if cfg.activation_tap == "pre_nonlinearity":
        while src != INPUT_ID and g.by_id[src].kind == "relu":
            src = g.by_id[src].inputs[0]
    return src


# ---------------------------------------------------------------------------
# seeding and the single-layer back-step


def class_seed(
    store: ActivationStore, g: ModelGraph, cfg: BackstepConfig, impl="vectorized"
) -> tuple[int, SelectionResult]:
    """Pick the class and gate the class-weighted prediction-layer features.

    The prediction layer's input activation is pooled per channel,
    multiplied channel-wise with the pooled class weight row, normalized to
    [0, 1] and gated. The surviving indices seed the pyramid.
    """
    impl = _impl(impl)
    cfg.validate()
    pred = g.by_id[g.output_id]
    logits = store[g.output_id].reshape(-1)
    _, argmax_index = softmax_argmax(logits)
    if cfg.class_mode == "argmax":
        class_index = argmax_index
    else:
        class_index = int(cfg.class_mode)
        if not (0 <= class_index < logits.shape[0]):
            raise ConfigError(
                f"class index {class_index} out of range for {logits.shape[0]} classes"
            )

    a_in = _store_value(store, _tap_source(g, pred, cfg))
    a_p = impl.pool(a_in)
    if pred.weight is None:
        raise InvalidInputError(f"prediction layer '{pred.id}' has no weights")
    if pred.kind == "fully_connected":
        row = pred.weight[class_index].reshape(a_in.shape)
        w_c = impl.pool(row)
    else:  # 1x1x1 conv3d
        w_c = pooled_kernel_vector(
            pred.weight, class_index, pred.groups, a_p.shape[0], impl
        )
    raw = impl.combine(a_p, [w_c], "product")
    class_map = impl.normalize(raw)
    gate = impl.gate(class_map, cfg.theta_for(pred.id))
    sel = SelectionResult(
        layer_id=pred.id, class_map=class_map, gate=gate, selected_kernels=gate.selected
    )
    return class_index, sel


def backstep_layer(
    sel: SelectionResult,
    prev_activation: np.ndarray,
    kernels: np.ndarray,
    cfg: BackstepConfig,
    *,
    groups: int = 1,
    theta: float | None = None,
    result_layer_id: str | None = None,
    impl="vectorized",
) -> SelectionResult:
    """One cross-layer step: from selected kernels to the channels below.

    Pools the incoming activation and every selected (inflated) kernel to
    per-channel vectors, combines them per the configured aggregation,
    renormalizes and gates. The result selects over the previous layer's
    channel indices.
    """
    impl = _impl(impl)
    if not sel.selected_kernels:
        raise InvalidInputError("selection is empty; nothing to back-step")
    a_prime = impl.pool(prev_activation)
    in_channels = a_prime.shape[0]
    ws = [
        pooled_kernel_vector(kernels, j, groups, in_channels, impl)
        for j in sorted(sel.selected_kernels)
    ]
    combined = impl.combine(a_prime, ws, cfg.aggregation)
    class_map = impl.normalize(combined)
    gate = impl.gate(class_map, cfg.theta if theta is None else theta)
    return SelectionResult(
        layer_id=result_layer_id if result_layer_id is not None else sel.layer_id,
        class_map=class_map,
        gate=gate,
        selected_kernels=gate.selected,
    )


def adapt_block(
    node: LayerNode,
    selection,
    input_channels: list[int] | None = None,
) -> list[dict[int, int]]:
    """Route a selection over `node`'s output channels to its inputs.

    Returns one dict per input mapping that input's local channel index to
    the upstream index it came from. Residual adds receive the full set on
    every input (the identity-link rule); concat splits by channel offset
    and re-indexes locally; single-input pass-through kinds forward the
    selection unchanged.
    """
    indices = sorted(int(i) for i in selection)
    if node.kind == "add":
        return [{i: i for i in indices} for _ in node.inputs]
    if node.kind in PASS_KINDS:
        return [{i: i for i in indices}]
    if node.kind == "concat":
        if input_channels is None or len(input_channels) != len(node.inputs):
            raise InvalidInputError(
                f"node '{node.id}': concat routing needs per-input channel counts"
            )
        total = sum(input_channels)
        routed: list[dict[int, int]] = [dict() for _ in node.inputs]
        offsets = np.cumsum([0] + list(input_channels))
        for i in indices:
            if not (0 <= i < total):
                raise InvalidInputError(
                    f"node '{node.id}': selected channel {i} not covered by any input "
                    f"(spans total {total})"
                )
            branch = int(np.searchsorted(offsets, i, side="right")) - 1
            routed[branch][i - int(offsets[branch])] = i
        return routed
    raise InvalidInputError(f"node '{node.id}': kind '{node.kind}' has no routing rule")


# ---------------------------------------------------------------------------
# full pyramid construction


@dataclass
class _Entry:
    score: float
    recurse: bool
    parents: dict[tuple[str, int], float] = field(default_factory=dict)

    def merge(self, other: "_Entry") -> None:
        self.score = max(self.score, other.score)
        self.recurse = self.recurse or other.recurse
        for key, w in other.parents.items():
            if key not in self.parents or w > self.parents[key]:
                self.parents[key] = w

    def copy(self) -> "_Entry":
        return _Entry(self.score, self.recurse, dict(self.parents))


def _conv_heights(g: ModelGraph) -> dict[str, int]:
    """Max number of convolutions on any path from the clip to each tensor."""
    h = {INPUT_ID: 0}
    for node in g.nodes:
        hin = max(h[i] for i in node.inputs)
        h[node.id] = hin + 1 if node.kind == "conv3d" else hin
    return h


def _route(
    g: ModelGraph,
    channels: dict[str, int],
    heights: dict[str, int],
    tensor_id: str,
    entries: dict[int, _Entry],
    delay: int,
    warnings: list[str],
) -> list[tuple[str, dict[int, _Entry], int]]:
    """Walk a selection backwards until it lands on convolution outputs.

    Shorter join inputs pick up extra delay equal to their convolution
    deficit, which is what keeps uneven branches aligned with the deepest
    one.
    """
    if not entries:
        return []
    if tensor_id == INPUT_ID:
        return []
    node = g.by_id[tensor_id]
    if node.kind == "conv3d":
        return [(tensor_id, entries, delay)]
    if node.kind in PASS_KINDS:
        return _route(g, channels, heights, node.inputs[0], entries, delay, warnings)
    if node.kind in ("add", "concat"):
        spans = [channels[i] for i in node.inputs]
        routed = adapt_block(node, entries.keys(), spans)
        max_h = max(heights[i] for i in node.inputs)
        out: list[tuple[str, dict[int, _Entry], int]] = []
        for input_id, mapping in zip(node.inputs, routed):
            sub = {local: entries[upstream].copy() for local, upstream in mapping.items()}
            pad = max_h - heights[input_id]
            out.extend(
                _route(g, channels, heights, input_id, sub, delay + pad, warnings)
            )
        return out
    msg = f"back-step stops at unsupported node '{node.id}' (kind {node.kind})"
    if msg not in warnings:
        warnings.append(msg)
    return []


def build_pyramid(
    g: ModelGraph, store: ActivationStore, cfg: BackstepConfig, impl="vectorized"
) -> PyramidGraph:
    """Construct the full class feature pyramid for one clip.

    Starting from the class seed, back-steps `cfg.depth` convolution
    layers. Every selected kernel becomes a node; every parent kernel's own
    gate over the layer below becomes that parent's outgoing edges. The
    aggregated gate over all of a layer's selected kernels drives the
    recursion. Identical (layer, kernel) nodes merge, keeping the maximum
    score; output ordering is canonical, so the result is deterministic.
    """
    impl = _impl(impl)
    cfg.validate()
    report = validate_graph(g)
    if not report.ok:
        raise InvalidInputError(f"graph failed validation: {report.findings[0]}")
    channels = {i: s[0] for i, s in report.shapes.items()}
    heights = _conv_heights(g)
    topo = g.topo_index()

    class_index, seed = class_seed(store, g, cfg, impl)
    pred = g.by_id[g.output_id]
    pg = PyramidGraph(
        class_index=class_index,
        theta=cfg.theta,
        depth=cfg.depth,
        aggregation=cfg.aggregation,
        layer_order=topo,
    )

    available = heights[_tap_source(g, pred, cfg)]
    depth = cfg.depth
    if depth > available:
        pg.warnings.append(
            f"depth {depth} exceeds the {available} available convolution layers; "
            f"clamped to {available}"
        )
        depth = available
    if not seed.selected_kernels:
        pg.warnings.append("prediction-layer selection is empty; pyramid has no nodes")
        return pg

    root = pg.root
    entries = {
        i: _Entry(
            score=float(seed.class_map[i]),
            recurse=True,
            parents={root: float(seed.class_map[i])},
        )
        for i in seed.selected_kernels
    }
    frontier = _route(
        g, channels, heights, pred.inputs[0], entries, 0, pg.warnings
    )

    level = 1
    while frontier and level <= depth:
        active: dict[str, dict[int, _Entry]] = {}
        waiting: list[tuple[str, dict[int, _Entry], int]] = []
        for conv_id, ent, dly in frontier:
            if dly > 0:
                waiting.append((conv_id, ent, dly - 1))
                continue
            bucket = active.setdefault(conv_id, {})
            for idx, e in ent.items():
                if idx in bucket:
                    bucket[idx].merge(e)
                else:
                    bucket[idx] = e.copy()

        next_frontier: list[tuple[str, dict[int, _Entry], int]] = list(waiting)
        for conv_id in sorted(active, key=topo.get):
            node = g.by_id[conv_id]
            ent = active[conv_id]
            for idx in sorted(ent):
                pg.add_node((conv_id, idx), ent[idx].score)
                for parent_key in sorted(ent[idx].parents):
                    pg.add_edge(parent_key, (conv_id, idx), ent[idx].parents[parent_key])
            if level == depth:
                continue
            parents = sorted(idx for idx in ent if ent[idx].recurse)
            if not parents:
                continue
            if heights[node.inputs[0]] == 0:
                continue  # nothing below but the clip; no kernels to reach
            src = _tap_source(g, node, cfg)
            prev_activation = _store_value(store, src)
            theta = cfg.theta_for(conv_id)
            score_vec = np.zeros(int(node.params["out_channels"]), dtype=np.float64)
            for idx in parents:
                score_vec[idx] = ent[idx].score
            layer_sel = SelectionResult(
                layer_id=conv_id,
                class_map=score_vec,
                gate=GateResult(scores=score_vec, selected=frozenset(parents)),
                selected_kernels=frozenset(parents),
            )
            agg = backstep_layer(
                layer_sel,
                prev_activation,
                node.weight,
                cfg,
                groups=node.groups,
                theta=theta,
                impl=impl,
            )
            # A child node's score is the value of whichever normalized map
            # selected it (the aggregated map or a parent's own), max-merged.
            child_entries: dict[int, _Entry] = {
                k: _Entry(score=float(agg.class_map[k]), recurse=True)
                for k in agg.selected_kernels
            }
            for j in parents:
                single = replace(layer_sel, selected_kernels=frozenset({j}))
                per_parent = backstep_layer(
                    single,
                    prev_activation,
                    node.weight,
                    cfg,
                    groups=node.groups,
                    theta=theta,
                    impl=impl,
                )
                for k in sorted(per_parent.selected_kernels):
                    value = float(per_parent.class_map[k])
                    entry = child_entries.get(k)
                    if entry is None:
                        entry = _Entry(score=value, recurse=False)
                        child_entries[k] = entry
                    else:
                        entry.score = max(entry.score, value)
                    entry.parents[(conv_id, j)] = value
            next_frontier.extend(
                _route(g, channels, heights, node.inputs[0], child_entries, 0, pg.warnings)
            )
        frontier = next_frontier
        level += 1

    return pg
