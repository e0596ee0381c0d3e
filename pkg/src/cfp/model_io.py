"""Load, validate and write the model/clip interchange bundle.

A model bundle is a UTF-8 JSON manifest (`model.json`) plus a raw
little-endian float32 weight blob (`weights.bin`) addressed by byte
offsets. Clips use the same scheme (`clip.json` + `clip.bin`). Pyramid
graphs serialize to JSON and, optionally, DOT.

The node id "input" is reserved and refers to the clip tensor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BundleError
from .pyramid import ROOT_LAYER, PyramidGraph

INPUT_ID = "input"

KINDS = frozenset(
    {
        "conv3d",
        "fully_connected",
        "relu",
        "avg_pool3d",
        "max_pool3d",
        "global_avg_pool",
        "add",
        "concat",
        "softmax",
    }
)


def _triple(value, name: str, node_id: str) -> tuple[int, int, int]:
    if isinstance(value, int):
        value = [value, value, value]
    if not (isinstance(value, (list, tuple)) and len(value) == 3):
        raise BundleError(f"node '{node_id}': {name} must be an int or a 3-sequence")
    return tuple(int(v) for v in value)


@dataclass
class LayerNode:
    """One typed layer of the computation graph."""

    id: str
    kind: str
    params: dict
    inputs: list[str]
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None

    # conv3d / pooling accessors; raise KeyError for other kinds by design
    @property
    def kernel(self) -> tuple[int, int, int]:
        return _triple(self.params["kernel"], "kernel", self.id)

    @property
    def stride(self) -> tuple[int, int, int]:
        default = self.params["kernel"] if self.kind in ("avg_pool3d", "max_pool3d") else 1
        return _triple(self.params.get("stride", default), "stride", self.id)

    @property
    def padding(self) -> tuple[int, int, int]:
        return _triple(self.params.get("padding", 0), "padding", self.id)

    @property
    def groups(self) -> int:
        return int(self.params.get("groups", 1))


@dataclass
class ModelGraph:
    """Topologically ordered DAG of layers with a designated prediction layer."""

    nodes: list[LayerNode]
    output_id: str
    input_shape: tuple[int, int, int, int]
    name: str = "model"
    by_id: dict[str, LayerNode] = field(default_factory=dict)

    def __post_init__(self):
        if not self.by_id:
            self.by_id = {n.id: n for n in self.nodes}

    def topo_index(self) -> dict[str, int]:
        order = {INPUT_ID: -1}
        order.update({n.id: i for i, n in enumerate(self.nodes)})
        return order

    def consumers(self, node_id: str) -> list[str]:
        return [n.id for n in self.nodes if node_id in n.inputs]


@dataclass
class ClipBundle:
    """A decoded video clip in channel-first C,T,H,W layout."""

    tensor: np.ndarray
    mean: np.ndarray | None = None
    std: np.ndarray | None = None

    @property
    def frame_count(self) -> int:
        return self.tensor.shape[1]

    @property
    def height(self) -> int:
        return self.tensor.shape[2]

    @property
    def width(self) -> int:
        return self.tensor.shape[3]


@dataclass(frozen=True)
class Finding:
    node_id: str
    message: str

    def __str__(self) -> str:
        return f"[{self.node_id}] {self.message}"


@dataclass
class ValidationReport:
    """Per-node inferred output shapes, or the first inconsistency found."""

    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings


# ---------------------------------------------------------------------------
# weight blob access


def _read_blob_array(blob: bytes, ref: dict, node_id: str, what: str) -> np.ndarray:
    try:
        offset = int(ref["offset"])
        shape = tuple(int(s) for s in ref["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"node '{node_id}': malformed {what} reference: {exc}") from exc
    count = int(np.prod(shape)) if shape else 1
    end = offset + 4 * count
    if offset < 0 or end > len(blob):
        raise BundleError(
            f"node '{node_id}': {what} blob truncated: need bytes [{offset}, {end}) "
            f"but blob has {len(blob)} bytes"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    arr = arr.astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise BundleError(f"node '{node_id}': {what} contains non-finite values")
    return arr


def _toposort(nodes: list[LayerNode]) -> list[LayerNode]:
    """Kahn's algorithm with manifest-order tie-breaking; raises on cycles."""
    by_id = {n.id: n for n in nodes}
    manifest_rank = {n.id: i for i, n in enumerate(nodes)}
    indeg = {n.id: sum(1 for i in n.inputs if i != INPUT_ID) for n in nodes}
    consumers: dict[str, list[str]] = {n.id: [] for n in nodes}
    for n in nodes:
        for i in n.inputs:
            if i != INPUT_ID:
                consumers[i].append(n.id)
    ready = sorted((n.id for n in nodes if indeg[n.id] == 0), key=manifest_rank.get)
    out: list[LayerNode] = []
    while ready:
        nid = ready.pop(0)
        out.append(by_id[nid])
        for c in consumers[nid]:
            indeg[c] -= 1
            if indeg[c] == 0:
                ready.append(c)
        ready.sort(key=manifest_rank.get)
    if len(out) != len(nodes):
        stuck = sorted(set(by_id) - {n.id for n in out})
        raise BundleError(f"cycle detected involving node(s): {', '.join(stuck)}")
    return out


def load_model_bundle(manifest_path, weights_path) -> ModelGraph:
    """Parse and fully validate a model bundle; weights come back as float64.

    Raises BundleError naming the offending node for dangling references,
    unknown kinds, truncated blobs, shape mismatches, or cycles. A graph
    returned from here always passes validate_graph with zero findings.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleError(f"cannot parse manifest {manifest_path}: {exc}") from exc
    blob = Path(weights_path).read_bytes()

    try:
        input_shape = tuple(int(s) for s in manifest["input_shape"])
        output_id = str(manifest["output"])
        raw_nodes = manifest["nodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"manifest missing/invalid field: {exc}") from exc
    if len(input_shape) != 4 or any(s < 1 for s in input_shape):
        raise BundleError(f"input_shape must be 4 positive extents, got {input_shape}")

    nodes: list[LayerNode] = []
    seen: set[str] = set()
    for raw in raw_nodes:
        nid = str(raw.get("id", ""))
        if not nid:
            raise BundleError("node without an id")
        if nid == INPUT_ID:
            raise BundleError(f"node id '{INPUT_ID}' is reserved for the clip tensor")
        if nid in seen:
            raise BundleError(f"duplicate node id '{nid}'")
        seen.add(nid)
        kind = raw.get("kind")
        if kind not in KINDS:
            raise BundleError(f"node '{nid}': unsupported kind '{kind}'")
        node = LayerNode(
            id=nid,
            kind=kind,
            params=dict(raw.get("params", {})),
            inputs=[str(i) for i in raw.get("inputs", [])],
        )
        if "weight" in raw:
            node.weight = _read_blob_array(blob, raw["weight"], nid, "weight")
        if "bias" in raw:
            node.bias = _read_blob_array(blob, raw["bias"], nid, "bias")
        nodes.append(node)

    for node in nodes:
        for i in node.inputs:
            if i != INPUT_ID and i not in seen:
                raise BundleError(f"node '{node.id}': dangling input reference '{i}'")
    if output_id not in seen:
        raise BundleError(f"output node '{output_id}' does not exist")

    nodes = _toposort(nodes)
    graph = ModelGraph(
        nodes=nodes,
        output_id=output_id,
        input_shape=input_shape,
        name=str(manifest.get("name", manifest_path.stem)),
    )
    report = validate_graph(graph)
    if not report.ok:
        raise BundleError("; ".join(str(f) for f in report.findings))
    return graph


# ---------------------------------------------------------------------------
# shape propagation


def _conv_extent(n: int, f: int, p: int, s: int) -> int:
    return (n + 2 * p - f) // s + 1


def _infer_shape(node: LayerNode, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    """Output shape of one node; raises BundleError on any inconsistency."""
    kind = node.kind

    def fail(msg: str):
        raise BundleError(msg)

    if kind == "conv3d":
        (shape,) = in_shapes
        if len(shape) != 4:
            fail(f"conv3d expects a 4-d input, got {shape}")
        cin = int(node.params["in_channels"])
        cout = int(node.params["out_channels"])
        g = node.groups
        if shape[0] != cin:
            fail(f"expects {cin} input channels, got {shape[0]}")
        if g < 1 or cin % g or cout % g:
            fail(f"groups={g} does not divide channels {cin}->{cout}")
        f, p, s = node.kernel, node.padding, node.stride
        if node.weight is not None:
            want = (cout, cin // g, *f)
            if node.weight.shape != want:
                fail(f"weight shape {node.weight.shape} != expected {want}")
        if node.bias is not None and node.bias.shape != (cout,):
            fail(f"bias shape {node.bias.shape} != expected {(cout,)}")
        dims = []
        for n_, f_, p_, s_ in zip(shape[1:], f, p, s):
            e = _conv_extent(n_, f_, p_, s_)
            if e < 1:
                fail(f"kernel {f} stride {s} padding {p} collapses extent {n_}")
            dims.append(e)
        return (cout, *dims)

    if kind in ("avg_pool3d", "max_pool3d"):
        (shape,) = in_shapes
        if len(shape) != 4:
            fail(f"{kind} expects a 4-d input, got {shape}")
        f, p, s = node.kernel, node.padding, node.stride
        if any(2 * p_ > f_ for p_, f_ in zip(p, f)):
            fail(f"padding {p} exceeds half the kernel {f}")
        dims = []
        for n_, f_, p_, s_ in zip(shape[1:], f, p, s):
            e = _conv_extent(n_, f_, p_, s_)
            if e < 1:
                fail(f"kernel {f} stride {s} padding {p} collapses extent {n_}")
            dims.append(e)
        return (shape[0], *dims)

    if kind == "global_avg_pool":
        (shape,) = in_shapes
        return (shape[0],)

    if kind == "relu":
        (shape,) = in_shapes
        return shape

    if kind == "softmax":
        (shape,) = in_shapes
        if len(shape) != 1:
            fail(f"softmax expects a 1-d input, got {shape}")
        return shape

    if kind == "fully_connected":
        (shape,) = in_shapes
        fin = int(node.params["in_features"])
        fout = int(node.params["out_features"])
        flat = int(np.prod(shape))
        if flat != fin:
            fail(f"expects {fin} input features, got {flat} (shape {shape})")
        if node.weight is not None and node.weight.shape != (fout, fin):
            fail(f"weight shape {node.weight.shape} != expected {(fout, fin)}")
        if node.bias is not None and node.bias.shape != (fout,):
            fail(f"bias shape {node.bias.shape} != expected {(fout,)}")
        return (fout,)

    if kind == "add":
        if len(in_shapes) < 2:
            fail("add needs at least two inputs")
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if s != first:
                fail(f"add inputs disagree: {first} vs {s}")
        return first

    if kind == "concat":
        if len(in_shapes) < 2:
            fail("concat needs at least two inputs")
        first = in_shapes[0]
        for s in in_shapes[1:]:
            if len(s) != len(first) or s[1:] != first[1:]:
                fail(f"concat non-channel extents disagree: {first} vs {s}")
        return (sum(s[0] for s in in_shapes), *first[1:])

    fail(f"unsupported kind '{kind}'")


def _is_prediction_kind(node: LayerNode) -> bool:
    if node.kind == "fully_connected":
        return True
    if node.kind != "conv3d":
        return False
    try:
        return node.kernel == (1, 1, 1)
    except (BundleError, KeyError, TypeError):
        return False


def validate_graph(g: ModelGraph) -> ValidationReport:
    """Propagate shapes from the input through every node.

    Structural problems and shape inconsistencies come back as findings;
    propagation stops at the first inconsistency. Never raises.
    """
    report = ValidationReport()
    report.shapes[INPUT_ID] = tuple(g.input_shape)

    ids = [n.id for n in g.nodes]
    if len(set(ids)) != len(ids):
        report.findings.append(Finding("<graph>", "duplicate node ids"))
        return report
    known = set(ids) | {INPUT_ID}
    seen: set[str] = {INPUT_ID}
    for node in g.nodes:
        for i in node.inputs:
            if i not in known:
                report.findings.append(Finding(node.id, f"dangling input reference '{i}'"))
                return report
            if i not in seen:
                report.findings.append(
                    Finding(node.id, f"input '{i}' appears later; order is not topological")
                )
                return report
        seen.add(node.id)

    if g.output_id not in known:
        report.findings.append(Finding("<graph>", f"output node '{g.output_id}' missing"))
        return report
    out_node = g.by_id[g.output_id]
    if not _is_prediction_kind(out_node):
        report.findings.append(
            Finding(
                g.output_id,
                "prediction layer must be fully_connected or a 1x1x1 conv3d",
            )
        )
        return report

    for node in g.nodes:
        if not node.inputs:
            report.findings.append(Finding(node.id, "node has no inputs"))
            return report
        if node.kind not in ("add", "concat") and len(node.inputs) != 1:
            report.findings.append(
                Finding(node.id, f"{node.kind} takes exactly one input, got {len(node.inputs)}")
            )
            return report
        in_shapes = [report.shapes[i] for i in node.inputs]
        try:
            report.shapes[node.id] = _infer_shape(node, in_shapes)
        except (BundleError, KeyError, TypeError, ValueError) as exc:
            report.findings.append(Finding(node.id, str(exc)))
            return report
    return report


# ---------------------------------------------------------------------------
# clips


def load_clip(clip_manifest, clip_blob) -> ClipBundle:
    """Read clip.json + clip.bin into a float64 C,T,H,W tensor."""
    try:
        manifest = json.loads(Path(clip_manifest).read_text())
        shape = tuple(int(s) for s in manifest["shape"])
    except (OSError, json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise BundleError(f"cannot parse clip manifest: {exc}") from exc
    if len(shape) != 4 or any(s < 1 for s in shape):
        raise BundleError(f"clip shape must be 4 positive extents, got {shape}")
    blob = Path(clip_blob).read_bytes()
    expected = 4 * int(np.prod(shape))
    if len(blob) != expected:
        raise BundleError(
            f"clip blob size mismatch: expected {expected} bytes for shape {shape}, "
            f"got {len(blob)}"
        )
    tensor = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(shape)
    if not np.all(np.isfinite(tensor)):
        raise BundleError("clip blob contains non-finite values")
    mean = manifest.get("mean")
    std = manifest.get("std")
    return ClipBundle(
        tensor=tensor,
        mean=None if mean is None else np.asarray(mean, dtype=np.float64),
        std=None if std is None else np.asarray(std, dtype=np.float64),
    )


def write_clip(out_dir, array: np.ndarray, mean=None, std=None) -> tuple[Path, Path]:
    """Emit clip.json + clip.bin (float32 little-endian) for a 4-d array."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 4:
        raise BundleError(f"clip must be 4-d (C,T,H,W), got rank {array.ndim}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"shape": list(array.shape)}
    if mean is not None:
        manifest["mean"] = [float(v) for v in np.asarray(mean).ravel()]
    if std is not None:
        manifest["std"] = [float(v) for v in np.asarray(std).ravel()]
    manifest_path = out_dir / "clip.json"
    blob_path = out_dir / "clip.bin"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    blob_path.write_bytes(array.astype("<f4").tobytes())
    return manifest_path, blob_path


# ---------------------------------------------------------------------------
# model bundle writer (fixture/tooling side of the format)


def write_model_bundle(out_dir, input_shape, output_id, nodes, name=None) -> tuple[Path, Path]:
    """Emit model.json + weights.bin from in-memory node specs.

    `nodes` is a sequence of dicts with keys id/kind/inputs/params and
    optional numpy arrays under "weight"/"bias"; byte offsets are assigned
    in node order.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    manifest_nodes = []
    for spec in nodes:
        entry = {
            "id": spec["id"],
            "kind": spec["kind"],
            "inputs": list(spec.get("inputs", [])),
            "params": dict(spec.get("params", {})),
        }
        for what in ("weight", "bias"):
            arr = spec.get(what)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            entry[what] = {"offset": len(blob), "shape": list(arr.shape)}
            blob.extend(arr.astype("<f4").tobytes())
        manifest_nodes.append(entry)
    manifest = {
        "input_shape": [int(s) for s in input_shape],
        "output": output_id,
        "nodes": manifest_nodes,
    }
    if name:
        manifest["name"] = name
    manifest_path = out_dir / "model.json"
    weights_path = out_dir / "weights.bin"
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
    weights_path.write_bytes(bytes(blob))
    return manifest_path, weights_path


# ---------------------------------------------------------------------------
# pyramid graphs


def write_pyramid_graph(pg: PyramidGraph, path, dot_path=None) -> None:
    """Serialize a pyramid to JSON (and optionally DOT, one cluster per layer).

    Node and edge ordering is canonical (layer depth, then index), so two
    identical pyramids serialize to identical bytes.
    """
    doc = {
        "class_index": pg.class_index,
        "theta": pg.theta,
        "depth": pg.depth,
        "aggregation": pg.aggregation,
        "nodes": [
            {"layer": layer, "kernel": kernel, "score": score}
            for (layer, kernel), score in pg.sorted_nodes()
        ],
        "edges": [
            {
                "from_layer": pl,
                "from_kernel": pk,
                "to_layer": cl,
                "to_kernel": ck,
                "weight": w,
            }
            for ((pl, pk), (cl, ck)), w in pg.sorted_edges()
        ],
        "warnings": list(pg.warnings),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    if dot_path is not None:
        Path(dot_path).write_text(_to_dot(pg))


def _dot_id(layer: str, kernel: int) -> str:
    return f'"{layer}/{kernel}"'


def _to_dot(pg: PyramidGraph) -> str:
    lines = ["digraph pyramid {", "  rankdir=TB;"]
    lines.append(
        f'  {_dot_id(ROOT_LAYER, pg.class_index)} [label="class {pg.class_index}", shape=box];'
    )
    for i, layer in enumerate(pg.layers()):
        lines.append(f"  subgraph cluster_{i} {{")
        lines.append(f'    label="{layer}";')
        for (l, k), score in pg.sorted_nodes():
            if l == layer:
                lines.append(f'    {_dot_id(l, k)} [label="k{k} {score:.3f}"];')
        lines.append("  }")
    for ((pl, pk), (cl, ck)), w in pg.sorted_edges():
        lines.append(f'  {_dot_id(pl, pk)} -> {_dot_id(cl, ck)} [label="{w:.3f}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def read_pyramid_graph(path) -> PyramidGraph:
    """Inverse of write_pyramid_graph; layer order follows file order."""
    doc = json.loads(Path(path).read_text())
    pg = PyramidGraph(
        class_index=int(doc["class_index"]),
        theta=float(doc["theta"]),
        depth=int(doc.get("depth", 1)),
        aggregation=str(doc.get("aggregation", "product")),
        warnings=[str(w) for w in doc.get("warnings", [])],
    )
    order: dict[str, int] = {}
    for n in doc["nodes"]:
        layer = str(n["layer"])
        if layer not in order:
            order[layer] = len(order)
        pg.add_node((layer, int(n["kernel"])), float(n["score"]))
    pg.layer_order = order
    for e in doc["edges"]:
        pg.add_edge(
            (str(e["from_layer"]), int(e["from_kernel"])),
            (str(e["to_layer"]), int(e["to_kernel"])),
            float(e["weight"]),
        )
    return pg
