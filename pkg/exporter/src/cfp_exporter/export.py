"""Convert small PyTorch 3D CNNs and clips to the interchange bundle.

The model is symbolically traced; every traced node maps onto one of the
bundle's layer kinds. BatchNorm3d layers are folded into the convolution
that feeds them (inference statistics only), flatten ops collapse into the
fully-connected layer that consumes them, and anything unsupported raises
an explicit error naming the offending layer. Alongside the bundle an
export manifest records the node mapping, the fold log and framework
reference outputs for round-trip verification.
"""

from __future__ import annotations

import json
import operator
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from torch import fx

INPUT_ID = "input"
REFERENCE_TOLERANCE = 1e-4


class ExportError(Exception):
    """The model (or clip) cannot be represented in the bundle format."""


@dataclass
class ExportedNode:
    id: str
    kind: str
    inputs: list[str]
    params: dict = field(default_factory=dict)
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None


@dataclass
class ExportResult:
    nodes: list[ExportedNode]
    output_id: str
    input_shape: tuple[int, int, int, int]
    mapping: dict[str, str]
    bn_folds: list[dict]
    skipped: list[dict]
    capture: dict[str, str]  # torch module target -> interchange id


def _triple(value) -> list[int]:
    if isinstance(value, int):
        return [value] * 3
    return [int(v) for v in value]


def _fold_batch_norm(conv: ExportedNode, bn: nn.BatchNorm3d) -> None:
    """Fold eval-mode BN into the preceding convolution in place.

    w' = w * gamma / sqrt(var + eps); b' = (b - mean) * that + beta.
    """
    gamma = bn.weight.detach().numpy().astype(np.float64)
    beta = bn.bias.detach().numpy().astype(np.float64)
    mean = bn.running_mean.detach().numpy().astype(np.float64)
    var = bn.running_var.detach().numpy().astype(np.float64)
    scale = gamma / np.sqrt(var + bn.eps)
    conv.weight = conv.weight * scale[:, None, None, None, None]
    bias = conv.bias if conv.bias is not None else np.zeros(len(scale))
    conv.bias = (bias - mean) * scale + beta


class _Tracer:
    def __init__(self, model: nn.Module, input_shape):
        self.model = model
        self.input_shape = tuple(int(s) for s in input_shape)
        self.gm = None
        self.alias: dict[str, str] = {}
        self.nodes: dict[str, ExportedNode] = {}
        self.order: list[str] = []
        self.mapping: dict[str, str] = {}
        self.bn_folds: list[dict] = []
        self.skipped: list[dict] = []
        self.capture: dict[str, str] = {}

    def run(self) -> ExportResult:
        if self.model.training:
            raise ExportError("model must be in eval mode (training-mode BN is rejected)")
        try:
            self.gm = fx.symbolic_trace(self.model)
        except Exception as exc:
            raise ExportError(f"model cannot be traced: {exc}") from exc
        placeholders = [n for n in self.gm.graph.nodes if n.op == "placeholder"]
        if len(placeholders) != 1:
            raise ExportError(f"expected exactly one input, found {len(placeholders)}")
        output_id = None
        for node in self.gm.graph.nodes:
            if node.op == "placeholder":
                self.alias[node.name] = INPUT_ID
            elif node.op == "call_module":
                self._handle_module(node)
            elif node.op in ("call_function", "call_method"):
                self._handle_function(node)
            elif node.op == "output":
                output_id = self._resolve_output(node)
            else:
                raise ExportError(f"unsupported graph construct '{node.op}' at '{node.name}'")
        if output_id is None:
            raise ExportError("traced graph has no output")
        return ExportResult(
            nodes=[self.nodes[i] for i in self.order],
            output_id=output_id,
            input_shape=self.input_shape,
            mapping=dict(self.mapping),
            bn_folds=list(self.bn_folds),
            skipped=list(self.skipped),
            capture=dict(self.capture),
        )

    # -- helpers ----------------------------------------------------------

    def _id_for(self, fx_node) -> str:
        name = fx_node.name
        return f"{name}_node" if name == INPUT_ID else name

    def _input_of(self, fx_node, arg) -> str:
        if not isinstance(arg, fx.Node):
            raise ExportError(f"node '{fx_node.name}': non-tensor argument {arg!r}")
        try:
            return self.alias[arg.name]
        except KeyError:
            raise ExportError(f"node '{fx_node.name}': untracked input '{arg.name}'") from None

    def _emit(self, fx_node, kind, inputs, params=None, weight=None, bias=None) -> None:
        nid = self._id_for(fx_node)
        self.nodes[nid] = ExportedNode(
            id=nid, kind=kind, inputs=inputs, params=params or {}, weight=weight, bias=bias
        )
        self.order.append(nid)
        self.alias[fx_node.name] = nid
        self.mapping[fx_node.name] = nid

    # -- modules ----------------------------------------------------------

    def _handle_module(self, fx_node) -> None:
        module = self.gm.get_submodule(fx_node.target)
        src = self._input_of(fx_node, fx_node.args[0])

        if isinstance(module, nn.Conv3d):
            if any(d != 1 for d in _triple(module.dilation)):
                raise ExportError(f"layer '{fx_node.target}': dilation is unsupported")
            if module.padding_mode != "zeros":
                raise ExportError(
                    f"layer '{fx_node.target}': padding mode '{module.padding_mode}' unsupported"
                )
            weight = module.weight.detach().numpy().astype(np.float64)
            bias = None if module.bias is None else module.bias.detach().numpy().astype(np.float64)
            self._emit(
                fx_node,
                "conv3d",
                [src],
                {
                    "in_channels": int(module.in_channels),
                    "out_channels": int(module.out_channels),
                    "kernel": _triple(module.kernel_size),
                    "stride": _triple(module.stride),
                    "padding": _triple(module.padding),
                    "groups": int(module.groups),
                },
                weight=weight,
                bias=bias,
            )
            self.capture[fx_node.target] = self.alias[fx_node.name]
            return

        if isinstance(module, nn.BatchNorm3d):
            if module.training or not module.track_running_stats:
                raise ExportError(
                    f"layer '{fx_node.target}': only inference-mode BN with running "
                    "statistics can be folded"
                )
            upstream = fx_node.args[0]
            conv_id = src
            conv = self.nodes.get(conv_id)
            if conv is None or conv.kind != "conv3d":
                raise ExportError(
                    f"layer '{fx_node.target}': BatchNorm3d must directly follow a Conv3d"
                )
            if len(upstream.users) != 1:
                raise ExportError(
                    f"layer '{fx_node.target}': cannot fold, convolution output is shared"
                )
            _fold_batch_norm(conv, module)
            self.alias[fx_node.name] = conv_id
            self.bn_folds.append({"bn": fx_node.target, "into": conv_id})
            # the folded conv now reproduces the BN output
            prev = [k for k, v in self.capture.items() if v == conv_id]
            for k in prev:
                del self.capture[k]
            self.capture[fx_node.target] = conv_id
            return

        if isinstance(module, nn.ReLU):
            self._emit(fx_node, "relu", [src])
            self.capture[fx_node.target] = self.alias[fx_node.name]
            return

        if isinstance(module, (nn.MaxPool3d, nn.AvgPool3d)):
            if getattr(module, "ceil_mode", False):
                raise ExportError(f"layer '{fx_node.target}': ceil_mode is unsupported")
            if isinstance(module, nn.MaxPool3d) and any(d != 1 for d in _triple(module.dilation)):
                raise ExportError(f"layer '{fx_node.target}': dilation is unsupported")
            if isinstance(module, nn.AvgPool3d) and not module.count_include_pad:
                raise ExportError(
                    f"layer '{fx_node.target}': count_include_pad=False is unsupported"
                )
            kind = "max_pool3d" if isinstance(module, nn.MaxPool3d) else "avg_pool3d"
            stride = module.stride if module.stride is not None else module.kernel_size
            self._emit(
                fx_node,
                kind,
                [src],
                {
                    "kernel": _triple(module.kernel_size),
                    "stride": _triple(stride),
                    "padding": _triple(module.padding),
                },
            )
            self.capture[fx_node.target] = self.alias[fx_node.name]
            return

        if isinstance(module, nn.AdaptiveAvgPool3d):
            size = module.output_size
            sizes = [size] * 3 if isinstance(size, int) else list(size)
            if any(s not in (1, None) for s in sizes):
                raise ExportError(
                    f"layer '{fx_node.target}': only global (output size 1) adaptive "
                    "pooling is supported"
                )
            self._emit(fx_node, "global_avg_pool", [src])
            self.capture[fx_node.target] = self.alias[fx_node.name]
            return

        if isinstance(module, nn.Linear):
            self._emit(
                fx_node,
                "fully_connected",
                [src],
                {
                    "in_features": int(module.in_features),
                    "out_features": int(module.out_features),
                },
                weight=module.weight.detach().numpy().astype(np.float64),
                bias=None
                if module.bias is None
                else module.bias.detach().numpy().astype(np.float64),
            )
            self.capture[fx_node.target] = self.alias[fx_node.name]
            return

        if isinstance(module, nn.Softmax):
            self._emit(fx_node, "softmax", [src])
            return

        if isinstance(module, nn.Flatten):
            self._skip_flatten(fx_node, src)
            return

        raise ExportError(
            f"unsupported layer '{fx_node.target}' of type {type(module).__name__}"
        )

    # -- functions --------------------------------------------------------

    _ADD_TARGETS = (operator.add, torch.add, "add")
    _RELU_TARGETS = (torch.relu, nn.functional.relu, "relu")
    _FLATTEN_TARGETS = (torch.flatten, "flatten")
    _SOFTMAX_TARGETS = (torch.softmax, nn.functional.softmax, "softmax")

    def _handle_function(self, fx_node) -> None:
        target = fx_node.target
        if target in self._ADD_TARGETS:
            tensor_args = [a for a in fx_node.args if isinstance(a, fx.Node)]
            if len(tensor_args) != 2:
                raise ExportError(f"node '{fx_node.name}': add needs two tensor operands")
            inputs = [self._input_of(fx_node, a) for a in tensor_args]
            self._emit(fx_node, "add", inputs)
            return
        if target is torch.cat:
            tensors = fx_node.args[0]
            dim = fx_node.kwargs.get("dim", fx_node.args[1] if len(fx_node.args) > 1 else 0)
            if dim != 1:
                raise ExportError(
                    f"node '{fx_node.name}': concat along dim {dim} unsupported "
                    "(only the channel dimension)"
                )
            inputs = [self._input_of(fx_node, t) for t in tensors]
            self._emit(fx_node, "concat", inputs)
            return
        if target in self._RELU_TARGETS:
            src = self._input_of(fx_node, fx_node.args[0])
            self._emit(fx_node, "relu", [src])
            return
        if target in self._SOFTMAX_TARGETS:
            src = self._input_of(fx_node, fx_node.args[0])
            self._emit(fx_node, "softmax", [src])
            return
        if target in self._FLATTEN_TARGETS:
            src = self._input_of(fx_node, fx_node.args[0])
            self._skip_flatten(fx_node, src)
            return
        raise ExportError(f"unsupported operation '{target}' at node '{fx_node.name}'")

    def _skip_flatten(self, fx_node, src: str) -> None:
        self.alias[fx_node.name] = src
        self.skipped.append(
            {"node": fx_node.name, "reason": "flatten is implicit in fully_connected"}
        )

    def _resolve_output(self, fx_node) -> str:
        arg = fx_node.args[0]
        if isinstance(arg, (tuple, list)):
            if len(arg) != 1:
                raise ExportError("multi-output models are unsupported")
            arg = arg[0]
        final = self._input_of(fx_node, arg)
        node = self.nodes.get(final)
        if node is not None and node.kind == "softmax":
            final = node.inputs[0]
            node = self.nodes.get(final)
        if node is None or node.kind not in ("fully_connected", "conv3d"):
            raise ExportError("the model must end in a fully-connected (or 1x1x1 conv) head")
        if node.kind == "conv3d" and node.params.get("kernel") != [1, 1, 1]:
            raise ExportError("a convolutional prediction head must use a 1x1x1 kernel")
        return final


# ---------------------------------------------------------------------------
# bundle writing


def _write_bundle(result: ExportResult, out_dir: Path) -> None:
    blob = bytearray()
    manifest_nodes = []
    for node in result.nodes:
        entry = {
            "id": node.id,
            "kind": node.kind,
            "inputs": list(node.inputs),
            "params": dict(node.params),
        }
        for what in ("weight", "bias"):
            arr = getattr(node, what)
            if arr is None:
                continue
            entry[what] = {"offset": len(blob), "shape": list(arr.shape)}
            blob.extend(np.asarray(arr, dtype=np.float64).astype("<f4").tobytes())
        manifest_nodes.append(entry)
    manifest = {
        "input_shape": list(result.input_shape),
        "output": result.output_id,
        "nodes": manifest_nodes,
    }
    (out_dir / "model.json").write_text(json.dumps(manifest, indent=2) + "\n")
    (out_dir / "weights.bin").write_bytes(bytes(blob))


def export_clip(array, out_dir) -> tuple[Path, Path]:
    """Write clip.json + clip.bin for a C,T,H,W array (float32 LE, byte exact)."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 4:
        raise ExportError(f"clip must be 4-d (C,T,H,W), got rank {array.ndim}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "clip.json").write_text(
        json.dumps({"shape": list(array.shape)}, indent=2) + "\n"
    )
    (out_dir / "clip.bin").write_bytes(array.astype("<f4").tobytes())
    return out_dir / "clip.json", out_dir / "clip.bin"


def _reference_outputs(model: nn.Module, clip: np.ndarray, capture: dict[str, str]) -> dict:
    """Framework forward with hooks on every captured module."""
    records: dict[str, dict] = {}
    handles = []

    def make_hook(interchange_id):
        def hook(_module, _inputs, output):
            arr = output.detach().numpy().astype(np.float64)[0]  # drop batch dim
            records[interchange_id] = {
                "shape": list(arr.shape),
                "data": [float(v) for v in arr.reshape(-1)],
            }

        return hook

    for target, interchange_id in capture.items():
        handles.append(model.get_submodule(target).register_forward_hook(make_hook(interchange_id)))
    with torch.no_grad():
        out = model(torch.from_numpy(clip).to(torch.float32).unsqueeze(0))
    for h in handles:
        h.remove()
    logits = out.detach().numpy().astype(np.float64)[0]
    return {"logits": [float(v) for v in logits.reshape(-1)], "activations": records}


def export_model(model: nn.Module, clip: np.ndarray, out_dir, source: str = "model") -> Path:
    """Export a model+clip pair; returns the bundle directory.

    Writes model.json, weights.bin, clip.json, clip.bin and manifest.json
    (node mapping, BN fold log, framework reference outputs). The reference
    logits come from the original, un-folded model; for folded convolutions
    the captured reference is the BatchNorm output they now reproduce.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip = np.asarray(clip, dtype=np.float64)
    if clip.ndim != 4:
        raise ExportError(f"clip must be 4-d (C,T,H,W), got rank {clip.ndim}")
    result = _Tracer(model, clip.shape).run()
    _write_bundle(result, out_dir)
    export_clip(clip, out_dir)
    # reference against the float32-quantized clip the engine will read
    quantized = clip.astype("<f4").astype(np.float64)
    reference = _reference_outputs(model, quantized, result.capture)
    if result.output_id in reference["activations"]:
        # the engine reports the prediction layer's activation as logits,
        # which differs from the model output when a softmax follows it
        reference["logits"] = list(reference["activations"][result.output_id]["data"])
    reference["tolerance"] = REFERENCE_TOLERANCE
    manifest = {
        "source": source,
        "mapping": result.mapping,
        "bn_folds": result.bn_folds,
        "skipped": result.skipped,
        "reference": reference,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out_dir
