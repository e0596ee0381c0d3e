"""Forward pass over a ModelGraph with per-layer activation capture.

Every node's output (post-nonlinearity for relu nodes) is stored, keyed by
node id, in topological order. Convolution is direct cross-correlation with
zero padding; accumulation happens in float64 throughout.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidInputError
from .model_io import INPUT_ID, ClipBundle, LayerNode, ModelGraph, validate_graph
from .tensor_ops import check_finite

__all__ = ["ActivationStore", "conv3d_forward", "node_forward", "forward_all"]


class ActivationStore:
    """Frozen map from layer id to its captured forward activation.

    Holds exactly one entry per executed node; the clip tensor itself rides
    along as `input_tensor` so back-steps into the first convolution can
    still pool their incoming activation.
    """

    def __init__(self, entries: dict[str, np.ndarray], input_tensor: np.ndarray | None = None):
        self._entries = dict(entries)
        self.input_tensor = input_tensor
        if input_tensor is not None:
            input_tensor.setflags(write=False)
        for v in self._entries.values():
            v.setflags(write=False)

    def __getitem__(self, layer_id: str) -> np.ndarray:
        return self._entries[layer_id]

    def __contains__(self, layer_id: str) -> bool:
        return layer_id in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def items(self):
        return self._entries.items()

    def keys(self):
        return self._entries.keys()


def _windows(x: np.ndarray, kernel, stride, padding, pad_value=0.0) -> np.ndarray:
    """Strided sliding windows over the three spatial axes of a (C,T,H,W) map.

    Returns shape (C, To, Ho, Wo, Fd, Fh, Fw).
    """
    pd, ph, pw = padding
    if pd or ph or pw:
        x = np.pad(
            x,
            ((0, 0), (pd, pd), (ph, ph), (pw, pw)),
            constant_values=pad_value,
        )
    win = sliding_window_view(x, kernel, axis=(1, 2, 3))
    sd, sh, sw = stride
    return win[:, ::sd, ::sh, ::sw]


def conv3d_forward(x: np.ndarray, node: LayerNode) -> np.ndarray:
    """Standard 3D cross-correlation with stride, zero padding and groups.

    With groups > 1, output channel o only reads the input channels of its
    own group slice; this is numerically identical to an ungrouped
    convolution whose kernels are zero outside that slice.
    """
    w = node.weight
    if w is None:
        raise InvalidInputError(f"node '{node.id}' has no weights")
    cin = int(node.params["in_channels"])
    cout = int(node.params["out_channels"])
    g = node.groups
    if x.ndim != 4 or x.shape[0] != cin:
        raise InvalidInputError(
            f"node '{node.id}': input shape {x.shape} does not provide {cin} channels"
        )
    win = _windows(x, node.kernel, node.stride, node.padding)
    cin_g = cin // g
    cout_g = cout // g
    parts = []
    for gi in range(g):
        wg = win[gi * cin_g : (gi + 1) * cin_g]
        kg = w[gi * cout_g : (gi + 1) * cout_g]
        parts.append(np.einsum("cthwdef,ocdef->othw", wg, kg))
    out = np.concatenate(parts, axis=0)
    if node.bias is not None:
        out += node.bias[:, None, None, None]
    return out


def node_forward(inputs: list[np.ndarray], node: LayerNode) -> np.ndarray:
    """Dispatch one non-convolution node (relu/pools/add/concat/fc/softmax)."""
    kind = node.kind
    if kind in ("add", "concat"):
        if len(inputs) < 2:
            raise InvalidInputError(f"node '{node.id}': {kind} needs >= 2 inputs")
    elif len(inputs) != 1:
        raise InvalidInputError(f"node '{node.id}': {kind} takes exactly one input")

    if kind == "conv3d":
        return conv3d_forward(inputs[0], node)
    if kind == "relu":
        return np.maximum(inputs[0], 0.0)
    if kind == "add":
        out = inputs[0].copy()
        for x in inputs[1:]:
            if x.shape != out.shape:
                raise InvalidInputError(f"node '{node.id}': add shape mismatch")
            out += x
        return out
    if kind == "concat":
        return np.concatenate(inputs, axis=0)
    if kind == "avg_pool3d":
        win = _windows(inputs[0], node.kernel, node.stride, node.padding)
        return win.mean(axis=(-3, -2, -1))
    if kind == "max_pool3d":
        win = _windows(inputs[0], node.kernel, node.stride, node.padding, pad_value=-np.inf)
        return win.max(axis=(-3, -2, -1))
    if kind == "global_avg_pool":
        x = inputs[0]
        return x.reshape(x.shape[0], -1).mean(axis=1)
    if kind == "fully_connected":
        x = inputs[0].reshape(-1)
        if node.weight is None:
            raise InvalidInputError(f"node '{node.id}' has no weights")
        if node.weight.shape[1] != x.shape[0]:
            raise InvalidInputError(
                f"node '{node.id}': expects {node.weight.shape[1]} features, got {x.shape[0]}"
            )
        out = node.weight @ x
        if node.bias is not None:
            out = out + node.bias
        return out
    if kind == "softmax":
        x = inputs[0]
        shifted = x - x.max()
        e = np.exp(shifted)
        return e / e.sum()
    raise InvalidInputError(f"node '{node.id}': unsupported kind '{kind}'")


def forward_all(g: ModelGraph, clip: ClipBundle) -> tuple[ActivationStore, np.ndarray]:
    """Execute the graph on one clip, capturing every node's output.

    Returns the frozen activation store and the prediction-layer activation
    flattened to a vector of class scores.
    """
    if tuple(clip.tensor.shape) != tuple(g.input_shape):
        raise InvalidInputError(
            f"clip shape {clip.tensor.shape} does not match model input {g.input_shape}"
        )
    report = validate_graph(g)
    if not report.ok:
        raise InvalidInputError(f"graph failed validation: {report.findings[0]}")

    values: dict[str, np.ndarray] = {INPUT_ID: np.asarray(clip.tensor, dtype=np.float64)}
    for node in g.nodes:
        inputs = [values[i] for i in node.inputs]
        try:
            out = node_forward(inputs, node)
        except InvalidInputError:
            raise
        except Exception as exc:  # attach the offending node id
            raise InvalidInputError(f"node '{node.id}': {exc}") from exc
        expected = report.shapes[node.id]
        if tuple(out.shape) != tuple(expected):
            raise InvalidInputError(
                f"node '{node.id}': produced {out.shape}, validator predicted {expected}"
            )
        check_finite(out, f"activation of node '{node.id}'")
        values[node.id] = out

    store_entries = {n.id: values[n.id] for n in g.nodes}
    logits = values[g.output_id].reshape(-1).copy()
    return ActivationStore(store_entries, input_tensor=values[INPUT_ID].copy()), logits
