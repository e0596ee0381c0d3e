"""Dense tensor arithmetic and the scalar building blocks of the back-step.

Tensors are plain float64 numpy arrays in channel-first layout (C, then
optional T, H, W), row-major. Channel vectors are 1-D float64 arrays with
one entry per channel/feature index. All operations here are pure and never
admit NaN/Inf into their results.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, InvalidInputError

__all__ = [
    "GateResult",
    "as_tensor",
    "check_finite",
    "global_avg_pool",
    "minmax_normalize",
    "sigmoid_gate",
    "elementwise_product_reduce",
    "softmax_argmax",
]


def check_finite(arr: np.ndarray, name: str = "tensor") -> np.ndarray:
    """Reject NaN/Inf; public operations only ever see finite data."""
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def as_tensor(data, shape=None) -> np.ndarray:
    """Coerce to a finite float64 array, optionally reshaping to `shape`."""
    arr = np.asarray(data, dtype=np.float64)
    if shape is not None:
        if arr.size != int(np.prod(shape)):
            raise InvalidInputError(
                f"data length {arr.size} does not match shape {tuple(shape)}"
            )
        arr = arr.reshape(shape)
    return check_finite(arr)


@dataclass(frozen=True)
class GateResult:
    """Output of the gating step: per-index scores plus the surviving set."""

    scores: np.ndarray
    selected: frozenset[int]


def global_avg_pool(t: np.ndarray) -> np.ndarray:
    """Mean of every non-channel element, per channel.

    The channel axis is axis 0. A 1-D input is already a per-channel
    vector and comes back unchanged (copied).
    """
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise InvalidInputError("cannot pool an empty tensor")
    return t.reshape(t.shape[0], -1).mean(axis=1)


def minmax_normalize(v: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to all zeros.

    The degenerate all-zeros output means a constant map selects nothing
    downstream, pruning that branch.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise InvalidInputError("cannot normalize an empty vector")
    lo = v.min()
    hi = v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def sigmoid_gate(v: np.ndarray, theta: float) -> GateResult:
    """Shifted logistic gate over a normalized vector.

    scores[i] = 1 / (1 + exp(-(v[i] - theta))); an index survives iff
    v[i] > theta, i.e. its score exceeds 0.5. theta must lie in (0, 1).
    """
    if not (0.0 < theta < 1.0):
        raise ConfigError(f"theta must be in (0, 1), got {theta}")
    v = np.asarray(v, dtype=np.float64)
    scores = 1.0 / (1.0 + np.exp(-(v - theta)))
    selected = frozenset(int(i) for i in np.nonzero(v > theta)[0])
    return GateResult(scores=scores, selected=selected)


def elementwise_product_reduce(a: np.ndarray, ws) -> np.ndarray:
    """Element-wise product of `a` with every vector in `ws`.

    Commutative and associative in the ordering of `ws`; the all-ones
    vector is the identity factor. The caller re-normalizes afterwards.
    """
    a = np.asarray(a, dtype=np.float64)
    ws = [np.asarray(w, dtype=np.float64) for w in ws]
    if not ws:
        raise InvalidInputError("ws must contain at least one vector")
    out = a.copy()
    for w in ws:
        if w.shape != a.shape:
            raise InvalidInputError(
                f"length mismatch: expected {a.shape[0]}, got {w.shape[0] if w.ndim else 0}"
            )
        out *= w
    return out


def softmax_argmax(logits: np.ndarray) -> tuple[np.ndarray, int]:
    """Numerically stable softmax plus argmax with lowest-index ties."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise InvalidInputError("logits must be non-empty")
    shifted = logits - logits.max()
    exps = np.exp(shifted)
    probs = exps / exps.sum()
    return probs, int(np.argmax(logits))
