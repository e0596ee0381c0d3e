"""Spatio-temporal heatmaps from pyramid selections, plus frame rendering.

Kernel-wise maps average the activation channels of a node's children;
layer-wise maps weight each selected channel by its connection count from
the layer above. Volumes are upsampled to clip resolution with a natural
cubic spline along time (knot values preserved) and bilinear resampling in
space, then blended over the clip frames.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, InvalidInputError
from .inference import ActivationStore
from .model_io import ClipBundle
from .pyramid import PyramidGraph
from .tensor_ops import minmax_normalize

__all__ = [
    "ActivationVolume",
    "OverlayStyle",
    "feature_wise_map",
    "layer_wise_map",
    "spline_upsample",
    "render_overlay",
    "load_colormap",
    "worker_count",
]


def worker_count() -> int:
    """Worker parallelism cap; CFP_THREADS overrides hardware concurrency."""
    env = os.environ.get("CFP_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CFP_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


@dataclass
class ActivationVolume:
    """Single-channel spatio-temporal map (t, h, w) with its provenance."""

    values: np.ndarray
    source: tuple[str, str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise InvalidInputError(
                f"activation volume must be 3-d (t,h,w), got {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("activation volume contains non-finite values")


@dataclass
class OverlayStyle:
    alpha: float = 0.5
    colormap: str = "inferno"
    output_fps: int = 8

    def validate(self) -> None:
        if not (0.0 <= self.alpha <= 1.0):
            raise ConfigError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.output_fps < 1:
            raise ConfigError(f"output_fps must be positive, got {self.output_fps}")


# ---------------------------------------------------------------------------
# maps


def _child_volume(store: ActivationStore, layer: str, kernel: int) -> np.ndarray:
    act = store[layer]
    if kernel >= act.shape[0]:
        raise InvalidInputError(f"kernel {kernel} out of range for layer '{layer}'")
    vol = act[kernel]
    if vol.ndim != 3:
        raise InvalidInputError(
            f"layer '{layer}' activation is not spatio-temporal (shape {act.shape})"
        )
    return vol


def feature_wise_map(
    pg: PyramidGraph, store: ActivationStore, node: tuple[str, int]
) -> ActivationVolume:
    """Average the activation channels selected by one kernel's own gate."""
    layer, kernel = node
    if (layer, kernel) not in pg.nodes:
        raise InvalidInputError(f"node ({layer}, {kernel}) is not in the pyramid")
    children = pg.children_of((layer, kernel))
    if not children:
        raise InvalidInputError(
            f"node ({layer}, {kernel}) has no children; render it with the "
            "layer-wise map or rebuild the pyramid with a larger depth"
        )
    vols = [_child_volume(store, cl, ck) for cl, ck in children]
    target = tuple(max(v.shape[i] for v in vols) for i in range(3))
    vols = [_resize_volume(v, target) for v in vols]
    mean = np.mean(vols, axis=0)
    return ActivationVolume(
        values=minmax_normalize(mean.reshape(-1)).reshape(mean.shape),
        source=(layer, f"kernel {kernel}"),
    )


def layer_wise_map(pg: PyramidGraph, store: ActivationStore, layer_id: str) -> ActivationVolume:
    """Connection-count weighted sum of a layer's selected channels.

    A kernel feeding three parents above contributes three times the weight
    of a kernel feeding one.
    """
    selected = sorted(k for (l, k) in pg.nodes if l == layer_id)
    if not selected:
        raise InvalidInputError(f"layer '{layer_id}' has no selected kernels in the pyramid")
    acc = None
    for k in selected:
        weight = pg.in_degree((layer_id, k))
        if weight == 0:
            continue
        vol = _child_volume(store, layer_id, k) * float(weight)
        acc = vol if acc is None else acc + vol
    if acc is None:
        raise InvalidInputError(
            f"layer '{layer_id}' has no connected kernels in the pyramid"
        )
    return ActivationVolume(
        values=minmax_normalize(acc.reshape(-1)).reshape(acc.shape),
        source=(layer_id, "layer"),
    )


# ---------------------------------------------------------------------------
# upsampling


def _natural_cubic_resample(y: np.ndarray, new_t: int) -> np.ndarray:
    """Resample axis 0 from t to new_t samples with a natural cubic spline.

    Knots sit at 0..t-1; outputs at new_t evenly spaced positions across the
    same span, so the first and last frames always coincide with knots and a
    temporally affine input reproduces exactly.
    """
    t = y.shape[0]
    flat = y.reshape(t, -1)
    x = np.linspace(0.0, float(t - 1), new_t) if new_t > 1 else np.zeros(1)
    if t == 1:
        out = np.repeat(flat, new_t, axis=0)
        return out.reshape((new_t,) + y.shape[1:])

    # second derivatives at the knots (natural boundary: zero at both ends)
    m2 = np.zeros_like(flat)
    n_inner = t - 2
    if n_inner > 0:
        rhs = 6.0 * (flat[2:] - 2.0 * flat[1:-1] + flat[:-2])
        c_prime = np.zeros(n_inner)
        d_prime = np.zeros((n_inner, flat.shape[1]))
        c_prime[0] = 1.0 / 4.0
        d_prime[0] = rhs[0] / 4.0
        for i in range(1, n_inner):
            m = 4.0 - c_prime[i - 1]
            c_prime[i] = 1.0 / m
            d_prime[i] = (rhs[i] - d_prime[i - 1]) / m
        m2[n_inner] = d_prime[n_inner - 1]
        for i in range(n_inner - 1, 0, -1):
            m2[i] = d_prime[i - 1] - c_prime[i - 1] * m2[i + 1]

    seg = np.clip(np.floor(x).astype(int), 0, t - 2)
    u = (x - seg)[:, None]
    y0, y1 = flat[seg], flat[seg + 1]
    m0, m1 = m2[seg], m2[seg + 1]
    one = 1.0 - u
    out = (
        m0 * one**3 / 6.0
        + m1 * u**3 / 6.0
        + (y0 - m0 / 6.0) * one
        + (y1 - m1 / 6.0) * u
    )
    return out.reshape((new_t,) + y.shape[1:])


def _polynomial_resample(y: np.ndarray, new_t: int) -> np.ndarray:
    """Piecewise interpolation with polynomial pieces of degree new_t//t.

    Compatibility mode for small integer upsampling ratios (<= 4); each
    output position is evaluated from the Lagrange polynomial through the
    nearest degree+1 knots.
    """
    t = y.shape[0]
    if new_t % t != 0 or new_t // t > 4:
        raise ConfigError(
            "polynomial mode needs an integer target/source ratio of at most 4, "
            f"got {new_t}/{t}"
        )
    degree = min(new_t // t, t - 1)
    if t == 1:
        return np.repeat(y.reshape(1, -1), new_t, axis=0).reshape((new_t,) + y.shape[1:])
    flat = y.reshape(t, -1)
    xs = np.linspace(0.0, float(t - 1), new_t) if new_t > 1 else np.zeros(1)
    out = np.zeros((new_t, flat.shape[1]))
    for oi, x in enumerate(xs.tolist()):
        start = int(np.clip(np.floor(x) - (degree - 1) // 2, 0, t - 1 - degree))
        pts = list(range(start, start + degree + 1))
        for k in pts:
            w = 1.0
            for m in pts:
                if m != k:
                    w *= (x - m) / (k - m)
            out[oi] += w * flat[k]
    return out.reshape((new_t,) + y.shape[1:])


def _bilinear_axis(v: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    """Endpoint-aligned linear resampling of one axis."""
    n = v.shape[axis]
    if n == 1:
        return np.repeat(v, new_n, axis=axis)
    x = np.linspace(0.0, float(n - 1), new_n) if new_n > 1 else np.zeros(1)
    i0 = np.clip(np.floor(x).astype(int), 0, n - 2)
    frac = x - i0
    lo = np.take(v, i0, axis=axis)
    hi = np.take(v, i0 + 1, axis=axis)
    shape = [1] * v.ndim
    shape[axis] = new_n
    frac = frac.reshape(shape)
    return lo * (1.0 - frac) + hi * frac


def _resize_volume(v: np.ndarray, target: tuple[int, int, int], temporal_method="cubic") -> np.ndarray:
    out = v
    if target[0] != v.shape[0]:
        if temporal_method == "cubic":
            out = _natural_cubic_resample(out, target[0])
        elif temporal_method == "polynomial":
            out = _polynomial_resample(out, target[0])
        else:
            raise ConfigError(f"unknown temporal method '{temporal_method}'")
    if target[1] != out.shape[1]:
        out = _bilinear_axis(out, 1, target[1])
    if target[2] != out.shape[2]:
        out = _bilinear_axis(out, 2, target[2])
    return out


def spline_upsample(
    v: ActivationVolume, target: tuple[int, int, int], temporal_method: str = "cubic"
) -> ActivationVolume:
    """Upsample a volume to `target` (T, H, W), clamped to [0, 1].

    Temporal interpolation passes through the original frames exactly;
    spatial axes resize bilinearly. Axes already at target size are left
    untouched, so upsampling to the identity size is exact.
    """
    src = v.values
    if any(t < s for t, s in zip(target, src.shape)):
        raise InvalidInputError(f"target {tuple(target)} is smaller than source {src.shape}")
    if tuple(target) == src.shape:
        return ActivationVolume(values=src.copy(), source=v.source)
    out = _resize_volume(src, tuple(target), temporal_method)
    return ActivationVolume(values=np.clip(out, 0.0, 1.0), source=v.source)


# ---------------------------------------------------------------------------
# rendering


def load_colormap(name: str = "inferno") -> np.ndarray:
    """256x3 float ramp in [0, 1] from the shipped binary table."""
    if name == "gray":
        ramp = np.repeat(np.arange(256, dtype=np.float64)[:, None], 3, axis=1)
        return ramp / 255.0
    path = resources.files("cfp").joinpath("assets", f"{name}.cmap")
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise ConfigError(f"unknown colormap '{name}'") from None
    if len(raw) != 256 * 3:
        raise ConfigError(f"colormap '{name}' table must be 768 bytes, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8).reshape(256, 3).astype(np.float64) / 255.0


def _clip_frames(clip: ClipBundle) -> np.ndarray:
    """De-normalize the clip and lay it out as (T, H, W, 3) floats in [0, 1]."""
    x = clip.tensor
    c = x.shape[0]
    if clip.std is not None:
        x = x * clip.std.reshape(c, 1, 1, 1)
    if clip.mean is not None:
        x = x + clip.mean.reshape(c, 1, 1, 1)
    if x.max() > 1.5:  # stored as 0..255
        x = x / 255.0
    x = np.clip(x, 0.0, 1.0)
    if c == 1:
        x = np.repeat(x, 3, axis=0)
    elif c != 3:
        raise InvalidInputError(f"rendering expects 1 or 3 channels, got {c}")
    return np.transpose(x, (1, 2, 3, 0))


def render_overlay(
    clip: ClipBundle,
    v: ActivationVolume,
    style: OverlayStyle,
    out_dir,
    write_gif: bool = False,
) -> list[Path]:
    """Blend the heat volume over each frame and write 8-bit RGB PNGs.

    out_pixel = (1 - alpha*heat) * frame + alpha*heat * colormap(heat).
    Frames are named frame_%04d.png; with write_gif an animation.gif at
    style.output_fps is added. Output is deterministic byte-for-byte.
    """
    style.validate()
    frames = _clip_frames(clip)
    if v.values.shape != frames.shape[:3]:
        raise InvalidInputError(
            f"volume shape {v.values.shape} does not match clip {frames.shape[:3]}"
        )
    cmap = load_colormap(style.colormap)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    heat = np.clip(v.values, 0.0, 1.0)
    idx = np.rint(heat * 255.0).astype(np.int64)
    color = cmap[idx]  # (T, H, W, 3)
    w = (style.alpha * heat)[..., None]
    blended = (1.0 - w) * frames + w * color
    as_bytes = np.rint(np.clip(blended, 0.0, 1.0) * 255.0).astype(np.uint8)

    paths = []
    images = []
    for t in range(as_bytes.shape[0]):
        paths.append(out_dir / f"frame_{t:04d}.png")
        images.append(Image.fromarray(as_bytes[t], mode="RGB"))

    def _save(pair):
        path, img = pair
        img.save(path)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        list(pool.map(_save, zip(paths, images)))

    if write_gif:
        gif_path = out_dir / "animation.gif"
        images[0].save(
            gif_path,
            save_all=True,
            append_images=images[1:],
            duration=int(round(1000.0 / style.output_fps)),
            loop=0,
        )
        paths.append(gif_path)
    return paths
