"""Command-line surface: validate, backstep, render, bench, forward.

Exit codes: 0 on success, 2 for validation/config errors, 3 for runtime
errors. Failures print one machine-readable JSON object to stderr. The
environment variable CFP_THREADS caps worker parallelism (rendering);
benchmark timing always runs the measured region on a single thread.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from .backstep import BackstepConfig, build_pyramid
from .errors import BundleError, CfpError, ConfigError, InvalidInputError
from .inference import forward_all
from .model_io import (
    ClipBundle,
    ModelGraph,
    load_clip,
    load_model_bundle,
    read_pyramid_graph,
    validate_graph,
    write_pyramid_graph,
)
from .pyramid import ROOT_LAYER
from .tensor_ops import softmax_argmax
from .viz import (
    ActivationVolume,
    OverlayStyle,
    feature_wise_map,
    layer_wise_map,
    render_overlay,
    spline_upsample,
)


def _load_pair(args) -> tuple[ModelGraph, ClipBundle]:
    graph = load_model_bundle(args.model, args.weights)
    clip = load_clip(args.clip, _sibling_blob(args.clip))
    return graph, clip


def _sibling_blob(manifest_path) -> Path:
    return Path(manifest_path).with_suffix(".bin")


def _make_config(args) -> BackstepConfig:
    class_mode = "argmax" if args.cls is None else int(args.cls)
    cfg = BackstepConfig(
        theta=args.theta,
        depth=args.depth,
        class_mode=class_mode,
        aggregation=args.aggregation,
        activation_tap=args.tap,
    )
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# subcommands


def cmd_validate(args) -> int:
    graph = load_model_bundle(args.model, args.weights)
    report = validate_graph(graph)
    for node in graph.nodes:
        shape = "x".join(str(s) for s in report.shapes[node.id])
        print(f"{node.id:<24} {node.kind:<16} {shape}")
    if args.clip:
        clip = load_clip(args.clip, _sibling_blob(args.clip))
        if tuple(clip.tensor.shape) != tuple(graph.input_shape):
            raise BundleError(
                f"clip shape {clip.tensor.shape} does not match model input "
                f"{graph.input_shape}"
            )
        print(f"clip matches input shape {graph.input_shape}")
    print(f"ok: {len(graph.nodes)} nodes, zero findings")
    return 0


def cmd_backstep(args) -> int:
    graph, clip = _load_pair(args)
    cfg = _make_config(args)
    store, logits = forward_all(graph, clip)
    if cfg.class_mode != "argmax" and not (0 <= int(cfg.class_mode) < logits.shape[0]):
        raise ConfigError(
            f"class index {cfg.class_mode} out of range for {logits.shape[0]} classes"
        )
    pg = build_pyramid(graph, store, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pyramid_graph(pg, out, dot_path=args.dot)
    _, predicted = softmax_argmax(logits)
    print(f"predicted class: {predicted}")
    print(f"pyramid class: {pg.class_index}")
    print(f"nodes: {len(pg.nodes)}")
    print(f"edges: {len(pg.edges)}")
    for w in pg.warnings:
        print(f"warning: {w}")
    return 0


def cmd_render(args) -> int:
    pg = read_pyramid_graph(args.pyramid)
    graph, clip = _load_pair(args)
    for layer in pg.layers():
        if layer != ROOT_LAYER and layer not in graph.by_id:
            raise BundleError(
                f"pyramid references layer '{layer}' which the model does not contain"
            )
    store, _ = forward_all(graph, clip)
    if args.mode == "kernel":
        if args.layer is None or args.kernel is None:
            raise ConfigError("kernel mode needs --layer and --kernel")
        key = (args.layer, args.kernel)
        if key not in pg.nodes:
            available = ", ".join(f"({l}, {k})" for (l, k), _ in pg.sorted_nodes())
            raise InvalidInputError(
                f"node ({args.layer}, {args.kernel}) is not in the pyramid; "
                f"available: {available or 'none'}"
            )
        volume = feature_wise_map(pg, store, key)
    else:
        if args.layer is None:
            raise ConfigError("layer mode needs --layer")
        volume = layer_wise_map(pg, store, args.layer)
    target = (clip.frame_count, clip.height, clip.width)
    volume = spline_upsample(volume, target, temporal_method=args.temporal)
    style = OverlayStyle(alpha=args.alpha, colormap=args.colormap, output_fps=args.fps)
    paths = render_overlay(clip, volume, style, args.out, write_gif=args.gif)
    print(f"wrote {len(paths)} files to {args.out}")
    return 0


def _flop_estimate(graph: ModelGraph) -> float:
    report = validate_graph(graph)
    total = 0.0
    for node in graph.nodes:
        out_shape = report.shapes[node.id]
        if node.kind == "conv3d":
            cin_g = int(node.params["in_channels"]) // node.groups
            f = node.kernel
            total += 2.0 * np.prod(out_shape) * cin_g * f[0] * f[1] * f[2]
        elif node.kind == "fully_connected":
            total += 2.0 * node.weight.shape[0] * node.weight.shape[1]
        else:
            total += float(np.prod(out_shape))
    return total


def _param_count(graph: ModelGraph) -> int:
    total = 0
    for node in graph.nodes:
        if node.weight is not None:
            total += node.weight.size
        if node.bias is not None:
            total += node.bias.size
    return total


def _deepest_conv_ratio(graph: ModelGraph) -> tuple[float, str]:
    """Theoretical vectorized-vs-local ratio: activation volume over kernel
    volume at the deepest convolution layer (the first one back-stepped)."""
    from .backstep import _conv_heights

    report = validate_graph(graph)
    heights = _conv_heights(graph)
    best = None
    for i, node in enumerate(graph.nodes):
        if node.kind != "conv3d":
            continue
        in_shape = report.shapes[node.inputs[0]]
        if len(in_shape) != 4:
            continue
        key = (heights[node.id], i)
        if best is None or key > best[0]:
            best = (key, node, in_shape)
    if best is None:
        return float("nan"), "n/a"
    _, node, in_shape = best
    d, h, w = in_shape[1:]
    f = node.kernel
    ratio = (d * h * w) / float(f[0] * f[1] * f[2])
    return ratio, node.id


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise ConfigError(f"--repeats must be >= 3, got {args.repeats}")
    graph, clip = _load_pair(args)
    cfg = _make_config(args)
    store, _ = forward_all(graph, clip)

    def timed(impl: str) -> tuple[float, object]:
        times = []
        result = None
        for _ in range(args.repeats):
            t0 = time.perf_counter()
            result = build_pyramid(graph, store, cfg, impl=impl)
            times.append((time.perf_counter() - t0) * 1000.0)
        return statistics.median(times), result

    vec_ms, vec_pg = timed("vectorized")
    theoretical, ratio_layer = _deepest_conv_ratio(graph)
    record = {
        "model": graph.name,
        "parameters": _param_count(graph),
        "gflops": _flop_estimate(graph) / 1e9,
        "backstep_ms": vec_ms,
        "depth": args.depth,
        "theta": args.theta,
        "repeats": args.repeats,
        "theoretical_ratio": theoretical,
        "theoretical_ratio_layer": ratio_layer,
    }
    if args.naive:
        naive_ms, naive_pg = timed("naive")
        if set(naive_pg.nodes) != set(vec_pg.nodes) or set(naive_pg.edges) != set(vec_pg.edges):
            raise InvalidInputError(
                "naive and vectorized back-steps disagree on the selected sets"
            )
        record["naive_ms"] = naive_ms
        record["speedup"] = naive_ms / vec_ms if vec_ms > 0 else float("inf")

    header = f"{'Network':<20} | {'GFLOPS':>8} | {'Back-step time (msec)':>22} | {'# layers':>8} | {'theta':>5}"
    print(header)
    print("-" * len(header))
    print(
        f"{record['model']:<20} | {record['gflops']:>8.2f} | {record['backstep_ms']:>22.2f} "
        f"| {record['depth']:>8} | {record['theta']:>5.2f}"
    )
    print(f"theoretical vectorized/local ratio: {theoretical:.1f} (layer {ratio_layer})")
    if args.naive:
        print(f"naive median: {record['naive_ms']:.2f} ms; measured speedup: {record['speedup']:.1f}x")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("a") as fh:
            fh.write(json.dumps(record) + "\n")
    return 0


def cmd_forward(args) -> int:
    graph, clip = _load_pair(args)
    store, logits = forward_all(graph, clip)
    doc = {"logits": [float(v) for v in logits]}
    capture = list(args.capture or [])
    if args.capture_all:
        capture = [n.id for n in graph.nodes]
    acts = {}
    for layer in capture:
        if layer not in store:
            raise InvalidInputError(f"no activation captured for layer '{layer}'")
        arr = store[layer]
        acts[layer] = {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}
    if acts:
        doc["activations"] = acts
    text = json.dumps(doc, indent=2) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_bundle_flags(p: argparse.ArgumentParser, with_clip: bool = True) -> None:
    p.add_argument("--model", required=True, help="path to model.json")
    p.add_argument("--weights", required=True, help="path to weights.bin")
    if with_clip:
        p.add_argument(
            "--clip",
            required=True,
            help="path to clip.json (clip.bin is expected alongside it)",
        )


def _add_backstep_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--theta", type=float, default=0.6, help="gate threshold in (0,1)")
    p.add_argument("--depth", type=int, default=3, help="convolution layers to back-step")
    p.add_argument(
        "--class",
        dest="cls",
        type=int,
        default=None,
        help="explicit class index (default: argmax of the prediction)",
    )
    p.add_argument(
        "--aggregation",
        choices=("product", "sum_mean"),
        default="product",
        help="how multiple selected kernels combine during a back-step",
    )
    p.add_argument(
        "--tap",
        choices=("post_nonlinearity", "pre_nonlinearity"),
        default="post_nonlinearity",
        help="which activation feeds a back-stepped convolution",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cfp",
        description="Class-specific kernel dependency graphs for 3D CNNs",
        epilog="CFP_THREADS caps worker parallelism for rendering.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="load a bundle and print inferred shapes")
    _add_bundle_flags(p, with_clip=False)
    p.add_argument("--clip", default=None, help="optionally check a clip against the model")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("backstep", help="build and write a class feature pyramid")
    _add_bundle_flags(p)
    _add_backstep_flags(p)
    p.add_argument("--out", required=True, help="output pyramid.json path")
    p.add_argument("--dot", default=None, help="optional pyramid.dot path")
    p.set_defaults(func=cmd_backstep)

    p = sub.add_parser("render", help="render heatmap overlays for a pyramid node/layer")
    p.add_argument("--pyramid", required=True, help="pyramid.json produced by backstep")
    _add_bundle_flags(p)
    p.add_argument("--mode", choices=("kernel", "layer"), required=True)
    p.add_argument("--layer", default=None, help="layer id to visualize")
    p.add_argument("--kernel", type=int, default=None, help="kernel index (kernel mode)")
    p.add_argument("--alpha", type=float, default=0.5, help="overlay opacity in [0,1]")
    p.add_argument("--colormap", default="inferno")
    p.add_argument("--fps", type=int, default=8, help="animation frame rate")
    p.add_argument("--gif", action="store_true", help="also write animation.gif")
    p.add_argument(
        "--temporal",
        choices=("cubic", "polynomial"),
        default="cubic",
        help="temporal interpolation mode",
    )
    p.add_argument("--out", required=True, help="output directory for frames")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="time the back-step against a naive implementation")
    _add_bundle_flags(p)
    _add_backstep_flags(p)
    p.add_argument("--repeats", type=int, default=5, help="timing repeats (median reported)")
    p.add_argument("--naive", action="store_true", help="also time the per-location loop")
    p.add_argument("--out", default=None, help="append one JSON record per run here")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("forward", help="run the forward pass and dump logits/activations")
    _add_bundle_flags(p)
    p.add_argument("--capture", action="append", help="layer id to dump (repeatable)")
    p.add_argument("--capture-all", action="store_true", help="dump every layer")
    p.add_argument("--out", default=None, help="write JSON here instead of stdout")
    p.set_defaults(func=cmd_forward)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BundleError, InvalidInputError) as exc:
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}), file=sys.stderr)
        return 2
    except CfpError as exc:
        print(json.dumps({"error": str(exc), "kind": type(exc).__name__}), file=sys.stderr)
        return 3
    except OSError as exc:
        print(json.dumps({"error": str(exc), "kind": "io"}), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
