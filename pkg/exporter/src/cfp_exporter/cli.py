"""Export CLI: convert a model+clip pair and optionally verify the round trip."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np
import torch

from .export import ExportError, export_model
from .verify import verify_roundtrip
from .zoo import ZOO, build


def load_model(spec: str, seed: int):
    if spec in ZOO:
        return build(spec, seed=seed), spec
    path = Path(spec)
    if path.exists():
        model = torch.load(path, weights_only=False)
        if not isinstance(model, torch.nn.Module):
            raise ExportError(f"{path} does not contain a torch module")
        model.eval()
        return model, path.stem
    raise ExportError(f"unknown model spec '{spec}' (zoo names: {sorted(ZOO)})")


def load_clip(spec: str, seed: int) -> np.ndarray:
    if spec.startswith("random:"):
        parts = spec.split(":", 1)[1].split(",")
        if len(parts) not in (4, 5):
            raise ExportError("random clip spec is random:C,T,H,W[,seed]")
        dims = [int(p) for p in parts[:4]]
        clip_seed = int(parts[4]) if len(parts) == 5 else seed
        rng = np.random.default_rng(clip_seed)
        return rng.standard_normal(dims)
    path = Path(spec)
    if path.suffix == ".npy" and path.exists():
        return np.load(path)
    raise ExportError(f"clip spec '{spec}' is neither random:C,T,H,W nor an existing .npy")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cfp-export",
        description="Export a PyTorch 3D CNN and a clip into the interchange bundle",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="write model.json/weights.bin/clip.* + manifest.json")
    p.add_argument("--model", required=True, help=f"zoo name ({', '.join(sorted(ZOO))}) or .pt path")
    p.add_argument("--clip", required=True, help=".npy path or random:C,T,H,W[,seed]")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--seed", type=int, default=42, help="seed for zoo weights / random clips")
    p.add_argument("--verify", action="store_true", help="run the engine round-trip check")

    args = parser.parse_args(argv)
    try:
        model, source = load_model(args.model, args.seed)
        clip = load_clip(args.clip, args.seed)
        out = export_model(model, clip, args.out, source=source)
        print(f"exported {source} to {out}")
        if args.verify:
            report = verify_roundtrip(out)
            print(report.summary())
            for layer in report.layers:
                marker = "ok " if layer.ok else "DIVERGED"
                print(f"  {marker} {layer.layer:<20} max|delta| {layer.max_abs_delta:.3e}")
            if not report.ok:
                return 1
        return 0
    except ExportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
