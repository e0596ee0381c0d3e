"""Round-trip verification: run the engine on an exported bundle and
compare its outputs to the framework references in the manifest."""

from __future__ import annotations

import json
import shutil
import subprocess
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .export import ExportError


def engine_command() -> list[str]:
    """The primary engine binary, from PATH or as a module fallback."""
    exe = shutil.which("cfp")
    if exe:
        return [exe]
    return [sys.executable, "-m", "cfp.cli"]


@dataclass
class LayerDelta:
    layer: str
    max_abs_delta: float
    ok: bool


@dataclass
class RoundtripReport:
    ok: bool
    tolerance: float
    logits_delta: float
    layers: list[LayerDelta] = field(default_factory=list)
    first_divergence: str | None = None

    def summary(self) -> str:
        if self.ok:
            return (
                f"round-trip ok: |dlogits| {self.logits_delta:.2e}, "
                f"{len(self.layers)} layers within {self.tolerance:g}"
            )
        return (
            f"round-trip FAILED at layer '{self.first_divergence}' "
            f"(tolerance {self.tolerance:g})"
        )


def verify_roundtrip(bundle_dir, tolerance: float | None = None) -> RoundtripReport:
    """Forward the bundle through the engine and diff against the manifest.

    Layers are compared in model topological order so `first_divergence`
    names the earliest layer exceeding the tolerance.
    """
    bundle_dir = Path(bundle_dir)
    manifest = json.loads((bundle_dir / "manifest.json").read_text())
    reference = manifest["reference"]
    tol = float(tolerance if tolerance is not None else reference.get("tolerance", 1e-4))

    model_doc = json.loads((bundle_dir / "model.json").read_text())
    order = {n["id"]: i for i, n in enumerate(model_doc["nodes"])}
    ref_acts = reference.get("activations", {})
    layers = sorted(ref_acts, key=lambda l: order.get(l, 1 << 30))

    cmd = engine_command() + [
        "forward",
        "--model", str(bundle_dir / "model.json"),
        "--weights", str(bundle_dir / "weights.bin"),
        "--clip", str(bundle_dir / "clip.json"),
    ]
    for layer in layers:
        cmd += ["--capture", layer]
    with tempfile.TemporaryDirectory() as tmp:
        out_path = Path(tmp) / "forward.json"
        result = subprocess.run(
            cmd + ["--out", str(out_path)], capture_output=True, text=True
        )
        if result.returncode != 0:
            raise ExportError(
                f"engine forward failed (exit {result.returncode}): {result.stderr.strip()}"
            )
        engine = json.loads(out_path.read_text())

    logits_delta = float(
        np.max(np.abs(np.array(engine["logits"]) - np.array(reference["logits"])))
    )
    report = RoundtripReport(ok=True, tolerance=tol, logits_delta=logits_delta)
    if logits_delta > tol:
        report.ok = False
    for layer in layers:
        got = np.array(engine["activations"][layer]["data"])
        want = np.array(ref_acts[layer]["data"])
        if got.shape != want.shape:
            delta = float("inf")
        else:
            delta = float(np.max(np.abs(got - want))) if got.size else 0.0
        ok = delta <= tol
        report.layers.append(LayerDelta(layer=layer, max_abs_delta=delta, ok=ok))
        if not ok and report.first_divergence is None:
            report.first_divergence = layer
            report.ok = False
    if not report.ok and report.first_divergence is None:
        report.first_divergence = "<logits>"
    return report
