"""End-to-end demo on the committed toy bundle.

Builds a pyramid, renders the layer-wise heatmap of its deepest layer and
times the back-step; outputs land in ./out/.
"""

import json
import sys
from pathlib import Path

from cfp.cli import main

FIXTURE = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "toy"
OUT = Path("out")


def run(argv) -> None:
    print(f"$ cfp {' '.join(argv)}")
    rc = main(argv)
    if rc != 0:
        sys.exit(rc)


def bundle_flags():
    return [
        "--model", str(FIXTURE / "model.json"),
        "--weights", str(FIXTURE / "weights.bin"),
        "--clip", str(FIXTURE / "clip.json"),
    ]


def main_() -> None:
    OUT.mkdir(exist_ok=True)
    pyramid = OUT / "pyramid.json"
    run(["validate", "--model", str(FIXTURE / "model.json"),
         "--weights", str(FIXTURE / "weights.bin"), "--clip", str(FIXTURE / "clip.json")])
    run(["backstep", *bundle_flags(), "--theta", "0.55", "--depth", "3",
         "--out", str(pyramid), "--dot", str(OUT / "pyramid.dot")])
    layer = json.loads(pyramid.read_text())["nodes"][0]["layer"]
    run(["render", "--pyramid", str(pyramid), *bundle_flags(),
         "--mode", "layer", "--layer", layer, "--gif", "--out", str(OUT / "frames")])
    run(["bench", *bundle_flags(), "--theta", "0.55", "--depth", "3",
         "--repeats", "5", "--naive", "--out", str(OUT / "bench.jsonl")])
    print(f"done; see {OUT}/")


if __name__ == "__main__":
    main_()
