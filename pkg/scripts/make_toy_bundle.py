"""Regenerate the committed toy bundle under tests/fixtures/toy/.

The net touches every supported block type: a plain stem, a residual
block, a grouped convolution and two uneven concat branches. The clip is a
synthetic moving blob stored in normalized form with mean/std metadata.
Everything is seeded, so re-running reproduces the files byte-for-byte.
"""

from pathlib import Path

import numpy as np

from cfp.model_io import load_clip, load_model_bundle, write_clip, write_model_bundle

SEED = 42
INPUT_SHAPE = (3, 8, 16, 16)
CLASSES = 7
MEAN = [0.45, 0.45, 0.45]
STD = [0.225, 0.225, 0.225]


def conv_spec(nid, src, cin, cout, rng, k=(3, 3, 3), groups=1, pad=None):
    if pad is None:
        pad = [kk // 2 for kk in k]
    scale = 1.0 / np.sqrt(cin * k[0] * k[1] * k[2])
    return {
        "id": nid,
        "kind": "conv3d",
        "inputs": [src],
        "params": {
            "in_channels": cin,
            "out_channels": cout,
            "kernel": list(k),
            "stride": 1,
            "padding": pad,
            "groups": groups,
        },
        "weight": rng.standard_normal((cout, cin // groups, *k)) * scale,
        "bias": rng.standard_normal(cout) * 0.05,
    }


def relu_spec(nid, src):
    return {"id": nid, "kind": "relu", "inputs": [src], "params": {}}


def build_specs(rng):
    specs = [
        conv_spec("stem", "input", 3, 8, rng),
        relu_spec("stem_r", "stem"),
        # residual block
        conv_spec("res_a", "stem_r", 8, 8, rng),
        relu_spec("res_a_r", "res_a"),
        conv_spec("res_b", "res_a_r", 8, 8, rng),
        {"id": "res", "kind": "add", "inputs": ["res_b", "stem_r"], "params": {}},
        relu_spec("res_r", "res"),
        # grouped convolution
        conv_spec("gconv", "res_r", 8, 8, rng, groups=2),
        relu_spec("gconv_r", "gconv"),
        # two uneven branches
        conv_spec("br_a1", "gconv_r", 8, 6, rng),
        relu_spec("br_a1_r", "br_a1"),
        conv_spec("br_a2", "br_a1_r", 6, 6, rng),
        conv_spec("br_b1", "gconv_r", 8, 4, rng, k=(1, 1, 1), pad=[0, 0, 0]),
        {"id": "cat", "kind": "concat", "inputs": ["br_a2", "br_b1"], "params": {}},
        relu_spec("cat_r", "cat"),
        {"id": "gap", "kind": "global_avg_pool", "inputs": ["cat_r"], "params": {}},
        {
            "id": "fc",
            "kind": "fully_connected",
            "inputs": ["gap"],
            "params": {"in_features": 10, "out_features": CLASSES},
            "weight": rng.standard_normal((CLASSES, 10)) * 0.4,
            "bias": rng.standard_normal(CLASSES) * 0.05,
        },
    ]
    return specs


def moving_blob_clip(rng):
    """A bright blob orbiting the frame center, plus mild noise."""
    c, t, h, w = INPUT_SHAPE
    ys, xs = np.mgrid[0:h, 0:w]
    frames = np.zeros(INPUT_SHAPE)
    for ti in range(t):
        angle = 2.0 * np.pi * ti / t
        cy = h / 2.0 + (h / 4.0) * np.sin(angle)
        cx = w / 2.0 + (w / 4.0) * np.cos(angle)
        blob = np.exp(-(((ys - cy) ** 2 + (xs - cx) ** 2) / 8.0))
        for ci in range(c):
            frames[ci, ti] = 0.2 + 0.7 * blob * (0.5 + 0.5 * ci / max(c - 1, 1))
    frames += rng.random(INPUT_SHAPE) * 0.05
    frames = np.clip(frames, 0.0, 1.0)
    mean = np.array(MEAN).reshape(c, 1, 1, 1)
    std = np.array(STD).reshape(c, 1, 1, 1)
    return (frames - mean) / std


def main() -> None:
    out_dir = Path(__file__).resolve().parents[1] / "tests" / "fixtures" / "toy"
    rng = np.random.default_rng(SEED)
    mp, wp = write_model_bundle(out_dir, INPUT_SHAPE, "fc", build_specs(rng), name="toy-mixed")
    cp, cb = write_clip(out_dir, moving_blob_clip(rng), mean=MEAN, std=STD)
    graph = load_model_bundle(mp, wp)
    clip = load_clip(cp, cb)
    assert tuple(clip.tensor.shape) == tuple(graph.input_shape)
    print(f"wrote {out_dir}: {len(graph.nodes)} nodes, clip {clip.tensor.shape}")


if __name__ == "__main__":
    main()
