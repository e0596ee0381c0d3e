"""Shared builders: small random 3D CNNs in every supported topology."""

from __future__ import annotations

import numpy as np
import pytest

from cfp.model_io import ClipBundle, LayerNode, ModelGraph

TOPOLOGIES = ("plain", "residual", "grouped", "branch")


def conv_node(nid, src, cin, cout, rng, k=(3, 3, 3), stride=1, pad=None, groups=1, bias=True):
    if pad is None:
        pad = [kk // 2 for kk in k]
    return LayerNode(
        id=nid,
        kind="conv3d",
        params={
            "in_channels": cin,
            "out_channels": cout,
            "kernel": list(k),
            "stride": stride,
            "padding": pad,
            "groups": groups,
        },
        inputs=[src],
        weight=rng.standard_normal((cout, cin // groups, *k)),
        bias=rng.standard_normal(cout) * 0.1 if bias else None,
    )


def relu_node(nid, src):
    return LayerNode(id=nid, kind="relu", params={}, inputs=[src])


def fc_head(src, features, classes, rng):
    return [
        LayerNode(id="gap", kind="global_avg_pool", params={}, inputs=[src]),
        LayerNode(
            id="fc",
            kind="fully_connected",
            params={"in_features": features, "out_features": classes},
            inputs=["gap"],
            weight=rng.standard_normal((classes, features)),
            bias=rng.standard_normal(classes) * 0.1,
        ),
    ]


def plain_net(rng, n_convs=3, channels=8, classes=5, input_shape=(4, 4, 6, 6)):
    nodes = []
    src, cin = "input", input_shape[0]
    for i in range(n_convs):
        nodes.append(conv_node(f"c{i}", src, cin, channels, rng))
        nodes.append(relu_node(f"r{i}", f"c{i}"))
        src, cin = f"r{i}", channels
    nodes.extend(fc_head(src, channels, classes, rng))
    return ModelGraph(nodes=nodes, output_id="fc", input_shape=input_shape)


def residual_net(rng, channels=8, classes=5, input_shape=(4, 4, 6, 6)):
    """conv stem, then a two-conv residual block with an identity shortcut."""
    nodes = [
        conv_node("stem", "input", input_shape[0], channels, rng),
        relu_node("stem_r", "stem"),
        conv_node("b1", "stem_r", channels, channels, rng),
        relu_node("b1_r", "b1"),
        conv_node("b2", "b1_r", channels, channels, rng),
        LayerNode(id="res", kind="add", params={}, inputs=["b2", "stem_r"]),
        relu_node("res_r", "res"),
    ]
    nodes.extend(fc_head("res_r", channels, classes, rng))
    return ModelGraph(nodes=nodes, output_id="fc", input_shape=input_shape)


def grouped_net(rng, n_convs=3, channels=8, groups=2, classes=5, input_shape=(4, 4, 6, 6)):
    nodes = [conv_node("c0", "input", input_shape[0], channels, rng), relu_node("r0", "c0")]
    src = "r0"
    for i in range(1, n_convs):
        nodes.append(conv_node(f"c{i}", src, channels, channels, rng, groups=groups))
        nodes.append(relu_node(f"r{i}", f"c{i}"))
        src = f"r{i}"
    nodes.extend(fc_head(src, channels, classes, rng))
    return ModelGraph(nodes=nodes, output_id="fc", input_shape=input_shape)


def branch_net(rng, channels=8, classes=5, input_shape=(4, 4, 6, 6)):
    """Two uneven branches (two convs vs one) concatenated channel-wise."""
    ca, cb = channels, max(4, channels // 2)
    nodes = [
        conv_node("stem", "input", input_shape[0], channels, rng),
        relu_node("stem_r", "stem"),
        conv_node("a1", "stem_r", channels, ca, rng),
        relu_node("a1_r", "a1"),
        conv_node("a2", "a1_r", ca, ca, rng),
        conv_node("b1", "stem_r", channels, cb, rng),
        LayerNode(id="cat", kind="concat", params={}, inputs=["a2", "b1"]),
        relu_node("cat_r", "cat"),
    ]
    nodes.extend(fc_head("cat_r", ca + cb, classes, rng))
    return ModelGraph(nodes=nodes, output_id="fc", input_shape=input_shape)


def make_net(rng, topology, **kwargs):
    builders = {
        "plain": plain_net,
        "residual": residual_net,
        "grouped": grouped_net,
        "branch": branch_net,
    }
    return builders[topology](rng, **kwargs)


def random_clip(rng, shape) -> ClipBundle:
    return ClipBundle(tensor=rng.standard_normal(shape))


def insert_pass_nodes(g: ModelGraph) -> ModelGraph:
    """Splice a forward-identity pass node (1x1x1 avg pool) after every relu.

    Forward outputs are unchanged, so any difference in selections would
    come from the traversal itself.
    """
    nodes = []
    rename: dict[str, str] = {}
    for node in g.nodes:
        inputs = [rename.get(i, i) for i in node.inputs]
        nodes.append(
            LayerNode(node.id, node.kind, dict(node.params), inputs, node.weight, node.bias)
        )
        if node.kind == "relu":
            pass_id = f"{node.id}_pass"
            nodes.append(
                LayerNode(
                    pass_id,
                    "avg_pool3d",
                    {"kernel": [1, 1, 1], "stride": 1, "padding": 0},
                    [node.id],
                )
            )
            rename[node.id] = pass_id
    return ModelGraph(nodes=nodes, output_id=g.output_id, input_shape=g.input_shape)


@pytest.fixture
def rng():
    return np.random.default_rng(42)
