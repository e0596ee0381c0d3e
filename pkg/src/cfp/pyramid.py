"""The class feature pyramid: a rooted DAG of class-informative kernels.

Nodes are (layer_id, kernel_index) pairs scored in [0, 1]; edges point from
a kernel to the kernels in strictly earlier layers that drive it. The root
is a virtual class node identified by `class_index` and serialized with the
reserved layer name "class".
"""

from __future__ import annotations

from dataclasses import dataclass, field

ROOT_LAYER = "class"

NodeKey = tuple[str, int]


@dataclass
class PyramidGraph:
    """Kernel dependency graph for one class.

    nodes maps (layer_id, kernel) -> score; edges maps
    ((from_layer, from_kernel), (to_layer, to_kernel)) -> weight. The root
    key is (ROOT_LAYER, class_index) and never appears in `nodes`.
    Merging rules: re-adding a node or edge keeps the maximum score/weight,
    so construction order cannot change the result.
    """

    class_index: int
    theta: float
    depth: int
    aggregation: str = "product"
    nodes: dict[NodeKey, float] = field(default_factory=dict)
    edges: dict[tuple[NodeKey, NodeKey], float] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    layer_order: dict[str, int] = field(default_factory=dict)

    @property
    def root(self) -> NodeKey:
        return (ROOT_LAYER, self.class_index)

    def add_node(self, key: NodeKey, score: float) -> None:
        prev = self.nodes.get(key)
        if prev is None or score > prev:
            self.nodes[key] = float(score)

    def add_edge(self, parent: NodeKey, child: NodeKey, weight: float) -> None:
        key = (parent, child)
        prev = self.edges.get(key)
        if prev is None or weight > prev:
            self.edges[key] = float(weight)

    def _rank(self, layer: str) -> int:
        # Root sorts after every real layer; unknown layers keep file order.
        if layer == ROOT_LAYER:
            return 1 << 30
        return self.layer_order.get(layer, 0)

    def sorted_nodes(self) -> list[tuple[NodeKey, float]]:
        return sorted(self.nodes.items(), key=lambda kv: (self._rank(kv[0][0]), kv[0]))

    def sorted_edges(self) -> list[tuple[tuple[NodeKey, NodeKey], float]]:
        return sorted(
            self.edges.items(),
            key=lambda kv: (
                self._rank(kv[0][0][0]),
                kv[0][0],
                self._rank(kv[0][1][0]),
                kv[0][1],
            ),
        )

    def children_of(self, key: NodeKey) -> list[NodeKey]:
        return sorted(
            (child for (parent, child) in self.edges if parent == key),
            key=lambda k: (self._rank(k[0]), k),
        )

    def in_degree(self, key: NodeKey) -> int:
        return sum(1 for (_, child) in self.edges if child == key)

    def layers(self) -> list[str]:
        seen = {layer for (layer, _) in self.nodes}
        return sorted(seen, key=lambda l: (self._rank(l), l))

    def check_structure(self) -> None:
        """Assert the pyramid invariants: DAG edges strictly toward earlier
        layers, root never a child, every edge endpoint materialized."""
        for (parent, child) in self.edges:
            if child[0] == ROOT_LAYER:
                raise AssertionError("root node cannot be an edge target")
            if child not in self.nodes:
                raise AssertionError(f"edge child {child} is not a node")
            if parent != self.root:
                if parent not in self.nodes:
                    raise AssertionError(f"edge parent {parent} is not a node")
                if self.layer_order and self._rank(child[0]) >= self._rank(parent[0]):
                    raise AssertionError(
                        f"edge {parent} -> {child} does not decrease layer depth"
                    )
