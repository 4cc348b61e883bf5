"""A four-node, five-edge, two-head attention example with hand-checkable numbers.

Edges (id: src -> dst): e0: 1->0, e1: 3->1, e2: 1->2, e3: 0->3, e4: 2->3.
Every node except v3 has exactly one incoming edge, so its attention score
is 1.0; v3 gathers e3 and e4.

The projection weight is the identity, so the input rows are the projected
features directly. Row v2 of the features and row v3 of the output gradient
are back-solved so that v3's aggregated output and the attention gradients
land on round two-decimal values (see ``tests/test_toy_example.py``).
"""

from __future__ import annotations

import numpy as np

from .graph import EdgeList, GraphViews
from .layers import GatLayerParams

EDGES = [(1, 0), (3, 1), (1, 2), (0, 3), (2, 3)]

FEATURES = np.array([
    [0.59, 0.73, 0.51, -0.65],
    [0.76, 0.73, 0.79, -1.07],
    [0.318273, 0.403927, 0.994746, -0.519491],
    [0.40, 0.40, 0.30, 0.40],
], dtype=np.float32)

A_SRC = np.array([[0.91, 0.90], [0.42, 0.62]], dtype=np.float32)
A_DST = np.array([[0.25, 0.25], [0.10, 0.05]], dtype=np.float32)

OUTPUT_GRAD = np.array([
    [0.54, 0.51, -0.26, -0.07],
    [0.10, 0.20, 0.30, 0.40],
    [1.02, 1.06, 0.07, 0.56],
    [-0.896311, 1.820306, 1.00, 0.907556],
], dtype=np.float32)


def toy_graph() -> EdgeList:
    return EdgeList.from_pairs(4, EDGES)


def toy_views() -> GraphViews:
    return GraphViews.build(toy_graph())


def toy_params(leaky_slope: float = 0.0) -> GatLayerParams:
    """Negative scores are treated as zero in the hand-worked numbers, hence slope 0."""
    return GatLayerParams(np.eye(4, dtype=np.float32), A_SRC.copy(), A_DST.copy(), leaky_slope)
