"""Cross-graph interactions.

Question-to-visual: every visual node absorbs a softmax-weighted mix of
question rows, passes through an FC layer, and is then propagated along its
own graph by a GCN stack.

Visual-to-visual: the source stream is first pulled onto the question nodes
(bridged), propagated along the question graph with a residual, and the
enriched question rows are then delivered to the target stream. The
bridge-free variant aggregates the source nodes into the target directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .layers import GCNStack, LinearLayer


@dataclass
class InteractionTrace:
    """Interaction matrices captured during one forward pass (value copies).

    Keys mirror the flow: s_v / s_m link question rows to appearance / motion
    nodes; bridge_m and bridge_v are the question-side attention over the
    conditioned motion / appearance nodes; s_b_v / s_b_m are the delivery
    weights back onto the visual nodes (the bridge-free delivery weights are
    stored in the same slots when the bridge is ablated).
    """
    s_v: np.ndarray | None = None      # L x K
    s_m: np.ndarray | None = None      # N x K
    bridge_m: np.ndarray | None = None  # K x N
    bridge_v: np.ndarray | None = None  # K x L
    s_b_v: np.ndarray | None = None    # L x K (or L x N without the bridge)
    s_b_m: np.ndarray | None = None    # N x K (or N x L without the bridge)

    def matrices(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("s_v", "s_m", "bridge_m", "bridge_v", "s_b_v", "s_b_m"):
            val = getattr(self, name)
            if val is not None:
                out[name] = val
        return out


def interaction_matrix(x: Tensor, u: Tensor, lam: float) -> Tensor:
    """Row-softmax of scaled inner products: how much each u-row feeds each x-row."""
    if x.shape[-1] != u.shape[-1]:
        raise T.ShapeError(
            f"interaction_matrix: feature dims differ: {x.shape} vs {u.shape}")
    return T.softmax(T.matmul(x, T.transpose(u)), axis=1, scale=lam)


def q2v_interaction(nodes: Tensor, u: Tensor, w_graph: Tensor,
                    fc: LinearLayer, gcn: GCNStack, lam: float):
    """Question-conditioned visual nodes; returns (conditioned, interaction matrix)."""
    s = interaction_matrix(nodes, u, lam)
    aggregated = fc.forward(T.add(nodes, T.matmul(s, u)))
    return gcn.forward(w_graph, aggregated, add_identity=True), s


def bridge_aggregate(u: Tensor, conditioned: Tensor, w_q: Tensor,
                     gcn: GCNStack, lam: float):
    """Pull conditioned visual nodes onto the question graph.

    Each question row takes a convex combination of the conditioned nodes,
    the result is propagated along the question edges, and the original
    question rows are added back (so zero GCN weights leave u untouched).
    Returns (enriched question rows, bridge attention matrix).
    """
    attn = T.softmax(T.matmul(u, T.transpose(conditioned)), axis=1, scale=lam)
    u_b = T.matmul(attn, conditioned)
    # w_q already carries its own diagonal; do not add a second self-loop
    return T.add(u, gcn.forward(w_q, u_b, add_identity=False)), attn


def v2v_deliver(conditioned: Tensor, u_hat_b: Tensor, fc: LinearLayer, lam: float):
    """Deliver enriched question rows to the target visual nodes.

    Returns (final nodes, delivery weights); fc projects down to the fused width.
    """
    s_b = T.softmax(T.matmul(conditioned, T.transpose(u_hat_b)), axis=1, scale=lam)
    return fc.forward(T.add(conditioned, T.matmul(s_b, u_hat_b))), s_b


def v2v_no_bridge(target: Tensor, source: Tensor, fc: LinearLayer, lam: float):
    """Ablation: aggregate the relative stream directly by feature affinity."""
    s = T.softmax(T.matmul(target, T.transpose(source)), axis=1, scale=lam)
    return fc.forward(T.add(target, T.matmul(s, source))), s
