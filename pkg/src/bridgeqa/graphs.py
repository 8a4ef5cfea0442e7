"""Graph construction.

The two visual graphs are fully connected: edge weights are a row softmax of
scaled inner products between node features. The question graph is sparse:
a symmetric dependency adjacency (with self-loops) masks the affinity matrix,
and the surviving rows are L2-normalized.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GraphError(Exception):
    pass


DependencyEdge = tuple[int, int, str]


@dataclass
class GraphBundle:
    """The three per-sample graphs plus the question-side intermediates."""
    w_v: Tensor | None   # L x L appearance edge weights
    w_m: Tensor | None   # N x N motion edge weights
    w_q: Tensor          # K x K masked, row-normalized question weights
    a_q: np.ndarray      # K x K binary adjacency (unit diagonal)
    e_q: Tensor          # K x K dense question affinity


def visual_edge_weights(nodes: Tensor, lam: float) -> Tensor:
    """Row-stochastic edge weights from softmaxed scaled inner products."""
    if nodes.ndim != 2:
        raise T.RankError(f"expected node matrix, got shape {nodes.shape}")
    return T.softmax(T.matmul(nodes, T.transpose(nodes)), axis=1, scale=lam)


def question_affinity(u: Tensor, lam: float) -> Tensor:
    # Same kernel as the visual graphs, applied to question rows.
    return visual_edge_weights(u, lam)


def adjacency_from_dependencies(edges: Sequence[DependencyEdge], num_tokens: int) -> np.ndarray:
    """Symmetric binary adjacency over tokens with a unit diagonal.

    Self-loops guarantee no zero rows, so the downstream normalization is
    always total.
    """
    if num_tokens < 1:
        raise GraphError(f"question needs at least one token, got {num_tokens}")
    a = np.eye(num_tokens)
    for head, dep, _rel in edges:
        for idx in (head, dep):
            if not (0 <= idx < num_tokens):
                raise GraphError(
                    f"dependency edge ({head}, {dep}) references token {idx}, "
                    f"but the question has {num_tokens} tokens")
        a[head, dep] = 1.0
        a[dep, head] = 1.0
    return a


def question_weight_matrix(e: Tensor, a: np.ndarray) -> Tensor:
    """Mask the affinity by the adjacency, then L2-normalize each row."""
    if e.ndim != 2 or e.shape[0] != e.shape[1]:
        raise T.ShapeError(f"affinity must be square, got {e.shape}")
    if a.shape != e.shape:
        raise T.ShapeError(f"adjacency shape {a.shape} != affinity shape {e.shape}")
    mask = Tensor(a.astype(e.data.dtype))
    return T.l2_normalize_rows(T.mul(e, mask))


def build_question_graph(u: Tensor, edges: Sequence[DependencyEdge], lam: float):
    """Return (w_q, a_q, e_q) for K question rows."""
    a = adjacency_from_dependencies(edges, u.shape[0])
    e = question_affinity(u, lam)
    return question_weight_matrix(e, a), a, e


def build_graphs(v_hat: Tensor | None, m_hat: Tensor | None, u: Tensor,
                 edges: Sequence[DependencyEdge], lam: float) -> GraphBundle:
    w_q, a_q, e_q = build_question_graph(u, edges, lam)
    return GraphBundle(
        w_v=visual_edge_weights(v_hat, lam) if v_hat is not None else None,
        w_m=visual_edge_weights(m_hat, lam) if m_hat is not None else None,
        w_q=w_q, a_q=a_q, e_q=e_q,
    )
