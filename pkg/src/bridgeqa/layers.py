"""Reusable network blocks: affine layers, graph convolution stacks, and a
bidirectional GRU sentence encoder. Every learnable tensor is registered in
a ParamRegistry under its weight-symbol name, exactly once."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = ("relu", "none")


class RegistryError(Exception):
    pass


class DegenerateDegreeError(Exception):
    """A graph row had nonpositive total weight after adding self-loops."""


class ParamRegistry:
    """All learnable weights and biases of a model, keyed by name.

    Insertion order is the creation order and is what optimizers iterate,
    so runs with the same seed touch parameters in the same sequence.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, t: Tensor) -> Tensor:
        if name in self._params:
            raise RegistryError(f"parameter {name!r} registered twice")
        t.requires_grad = True
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return self._params.values()

    def zero_grads(self) -> None:
        T.zero_grads(self._params.values())


def init_weight(registry: ParamRegistry, name: str, d_in: int, d_out: int,
                rng: np.random.Generator, dtype: str) -> Tensor:
    """Uniform(-1/sqrt(d_in), +1/sqrt(d_in)) initialization."""
    bound = 1.0 / np.sqrt(d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    return registry.register(name, Tensor(w, dtype=dtype))


def init_bias(registry: ParamRegistry, name: str, d: int, dtype: str) -> Tensor:
    return registry.register(name, Tensor(np.zeros(d), dtype=dtype))


def _bias_name(weight_name: str) -> str:
    if not weight_name.startswith("W"):
        raise RegistryError(f"cannot derive bias name from {weight_name!r}")
    return "b" + weight_name[1:]


class LinearLayer:
    """y = act(x @ W + b), applied row-wise; x may be a vector or a matrix."""

    def __init__(self, registry: ParamRegistry, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator, dtype: str = "f32", activation: str = "none"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.d_in = d_in
        self.d_out = d_out
        self.activation = activation
        self.weight = init_weight(registry, name, d_in, d_out, rng, dtype)
        self.bias = init_bias(registry, _bias_name(name), d_out, dtype)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise T.ShapeError(
                f"{self.name}: expected last dim {self.d_in}, got input shape {x.shape}")
        y = T.matmul(x, self.weight)
        y = T.add_row_vector(y, self.bias) if y.ndim == 2 else T.add(y, self.bias)
        return T.relu(y) if self.activation == "relu" else y


class GCNStack:
    """Consecutive graph convolutions sharing one normalized operator.

    Each layer computes act(D^-1/2 (A + I) D^-1/2 X W); the added identity
    self-loop is optional for graphs whose weight matrix already carries its
    own diagonal.
    """

    def __init__(self, registry: ParamRegistry, name: str, dims: Sequence[int],
                 rng: np.random.Generator, dtype: str = "f32", activation: str = "relu"):
        if len(dims) < 2:
            raise ValueError("GCNStack needs at least one layer")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.name = name
        self.dims = tuple(dims)
        self.activation = activation
        self.weights = [
            init_weight(registry, f"{name}.{i}", dims[i], dims[i + 1], rng, dtype)
            for i in range(len(dims) - 1)
        ]

    @staticmethod
    def normalized_operator(adj: Tensor, add_identity: bool = True) -> Tensor:
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1]:
            raise T.ShapeError(f"graph weight matrix must be square, got {adj.shape}")
        if not np.all(np.isfinite(adj.data)):
            raise DegenerateDegreeError("graph weight matrix has non-finite entries")
        if add_identity:
            eye = Tensor(np.eye(adj.shape[0], dtype=adj.data.dtype))
            a_hat = T.add(adj, eye)
        else:
            a_hat = adj
        deg = T.sum_axis(a_hat, 1)
        if np.any(deg.data <= 0):
            bad = int(np.argmax(deg.data <= 0))
            raise DegenerateDegreeError(f"row {bad} has degree {deg.data[bad]} <= 0")
        s = T.rsqrt(deg)
        return T.scale_cols(T.scale_rows(a_hat, s), s)

    def forward(self, adj: Tensor, x: Tensor, add_identity: bool = True) -> Tensor:
        if x.shape[0] != adj.shape[0]:
            raise T.ShapeError(
                f"{self.name}: node count {x.shape[0]} != graph size {adj.shape[0]}")
        p = self.normalized_operator(adj, add_identity=add_identity)
        z = x
        for w in self.weights:
            z = T.matmul(p, T.matmul(z, w))
            if self.activation == "relu":
                z = T.relu(z)
        return z


class GRUCell:
    """One gated recurrent step. Gates act on the [x, h] concatenation:

        z = sigmoid([x,h] Wz + bz)
        r = sigmoid([x,h] Wr + br)
        n = tanh([x, r*h] Wh + bh)
        h' = (1-z)*h + z*n
    """

    def __init__(self, registry: ParamRegistry, prefix: str, d_in: int, d_hidden: int,
                 rng: np.random.Generator, dtype: str = "f32"):
        self.prefix = prefix
        self.d_in = d_in
        self.d_hidden = d_hidden
        fan = d_in + d_hidden
        self.w_z = init_weight(registry, f"{prefix}.W_z", fan, d_hidden, rng, dtype)
        self.w_r = init_weight(registry, f"{prefix}.W_r", fan, d_hidden, rng, dtype)
        self.w_h = init_weight(registry, f"{prefix}.W_h", fan, d_hidden, rng, dtype)
        self.b_z = init_bias(registry, f"{prefix}.b_z", d_hidden, dtype)
        self.b_r = init_bias(registry, f"{prefix}.b_r", d_hidden, dtype)
        self.b_h = init_bias(registry, f"{prefix}.b_h", d_hidden, dtype)

    def step(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape != (self.d_in,) or h.shape != (self.d_hidden,):
            raise T.ShapeError(
                f"{self.prefix}: expected x {(self.d_in,)} and h {(self.d_hidden,)}, "
                f"got {x.shape} and {h.shape}")
        xh = T.concat_last([x, h])
        z = T.sigmoid(T.add(T.matmul(xh, self.w_z), self.b_z))
        r = T.sigmoid(T.add(T.matmul(xh, self.w_r), self.b_r))
        xrh = T.concat_last([x, T.mul(r, h)])
        n = T.tanh(T.add(T.matmul(xrh, self.w_h), self.b_h))
        return T.add(T.mul(1.0 - z, h), T.mul(z, n))


class BiGRUEncoder:
    """Token embeddings -> contextual question rows.

    Runs a forward and a backward GRU over the K embedding rows, concatenates
    the two hidden states at each step, and projects the 2h-wide result to
    the model width.
    """

    def __init__(self, registry: ParamRegistry, d_embed: int, d_out: int,
                 rng: np.random.Generator, dtype: str = "f32"):
        if d_out % 2 != 0:
            raise ValueError(f"encoder output dim must be even, got {d_out}")
        self.d_embed = d_embed
        self.d_out = d_out
        self.d_hidden = d_out // 2
        self.dtype = dtype
        self.fwd = GRUCell(registry, "gru_f", d_embed, self.d_hidden, rng, dtype)
        self.bwd = GRUCell(registry, "gru_b", d_embed, self.d_hidden, rng, dtype)
        self.proj = LinearLayer(registry, "W_pu", d_out, d_out, rng, dtype, activation="none")

    def concat_states(self, embeddings: Tensor) -> Tensor:
        """Per-step [forward_hidden; backward_hidden] rows, before projection."""
        if embeddings.ndim != 2 or embeddings.shape[1] != self.d_embed:
            raise T.ShapeError(
                f"encoder: expected K x {self.d_embed} embeddings, got {embeddings.shape}")
        k = embeddings.shape[0]
        if k == 0:
            raise T.ShapeError("encoder: empty question")
        h0 = Tensor(np.zeros(self.d_hidden), dtype=self.dtype)

        h = h0
        fwd_states = []
        for t in range(k):
            h = self.fwd.step(T.row(embeddings, t), h)
            fwd_states.append(h)

        h = h0
        bwd_states: list[Tensor | None] = [None] * k
        for t in reversed(range(k)):
            h = self.bwd.step(T.row(embeddings, t), h)
            bwd_states[t] = h

        rows = [T.concat_last([fwd_states[t], bwd_states[t]]) for t in range(k)]
        return T.stack_rows(rows)

    def encode(self, embeddings: Tensor) -> Tensor:
        return self.proj.forward(self.concat_states(embeddings))
