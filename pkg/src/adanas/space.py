"""Relaxed and discrete forward passes over the macro search space.

The supernet stacks K_max cells. Architecture distributions (one over the
layer count, one per cell edge, shared across layers) are relaxed with
Gumbel-Softmax and discretized per batch with a straight-through one-hot.
Operation weights are independent per layer; the architecture parameters
are the only thing layers share.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ValidationError
from .losses import LayerProbes
from .ops import ALL_OPERATIONS, CellTopology, ChildGraph, OperationKind
from .tensor import BatchNormState, Tensor


def gumbel_noise(rng: np.random.Generator, size: int) -> np.ndarray:
    u = np.clip(rng.uniform(size=size), 1e-10, 1.0 - 1e-10)
    return -np.log(-np.log(u))


def gumbel_softmax(theta: Tensor, tau: float, rng: np.random.Generator | None = None,
                   noise: np.ndarray | None = None) -> Tensor:
    """softmax((theta + g) / tau) with g ~ Gumbel(0, 1); differentiable in theta."""
    if tau <= 0:
        raise ConfigError(f"gumbel temperature must be positive, got {tau}")
    if noise is None:
        if rng is None:
            raise ConfigError("gumbel_softmax needs either an rng or explicit noise")
        noise = gumbel_noise(rng, theta.shape[0])
    shifted = T.add(theta, T.constant(np.asarray(noise, dtype=float)))
    return T.softmax(T.scale(shifted, 1.0 / tau), axis=0)


def straight_through(y: Tensor) -> Tensor:
    """One-hot at argmax(y) forward; gradients pass through unchanged."""
    hard = np.zeros_like(y.data)
    hard[int(np.argmax(y.data))] = 1.0

    def backward(g):
        return (g,)

    return T.record_op((y,), hard, backward)


class ArchParams:
    """Learnable logits over the layer count and over each edge's operation."""

    def __init__(self, k_max: int, num_edges: int, num_ops: int, tau: float = 1.0):
        if k_max < 1 or num_edges < 1 or num_ops < 1:
            raise ConfigError("architecture dimensions must be positive")
        self.k_max = k_max
        self.tau = tau
        self.theta_k = T.parameter(np.zeros(k_max), name="theta_k")
        self.theta_edges = [T.parameter(np.zeros(num_ops), name=f"theta_edge{e}")
                            for e in range(num_edges)]

    def tensors(self) -> list[Tensor]:
        return [self.theta_k, *self.theta_edges]

    def k_distribution(self) -> np.ndarray:
        e = np.exp(self.theta_k.data - self.theta_k.data.max())
        return e / e.sum()

    def edge_distributions(self) -> np.ndarray:
        rows = []
        for t in self.theta_edges:
            e = np.exp(t.data - t.data.max())
            rows.append(e / e.sum())
        return np.stack(rows)

    def entropy_k(self) -> float:
        p = self.k_distribution()
        return float(-(p * np.log(p)).sum())

    def mean_entropy_edges(self) -> float:
        dists = self.edge_distributions()
        return float(-(dists * np.log(dists)).sum(axis=1).mean())


@dataclass
class ArchSample:
    """One sampled architecture: a layer-count vector and per-edge vectors."""

    y_k: Tensor
    y_edges: list[Tensor]


def sample_architecture(arch: ArchParams, rng: np.random.Generator,
                        hard: bool = True) -> ArchSample:
    y_k = gumbel_softmax(arch.theta_k, arch.tau, rng)
    y_edges = [gumbel_softmax(t, arch.tau, rng) for t in arch.theta_edges]
    if hard:
        y_k = straight_through(y_k)
        y_edges = [straight_through(y) for y in y_edges]
    return ArchSample(y_k=y_k, y_edges=y_edges)


class ConvParams:
    """Relu-Conv-BatchNorm block weights for one (layer, edge, op) site."""

    def __init__(self, channels: int, kernel_size: int, rng: np.random.Generator,
                 name: str):
        bound = 1.0 / np.sqrt(channels * kernel_size)
        self.kernel = T.parameter(
            rng.uniform(-bound, bound, size=(channels, channels, kernel_size)),
            name=f"{name}.kernel")
        self.bias = T.parameter(np.zeros(channels), name=f"{name}.bias")
        self.gamma = T.parameter(np.ones(channels), name=f"{name}.gamma")
        self.beta = T.parameter(np.zeros(channels), name=f"{name}.beta")
        self.bn_state = BatchNormState(channels)

    def tensors(self) -> list[Tensor]:
        return [self.kernel, self.bias, self.gamma, self.beta]

    def copy_from(self, other: "ConvParams") -> None:
        for mine, theirs in zip(self.tensors(), other.tensors()):
            mine.data = theirs.data.copy()
        self.bn_state.copy_from(other.bn_state)


def apply_operation(op: OperationKind, x: Tensor, params: ConvParams | None,
                    bn_mode: str) -> Tensor:
    if op is OperationKind.SKIP:
        return x
    if op is OperationKind.ZERO:
        return T.constant(np.zeros(x.shape))
    if op is OperationKind.MAX_POOL_3:
        return T.pool1d(x, "max", 3)
    if op is OperationKind.AVG_POOL_3:
        return T.pool1d(x, "avg", 3)
    h = T.relu(x)
    h = T.conv1d(h, params.kernel, params.bias, dilation=op.dilation)
    return T.batchnorm(h, params.gamma, params.beta, params.bn_state, bn_mode)


def _is_one_hot(v: np.ndarray) -> bool:
    return np.count_nonzero(v) == 1 and float(v.max()) == 1.0


class LayerWeights:
    """Independent operation weights plus attention vectors for one layer."""

    def __init__(self, topology: CellTopology, operations, channels: int,
                 rng: np.random.Generator, name: str):
        self.ops: dict[tuple[tuple[int, int], OperationKind], ConvParams] = {}
        for edge in topology.edges:
            for op in operations:
                if op.is_conv:
                    self.ops[(edge, op)] = ConvParams(
                        channels, op.kernel_size, rng,
                        name=f"{name}.e{edge[0]}-{edge[1]}.{op.value}")
        bound = 1.0 / np.sqrt(channels)
        self.node_attn = T.parameter(rng.uniform(-bound, bound, size=channels),
                                     name=f"{name}.node_attn")
        self.seq_attn = T.parameter(rng.uniform(-bound, bound, size=channels),
                                    name=f"{name}.seq_attn")

    def tensors(self) -> list[Tensor]:
        out = []
        for key in sorted(self.ops, key=lambda k: (k[0], k[1].value)):
            out.extend(self.ops[key].tensors())
        out.extend([self.node_attn, self.seq_attn])
        return out


def mixed_edge_forward(h: Tensor, edge: tuple[int, int], vec: Tensor,
                       layer: LayerWeights, operations, bn_mode: str) -> Tensor:
    """sum_o vec[o] * op_o(h); a one-hot vector executes only its selection."""
    if vec.shape != (len(operations),):
        raise ValidationError(
            f"edge vector length {vec.shape} does not match |O|={len(operations)}")
    if _is_one_hot(vec.data):
        sel = int(np.argmax(vec.data))
        op = operations[sel]
        if op is OperationKind.ZERO:
            return T.constant(np.zeros(h.shape))
        out = apply_operation(op, h, layer.ops.get((edge, op)), bn_mode)
        return T.mul(T.element(vec, sel), out)
    outs = [apply_operation(op, h, layer.ops.get((edge, op)), bn_mode)
            for op in operations]
    return T.weighted_sum(outs, vec)


def _node_attention_mix(states: list[Tensor], attn: Tensor) -> Tensor:
    """Attention-weighted sum of node states using position-averaged scores."""
    if len(states) == 1:
        return states[0]
    scores = [T.tensor_sum(T.mul(T.mean(s, axis=2), attn), axis=1) for s in states]
    weights = T.softmax(T.stack(scores, axis=0), axis=0)     # [N, B]
    stacked = T.stack(states, axis=0)                        # [N, B, C, L]
    n, b = weights.shape
    wr = T.reshape(weights, (n, b, 1, 1))
    return T.tensor_sum(T.mul(wr, stacked), axis=0)


def sequence_attention_pool(state: Tensor, attn: Tensor) -> Tensor:
    """Pool [B, C, L] to [B, C] with a learned softmax over positions."""
    b, c, _ = state.shape
    scores = T.tensor_sum(T.mul(state, T.reshape(attn, (1, c, 1))), axis=1)  # [B, L]
    weights = T.softmax(scores, axis=1)
    wl = T.reshape(weights, (b, 1, weights.shape[1]))
    return T.tensor_sum(T.mul(state, wl), axis=2)


def cell_forward(c_prev2: Tensor, c_prev1: Tensor, layer: LayerWeights,
                 edge_vectors, topology: CellTopology, operations,
                 bn_mode: str) -> Tensor:
    states = {0: c_prev2, 1: c_prev1}
    for node in range(2, topology.n_nodes + 2):
        acc = None
        for edge_idx, (src, _) in topology.incoming(node):
            term = mixed_edge_forward(states[src], (src, node),
                                      edge_vectors[edge_idx], layer,
                                      operations, bn_mode)
            acc = term if acc is None else T.add(acc, term)
        states[node] = acc
    intermediates = [states[n] for n in range(2, topology.n_nodes + 2)]
    return _node_attention_mix(intermediates, layer.node_attn)


@dataclass
class SupernetOutput:
    pooled: list[Tensor]        # per layer, [B, C]
    layer_logits: list[Tensor]  # per layer, [B, num_classes]
    final_logits: Tensor        # [B, num_classes]


class SuperNet:
    """Parent graph holding every candidate operation at every site."""

    def __init__(self, topology: CellTopology, k_max: int, embed_dim: int,
                 vocab_size: int, num_classes: int, seed: int,
                 operations=ALL_OPERATIONS):
        if k_max < 1:
            raise ConfigError(f"k_max must be >= 1, got {k_max}")
        self.topology = topology
        self.k_max = k_max
        self.embed_dim = embed_dim
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.operations = tuple(operations)
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(embed_dim)
        self.embedding = T.parameter(
            rng.uniform(-bound, bound, size=(vocab_size, embed_dim)), name="embedding")
        self.layers = [LayerWeights(topology, self.operations, embed_dim, rng,
                                    name=f"layer{k}")
                       for k in range(k_max)]
        self.probes = LayerProbes(k_max, embed_dim, num_classes, rng)
        self.arch = ArchParams(k_max, topology.num_edges, len(self.operations))

    def weight_tensors(self) -> list[Tensor]:
        out = [self.embedding]
        for layer in self.layers:
            out.extend(layer.tensors())
        out.extend(self.probes.tensors())
        return out

    def embed(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.embedding, ids)

    def forward(self, input_a: Tensor, input_b: Tensor, sample: ArchSample,
                bn_mode: str = "train") -> SupernetOutput:
        if input_a.shape[0] == 0:
            raise ValidationError("empty batch")
        prev2, prev1 = input_a, input_b
        pooled_list, logits_list = [], []
        for k, layer in enumerate(self.layers):
            out = cell_forward(prev2, prev1, layer, sample.y_edges, self.topology,
                               self.operations, bn_mode)
            pooled = sequence_attention_pool(out, layer.seq_attn)
            pooled_list.append(pooled)
            logits_list.append(self.probes.apply(k, pooled))
            prev2, prev1 = (out, out) if k == 0 else (prev1, out)
        final = T.weighted_sum(logits_list, sample.y_k)
        return SupernetOutput(pooled=pooled_list, layer_logits=logits_list,
                              final_logits=final)


def derive_child(arch: ArchParams, topology: CellTopology,
                 operations=ALL_OPERATIONS, task_type: str = "single_text",
                 embed_dim: int = 128) -> ChildGraph:
    """argmax over the architecture distributions; ties go to the lowest index."""
    operations = tuple(operations)
    k = int(np.argmax(arch.theta_k.data)) + 1
    ops = {edge: operations[int(np.argmax(theta.data))]
           for edge, theta in zip(topology.edges, arch.theta_edges)}
    return ChildGraph(k=k, n_nodes=topology.n_nodes, ops=ops,
                      task_type=task_type, embed_dim=embed_dim)


def encode_child_as_logits(child: ChildGraph, k_max: int,
                           operations=ALL_OPERATIONS, peak: float = 8.0) -> ArchParams:
    """Logits whose argmax reproduces ``child`` exactly (derive inverse)."""
    operations = tuple(operations)
    topology = child.topology
    arch = ArchParams(k_max, topology.num_edges, len(operations))
    arch.theta_k.data[child.k - 1] = peak
    for idx, edge in enumerate(topology.edges):
        arch.theta_edges[idx].data[operations.index(child.ops[edge])] = peak
    return arch


class ChildNet:
    """Freshly initialized network realizing one discrete child graph."""

    def __init__(self, child: ChildGraph, vocab_size: int, num_classes: int,
                 seed: int):
        self.child = child
        self.vocab_size = vocab_size
        self.num_classes = num_classes
        self.cells_executed = 0
        channels = child.embed_dim
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(channels)
        self.embedding = T.parameter(
            rng.uniform(-bound, bound, size=(vocab_size, channels)), name="embedding")
        self.conv_params: list[dict[tuple[int, int], ConvParams]] = []
        self.node_attn: list[Tensor] = []
        for k in range(child.k):
            layer_convs = {}
            for edge in child.topology.edges:
                op = child.ops[edge]
                if op.is_conv:
                    layer_convs[edge] = ConvParams(
                        channels, op.kernel_size, rng,
                        name=f"layer{k}.e{edge[0]}-{edge[1]}.{op.value}")
            self.conv_params.append(layer_convs)
            self.node_attn.append(T.parameter(
                rng.uniform(-bound, bound, size=channels), name=f"layer{k}.node_attn"))
        self.seq_attn = T.parameter(rng.uniform(-bound, bound, size=channels),
                                    name="seq_attn")
        self.head_w = T.parameter(rng.uniform(-bound, bound,
                                              size=(channels, num_classes)),
                                  name="head.W")
        self.head_b = T.parameter(np.zeros(num_classes), name="head.b")

    def weight_tensors(self) -> list[Tensor]:
        out = [self.embedding]
        for k in range(self.child.k):
            for edge in sorted(self.conv_params[k]):
                out.extend(self.conv_params[k][edge].tensors())
            out.append(self.node_attn[k])
        out.extend([self.seq_attn, self.head_w, self.head_b])
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.weight_tensors())

    def bn_states(self) -> list[BatchNormState]:
        out = []
        for k in range(self.child.k):
            for edge in sorted(self.conv_params[k]):
                out.append(self.conv_params[k][edge].bn_state)
        return out

    def embed(self, ids: np.ndarray) -> Tensor:
        return T.embedding(self.embedding, ids)

    def _cell(self, k: int, prev2: Tensor, prev1: Tensor, bn_mode: str) -> Tensor:
        self.cells_executed += 1
        topo = self.child.topology
        states = {0: prev2, 1: prev1}
        for node in range(2, topo.n_nodes + 2):
            acc = None
            for _, (src, _) in topo.incoming(node):
                op = self.child.ops[(src, node)]
                term = apply_operation(op, states[src],
                                       self.conv_params[k].get((src, node)), bn_mode)
                acc = term if acc is None else T.add(acc, term)
            states[node] = acc
        intermediates = [states[n] for n in range(2, topo.n_nodes + 2)]
        return _node_attention_mix(intermediates, self.node_attn[k])

    def forward(self, input_a: Tensor, input_b: Tensor, bn_mode: str = "eval") -> Tensor:
        if input_a.shape[0] == 0:
            raise ValidationError("empty batch")
        prev2, prev1 = input_a, input_b
        out = prev1
        for k in range(self.child.k):
            out = self._cell(k, prev2, prev1, bn_mode)
            prev2, prev1 = (out, out) if k == 0 else (prev1, out)
        pooled = sequence_attention_pool(out, self.seq_attn)
        return T.add(T.matmul(pooled, self.head_w), self.head_b)

    def copy_weights_from_supernet(self, net: SuperNet) -> None:
        """Mirror the supernet's weights so hard-mode outputs coincide."""
        self.embedding.data = net.embedding.data.copy()
        for k in range(self.child.k):
            for edge, params in self.conv_params[k].items():
                op = self.child.ops[edge]
                params.copy_from(net.layers[k].ops[(edge, op)])
            self.node_attn[k].data = net.layers[k].node_attn.data.copy()
        last = self.child.k - 1
        self.seq_attn.data = net.layers[last].seq_attn.data.copy()
        self.head_w.data = net.probes.weights[last].data.copy()
        self.head_b.data = net.probes.biases[last].data.copy()
