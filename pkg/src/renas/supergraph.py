"""The over-parameterized parent network: chained complete DAGs with block wiring.

Layout conventions:

* every node's featuremap is split into ``K`` contiguous channel blocks;
* ``gamma[(i, j)]`` is a K x K matrix, entry ``[l, k]`` weighting source block
  ``l`` of node ``i`` into target block ``k`` of node ``j``;
* node 0 of each DAG reads the previous stage's output in full (one op per
  block, stride 2, doubled width) and only acts as a routing source;
* the DAG output is its last node, the unique sink of a complete DAG.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .autograd import (
    Tensor,
    add,
    block_mix,
    channel_slice,
    concat_channels,
    conv2d,
    cross_entropy,
    dw_separable_conv,
    flatten,
    global_avg_pool,
    linear,
    relu,
    scale,
)
from .config import ConfigError, SearchConfig

_OP_RE = re.compile(r"^(conv|dwsep)(\d+)$")

# A node choice is either a single op index (hard path) or a sequence of
# (op index, path weight tensor) pairs whose outputs are summed.
NodeChoice = Union[int, Sequence[tuple]]


def parse_op(name: str) -> tuple[str, int]:
    m = _OP_RE.match(name)
    if not m:
        raise ConfigError(f"unknown operation {name!r}; expected convK or dwsepK with odd K")
    k = int(m.group(2))
    if k % 2 == 0:
        raise ConfigError(f"operation {name!r} needs an odd kernel size")
    return m.group(1), k


def op_weight_shapes(name: str, in_width: int, out_width: int) -> list[tuple]:
    kind, k = parse_op(name)
    if kind == "conv":
        return [(out_width, in_width, k, k)]
    return [(in_width, 1, k, k), (out_width, in_width, 1, 1)]


def apply_op(name: str, weights: Sequence[Tensor], x: Tensor, stride: int = 1) -> Tensor:
    """Run one candidate operation (same padding) followed by ReLU."""
    kind, k = parse_op(name)
    pad = (k - 1) // 2
    if kind == "conv":
        return relu(conv2d(x, weights[0], stride, pad))
    return relu(dw_separable_conv(x, weights[0], weights[1], stride, pad))


@dataclass
class NodeSpec:
    node_index: int
    channels: int
    blocks: int
    stride: int
    in_width: int
    op_weights: list = field(default_factory=list)  # [op][block] -> list of Tensors

    @property
    def block_width(self) -> int:
        return self.channels // self.blocks


@dataclass
class DagSpec:
    dag_index: int
    node_count: int
    nodes: list
    gamma: dict  # (i, j) -> Tensor (K, K)


@dataclass
class AlphaTable:
    scores: np.ndarray  # (M * N, O)
    nodes_per_dag: int

    def row(self, dag: int, node: int) -> np.ndarray:
        return self.scores[dag * self.nodes_per_dag + node]


@dataclass
class ParentNetwork:
    config: SearchConfig
    stem: Tensor
    dags: list
    head_w: Tensor
    head_b: Tensor
    alpha: AlphaTable

    def weight_params(self) -> list[tuple[str, Tensor]]:
        """All network weights ``w`` in a fixed declaration order."""
        out = [("stem", self.stem)]
        for dag in self.dags:
            for node in dag.nodes:
                for o, per_block in enumerate(node.op_weights):
                    for b, ws in enumerate(per_block):
                        for t, w in enumerate(ws):
                            out.append((f"d{dag.dag_index}.n{node.node_index}.op{o}.b{b}.w{t}", w))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def gamma_params(self) -> list[tuple[str, Tensor]]:
        out = []
        for dag in self.dags:
            for (i, j), g in sorted(dag.gamma.items()):
                out.append((f"d{dag.dag_index}.g{i}-{j}", g))
        return out

    def node_keys(self) -> list[tuple[int, int]]:
        return [(d.dag_index, n.node_index) for d in self.dags for n in d.nodes]


def _uniform(rng: np.random.Generator, shape: tuple, bound: float) -> Tensor:
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _init_op(rng: np.random.Generator, name: str, in_width: int, out_width: int) -> list[Tensor]:
    shapes = op_weight_shapes(name, in_width, out_width)
    if len(shapes) == 1:
        s = shapes[0]
        return [_uniform(rng, s, np.sqrt(6.0 / (s[1] * s[2] * s[3])))]
    depth, point = shapes
    # no nonlinearity between the two stages, so only the pointwise one gets the ReLU gain
    return [_uniform(rng, depth, np.sqrt(3.0 / (depth[2] * depth[3]))), _uniform(rng, point, np.sqrt(6.0 / point[1]))]


def build_parent(config: SearchConfig) -> ParentNetwork:
    """Construct the fully wired, freshly initialized parent network."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    K, N = config.K, config.N
    stem = _uniform(rng, (config.C0, config.in_channels, 3, 3), np.sqrt(6.0 / (config.in_channels * 9)))
    stem.name = "stem"
    dags = []
    in_ch = config.C0
    for d in range(config.M):
        ch = 2 * in_ch
        nodes = []
        for j in range(N):
            in_width = in_ch if j == 0 else ch // K
            node = NodeSpec(node_index=j, channels=ch, blocks=K, stride=2 if j == 0 else 1, in_width=in_width)
            node.op_weights = [[_init_op(rng, op, in_width, ch // K) for _ in range(K)] for op in config.op_set]
            nodes.append(node)
        gamma = {
            (i, j): Tensor(np.full((K, K), 1.0 / K), requires_grad=True, name=f"gamma{d}:{i}-{j}")
            for j in range(1, N)
            for i in range(j)
        }
        dags.append(DagSpec(dag_index=d, node_count=N, nodes=nodes, gamma=gamma))
        in_ch = ch
    bound = 1.0 / np.sqrt(in_ch)
    head_w = _uniform(rng, (config.classes, in_ch), bound)
    head_b = Tensor(np.zeros(config.classes), requires_grad=True)
    alpha = AlphaTable(np.zeros((config.M * N, len(config.op_set))), nodes_per_dag=N)
    return ParentNetwork(config=config, stem=stem, dags=dags, head_w=head_w, head_b=head_b, alpha=alpha)


def split_blocks(x: Tensor, K: int) -> list[Tensor]:
    C = x.shape[1]
    if C % K:
        raise ValueError(f"{C} channels do not split into {K} blocks")
    w = C // K
    return [channel_slice(x, k * w, (k + 1) * w) for k in range(K)]


def route_blocks(predecessor_outputs: Sequence[tuple[int, Tensor]], gamma: dict, j: int, k: int = None):
    """Weighted block routing into node ``j``.

    Returns the list of K routed blocks ``x^k``, or only block ``k`` when given.
    """
    if not predecessor_outputs:
        raise ValueError(f"node {j} has no predecessors to route from")
    ref = predecessor_outputs[0][1].shape
    total = None
    for i, X in predecessor_outputs:
        if i >= j:
            raise ValueError(f"edge {i}->{j} violates the DAG ordering")
        if X.shape != ref:
            raise ValueError(f"predecessor {i} has shape {X.shape}, expected {ref}")
        g = gamma[(i, j)]
        if X.shape[1] % g.shape[0]:
            raise ValueError(f"predecessor {i} with {X.shape[1]} channels cannot form {g.shape[0]} blocks")
        mixed = block_mix(X, g)
        total = mixed if total is None else add(total, mixed)
    blocks = split_blocks(total, gamma[(predecessor_outputs[0][0], j)].shape[0])
    return blocks if k is None else blocks[k]


def apply_node(node: NodeSpec, routed_blocks: Sequence[Tensor], op_choice: int, op_set: Sequence[str]) -> Tensor:
    """Apply the chosen op to each routed block with that block's own weights, then concatenate."""
    if not 0 <= op_choice < len(op_set):
        raise ValueError(f"operation index {op_choice} outside op_set of size {len(op_set)}")
    if len(routed_blocks) != node.blocks:
        raise ValueError(f"node {node.node_index} expects {node.blocks} routed blocks, got {len(routed_blocks)}")
    name = op_set[op_choice]
    outs = [
        apply_op(name, node.op_weights[op_choice][k], routed_blocks[k], node.stride) for k in range(node.blocks)
    ]
    return concat_channels(outs) if len(outs) > 1 else outs[0]


def _node_output(node: NodeSpec, blocks: Sequence[Tensor], choice: NodeChoice, op_set) -> Tensor:
    if isinstance(choice, (int, np.integer)):
        return apply_node(node, blocks, int(choice), op_set)
    out = None
    for op, g in choice:
        term = scale(apply_node(node, blocks, int(op), op_set), g)
        out = term if out is None else add(out, term)
    return out


def check_input(net: ParentNetwork, images: Tensor) -> None:
    cfg = net.config
    if images.data.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (batch, {cfg.in_channels}, H, W) images, got {images.shape}")
    if min(images.shape[2:]) < 2**cfg.M:
        raise ValueError(f"image size {images.shape[2:]} cannot survive {cfg.M} halvings")


def features(net: ParentNetwork, images: Tensor, op_choices: Sequence[Sequence[NodeChoice]]) -> Tensor:
    """Final-stage featuremap of the parent network."""
    check_input(net, images)
    op_set = net.config.op_set
    if len(op_choices) != len(net.dags) or any(len(c) != d.node_count for c, d in zip(op_choices, net.dags)):
        raise ValueError("op_choices must hold one entry per node of every DAG")
    h = relu(conv2d(images, net.stem, 1, 1))
    for dag, choices in zip(net.dags, op_choices):
        outputs: list[tuple[int, Tensor]] = []
        for node, choice in zip(dag.nodes, choices):
            if node.node_index == 0:
                blocks = [h] * node.blocks
            else:
                blocks = route_blocks(outputs, dag.gamma, node.node_index)
            outputs.append((node.node_index, _node_output(node, blocks, choice, op_set)))
        h = outputs[-1][1]
    return h


def head(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return linear(flatten(global_avg_pool(x)), w, b)


def network_forward(net: ParentNetwork, images: Tensor, op_choices) -> Tensor:
    """Logits (batch, classes) for the given per-node op choices."""
    return head(features(net, images, op_choices), net.head_w, net.head_b)


def network_loss(net: ParentNetwork, images: Tensor, labels, op_choices) -> Tensor:
    return cross_entropy(network_forward(net, images, op_choices), labels)


def nest_choices(flat: Sequence, nodes_per_dag: int) -> list[list]:
    flat = list(flat)
    return [flat[i : i + nodes_per_dag] for i in range(0, len(flat), nodes_per_dag)]


def count_params(net) -> int:
    """Number of trainable weight scalars in ``w`` (gamma and alpha excluded)."""
    return int(sum(t.size for _, t in net.weight_params()))
