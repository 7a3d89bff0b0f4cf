"""Turn a searched parent network into a fixed architecture, and account for the search space."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .autograd import Tape, Tensor, add, channel_slice, concat_channels, conv2d, cross_entropy, relu, scale
from .checkpoint import Checkpoint, CheckpointError, atomic_write, load_checkpoint
from .config import SearchConfig
from .optim import CosineSchedule, SgdMomentumState, sgd_momentum_step
from .supergraph import (
    ParentNetwork,
    _init_op,
    _uniform,
    apply_op,
    check_input,
    head,
    network_forward,
    nest_choices,
)

ARCH_VERSION = 1


# ----------------------------------------------------------------------------
# pruning and op selection
# ----------------------------------------------------------------------------


def retain_top_half(values) -> np.ndarray:
    """Boolean mask keeping the ceil(n/2) largest values; ties go to the lower index."""
    values = np.asarray(values, dtype=np.float64)
    keep = np.zeros(values.size, dtype=bool)
    order = np.argsort(-values, kind="stable")
    keep[order[: math.ceil(values.size / 2)]] = True
    return keep


def prune_connections(gamma: dict) -> dict:
    """Per target node, keep the top half of all incoming block connections by gamma.

    ``gamma`` maps ``(i, j)`` or ``(dag, i, j)`` to a K x K array (or Tensor);
    the result maps the same keys to K x K boolean masks. Incoming connections
    of a target are ranked in (source node, source block, target block) order.
    """
    groups: dict[tuple, list] = {}
    for key in sorted(gamma):
        groups.setdefault(key[:-2] + (key[-1],), []).append(key)
    mask = {}
    for keys in groups.values():
        mats = [np.asarray(gamma[k].data if isinstance(gamma[k], Tensor) else gamma[k], dtype=np.float64) for k in keys]
        flat_keep = retain_top_half(np.concatenate([m.reshape(-1) for m in mats]))
        pos = 0
        for key, m in zip(keys, mats):
            mask[key] = flat_keep[pos : pos + m.size].reshape(m.shape)
            pos += m.size
    return mask


def select_operations(alpha) -> list[int]:
    """Argmax op per node (lowest index on ties)."""
    scores = alpha.scores if hasattr(alpha, "scores") else np.asarray(alpha)
    return [int(np.argmax(row)) for row in np.atleast_2d(scores)]


# ----------------------------------------------------------------------------
# derived architecture
# ----------------------------------------------------------------------------


@dataclass
class DerivedArchitecture:
    config: SearchConfig
    ops: list  # flat, dag-major
    mask: dict  # (dag, i, j) -> bool (K, K)
    gamma: dict  # (dag, i, j) -> float (K, K), zero where pruned
    provenance: dict = field(default_factory=dict)
    stem: Optional[Tensor] = None
    node_weights: dict = field(default_factory=dict)  # (dag, node) -> [block] -> list of Tensors
    head_w: Optional[Tensor] = None
    head_b: Optional[Tensor] = None
    train_gamma: bool = False
    _gamma_tensors: dict = field(default_factory=dict, repr=False)

    def op_of(self, dag: int, node: int) -> int:
        return self.ops[dag * self.config.N + node]

    def connections(self, dag: int, j: int) -> list[tuple[int, int, int, float]]:
        """Retained (src_node, src_block, dst_block, gamma) into node ``j``."""
        out = []
        for i in range(j):
            m = self.mask[(dag, i, j)]
            for l, k in zip(*np.nonzero(m)):
                out.append((i, int(l), int(k), float(self.gamma[(dag, i, j)][l, k])))
        return out

    def gamma_tensor(self, dag: int, i: int, j: int, l: int, k: int) -> Tensor:
        key = (dag, i, j, l, k)
        t = self._gamma_tensors.get(key)
        if t is None or t.data[0] != self.gamma[(dag, i, j)][l, k]:
            t = Tensor(np.array([self.gamma[(dag, i, j)][l, k]]), requires_grad=self.train_gamma)
            self._gamma_tensors[key] = t
        return t

    def weight_params(self) -> list[tuple[str, Tensor]]:
        if self.stem is None:
            raise ValueError("architecture has no weights; call init_weights first")
        out = [("stem", self.stem)]
        for d in range(self.config.M):
            for j in range(self.config.N):
                for b, ws in enumerate(self.node_weights[(d, j)]):
                    for t, w in enumerate(ws):
                        out.append((f"d{d}.n{j}.b{b}.w{t}", w))
        out.append(("head.w", self.head_w))
        out.append(("head.b", self.head_b))
        return out

    def retained_fraction(self) -> float:
        kept = sum(int(m.sum()) for m in self.mask.values())
        total = sum(m.size for m in self.mask.values())
        return kept / total if total else 1.0

    def retained_count(self) -> int:
        return int(sum(int(m.sum()) for m in self.mask.values()))


def _as_checkpoint(src) -> Checkpoint:
    if isinstance(src, Checkpoint):
        return src
    try:
        return load_checkpoint(src)
    except CheckpointError:
        raise
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{src}: cannot read checkpoint ({exc})") from exc


def derive_from_network(net: ParentNetwork, provenance: Optional[dict] = None) -> DerivedArchitecture:
    cfg = net.config
    gamma = {(d.dag_index, i, j): g.data.copy() for d in net.dags for (i, j), g in d.gamma.items()}
    mask = prune_connections(gamma)
    ops = select_operations(net.alpha)
    arch = DerivedArchitecture(
        config=cfg,
        ops=ops,
        mask=mask,
        gamma={key: np.where(mask[key], gamma[key], 0.0) for key in gamma},
        provenance=dict(provenance or {}),
    )
    arch.stem = Tensor(net.stem.data.copy(), requires_grad=True)
    for dag in net.dags:
        for node in dag.nodes:
            op = arch.op_of(dag.dag_index, node.node_index)
            arch.node_weights[(dag.dag_index, node.node_index)] = [
                [Tensor(w.data.copy(), requires_grad=True) for w in per_block] for per_block in node.op_weights[op]
            ]
    arch.head_w = Tensor(net.head_w.data.copy(), requires_grad=True)
    arch.head_b = Tensor(net.head_b.data.copy(), requires_grad=True)
    return arch


def derive(checkpoint) -> DerivedArchitecture:
    """Argmax operations plus top-half connections from a checkpoint (object or path)."""
    from .search import network_from_checkpoint

    ckpt = _as_checkpoint(checkpoint)
    try:
        net = network_from_checkpoint(ckpt)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint at step {ckpt.step} (sha256 {ckpt.sha256()[:12]}) is inconsistent: {exc}") from exc
    prov = {"seed": ckpt.config.seed, "step": ckpt.step, "checkpoint_hash": ckpt.sha256()}
    return derive_from_network(net, prov)


def init_weights(arch: DerivedArchitecture, seed: int) -> DerivedArchitecture:
    """Fresh fan-in-scaled weights for the chosen ops (for retraining from scratch)."""
    cfg = arch.config
    rng = np.random.default_rng(seed)
    arch.stem = _uniform(rng, (cfg.C0, cfg.in_channels, 3, 3), np.sqrt(6.0 / (cfg.in_channels * 9)))
    in_ch = cfg.C0
    for d in range(cfg.M):
        ch = 2 * in_ch
        for j in range(cfg.N):
            in_width = in_ch if j == 0 else ch // cfg.K
            op = cfg.op_set[arch.op_of(d, j)]
            arch.node_weights[(d, j)] = [_init_op(rng, op, in_width, ch // cfg.K) for _ in range(cfg.K)]
        in_ch = ch
    arch.head_w = _uniform(rng, (cfg.classes, in_ch), 1.0 / np.sqrt(in_ch))
    arch.head_b = Tensor(np.zeros(cfg.classes), requires_grad=True)
    return arch


def derived_forward(arch: DerivedArchitecture, images: Tensor) -> Tensor:
    """Logits of the derived network, routing only through retained connections."""
    cfg = arch.config
    if images.data.ndim != 4 or images.shape[1] != cfg.in_channels:
        raise ValueError(f"expected (batch, {cfg.in_channels}, H, W) images, got {images.shape}")
    K = cfg.K
    h = relu(conv2d(images, arch.stem, 1, 1))
    for d in range(cfg.M):
        outputs: list[Tensor] = []
        for j in range(cfg.N):
            name = cfg.op_set[arch.op_of(d, j)]
            weights = arch.node_weights[(d, j)]
            if j == 0:
                blocks_out = [apply_op(name, weights[k], h, 2) for k in range(K)]
            else:
                width = outputs[0].shape[1] // K
                routed: list[Optional[Tensor]] = [None] * K
                for i, l, k, _ in arch.connections(d, j):
                    src = channel_slice(outputs[i], l * width, (l + 1) * width)
                    term = scale(src, arch.gamma_tensor(d, i, j, l, k))
                    routed[k] = term if routed[k] is None else add(routed[k], term)
                ref = outputs[0].shape
                blocks_out = []
                for k in range(K):
                    x = routed[k] if routed[k] is not None else Tensor(np.zeros((ref[0], width) + ref[2:]))
                    blocks_out.append(apply_op(name, weights[k], x, 1))
            outputs.append(concat_channels(blocks_out) if K > 1 else blocks_out[0])
        h = outputs[-1]
    return head(h, arch.head_w, arch.head_b)


def masked_parent_forward(parent: ParentNetwork, arch: DerivedArchitecture, images: Tensor) -> Tensor:
    """Parent logits with pruned gammas zeroed and ops fixed to the derived choice."""
    saved = {}
    for dag in parent.dags:
        for (i, j), g in dag.gamma.items():
            saved[(dag.dag_index, i, j)] = g.data
            g.data = np.where(arch.mask[(dag.dag_index, i, j)], g.data, 0.0)
    try:
        return network_forward(parent, images, nest_choices(arch.ops, parent.config.N))
    finally:
        for dag in parent.dags:
            for (i, j), g in dag.gamma.items():
                g.data = saved[(dag.dag_index, i, j)]


def check_equivalence(parent: ParentNetwork, derived: DerivedArchitecture, images: Tensor) -> float:
    """Max |logit difference| between the masked parent and the derived network."""
    check_input(parent, images)
    a = masked_parent_forward(parent, derived, images)
    b = derived_forward(derived, images)
    if a.shape != b.shape:
        raise ValueError(f"logit shapes differ: parent {a.shape} vs derived {b.shape}")
    return float(np.max(np.abs(a.data - b.data)))


def retrain(arch: DerivedArchitecture, train, steps: int, batch_size: int = 32, lr: float = 0.05, seed: int = 0) -> list[float]:
    """SGD-momentum (cosine) training of the derived weights; gamma only if ``train_gamma``."""
    from .search import BatchStream

    if steps <= 0:
        return []
    stream = BatchStream(train, batch_size, seed)
    schedule = CosineSchedule(lr, steps)
    params = list(arch.weight_params())
    states = {name: SgdMomentumState(schedule, 0.9) for name, _ in params}
    losses = []
    for step in range(steps):
        batch = stream.next()
        gammas = []
        with Tape() as tape:
            loss = cross_entropy(derived_forward(arch, batch.images), batch.labels)
            gammas = list(arch._gamma_tensors.items()) if arch.train_gamma else []
        tape.backward(loss)
        for name, t in params:
            if t.grad is not None:
                t.data = sgd_momentum_step(t.data, t.grad, states[name], step)
                t.grad = None
        for key, t in gammas:
            if t.grad is not None:
                state = states.setdefault(f"gamma{key}", SgdMomentumState(schedule, 0.9))
                t.data = sgd_momentum_step(t.data, t.grad, state, step)
                d, i, j, l, k = key
                arch.gamma[(d, i, j)][l, k] = t.data[0]
                t.grad = None
        losses.append(loss.item())
    return losses


# ----------------------------------------------------------------------------
# counting
# ----------------------------------------------------------------------------


def search_space_size(M: int, N: int, O: int) -> int:
    """Exact number of networks: ``M * O**N * 2**(N(N-1)/2)``."""
    for name, v in (("M", M), ("N", N), ("O", O)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    M, N, O = int(M), int(N), int(O)
    return M * O**N * 2 ** (N * (N - 1) // 2)


# ----------------------------------------------------------------------------
# export / import
# ----------------------------------------------------------------------------


def arch_to_dict(arch: DerivedArchitecture) -> dict:
    from .supergraph import count_params

    cfg = arch.config
    dags = []
    for d in range(cfg.M):
        nodes = []
        for j in range(cfg.N):
            ins = [
                {"src_node": i, "src_block": l, "dst_block": k, "gamma": g} for i, l, k, g in arch.connections(d, j)
            ]
            nodes.append({"op": arch.op_of(d, j), "in": ins})
        dags.append({"nodes": nodes})
    return {
        "version": ARCH_VERSION,
        "config": {
            "M": cfg.M,
            "N": cfg.N,
            "K": cfg.K,
            "C0": cfg.C0,
            "classes": cfg.classes,
            "op_set": list(cfg.op_set),
            "in_channels": cfg.in_channels,
            "image_size": cfg.image_size,
        },
        "dags": dags,
        "provenance": {
            "seed": arch.provenance.get("seed"),
            "step": arch.provenance.get("step"),
            "checkpoint_hash": arch.provenance.get("checkpoint_hash"),
        },
        "param_count": count_params(arch) if arch.stem is not None else param_count_from_config(arch),
    }


def param_count_from_config(arch: DerivedArchitecture) -> int:
    from .supergraph import op_weight_shapes

    cfg = arch.config
    total = cfg.C0 * cfg.in_channels * 9
    in_ch = cfg.C0
    for d in range(cfg.M):
        ch = 2 * in_ch
        for j in range(cfg.N):
            in_width = in_ch if j == 0 else ch // cfg.K
            shapes = op_weight_shapes(cfg.op_set[arch.op_of(d, j)], in_width, ch // cfg.K)
            total += cfg.K * sum(int(np.prod(s)) for s in shapes)
        in_ch = ch
    return total + cfg.classes * in_ch + cfg.classes


def arch_to_json(arch: DerivedArchitecture) -> str:
    return json.dumps(arch_to_dict(arch), indent=1) + "\n"


def arch_from_dict(doc: dict) -> DerivedArchitecture:
    if doc.get("version") != ARCH_VERSION:
        raise ValueError(f"unsupported architecture version {doc.get('version')!r}")
    c = doc["config"]
    cfg = SearchConfig(
        M=c["M"],
        N=c["N"],
        K=c["K"],
        C0=c["C0"],
        classes=c["classes"],
        op_set=tuple(c["op_set"]),
        in_channels=c.get("in_channels", 3),
        image_size=c.get("image_size", 32),
        seed=doc["provenance"].get("seed") or 0,
    )
    cfg.validate()
    if len(doc["dags"]) != cfg.M:
        raise ValueError(f"architecture lists {len(doc['dags'])} DAGs, config says M={cfg.M}")
    K = cfg.K
    ops, mask, gamma = [], {}, {}
    for d, dag in enumerate(doc["dags"]):
        if len(dag["nodes"]) != cfg.N:
            raise ValueError(f"DAG {d} lists {len(dag['nodes'])} nodes, config says N={cfg.N}")
        for j in range(1, cfg.N):
            for i in range(j):
                mask[(d, i, j)] = np.zeros((K, K), dtype=bool)
                gamma[(d, i, j)] = np.zeros((K, K))
        for j, node in enumerate(dag["nodes"]):
            if not 0 <= node["op"] < len(cfg.op_set):
                raise ValueError(f"DAG {d} node {j}: op index {node['op']} outside op_set")
            ops.append(node["op"])
            for e in node["in"]:
                key = (d, e["src_node"], j)
                if key not in mask:
                    raise ValueError(f"DAG {d}: connection from node {e['src_node']} into node {j} violates ordering")
                mask[key][e["src_block"], e["dst_block"]] = True
                gamma[key][e["src_block"], e["dst_block"]] = e["gamma"]
    return DerivedArchitecture(config=cfg, ops=ops, mask=mask, gamma=gamma, provenance=dict(doc["provenance"]))


def arch_to_dot(arch: DerivedArchitecture) -> str:
    """DOT digraph: one node per channel block, one cluster per DAG, one edge per retained connection."""
    cfg = arch.config
    lines = ["digraph derived {", "  rankdir=LR;", '  stem [shape=box, label="stem"];', '  head [shape=box, label="head"];']
    for d in range(cfg.M):
        lines.append(f"  subgraph cluster_dag{d} {{")
        lines.append(f'    label="dag {d}";')
        for j in range(cfg.N):
            op = cfg.op_set[arch.op_of(d, j)]
            for k in range(cfg.K):
                lines.append(f'    d{d}_n{j}_b{k} [label="n{j}.b{k}\\n{op}"];')
        lines.append("  }")
    for d in range(cfg.M):
        for j in range(cfg.N):
            for i, l, k, g in arch.connections(d, j):
                lines.append(f'  d{d}_n{i}_b{l} -> d{d}_n{j}_b{k} [label="{g:.4g}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"


def export_arch(arch: DerivedArchitecture, path: str, format: str = "json") -> str:
    if format == "json":
        text = arch_to_json(arch)
    elif format == "dot":
        text = arch_to_dot(arch)
    else:
        raise ValueError(f"unknown export format {format!r}")
    atomic_write(path, text.encode())
    return path


def import_arch(path: str) -> DerivedArchitecture:
    with open(path) as fh:
        return arch_from_dict(json.load(fh))


# weights travel in a sidecar file using the checkpoint container
def save_arch_weights(arch: DerivedArchitecture, path: str) -> str:
    arrays = {name: t.data for name, t in arch.weight_params()}
    atomic_write(path, Checkpoint(config=arch.config, step=arch.provenance.get("step") or 0, arrays=arrays).to_bytes())
    return path


def load_arch_weights(arch: DerivedArchitecture, path: str) -> DerivedArchitecture:
    ckpt = load_checkpoint(path)
    init_weights(arch, 0)
    for name, t in arch.weight_params():
        if name not in ckpt.arrays or ckpt.arrays[name].shape != t.shape:
            raise CheckpointError(f"{path}: weight {name} missing or mis-shaped")
        t.data = ckpt.arrays[name].copy()
    return arch


ARCH_SCHEMA = {
    "type": "object",
    "required": ["version", "config", "dags", "provenance", "param_count"],
    "properties": {
        "version": {"const": ARCH_VERSION},
        "config": {
            "type": "object",
            "required": ["M", "N", "K", "C0", "classes", "op_set"],
            "properties": {
                "M": {"type": "integer", "minimum": 1},
                "N": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "C0": {"type": "integer", "minimum": 1},
                "classes": {"type": "integer", "minimum": 2},
                "op_set": {"type": "array", "items": {"type": "string"}, "minItems": 1},
                "in_channels": {"type": "integer", "minimum": 1},
                "image_size": {"type": "integer", "minimum": 1},
            },
        },
        "dags": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["nodes"],
                "properties": {
                    "nodes": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["op", "in"],
                            "properties": {
                                "op": {"type": "integer", "minimum": 0},
                                "in": {
                                    "type": "array",
                                    "items": {
                                        "type": "object",
                                        "required": ["src_node", "src_block", "dst_block", "gamma"],
                                        "properties": {
                                            "src_node": {"type": "integer", "minimum": 0},
                                            "src_block": {"type": "integer", "minimum": 0},
                                            "dst_block": {"type": "integer", "minimum": 0},
                                            "gamma": {"type": "number"},
                                        },
                                        "additionalProperties": False,
                                    },
                                },
                            },
                        },
                    }
                },
            },
        },
        "provenance": {
            "type": "object",
            "required": ["seed", "step", "checkpoint_hash"],
        },
        "param_count": {"type": "integer", "minimum": 0},
    },
}


def validate_arch_doc(doc: dict) -> None:
    import jsonschema

    jsonschema.validate(doc, ARCH_SCHEMA)


def derive_path_or_net(src: Union[str, Checkpoint, ParentNetwork]) -> DerivedArchitecture:
    if isinstance(src, ParentNetwork):
        return derive_from_network(src)
    return derive(src)
