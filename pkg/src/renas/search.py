"""Alternating weight / architecture optimization with two-path sampling."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .autograd import Tape, Tensor, cross_entropy, softmax
from .checkpoint import Checkpoint, save_checkpoint
from .config import ConfigError, SearchConfig
from .data import Dataset, ImageBatch, SyntheticSpec, augment_flip, epoch_order, gen_synthetic, load_cifar10
from .data import split_dataset  # noqa: F401  re-exported as part of the search API
from .optim import AdamState, CosineSchedule, SgdMomentumState, adam_step, cosine_lr, sgd_momentum_step
from .supergraph import ParentNetwork, build_parent, nest_choices, network_forward

logger = logging.getLogger(__name__)


# ----------------------------------------------------------------------------
# two-path sampling and its gradient
# ----------------------------------------------------------------------------


@dataclass
class TwoPathSample:
    op_m: int
    op_n: int
    p_m: float
    p_n: float
    g_m: Optional[Tensor] = None
    g_n: Optional[Tensor] = None


def _draw(probs: np.ndarray, rng: np.random.Generator) -> int:
    cdf = np.cumsum(probs)
    idx = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(idx, len(probs) - 1)


def sample_two_paths(alpha_row: np.ndarray, rng: np.random.Generator) -> TwoPathSample:
    """Draw two distinct ops: the first from softmax(alpha), the second from the renormalized rest."""
    alpha_row = np.asarray(alpha_row, dtype=np.float64)
    if alpha_row.size < 2:
        raise ValueError("two-path sampling needs at least 2 candidate operations")
    probs = softmax(alpha_row)
    m = _draw(probs, rng)
    rest = probs.copy()
    rest[m] = 0.0
    if rest.sum() <= 0.0:
        # softmax underflowed for every other op; pick uniformly among them
        rest = np.ones_like(rest)
        rest[m] = 0.0
    n = _draw(rest, rng)
    pair = softmax(alpha_row[[m, n]])
    return TwoPathSample(m, n, float(pair[0]), float(pair[1]))


def alpha_grad(sample: TwoPathSample, dL_dg) -> dict[int, float]:
    """Per-op gradient ``dL/da_m = sum_n dL/dg_n * p_n * (delta_mn - p_m)`` over the sampled pair.

    With two paths and ``p_m + p_n = 1`` the sum collapses to
    ``+-p_m * p_n * (dL/dg_m - dL/dg_n)``; evaluating that form keeps the pair
    exactly antisymmetric in floating point.
    """
    g = sample.p_m * sample.p_n * (float(dL_dg[0]) - float(dL_dg[1]))
    return {sample.op_m: g, sample.op_n: -g}


# ----------------------------------------------------------------------------
# training state
# ----------------------------------------------------------------------------


@dataclass
class BatchStream:
    """Endless seeded epoch-by-epoch batches over one dataset."""

    dataset: Dataset
    batch_size: int
    seed: int
    epoch: int = 0
    pos: int = 0
    _order: Optional[np.ndarray] = field(default=None, repr=False)

    def next(self) -> ImageBatch:
        n = len(self.dataset)
        if n == 0:
            raise ValueError("cannot draw batches from an empty dataset")
        if self._order is None:
            self._order = epoch_order(n, self.seed, self.epoch)
        if self.pos >= n:
            self.epoch += 1
            self.pos = 0
            self._order = epoch_order(n, self.seed, self.epoch)
        idx = self._order[self.pos : self.pos + self.batch_size]
        self.pos += len(idx)
        return self.dataset.batch(idx)


@dataclass
class TrainState:
    config: SearchConfig
    net: ParentNetwork
    rng: np.random.Generator
    train_stream: BatchStream
    val_stream: BatchStream
    step: int = 0
    sgd: dict = field(default_factory=dict)
    adam: AdamState = field(default_factory=AdamState)
    history: list = field(default_factory=list)
    normalization: dict = field(default_factory=dict)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [("w/" + n, t) for n, t in self.net.weight_params()] + [
            ("gamma/" + n, t) for n, t in self.net.gamma_params()
        ]


def new_state(config: SearchConfig, train: Dataset, val: Dataset) -> TrainState:
    net = build_parent(config)
    schedule = CosineSchedule(config.lr_w, max(config.total_steps, 1))
    state = TrainState(
        config=config,
        net=net,
        rng=np.random.default_rng([config.seed, 1]),
        train_stream=BatchStream(train, config.batch_size, config.seed * 2 + 11),
        val_stream=BatchStream(val, config.batch_size, config.seed * 2 + 12),
        adam=AdamState(lr=config.lr_alpha),
        normalization={"mean": [float(v) for v in train.mean], "std": [float(v) for v in train.std]},
    )
    state.sgd = {name: SgdMomentumState(schedule, config.momentum) for name, _ in state.trainable()}
    return state


def _first_nonfinite(named: list[tuple[str, Tensor]]) -> Optional[str]:
    for name, t in named:
        if not np.all(np.isfinite(t.data)):
            return name
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            return name + ".grad"
    return None


def _check_finite(state: TrainState, loss: Tensor, where: str) -> None:
    if np.isfinite(loss.item()):
        return
    culprit = _first_nonfinite(state.trainable()) or "loss"
    raise FloatingPointError(f"{where} at step {state.step}: non-finite loss; first non-finite tensor: {culprit}")


def clip_grad_norm(tensors, max_norm: float) -> float:
    """Rescale grads in place so their joint L2 norm is at most ``max_norm``. Returns the pre-clip norm."""
    grads = [t.grad for t in tensors if t.grad is not None]
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for t in tensors:
            if t.grad is not None:
                t.grad = t.grad * factor
    return norm


def sample_ops(net: ParentNetwork, rng: np.random.Generator) -> list[int]:
    """One op per node drawn from softmax(alpha)."""
    return [_draw(softmax(row), rng) for row in net.alpha.scores]


def weight_step(state: TrainState, batch: Optional[ImageBatch] = None) -> float:
    """One SGD-momentum update of w and gamma on a hard-sampled path. Returns the loss."""
    net = state.net
    if batch is None:
        batch = state.train_stream.next()
        if state.config.augment:
            batch = augment_flip(batch, state.rng)
    choices = nest_choices(sample_ops(net, state.rng), net.config.N)
    params = state.trainable()
    for _, t in params:
        t.grad = None
    with Tape() as tape:
        loss = cross_entropy(network_forward(net, batch.images, choices), batch.labels)
    _check_finite(state, loss, "weight_step")
    tape.backward(loss)
    bad = _first_nonfinite(params)
    if bad:
        raise FloatingPointError(f"weight_step at step {state.step}: non-finite gradient in {bad}")
    clip_grad_norm([t for _, t in params], state.config.grad_clip)
    for name, t in params:
        if t.grad is not None:
            t.data = sgd_momentum_step(t.data, t.grad, state.sgd[name], state.step)
            t.grad = None
    return loss.item()


def alpha_step(state: TrainState, val_batch: Optional[ImageBatch] = None) -> float:
    """One Adam update of alpha from two-path gradients; w and gamma stay fixed. Returns the loss."""
    net = state.net
    if val_batch is None:
        val_batch = state.val_stream.next()
    O = len(net.config.op_set)
    samples: list[Optional[TwoPathSample]] = []
    flat = []
    for row in net.alpha.scores:
        if O < 2:
            samples.append(None)
            flat.append(0)
            continue
        s = sample_two_paths(row, state.rng)
        s.g_m = Tensor(np.array([s.p_m]), requires_grad=True)
        s.g_n = Tensor(np.array([s.p_n]), requires_grad=True)
        samples.append(s)
        flat.append(((s.op_m, s.g_m), (s.op_n, s.g_n)))
    params = state.trainable()
    saved = [t.requires_grad for _, t in params]
    for _, t in params:
        t.requires_grad = False
    try:
        with Tape() as tape:
            loss = cross_entropy(network_forward(net, val_batch.images, nest_choices(flat, net.config.N)), val_batch.labels)
        _check_finite(state, loss, "alpha_step")
        grad = np.zeros_like(net.alpha.scores)
        if O >= 2:
            tape.backward(loss)
            for r, s in enumerate(samples):
                dg = (float(s.g_m.grad[0]), float(s.g_n.grad[0]))
                for op, val in alpha_grad(s, dg).items():
                    grad[r, op] += val
    finally:
        for (_, t), flag in zip(params, saved):
            t.requires_grad = flag
    if O >= 2:
        net.alpha.scores = adam_step(net.alpha.scores, grad, state.adam)
    return loss.item()


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


def argmax_choices(net: ParentNetwork) -> list[list[int]]:
    return nest_choices([int(np.argmax(row)) for row in net.alpha.scores], net.config.N)


def evaluate(forward: Callable[[Tensor], Tensor], dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    """Mean cross-entropy and accuracy of ``forward`` over a whole dataset, in index order."""
    total_loss = 0.0
    correct = 0
    n = len(dataset)
    for start in range(0, n, batch_size):
        b = dataset.batch(np.arange(start, min(n, start + batch_size)))
        logits = forward(b.images)
        total_loss += cross_entropy(logits, b.labels).item() * len(b)
        correct += int(np.sum(np.argmax(logits.data, axis=1) == b.labels))
    return total_loss / n, correct / n


def evaluate_parent(net: ParentNetwork, dataset: Dataset, batch_size: int = 256) -> tuple[float, float]:
    choices = argmax_choices(net)
    return evaluate(lambda x: network_forward(net, x, choices), dataset, batch_size)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------


def make_checkpoint(state: TrainState) -> Checkpoint:
    arrays = {}
    for name, t in state.trainable():
        arrays[name] = t.data
    arrays["alpha"] = state.net.alpha.scores
    for name, _ in state.trainable():
        v = state.sgd[name].velocity
        if v is not None:
            arrays["sgd/" + name] = v
    if state.adam.m is not None:
        arrays["adam/m"] = state.adam.m
        arrays["adam/v"] = state.adam.v
    cursors = {
        "train": [state.train_stream.epoch, state.train_stream.pos],
        "val": [state.val_stream.epoch, state.val_stream.pos],
    }
    return Checkpoint(
        config=state.config,
        step=state.step,
        arrays=arrays,
        rng_state=state.rng.bit_generator.state,
        cursors=cursors,
        adam_step_count=state.adam.step_count,
        normalization=state.normalization,
    )


def load_into_net(net: ParentNetwork, ckpt: Checkpoint) -> ParentNetwork:
    named = [("w/" + n, t) for n, t in net.weight_params()] + [("gamma/" + n, t) for n, t in net.gamma_params()]
    for name, t in named:
        if name not in ckpt.arrays:
            raise ValueError(f"checkpoint lacks array {name}")
        arr = ckpt.arrays[name]
        if arr.shape != t.shape:
            raise ValueError(f"checkpoint array {name} has shape {arr.shape}, network expects {t.shape}")
        t.data = arr.copy()
    net.alpha.scores = ckpt.arrays["alpha"].copy()
    return net


def network_from_checkpoint(ckpt: Checkpoint) -> ParentNetwork:
    return load_into_net(build_parent(ckpt.config), ckpt)


def restore_state(ckpt: Checkpoint, train: Dataset, val: Dataset) -> TrainState:
    """Rebuild a TrainState that continues exactly where ``ckpt`` left off."""
    state = new_state(ckpt.config, train, val)
    load_into_net(state.net, ckpt)
    state.step = ckpt.step
    state.rng.bit_generator.state = ckpt.rng_state
    for name in state.sgd:
        if "sgd/" + name in ckpt.arrays:
            state.sgd[name].velocity = ckpt.arrays["sgd/" + name].copy()
    if "adam/m" in ckpt.arrays:
        state.adam.m = ckpt.arrays["adam/m"].copy()
        state.adam.v = ckpt.arrays["adam/v"].copy()
    state.adam.step_count = ckpt.adam_step_count
    for stream, key in ((state.train_stream, "train"), (state.val_stream, "val")):
        stream.epoch, stream.pos = ckpt.cursors[key]
        stream._order = None
        if stream.pos:
            stream._order = epoch_order(len(stream.dataset), stream.seed, stream.epoch)
    state.normalization = ckpt.normalization
    return state


def param_digest(tensors) -> str:
    """SHA-256 over the raw bytes of a parameter group."""
    h = hashlib.sha256()
    for t in tensors:
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


# ----------------------------------------------------------------------------
# driver
# ----------------------------------------------------------------------------


def resolve_dataset(config: SearchConfig) -> tuple[Dataset, Dataset]:
    """Load or generate the (train, test) datasets named by ``config.dataset``."""
    desc = dict(config.dataset or {})
    kind = desc.get("kind", "synthetic")
    if kind == "cifar10":
        path = desc.get("path")
        if not path or not os.path.isdir(path):
            raise FileNotFoundError(f"CIFAR-10 directory not found: {path!r}")
        train, test = load_cifar10(path)
    elif kind == "synthetic":
        spec = SyntheticSpec(
            classes=config.classes,
            side=config.image_size,
            noise_sigma=float(desc.get("noise_sigma", 0.3)),
            samples_per_class=int(desc.get("samples_per_class", 500)),
            seed=int(desc.get("seed", config.seed)),
            channels=config.in_channels,
        )
        train, test = gen_synthetic(spec)
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    check_dataset(config, train)
    return train, test


def check_dataset(config: SearchConfig, train: Dataset) -> None:
    _, C, H, W = train.images.shape
    if train.classes != config.classes:
        raise ConfigError(f"dataset has {train.classes} classes, config expects {config.classes}")
    if C != config.in_channels or H != config.image_size or W != config.image_size:
        raise ConfigError(f"dataset images are {C}x{H}x{W}, config expects {config.in_channels}x{config.image_size}x{config.image_size}")
    if config.val_size >= len(train):
        raise ConfigError(f"val_size {config.val_size} must be smaller than the {len(train)} training samples")


@dataclass
class SearchResult:
    state: TrainState
    checkpoint: Checkpoint
    initial_val_loss: float
    final_val_loss: float
    test: Optional[Dataset] = None


def run_search(
    config: SearchConfig,
    train: Optional[Dataset] = None,
    test: Optional[Dataset] = None,
    checkpoint_dir: Optional[str] = None,
    checkpoint_every: int = 0,
    on_step: Optional[Callable[[dict], None]] = None,
    resume_from: Optional[Checkpoint] = None,
) -> SearchResult:
    """Build the parent network and alternate weight and alpha steps for ``total_steps``.

    Datasets default to those described by ``config.dataset``. Validation loss is
    measured on the alpha split with argmax operations before and after the search.
    With ``resume_from`` the search continues from that checkpoint's step instead
    of a fresh network; its config must equal ``config``, and ``initial_val_loss``
    then refers to the resumed network.
    """
    config.validate()
    if resume_from is not None and resume_from.config != config:
        raise ConfigError("resume checkpoint was written with a different config")
    if train is None:
        train, test = resolve_dataset(config)
    else:
        check_dataset(config, train)
    w_train, a_val = split_dataset(train, config.val_size, config.seed)
    if resume_from is None:
        state = new_state(config, w_train, a_val)
    else:
        state = restore_state(resume_from, w_train, a_val)
    initial_val = evaluate_parent(state.net, a_val)[0] if len(a_val) else float("nan")
    while state.step < config.total_steps:
        lr = cosine_lr(state.step, state.sgd["w/stem"].schedule)
        train_loss = weight_step(state)
        val_loss = alpha_step(state) if len(a_val) else float("nan")
        record = {"step": state.step, "train_loss": train_loss, "val_loss": val_loss, "lr": lr}
        state.history.append(record)
        if on_step is not None:
            on_step(record)
        state.step += 1
        if checkpoint_dir and checkpoint_every and state.step % checkpoint_every == 0:
            _write(make_checkpoint(state), os.path.join(checkpoint_dir, f"ckpt_{state.step:07d}.bin"))
    final_val = evaluate_parent(state.net, a_val)[0] if len(a_val) else float("nan")
    ckpt = make_checkpoint(state)
    if checkpoint_dir:
        _write(ckpt, os.path.join(checkpoint_dir, "final.bin"))
    logger.info("search done: val loss %.4f -> %.4f", initial_val, final_val)
    return SearchResult(state, ckpt, initial_val, final_val, test)


def _write(ckpt: Checkpoint, path: str) -> None:
    try:
        save_checkpoint(ckpt, path)
    except OSError as exc:
        raise OSError(f"checkpoint write failed at step {ckpt.step}; state up to that step is in memory only: {exc}") from exc
