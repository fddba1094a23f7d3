"""Two-stage training: weights and biases first, activation bounds second.

Stage one (:func:`train_accuracy`) fits weights and biases of a plain-ReLU
network with mini-batch Adam on cross-entropy. :func:`modify_architecture`
then swaps every hidden ReLU for a per-neuron ``fitrelu`` whose bound starts
at the neuron's largest observed activation. Stage two
(:func:`post_train_bounds`) moves only the bounds, minimising

    cross_entropy + zeta / N * sum(bound ** 2)

while keeping validation accuracy within ``delta`` of the ReLU network's.

Parameters are stored as Q15.16 words. Optimisers keep float64 master copies
and re-quantize into the words after every step, so the forward pass always
sees exactly what is in memory.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import activations as act
from .data import DataError, Dataset
from .network import (
    Network, backward, forward, forward_trace, parse_buffer_id, relu_variant,
    set_bounds, with_bounds,
)
from .numerics import decode_array, encode_array

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        self.step = step
        super().__init__(f"loss became non-finite ({loss}) at step {step}")


class StageOrderError(RuntimeError):
    """A stage was run on a network that has not been through its prerequisites."""


class NoFeasibleCheckpointError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam over a dict of float arrays, updated in place."""

    def __init__(self, params: dict[str, np.ndarray], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.state = AdamState(lr, beta1, beta2, eps)
        for k, p in params.items():
            self.state.m[k] = np.zeros_like(p)
            self.state.v[k] = np.zeros_like(p)

    def step(self, grads: dict[str, np.ndarray]) -> None:
        s = self.state
        s.t += 1
        c1 = 1.0 - s.beta1 ** s.t
        c2 = 1.0 - s.beta2 ** s.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            s.m[k] = s.beta1 * s.m[k] + (1.0 - s.beta1) * g
            s.v[k] = s.beta2 * s.v[k] + (1.0 - s.beta2) * g * g
            p -= s.lr * (s.m[k] / c1) / (np.sqrt(s.v[k] / c2) + s.eps)


# ---------------------------------------------------------------------------
# losses

def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def bound_penalty(net: Network, zeta: float) -> float:
    store = net.bound_store()
    n = max(store.count, 1)
    return zeta / n * store.sum_squares()


def regularized_loss(net: Network, x, y, zeta: float, bounds=None) -> float:
    """Cross-entropy plus the bound penalty; ``bounds`` overrides stored values."""
    trace = forward_trace(net, x, bounds)
    ce, _ = cross_entropy(trace.output, np.asarray(y))
    store = net.bound_store()
    if bounds is not None:
        store.bounds.update({i: np.asarray(b, dtype=np.float64) for i, b in bounds.items()})
    return ce + zeta / max(store.count, 1) * store.sum_squares()


def bound_gradients(net: Network, x, y, zeta: float, bounds=None) -> dict[int, np.ndarray]:
    """d(regularized_loss)/d(bound) per bounded layer, by reverse mode."""
    trace = forward_trace(net, x, bounds)
    _, g = cross_entropy(trace.output, np.asarray(y))
    grads = backward(net, trace, g, want=("bound",))
    store = net.bound_store()
    if bounds is not None:
        store.bounds.update({i: np.asarray(b, dtype=np.float64) for i, b in bounds.items()})
    n = max(store.count, 1)
    out = {}
    for bid, gb in grads.items():
        i = parse_buffer_id(bid)[0]
        out[i] = gb + 2.0 * zeta / n * store.bounds[i]
    return out


# ---------------------------------------------------------------------------
# evaluation

def evaluate_accuracy(net: Network, dataset: Dataset, batch_size: int = 1024) -> float:
    """Top-1 accuracy; ties between logits go to the lowest class index."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    correct = 0
    for xb, yb in dataset.batches(batch_size):
        correct += int(np.sum(np.argmax(forward(net, xb), axis=1) == yb))
    return correct / len(dataset)


# ---------------------------------------------------------------------------
# stage one

@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 1e-3
    batch_size: int | None = 64  # None = full batch
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def _epoch_record(epoch, loss, acc, net):
    lam = net.bound_store().flat()
    rec = {"epoch": epoch, "loss": loss, "clean_accuracy": acc}
    if lam.size:
        rec.update(mean_bound=float(lam.mean()), min_bound=float(lam.min()), max_bound=float(lam.max()))
    return rec


def train_accuracy(net: Network, dataset: Dataset, config: TrainConfig = TrainConfig(),
                   history: list | None = None) -> Network:
    """Fit weights and biases; bounds (if any) are left alone.

    Returns a new network. Per-epoch records go to ``history`` when given.
    """
    if len(dataset) == 0:
        raise DataError("training set is empty")
    work = net.copy()
    names = [bid for bid, _ in work.buffers() if parse_buffer_id(bid)[1] in ("weight", "bias")]
    masters = {bid: decode_array(work.buffer(bid)) for bid in names}
    opt = Adam(masters, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng(config.seed)
    bs = config.batch_size or len(dataset)
    step = 0
    for epoch in range(1, config.epochs + 1):
        losses = []
        for xb, yb in dataset.batches(bs, rng):
            trace = forward_trace(work, xb)
            loss, g = cross_entropy(trace.output, yb)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            grads = backward(work, trace, g, want=("weight", "bias"))
            opt.step(grads)
            for bid in names:
                if not np.all(np.isfinite(masters[bid])):
                    raise TrainingDivergedError(step, float("nan"))
                work.buffer(bid)[...] = encode_array(masters[bid])
            losses.append(loss * len(yb))
        rec = _epoch_record(epoch, sum(losses) / len(dataset), evaluate_accuracy(work, dataset), work)
        log.debug("train %s", rec)
        if history is not None:
            history.append(rec)
    return work


# ---------------------------------------------------------------------------
# architecture modification

def modify_architecture(net: Network, dataset: Dataset, k: float = act.DEFAULT_SLOPE,
                        granularity: str = "element") -> Network:
    """Replace hidden ReLUs with ``fitrelu`` calibrated on ``dataset``.

    Weights and biases are copied word for word.
    """
    store = act.calibrate_bounds(net, dataset.x, granularity)
    return with_bounds(net, store, slope=k)


# ---------------------------------------------------------------------------
# stage two

@dataclass
class PostTrainConfig:
    zeta: float = 1e-3
    epochs: int = 20
    learning_rate: float = 1e-3
    delta: float = 0.01
    validation_fraction: float = 0.2
    batch_size: int | None = 64
    seed: int = 0
    evals_per_epoch: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("delta must be > 0")
        if self.zeta < 0:
            raise ValueError("zeta must be >= 0")


def post_train_bounds(net: Network, dataset: Dataset, cfg: PostTrainConfig = PostTrainConfig(),
                      validation: Dataset | None = None, history: list | None = None) -> Network:
    """Shrink per-neuron bounds under the accuracy budget ``cfg.delta``.

    Gradients come from ``dataset``; the budget is checked on ``validation``
    (or on a ``cfg.validation_fraction`` split of ``dataset``) against the same
    network with plain ReLU. Updates stop at the first evaluation that breaks
    the budget; the returned network carries the feasible checkpoint with the
    smallest sum of squared bounds. Bounds are kept at or above
    ``activations.BOUND_FLOOR``.
    """
    if not any(layer.activation.kind == "fitrelu" for layer in net.layers):
        raise StageOrderError("network has no fitrelu activations; run modify/calibrate first")
    if validation is None:
        dataset, validation = dataset.split(cfg.validation_fraction, cfg.seed)
    if len(dataset) == 0 or len(validation) == 0:
        raise DataError("post-training needs non-empty training and validation sets")

    work = net.copy()
    reference = evaluate_accuracy(relu_variant(work), validation)
    store = work.bound_store()
    n = store.count
    masters = {i: b.copy() for i, b in store.bounds.items()}
    opt = Adam(masters, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    bs = cfg.batch_size or len(dataset)
    n_batches = -(-len(dataset) // bs)
    eval_at = set(np.linspace(0, n_batches, cfg.evals_per_epoch + 1).round().astype(int)[1:])

    best = None

    def checkpoint(tag):
        nonlocal best
        acc = evaluate_accuracy(work, validation)
        penalty = work.bound_store().sum_squares()
        feasible = reference - acc < cfg.delta
        if feasible and (best is None or penalty < best[0]):
            best = (penalty, tag, {i: b.copy() for i, b in work.bound_store().bounds.items()})
        return acc, feasible

    acc, feasible = checkpoint(0)
    if history is not None:
        history.append({**_epoch_record(0, float("nan"), acc, work), "reference_accuracy": reference})
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if not feasible:
            break
        losses = []
        for b_idx, (xb, yb) in enumerate(dataset.batches(bs, rng), start=1):
            trace = forward_trace(work, xb)
            loss, g = cross_entropy(trace.output, yb)
            step += 1
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            raw = backward(work, trace, g, want=("bound",))
            stored = work.bound_store().bounds
            grads = {}
            for bid, gb in raw.items():
                i = parse_buffer_id(bid)[0]
                grads[i] = gb + 2.0 * cfg.zeta / n * stored[i]
            opt.step(grads)
            for i in masters:
                np.maximum(masters[i], act.BOUND_FLOOR, out=masters[i])
            set_bounds(work, act.BoundStore(masters, store.granularity))
            losses.append((loss + cfg.zeta / n * work.bound_store().sum_squares(), len(yb)))
            if b_idx in eval_at:
                acc, feasible = checkpoint((epoch, b_idx))
                if not feasible:
                    break
        seen = sum(c for _, c in losses)
        rec = _epoch_record(epoch, sum(v * c for v, c in losses) / max(seen, 1), acc, work)
        rec["reference_accuracy"] = reference
        log.debug("post-train %s", rec)
        if history is not None:
            history.append(rec)

    if best is None:
        raise NoFeasibleCheckpointError(
            f"no checkpoint kept validation accuracy within delta={cfg.delta} of {reference:.4f}; "
            "try a smaller zeta or a larger slope k")
    set_bounds(work, act.BoundStore(best[2], store.granularity))
    return work
