"""Losses, metrics, masked Adam, and the fine-tuning loop."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ContractError
from .peft import PeftStrategy, apply_freeze, trainable_mask
from .transformer import AudioTransformer, model_forward


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    b, c = logits.shape
    if labels.shape[0] != b:
        raise ContractError(f"{labels.shape[0]} labels for {b} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ContractError(f"labels must lie in [0, {c}), got {labels.tolist()}")
    onehot = np.zeros((b, c))
    onehot[np.arange(b), labels] = 1.0
    picked = ad.multiply(ad.log_softmax(logits, axis=-1), onehot)
    return ad.scale(ad.sum(picked), -1.0 / b)


def bce_multilabel(logits: Tensor, targets) -> Tensor:
    """Mean sigmoid binary cross-entropy, softplus(x) - x*y per element."""
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != logits.shape:
        raise ContractError(f"targets {targets.shape} do not match logits {logits.shape}")
    if not np.isin(targets, (0.0, 1.0)).all():
        raise ContractError("multi-label targets must be 0 or 1")
    return ad.mean(ad.softplus(logits) - ad.multiply(logits, targets))


def accuracy(logits, labels) -> float:
    scores = np.asarray(logits.data if isinstance(logits, Tensor) else logits)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape[0] < 1:
        raise ContractError("accuracy needs at least one sample")
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(scores, axis=-1) == labels))


def average_precision(scores: np.ndarray, targets: np.ndarray) -> float:
    order = np.argsort(-scores, kind="stable")
    hits = targets[order] > 0
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.cumsum(hits)[hits] / ranks))


def mean_average_precision(scores, targets) -> float:
    """Macro average over classes of precision at each positive's rank.

    Classes without any positive are skipped.
    """
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    targets = np.asarray(targets)
    if scores.shape != targets.shape or scores.ndim != 2:
        raise ContractError(f"scores {scores.shape} and targets {targets.shape} must be matching [B, C]")
    aps = [average_precision(scores[:, c], targets[:, c]) for c in range(scores.shape[1]) if targets[:, c].any()]
    if not aps:
        raise ContractError("no class has a positive target")
    return float(np.mean(aps))


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, mask) -> None:
    """Bias-corrected Adam update of the parameters named in ``mask``, in place.

    Parameters outside the mask are not touched and get no moment buffers.
    """
    for name in mask:
        if name not in grads:
            raise ContractError(f"no gradient for trainable parameter {name}")
        if np.shape(grads[name]) != params[name].shape:
            raise ContractError(f"{name}: gradient {np.shape(grads[name])} vs parameter {params[name].shape}")
    state.t += 1
    c1 = 1.0 - state.beta1**state.t
    c2 = 1.0 - state.beta2**state.t
    for name in sorted(mask):
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - state.beta1) * g if m is None else state.beta1 * m + (1.0 - state.beta1) * g
        v = (1.0 - state.beta2) * g * g if v is None else state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p = params[name]
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    eval_metric: float
    seconds: float
    trainable_params: int


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)

    CSV_HEADER = ("epoch", "train_loss", "eval_metric", "seconds", "trainable_params")

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i) -> EpochRecord:
        return self.records[i]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_HEADER)
        for r in self.records:
            writer.writerow([r.epoch, repr(r.train_loss), repr(r.eval_metric), repr(r.seconds), r.trainable_params])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TrainHistory:
        rows = csv.DictReader(io.StringIO(text))
        return cls([
            EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["eval_metric"]), float(r["seconds"]),
                        int(r["trainable_params"]))
            for r in rows
        ])


def _is_multilabel(samples) -> bool:
    return np.ndim(samples[0].label) > 0


def _groups(samples):
    """Indices grouped by spectrogram shape, in first-seen order."""
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        groups.setdefault(np.shape(s.spectrogram), []).append(i)
    return list(groups.values())


def batch_loss(model: AudioTransformer, samples, multilabel: bool | None = None) -> Tensor:
    """Mean task loss over ``samples``; inputs of different length run as separate sub-batches."""
    multilabel = _is_multilabel(samples) if multilabel is None else multilabel
    total = None
    n = len(samples)
    for idx in _groups(samples):
        x = np.stack([samples[i].spectrogram for i in idx])
        logits = model_forward(x, model)
        if multilabel:
            part = bce_multilabel(logits, np.stack([samples[i].label for i in idx]))
        else:
            part = cross_entropy(logits, [samples[i].label for i in idx])
        part = ad.scale(part, len(idx) / n)
        total = part if total is None else total + part
    return total


def predict(model: AudioTransformer, samples, batch_size: int = 64) -> np.ndarray:
    """Logits ``[N, C]`` in sample order, without recording a tape."""
    out = np.zeros((len(samples), model.config.num_classes))
    for idx in _groups(samples):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            x = np.stack([samples[i].spectrogram for i in chunk])
            out[chunk] = model_forward(x, model).data
    return out


def evaluate(model: AudioTransformer, samples) -> float:
    """Accuracy for single-label samples, mAP for multi-label ones."""
    logits = predict(model, samples)
    if _is_multilabel(samples):
        return mean_average_precision(logits, np.stack([s.label for s in samples]))
    return accuracy(logits, [s.label for s in samples])


def train(
    model: AudioTransformer,
    strategy,
    train_set,
    test_set=None,
    epochs: int = 10,
    lr: float = 1e-3,
    seed: int = 0,
    batch_size: int = 32,
    clock: Callable[[], float] | None = time.perf_counter,
) -> TrainHistory:
    """Fine-tune ``model`` in place under ``strategy``.

    Each epoch shuffles with a seeded permutation, takes Adam steps on
    mini-batches (the last partial batch is kept) and evaluates on
    ``test_set`` (``train_set`` if omitted). ``clock=None`` records 0.0
    seconds, which makes the history CSV byte-for-byte reproducible.
    """
    if not train_set:
        raise ContractError("training set is empty")
    strategy = PeftStrategy.parse(strategy)
    mask = trainable_mask(model, strategy)
    apply_freeze(model, mask)
    params = model.named_parameters()
    trainable = {name: params[name] for name in mask}
    n_trainable = int(sum(p.size for p in trainable.values()))
    test_set = train_set if test_set is None else test_set
    multilabel = _is_multilabel(train_set)
    state = AdamState(lr=lr)
    rng = np.random.default_rng(seed)
    history = TrainHistory()

    for epoch in range(epochs):
        start = clock() if clock else 0.0
        order = rng.permutation(len(train_set))
        loss_sum = 0.0
        for b in range(0, len(order), batch_size):
            batch = [train_set[i] for i in order[b:b + batch_size]]
            with Tape() as tape:
                loss = batch_loss(model, batch, multilabel)
            grads = ad.backward(loss, tape, wrt=trainable.values())
            adam_step(params, {name: grads[p.node].data for name, p in trainable.items()}, state, mask)
            loss_sum += loss.item() * len(batch)
        metric = evaluate(model, test_set)
        seconds = (clock() - start) if clock else 0.0
        history.records.append(EpochRecord(epoch, loss_sum / len(train_set), metric, seconds, n_trainable))
    return history
