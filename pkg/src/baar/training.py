"""Pre-training objectives, fine-tuning, evaluation metrics and the optimisation loop."""

from __future__ import annotations

import json
import math
import sys
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import BaarModel, ModelOutput
from .tensor import Tensor

STRATEGIES = ("next_previous", "next_only", "previous_only", "masking")
TASKS = ("classification", "regression", "multilabel")


class TrainingDiverged(RuntimeError):
    pass


class DegenerateLabelsWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PretrainStrategy:
    kind: str = "next_previous"
    mask_ratio: float = 0.4

    def __post_init__(self):
        if self.kind not in STRATEGIES:
            raise ValueError(f"unknown pre-training strategy {self.kind!r}")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask ratio must lie in (0, 1), got {self.mask_ratio}")


@dataclass
class TrainConfig:
    lr: float | None = None
    batch_size: int = 32
    pretrain_epochs: int = 20
    finetune_epochs: int = 5
    seed: int = 0
    loss: str | None = None

    def __post_init__(self):
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ValueError("epoch counts must be non-negative")
        if self.lr is not None and self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch size must be positive")
        if self.loss not in (None, "mse", "cross_entropy"):
            raise ValueError(f"unknown loss kind {self.loss!r}")


PRETRAIN_LR = 1e-3
FINETUNE_LR = 1e-4


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


class MetricsLog:
    """Line-delimited JSON records to an optional file and optional stream."""

    def __init__(self, path: str | Path | None = None, echo: bool = False, stream=None):
        self.path = Path(path) if path is not None else None
        self.echo = echo
        self.stream = stream or sys.stdout
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def write(self, **record) -> None:
        record = {k: (float(v) if isinstance(v, (np.floating,)) else v) for k, v in record.items()}
        self.records.append(record)
        line = json.dumps(record, sort_keys=True)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(line + "\n")
        if self.echo:
            print(line, file=self.stream, flush=True)


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------


def token_targets(x: np.ndarray, stride: int = 4) -> np.ndarray:
    """Mean of each ``stride``-step window: (B, T, V) -> (B, ceil(T/stride), V)."""
    x = np.asarray(x)
    B, T_, V = x.shape
    n = -(-T_ // stride)
    pad = n * stride - T_
    counts = np.full(n, float(stride))
    if pad:
        x = np.concatenate([x, np.zeros((B, pad, V), dtype=x.dtype)], axis=1)
        counts[-1] = stride - pad
    return x.reshape(B, n, stride, V).sum(axis=2) / counts[None, :, None]


def mask_timesteps(x: np.ndarray, ratio: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Zero ``round(ratio * T)`` random timesteps per sequence; returns (masked x, mask)."""
    x = np.asarray(x)
    B, T_ = x.shape[:2]
    k = int(round(ratio * T_))
    mask = np.zeros((B, T_), dtype=bool)
    for b in range(B):
        mask[b, rng.permutation(T_)[:k]] = True
    out = x.copy()
    out[mask] = 0.0
    return out, mask


def _is_events(data) -> bool:
    return isinstance(data, (list, tuple)) and len(data) > 0 and hasattr(data[0], "codes")


def _n_items(data) -> int:
    return len(data)


def _groups(data, idx: np.ndarray) -> list[np.ndarray]:
    """Split a minibatch into equal-length groups (event streams vary in length)."""
    if not _is_events(data):
        return [idx]
    by_len: dict[int, list[int]] = {}
    for i in idx:
        by_len.setdefault(len(data[i].codes), []).append(int(i))
    return [np.asarray(v) for _, v in sorted(by_len.items())]


def _gather(data, idx: np.ndarray):
    """Model inputs, timestamps and raw array for a same-length group."""
    if _is_events(data):
        codes = np.stack([np.asarray(data[i].codes) for i in idx])
        times = np.stack([np.asarray(data[i].timestamps, dtype=np.float64) for i in idx])
        return codes, times
    return np.asarray(data)[idx], None


def _minibatches(n: int, batch_size: int, rng: np.random.Generator, shuffle: bool = True) -> list[np.ndarray]:
    order = rng.permutation(n) if shuffle else np.arange(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


# ---------------------------------------------------------------------------
# pre-training objective
# ---------------------------------------------------------------------------


def _default_loss(model: BaarModel) -> str:
    return "cross_entropy" if model.config.mode == "discrete" else "mse"


def _term(pred: Tensor, target, kind: str, weights=None) -> Tensor:
    if kind == "cross_entropy":
        return T.cross_entropy(pred, target, weights=weights)
    return T.mse_loss(pred, target, weights=None if weights is None else np.asarray(weights)[..., None])


def directional_losses(out: ModelOutput, targets, loss_kind: str = "mse") -> tuple[Tensor, Tensor]:
    """Next-token loss from layer L-1 and previous-token loss from layer L.

    Slot t (0 = ``[SOS]``) of layer L-1 predicts token t+1, slot t of layer L
    predicts token t-1; only real tokens are targets.
    """
    n = np.asarray(targets).shape[1]
    fwd = _term(out.next_token_logits[:, 0:n], targets, loss_kind)
    bwd = _term(out.prev_token_logits[:, 2 : n + 2], targets, loss_kind)
    return fwd, bwd


def pretrain_loss(
    out: ModelOutput,
    targets,
    strategy: PretrainStrategy | str = "next_previous",
    loss_kind: str = "mse",
    mask_weights=None,
) -> Tensor:
    """Scalar pre-training loss for one batch.

    ``masking`` reconstructs tokens at their own slot in the final layer and
    weights each token by how much of it was masked (``mask_weights``).
    """
    if isinstance(strategy, str):
        strategy = PretrainStrategy(strategy)
    if strategy.kind == "masking":
        if mask_weights is None:
            raise ValueError("masking strategy needs mask weights")
        n = np.asarray(targets).shape[1]
        return _term(out.prev_token_logits[:, 1 : n + 1], targets, loss_kind, weights=mask_weights)
    fwd, bwd = directional_losses(out, targets, loss_kind)
    if strategy.kind == "next_previous":
        return fwd + bwd
    if strategy.kind == "next_only":
        return fwd
    return bwd


def _check_mode(model: BaarModel, loss_kind: str) -> None:
    expected = _default_loss(model)
    if loss_kind != expected:
        raise ValueError(f"loss {loss_kind!r} does not fit a {model.config.mode} model (expected {expected!r})")


def batch_pretrain_loss(
    model: BaarModel,
    data,
    idx: np.ndarray,
    strategy: PretrainStrategy,
    loss_kind: str,
    rng: np.random.Generator,
) -> tuple[Tensor, int]:
    """Loss summed over equal-length groups, weighted to a per-item mean."""
    total = None
    count = 0
    for group in _groups(data, idx):
        inputs, times = _gather(data, group)
        weights = None
        input_mask = None
        if model.config.mode == "continuous":
            targets = token_targets(inputs) if model.config.tokenizer else np.asarray(inputs)
            if strategy.kind == "masking":
                raw = inputs
                inputs, mask = mask_timesteps(raw, strategy.mask_ratio, rng)
                weights = token_targets(mask[..., None].astype(float))[..., 0] if model.config.tokenizer else mask
        else:
            targets = inputs
            if strategy.kind == "masking":
                input_mask = rng.random(inputs.shape) < strategy.mask_ratio
                weights = input_mask.astype(float)
        out, _ = model.encode(inputs, times, input_mask=input_mask)
        loss = pretrain_loss(out, targets, strategy, loss_kind, mask_weights=weights)
        loss = T.scale(loss, float(len(group)))
        total = loss if total is None else total + loss
        count += len(group)
    return T.scale(total, 1.0 / count), count


@dataclass
class PretrainResult:
    losses: list[float]
    steps: int


def train_pretrain(
    model: BaarModel,
    data,
    config: TrainConfig | None = None,
    strategy: PretrainStrategy | str = "next_previous",
    log: MetricsLog | None = None,
) -> PretrainResult:
    """Adam over shuffled minibatches for ``config.pretrain_epochs`` epochs.

    Returns per-epoch mean losses. A NaN loss raises ``TrainingDiverged``.
    """
    config = config or TrainConfig()
    if isinstance(strategy, str):
        strategy = PretrainStrategy(strategy)
    loss_kind = config.loss or _default_loss(model)
    _check_mode(model, loss_kind)
    n = _n_items(data)
    if n == 0:
        raise ValueError("empty pre-training dataset")
    rng = np.random.default_rng(config.seed)
    opt = Adam(model.parameters(), lr=PRETRAIN_LR if config.lr is None else config.lr)
    losses = []
    for epoch in range(config.pretrain_epochs):
        total, seen = 0.0, 0
        for b, idx in enumerate(_minibatches(n, config.batch_size, rng)):
            opt.zero_grad()
            loss, count = batch_pretrain_loss(model, data, idx, strategy, loss_kind, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"pre-training loss became {value} at epoch {epoch + 1}, batch {b}")
            T.backward(loss)
            opt.step()
            total += value * count
            seen += count
        losses.append(total / seen)
        if log is not None:
            log.write(epoch=epoch + 1, split="pretrain", loss=losses[-1], strategy=strategy.kind)
    return PretrainResult(losses, opt.t)


# ---------------------------------------------------------------------------
# fine-tuning and evaluation
# ---------------------------------------------------------------------------


def _head_outputs(model: BaarModel, task: str, labels) -> int:
    labels = np.asarray(labels)
    if task == "classification":
        return int(labels.max()) + 1
    if task == "multilabel":
        return labels.shape[1]
    return 1 if labels.ndim == 1 else labels.shape[1]


def _task_loss(logits: Tensor, y: np.ndarray, task: str) -> Tensor:
    if task == "classification":
        return T.cross_entropy(logits, y.astype(np.int64))
    if task == "multilabel":
        return T.bce_with_logits(logits, y)
    return T.mse_loss(logits, y.reshape(logits.shape))


def _check_labels(labels, task: str, n: int) -> np.ndarray:
    y = np.asarray(labels)
    if len(y) != n:
        raise ValueError(f"{len(y)} labels for {n} sequences")
    if task == "classification":
        if y.ndim != 1 or y.dtype.kind not in "iu" and not np.all(np.mod(y, 1) == 0):
            raise ValueError("classification labels must be a 1-D array of class ids")
        y = y.astype(np.int64)
    elif task == "multilabel":
        if y.ndim != 2:
            raise ValueError("multilabel labels must be a 2-D multi-hot array")
    elif task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    return y


def head_loss(model: BaarModel, data, labels, idx: np.ndarray, task: str) -> tuple[Tensor, int]:
    total, count = None, 0
    for group in _groups(data, idx):
        inputs, times = _gather(data, group)
        out, _ = model.encode(inputs, times)
        loss = T.scale(_task_loss(model.head_logits(out), labels[group], task), float(len(group)))
        total = loss if total is None else total + loss
        count += len(group)
    return T.scale(total, 1.0 / count), count


@dataclass
class FinetuneResult:
    losses: list[float]
    metrics: dict = field(default_factory=dict)


def finetune(
    model: BaarModel,
    data,
    labels,
    config: TrainConfig | None = None,
    task: str = "classification",
    repr_mode: str = "sos",
    repr_layers: str = "last",
    n_outputs: int | None = None,
    eval_data=None,
    eval_labels=None,
    log: MetricsLog | None = None,
) -> FinetuneResult:
    """Attach a linear head on the sequence representation and train end to end."""
    config = config or TrainConfig()
    n = _n_items(data)
    if n == 0:
        raise ValueError("empty fine-tuning dataset")
    y = _check_labels(labels, task, n)
    if task == "classification" and len(np.unique(y)) < 2:
        warnings.warn("fine-tuning labels contain a single class", DegenerateLabelsWarning, stacklevel=2)
    n_out = n_outputs or _head_outputs(model, task, y)
    model.attach_head(n_out, task, repr_mode, repr_layers)
    rng = np.random.default_rng(config.seed + 1)
    opt = Adam(model.parameters(), lr=FINETUNE_LR if config.lr is None else config.lr)
    losses = []
    metrics = {}
    for epoch in range(config.finetune_epochs):
        total, seen = 0.0, 0
        for idx in _minibatches(n, config.batch_size, rng):
            opt.zero_grad()
            loss, count = head_loss(model, data, y, idx, task)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDiverged(f"fine-tuning loss became {value} at epoch {epoch + 1}")
            T.backward(loss)
            opt.step()
            total += value * count
            seen += count
        losses.append(total / seen)
        if log is not None:
            log.write(epoch=epoch + 1, split="train", loss=losses[-1])
        if eval_data is not None:
            metrics = evaluate(model, eval_data, eval_labels, task)
            if log is not None:
                log.write(epoch=epoch + 1, split="valid", **metrics)
    if eval_data is None and n:
        metrics = evaluate(model, data, y, task)
    return FinetuneResult(losses, metrics)


def predict(model: BaarModel, data, batch_size: int = 64) -> np.ndarray:
    """Head outputs for every item, shape (n, n_outputs)."""
    n = _n_items(data)
    rows = [None] * n
    with T.no_grad():
        for idx in _minibatches(n, batch_size, np.random.default_rng(0), shuffle=False):
            for group in _groups(data, idx):
                inputs, times = _gather(data, group)
                out, _ = model.encode(inputs, times)
                logits = model.head_logits(out).data
                for j, i in enumerate(group):
                    rows[i] = logits[j]
    return np.stack(rows)


def accuracy(y_true, scores) -> float:
    scores = np.asarray(scores)
    pred = scores.argmax(axis=-1) if scores.ndim == 2 else scores
    return float(np.mean(pred == np.asarray(y_true)))


def mean_absolute_error(y_true, y_pred) -> float:
    return float(np.mean(np.abs(np.asarray(y_pred).reshape(np.shape(y_true)) - np.asarray(y_true))))


def auprc(y_true, scores) -> float:
    """Area under the precision-recall curve by the trapezoid rule.

    Items are ranked by descending score, ties kept in input order; the curve
    starts at (recall 0, precision 1).
    """
    y = np.asarray(y_true).astype(bool)
    s = np.asarray(scores, dtype=np.float64)
    if y.size == 0:
        raise ValueError("auprc of an empty set")
    n_pos = int(y.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-s, kind="stable")
    hits = np.cumsum(y[order])
    k = np.arange(1, y.size + 1)
    precision = np.concatenate([[1.0], hits / k])
    recall = np.concatenate([[0.0], hits / n_pos])
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def evaluate(model: BaarModel, data, labels, task: str | None = None) -> dict:
    """Accuracy and per-class AUPRC (classification), macro AUPRC (multilabel) or MAE."""
    n = _n_items(data)
    if n == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    task = task or (model.head_config.task if model.head_config else "classification")
    y = _check_labels(labels, task, n)
    scores = predict(model, data)
    if task == "regression":
        return {"mae": mean_absolute_error(y, scores[:, 0] if y.ndim == 1 else scores), "n": n}
    if task == "multilabel":
        per = [auprc(y[:, c], scores[:, c]) for c in range(y.shape[1])]
        return {"auprc": per, "auprc_macro": float(np.nanmean(per)), "n": n}
    probs = _softmax(scores)
    per = [auprc(y == c, probs[:, c]) for c in range(probs.shape[1])]
    return {
        "accuracy": accuracy(y, scores),
        "auprc": per,
        "auprc_macro": float(np.nanmean(per)) if not all(np.isnan(per)) else float("nan"),
        "n": n,
    }


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------


def split_indices(n: int, seed: int = 0, fractions=(0.8, 0.1, 0.1)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle cut into train/valid/test index arrays."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_valid = int(round(fractions[1] * n))
    return order[:n_train], order[n_train : n_train + n_valid], order[n_train + n_valid :]


def finetune_subset(train_idx: np.ndarray, fraction: float = 0.2, seed: int = 0) -> np.ndarray:
    """The slice of the training split reserved for fine-tuning when data is shared."""
    k = max(1, int(round(fraction * len(train_idx))))
    return np.sort(np.random.default_rng(seed + 101).permutation(train_idx)[:k])


def subset(data, idx):
    if _is_events(data):
        return [data[i] for i in idx]
    return np.asarray(data)[idx]
