"""Adam, the epoch loop with periodic validation, subject-level evaluation and checkpoints.

Log records are single lines of ``key=value`` pairs, e.g.::

    epoch=5 split=val loss=0.512300 accuracy=0.750000 f1=0.800000

Checkpoint file layout (integers little-endian)::

    b"T4CK" | u8 version | u32 header length | JSON header | T4DF tensors ...

The JSON header holds the ModelSpec and its digest, dtype, step and epoch
counters, the RNG state, best-snapshot bookkeeping, the training log and
the ordered list of tensor names (``param/<name>``, ``adam.m/<name>``,
``adam.v/<name>``, ``best/<name>``) matching the T4DF records that follow.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import layers as L
from .data import DEFAULT_STRIDE, FmriRecord, Manifest, random_temporal_crop, read_tensor, sliding_window_crops, stack, write_tensor
from .models import Model, ModelSpec
from .ops import softmax
from .tensor import Rng, Tensor, wrap

CKPT_MAGIC = b"T4CK"
CKPT_VERSION = 1
EVAL_BATCH = 16


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    batch_size: int = 10
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_interval: int = 5
    crop_length: int = 15
    eval_stride: int = DEFAULT_STRIDE
    selection_metric: str = "f1"
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "val_interval", "crop_length", "eval_stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.val_interval > self.epochs:
            raise ValueError(f"val_interval ({self.val_interval}) exceeds epochs ({self.epochs})")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("need lr > 0, eps > 0 and betas in [0, 1)")
        if self.selection_metric not in ("f1", "accuracy"):
            raise ValueError(f"selection_metric must be 'f1' or 'accuracy', got {self.selection_metric!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


class NonFiniteGradient(ArithmeticError):
    pass


def adam_step(params: Sequence[ad.Parameter], grads: dict[str, Tensor], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of ``params`` in place; ``state.step`` += 1."""
    for p in params:
        if p.name not in grads:
            raise KeyError(f"no gradient for parameter {p.name}")
        g = grads[p.name].data
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {p.name}")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient for parameter {p.name}")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in params:
        g = grads[p.name].data
        m = state.m.get(p.name)
        v = state.v.get(p.name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[p.name], state.v[p.name] = m, v
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        p.value = wrap((p.value.data - update).astype(p.value.dtype))


# -- metrics -------------------------------------------------------------------

@dataclass
class MetricsReport:
    accuracy: float
    f1: float
    tp: int
    fp: int
    tn: int
    fn: int
    probabilities: dict[str, float] = field(default_factory=dict)  # subject id -> p(ASD)
    crops: int = 0
    loss: float | None = None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def line(self, **prefix) -> str:
        head = " ".join(f"{k}={v}" for k, v in prefix.items())
        body = (f"accuracy={self.accuracy:.6f} f1={self.f1:.6f} tp={self.tp} fp={self.fp} "
                f"tn={self.tn} fn={self.fn} subjects={self.total} crops={self.crops}")
        return f"{head} {body}".strip()

    def text(self) -> str:
        return (f"Accuracy {self.accuracy:.4f}  F1 {self.f1:.4f}  "
                f"(TP {self.tp}, FP {self.fp}, TN {self.tn}, FN {self.fn}; {self.total} subjects, {self.crops} crops)")


def f1_and_accuracy(predictions: Sequence[int], labels: Sequence[int]) -> MetricsReport:
    """Accuracy and positive-class (ASD = 1) F1; F1 is 0 when 2TP + FP + FN = 0."""
    predictions, labels = list(predictions), list(labels)
    if len(predictions) != len(labels):
        raise ValueError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not set(predictions) | set(labels) <= {0, 1}:
        raise ValueError("predictions and labels must be 0 or 1")
    tp = sum(p == 1 and y == 1 for p, y in zip(predictions, labels))
    fp = sum(p == 1 and y == 0 for p, y in zip(predictions, labels))
    tn = sum(p == 0 and y == 0 for p, y in zip(predictions, labels))
    fn = sum(p == 0 and y == 1 for p, y in zip(predictions, labels))
    n = len(labels)
    accuracy = (tp + tn) / n if n else 0.0
    denom = 2 * tp + fp + fn
    return MetricsReport(accuracy, 2 * tp / denom if denom else 0.0, tp, fp, tn, fn)


def predict_proba(model: Model, crops: Tensor) -> np.ndarray:
    """Eval-mode softmax probabilities ``[N, 2]`` for a stack of crops."""
    out = []
    for s in range(0, crops.shape[0], EVAL_BATCH):
        logits = model.logits(wrap(crops.data[s:s + EVAL_BATCH]), mode="eval")
        out.append(softmax(logits.data.astype(np.float64)))
    return np.concatenate(out, axis=0)


def evaluate_subjects(model: Model, records: Sequence[FmriRecord], w: int = 15,
                      stride: int = DEFAULT_STRIDE) -> MetricsReport:
    """Average crop probabilities per subject; predict ASD iff p(ASD) > p(control)."""
    if not records:
        raise ValueError("no records to evaluate")
    probs, preds, labels, crops, nll = {}, [], [], 0, 0.0
    for rec in records:
        windows = sliding_window_crops(rec, w, stride)
        p = predict_proba(model, stack(windows)).mean(axis=0)
        crops += len(windows)
        probs[rec.subject_id] = float(p[1])
        preds.append(1 if p[1] > p[0] else 0)
        labels.append(rec.label)
        nll -= math.log(max(float(p[rec.label]), 1e-300))
    report = f1_and_accuracy(preds, labels)
    report.probabilities, report.crops, report.loss = probs, crops, nll / len(records)
    return report


# -- training loop -------------------------------------------------------------

@dataclass
class TrainState:
    adam: AdamState = field(default_factory=AdamState)
    epoch: int = 0
    best_metric: float | None = None
    best_epoch: int | None = None
    best_params: dict[str, Tensor] | None = None
    rng_state: dict | None = None
    log: list[str] = field(default_factory=list)

    @property
    def step(self) -> int:
        return self.adam.step


def log_line(epoch: int, split: str, loss: float, accuracy: float, f1: float) -> str:
    return f"epoch={epoch} split={split} loss={loss:.6f} accuracy={accuracy:.6f} f1={f1:.6f}"


def _check_records(model: Model, records: Sequence[FmriRecord], split: str, w: int) -> None:
    if not records:
        raise ValueError(f"the {split} split is empty")
    for r in records:
        if r.image.shape[2:5] != model.spec.input_shape[:3]:
            raise ValueError(f"{r.subject_id}: spatial extents {list(r.image.shape[2:5])} "
                             f"!= model input {list(model.spec.input_shape[:3])}")
        if r.length < w:
            raise ValueError(f"{r.subject_id}: {r.length} time points < crop length {w}")


def fit(model: Model, train_records: Sequence[FmriRecord], val_records: Sequence[FmriRecord],
        config: TrainConfig, state: TrainState | None = None, *,
        on_log: Callable[[str], None] | None = None,
        until: Callable[[TrainState], bool] | None = None) -> TrainState:
    """Train from ``state`` (fresh if None) up to ``config.epochs``.

    Each epoch shuffles the training subjects, takes one random crop per
    subject and runs one Adam step per batch. Every ``val_interval`` epochs
    the validation split is scored with :func:`evaluate_subjects`; the
    parameters are snapshotted when the selection metric strictly improves,
    so ties keep the earlier snapshot. ``until`` is polled after each
    validation and stops the loop early when it returns True.
    """
    if model.spec.input_shape[3] != config.crop_length:
        raise ValueError(f"model expects crops of {model.spec.input_shape[3]} steps, "
                         f"config.crop_length is {config.crop_length}")
    _check_records(model, train_records, "train", config.crop_length)
    _check_records(model, val_records, "val", config.crop_length)
    state = state if state is not None else TrainState()
    rng = Rng(config.seed)
    if state.rng_state is not None:
        rng.state = state.rng_state
    params = model.trainable

    def emit(line: str) -> None:
        state.log.append(line)
        if on_log is not None:
            on_log(line)

    while state.epoch < config.epochs:
        epoch = state.epoch + 1
        order = rng.permutation(len(train_records))
        crops = [random_temporal_crop(train_records[i], rng, config.crop_length) for i in order]
        labels = [train_records[i].label for i in order]
        losses, preds = [], []
        for s in range(0, len(order), config.batch_size):
            batch_labels = labels[s:s + config.batch_size]
            g = ad.Graph()
            logits = model.forward(g, stack(crops[s:s + config.batch_size]), mode="train")
            loss = L.softmax_cross_entropy(g, logits, batch_labels)
            grads = ad.backward(g, loss, params)
            adam_step(params, grads, state.adam, config.lr, config.beta1, config.beta2, config.eps)
            losses.append(float(loss.value.item()) * len(batch_labels))
            preds += np.argmax(logits.value.data, axis=1).tolist()
        m = f1_and_accuracy(preds, labels)
        state.epoch = epoch
        state.rng_state = rng.state
        emit(log_line(epoch, "train", sum(losses) / len(labels), m.accuracy, m.f1))
        if epoch % config.val_interval == 0:
            report = evaluate_subjects(model, val_records, config.crop_length, config.eval_stride)
            emit(log_line(epoch, "val", report.loss, report.accuracy, report.f1))
            score = report.f1 if config.selection_metric == "f1" else report.accuracy
            if state.best_metric is None or score > state.best_metric:
                state.best_metric, state.best_epoch = score, epoch
                state.best_params = dict(model.state_dict())
            if until is not None and until(state):
                break
    return state


def train(model: Model, manifest: Manifest, config: TrainConfig, state: TrainState | None = None,
          **kw) -> TrainState:
    """:func:`fit` on the manifest's train and val splits."""
    train_records = manifest.load("train")
    val_records = manifest.load("val")
    if not train_records or not val_records:
        raise ValueError("manifest needs nonempty train and val splits")
    return fit(model, train_records, val_records, config, state, **kw)


def use_best(model: Model, state: TrainState) -> None:
    """Load the best validation snapshot into ``model`` (no-op without one)."""
    if state.best_params is not None:
        model.load_state_dict(state.best_params)


# -- checkpoints ---------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, np.ndarray):
        return {"__ndarray__": obj.tolist(), "dtype": str(obj.dtype)}
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        if "__ndarray__" in obj:
            return np.array(obj["__ndarray__"], dtype=obj["dtype"])
        return {k: _unjson(v) for k, v in obj.items()}
    return obj


def checkpoint_save(model: Model, state: TrainState, path, config: TrainConfig | None = None) -> None:
    tensors: list[tuple[str, Tensor]] = [(f"param/{n}", t) for n, t in model.state_dict().items()]
    for n in sorted(state.adam.m):
        tensors.append((f"adam.m/{n}", wrap(state.adam.m[n])))
        tensors.append((f"adam.v/{n}", wrap(state.adam.v[n])))
    if state.best_params is not None:
        tensors += [(f"best/{n}", t) for n, t in state.best_params.items()]
    header = {
        "spec": model.spec.to_dict(),
        "spec_digest": model.spec.digest(),
        "dtype": str(model.dtype),
        "step": state.adam.step,
        "epoch": state.epoch,
        "rng_state": _jsonable(state.rng_state),
        "best_metric": state.best_metric,
        "best_epoch": state.best_epoch,
        "config": None if config is None else config.to_dict(),
        "log": state.log,
        "entries": [name for name, _ in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<BI", CKPT_VERSION, len(blob)) + blob)
        for _, t in tensors:
            write_tensor(f, t)
    tmp.replace(path)


@dataclass
class Checkpoint:
    spec: ModelSpec
    dtype: np.dtype
    params: dict[str, Tensor]
    state: TrainState
    config: TrainConfig | None
    header: dict


def read_checkpoint_header(f) -> dict:
    magic = f.read(4)
    if magic != CKPT_MAGIC:
        raise CheckpointError(f"not a checkpoint (magic {magic!r})")
    raw = f.read(5)
    if len(raw) != 5:
        raise CheckpointError("truncated checkpoint header")
    version, n = struct.unpack("<BI", raw)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader supports {CKPT_VERSION})")
    blob = f.read(n)
    if len(blob) != n:
        raise CheckpointError("truncated checkpoint header")
    return json.loads(blob.decode("utf-8"))


def checkpoint_load(path) -> Checkpoint:
    with open(path, "rb") as f:
        header = read_checkpoint_header(f)
        tensors = {name: read_tensor(f) for name in header["entries"]}
    groups: dict[str, dict[str, Tensor]] = {"param": {}, "adam.m": {}, "adam.v": {}, "best": {}}
    for key, t in tensors.items():
        kind, _, name = key.partition("/")
        groups[kind][name] = t
    spec = ModelSpec.from_dict(header["spec"])
    if spec.digest() != header["spec_digest"]:
        raise CheckpointError("checkpoint spec digest does not match its stored spec")
    adam = AdamState({n: t.numpy() for n, t in groups["adam.m"].items()},
                     {n: t.numpy() for n, t in groups["adam.v"].items()}, header["step"])
    state = TrainState(adam, header["epoch"], header["best_metric"], header["best_epoch"],
                       groups["best"] or None, _unjson(header["rng_state"]), list(header["log"]))
    config = None
    if header.get("config") is not None:
        known = {f.name for f in fields(TrainConfig)}
        config = TrainConfig(**{k: v for k, v in header["config"].items() if k in known})
    return Checkpoint(spec, np.dtype(header["dtype"]), groups["param"], state, config, header)


def restore(model: Model, ckpt: Checkpoint) -> TrainState:
    """Load parameters into ``model`` after checking the model spec and every tensor shape."""
    if ckpt.spec.digest() != model.spec.digest():
        diff = sorted(k for k, v in ckpt.spec.to_dict().items() if model.spec.to_dict()[k] != v)
        raise CheckpointError(f"checkpoint was written for a different ModelSpec (differs in: {', '.join(diff)})")
    expected = {p.name: p.shape for p in model.parameters}
    bad = []
    for group in (ckpt.params, ckpt.state.adam.m, ckpt.state.adam.v, ckpt.state.best_params or {}):
        for name, t in group.items():
            if name not in expected or tuple(t.shape) != expected[name]:
                bad.append(name)
    missing = sorted(set(expected) - set(ckpt.params))
    if bad or missing:
        raise CheckpointError(f"checkpoint/model mismatch; wrong or unknown: {sorted(set(bad))}; missing: {missing}")
    model.load_state_dict(ckpt.params)
    return ckpt.state
