"""Cross-entropy and multi-positive contrastive (MPC) training loops."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import augment
from .augment import AugmentationSpec
from .autograd import NonFiniteError, Tape, Tensor, ops
from .backbones import ModelArtifacts, forward, forward_tensors
from .data import TimeSeriesDataset

LOSSES = ("CE", "MPC")
EXCLUDED_LOGIT = -1e9  # additive constant for self-pairs in the contrastive softmax


class NoPositiveError(ValueError):
    pass


class DivergedLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "CE"
    epochs: int = 100
    batch_size: int = 16
    learning_rate: float = 1e-3
    temperature: float = 0.07
    augmentation: AugmentationSpec | None = None
    seed: int = 0
    probe_epochs: int = 50
    projection_dim: int = 64

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}; expected one of {LOSSES}")
        if self.temperature <= 0:
            raise ValueError("temperature must be > 0")
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if self.batch_size < 1 or self.projection_dim < 1:
            raise ValueError("batch_size and projection_dim must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")

    @property
    def views(self) -> AugmentationSpec:
        return self.augmentation if self.augmentation is not None else AugmentationSpec("Jitter")


class Adam:
    """Adam updating the given numpy arrays in place."""

    def __init__(self, params: dict[str, np.ndarray], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, (self.b1, self.b2), self.eps = lr, betas, eps
        self.m = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.v = {k: np.zeros_like(v, dtype=np.float64) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = np.asarray(grads[k], dtype=np.float64)
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            if self.lr:
                p -= (self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)).astype(p.dtype)


# --- losses -------------------------------------------------------------------

def _one_hot(labels: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(labels), n))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean of ``logsumexp(z) - z_y`` over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    picked = ops.sum(ops.mul(logits, _one_hot(labels, logits.shape[1])), axis=1)
    return ops.mean(ops.sub(ops.logsumexp(logits, axis=1), picked))


def cross_entropy_from_probs(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    return float(np.mean(-np.log(np.maximum(probs[np.arange(len(labels)), labels], floor))))


def mpc_loss(anchors: Tensor, candidates: Tensor, match: np.ndarray, temperature: float,
             exclude: np.ndarray | None = None) -> Tensor:
    """Soft-target cross-entropy over anchor/candidate similarities.

    Row ``i`` of ``match`` marks the candidates that are positives for anchor
    ``i``; the target distribution spreads its mass evenly over them.
    ``exclude`` removes candidates (e.g. the anchor itself) from the softmax.
    """
    match = np.asarray(match, dtype=np.float64)
    if match.shape != (anchors.shape[0], candidates.shape[0]):
        raise ValueError(f"match matrix shape {match.shape} does not fit "
                         f"{anchors.shape[0]} anchors x {candidates.shape[0]} candidates")
    if exclude is not None:
        exclude = np.asarray(exclude, dtype=bool)
        match = np.where(exclude, 0.0, match)
    counts = match.sum(axis=1)
    if np.any(counts <= 0):
        raise NoPositiveError(f"anchors without a positive: {np.flatnonzero(counts <= 0).tolist()}")
    target = match / counts[:, None]
    sims = ops.mul(ops.matmul(anchors, ops.transpose(candidates)), 1.0 / temperature)
    if exclude is not None:
        sims = ops.add(sims, np.where(exclude, EXCLUDED_LOGIT, 0.0))
    per_anchor = ops.sub(ops.logsumexp(sims, axis=1), ops.sum(ops.mul(sims, target), axis=1))
    return ops.mean(per_anchor)


def l2_normalize(z: Tensor, eps: float = 1e-12) -> Tensor:
    return ops.div(z, ops.sqrt(ops.add(ops.sum(ops.square(z), axis=1, keepdims=True), eps)))


# --- training -----------------------------------------------------------------

def evaluate_id_accuracy(model: ModelArtifacts, dataset: TimeSeriesDataset) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    if dataset.n == 0:
        return float("nan")
    logits = forward(model, dataset.instances.astype(np.float32)).logits
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


@dataclass
class TrainResult:
    model: ModelArtifacts
    log: list[dict] = field(default_factory=list)


def _check_loss(value: float, phase: str, epoch: int, step: int, last: float | None) -> None:
    if not math.isfinite(value):
        raise DivergedLossError(
            f"{phase} loss became {value} at epoch {epoch}, step {step} "
            f"(last finite loss {last}); try a smaller learning rate")


def _batches(rng: np.random.Generator, n: int, size: int):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def _projection_init(rng: np.random.Generator, F: int, out: int) -> dict[str, np.ndarray]:
    return {
        "proj.0.weight": rng.normal(0, math.sqrt(2.0 / F), (F, F)).astype(np.float32),
        "proj.0.bias": np.zeros(F, np.float32),
        "proj.1.weight": rng.normal(0, math.sqrt(1.0 / F), (out, F)).astype(np.float32),
        "proj.1.bias": np.zeros(out, np.float32),
    }


def train(model: ModelArtifacts, id_train: TimeSeriesDataset, config: TrainConfig,
          id_val: TimeSeriesDataset | None = None) -> TrainResult:
    """Train a copy of ``model`` on normalized ID data.

    ``id_val`` is only used to log accuracy per epoch.
    """
    model = model.copy()
    if id_train.n_classes != model.config.n_classes:
        raise ValueError(f"model has {model.config.n_classes} outputs but data has {id_train.n_classes} classes")
    x = id_train.instances.astype(np.float32)
    y = id_train.labels
    rng = np.random.default_rng(config.seed)
    log: list[dict] = []

    def val_acc():
        return evaluate_id_accuracy(model, id_val) if id_val is not None and id_val.n else None

    try:
        if config.loss == "CE":
            _train_ce(model, x, y, config, rng, log, val_acc)
        else:
            _train_mpc(model, x, y, config, rng, log, val_acc)
    except NonFiniteError as exc:
        raise DivergedLossError(f"training diverged: {exc}") from exc

    train_acc = evaluate_id_accuracy(model, id_train)
    model.metadata = {
        "loss": config.loss,
        "epochs": config.epochs,
        "probe_epochs": config.probe_epochs if config.loss == "MPC" else 0,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "temperature": config.temperature if config.loss == "MPC" else None,
        "augmentation": config.views.to_config() if config.loss == "MPC" else None,
        "seed": config.seed,
        "id_train_accuracy": train_acc,
        "id_val_accuracy": val_acc(),
        "final_loss": log[-1]["loss"] if log else None,
    }
    return TrainResult(model, log)


def _train_ce(model, x, y, config, rng, log, val_acc, epoch_offset=0):
    opt = Adam({k: model.weights[k] for k in model.trainable}, config.learning_rate)
    last = None
    for epoch in range(1, config.epochs + 1):
        losses = []
        for step, idx in enumerate(_batches(rng, len(y), config.batch_size)):
            with Tape() as tape:
                params = model.param_tensors(requires_grad=True)
                logits, _ = forward_tensors(model, Tensor(x[idx]), params, training=True)
                loss = cross_entropy_loss(logits, y[idx])
            value = loss.item()
            _check_loss(value, "CE", epoch, step, last)
            grads = tape.backward(loss, wrt=list(params.values()))
            opt.step({k: grads[t].data for k, t in params.items()})
            losses.append(value)
            last = value
        log.append({"epoch": epoch + epoch_offset, "loss": float(np.mean(losses)), "id_val_accuracy": val_acc()})


def _train_mpc(model, x, y, config, rng, log, val_acc):
    F = model.feature_dim
    proj = _projection_init(rng, F, config.projection_dim)
    body = [k for k in model.trainable if not k.startswith("head.")]
    opt = Adam({**{k: model.weights[k] for k in body}, **proj}, config.learning_rate)
    spec = config.views
    view_rng = np.random.default_rng([config.seed, spec.seed])
    last = None
    for epoch in range(1, config.epochs + 1):
        losses = []
        for step, idx in enumerate(_batches(rng, len(y), config.batch_size)):
            views = [augment.apply(spec, x[i], rng=view_rng) for _ in range(2) for i in idx]
            batch = np.stack(views).astype(np.float32)
            labels = np.concatenate([y[idx], y[idx]])
            n = len(labels)
            match = labels[:, None] == labels[None, :]
            self_pair = np.eye(n, dtype=bool)
            with Tape() as tape:
                params = model.param_tensors(requires_grad=True)
                ptensors = {k: Tensor(v, requires_grad=True) for k, v in proj.items()}
                _, h = forward_tensors(model, Tensor(batch), params, training=True)
                z = ops.relu(ops.linear(h, ptensors["proj.0.weight"], ptensors["proj.0.bias"]))
                z = l2_normalize(ops.linear(z, ptensors["proj.1.weight"], ptensors["proj.1.bias"]))
                loss = mpc_loss(z, z, match, config.temperature, exclude=self_pair)
            value = loss.item()
            _check_loss(value, "MPC", epoch, step, last)
            wrt = {**{k: params[k] for k in body}, **ptensors}
            grads = tape.backward(loss, wrt=list(wrt.values()))
            opt.step({k: grads[t].data for k, t in wrt.items()})
            losses.append(value)
            last = value
        log.append({"epoch": epoch, "loss": float(np.mean(losses)), "id_val_accuracy": None})
    _fit_probe(model, x, y, config, rng, log, val_acc)


def _fit_probe(model, x, y, config, rng, log, val_acc):
    """Fit the linear head on frozen eval-mode prelogit features."""
    feats = forward(model, x).prelogit
    W, b = model.head
    opt = Adam({"head.weight": W, "head.bias": b}, config.learning_rate)
    last = None
    for epoch in range(1, config.probe_epochs + 1):
        losses = []
        for step, idx in enumerate(_batches(rng, len(y), config.batch_size)):
            with Tape() as tape:
                wt, bt = Tensor(W, requires_grad=True), Tensor(b, requires_grad=True)
                loss = cross_entropy_loss(ops.linear(Tensor(feats[idx]), wt, bt), y[idx])
            value = loss.item()
            _check_loss(value, "probe", epoch, step, last)
            grads = tape.backward(loss, wrt=[wt, bt])
            opt.step({"head.weight": grads[wt].data, "head.bias": grads[bt].data})
            losses.append(value)
            last = value
        log.append({"epoch": config.epochs + epoch, "loss": float(np.mean(losses)),
                    "id_val_accuracy": val_acc()})


def write_train_log(log: list[dict], path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "loss", "id_val_accuracy"])
        for row in log:
            acc = row["id_val_accuracy"]
            w.writerow([row["epoch"], repr(row["loss"]), "" if acc is None else repr(acc)])
    return path
