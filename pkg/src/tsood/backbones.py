"""ResNet1D, Transformer (TST) and LSTM classifiers over (batch, d, L) inputs.

All three expose the same surface: logits, pre-logit features (the input of
the final linear layer ``head``), input gradients and the head weights.
Weights live in a flat, ordered ``name -> float32 array`` map; batch-norm
running statistics are stored there too, marked as buffers in the schema.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .autograd import Tape, Tensor, ops
from .data import NormStats

ARCHS = ("ResNet1D", "TST", "LSTM")
SCHEMA_VERSION = 1


class ShapeMismatchError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    arch: str
    in_channels: int
    seq_len: int
    n_classes: int
    width: int = 64
    seed: int = 0
    heads: int = 4

    def __post_init__(self) -> None:
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHS}")
        if min(self.in_channels, self.seq_len, self.width) <= 0:
            raise ValueError("model dimensions must be positive")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.arch == "TST" and self.width % self.heads:
            raise ValueError("TST width must be divisible by the number of heads")


class ParamSpec(NamedTuple):
    name: str
    shape: tuple[int, ...]
    buffer: bool = False


class ForwardOutputs(NamedTuple):
    logits: np.ndarray  # (batch, n_classes)
    prelogit: np.ndarray  # (batch, F)


# --- architectures ------------------------------------------------------------

def _he(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def _xavier(rng, shape):
    fan_out, fan_in = shape[0], int(np.prod(shape[1:]))
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


def _bn_specs(prefix, c):
    return [ParamSpec(f"{prefix}.weight", (c,)), ParamSpec(f"{prefix}.bias", (c,)),
            ParamSpec(f"{prefix}.running_mean", (c,), True),
            ParamSpec(f"{prefix}.running_var", (c,), True)]


def _head_specs(cfg, features):
    return [ParamSpec("head.weight", (cfg.n_classes, features)), ParamSpec("head.bias", (cfg.n_classes,))]


class ResNet1D:
    """Three residual blocks of three conv-bn layers (kernels 7/5/3)."""

    kernels = (7, 5, 3)

    @classmethod
    def schema(cls, cfg: ModelConfig) -> list[ParamSpec]:
        w = cfg.width
        specs = []
        for b in range(3):
            cin = cfg.in_channels if b == 0 else w
            for j, k in enumerate(cls.kernels):
                specs.append(ParamSpec(f"block{b}.conv{j}.weight", (w, cin if j == 0 else w, k)))
                specs += _bn_specs(f"block{b}.bn{j}", w)
            if cin != w:
                specs.append(ParamSpec(f"block{b}.shortcut.weight", (w, cin, 1)))
                specs += _bn_specs(f"block{b}.shortcut_bn", w)
        return specs + _head_specs(cfg, w)

    @staticmethod
    def init(spec: ParamSpec, rng) -> np.ndarray:
        name, shape = spec.name, spec.shape
        if name.endswith("running_var") or (".bn" in name or "_bn" in name) and name.endswith("weight"):
            return np.ones(shape)
        if name.endswith(("running_mean", "bias")):
            return np.zeros(shape)
        if name == "head.weight":
            return _xavier(rng, shape)
        return _he(rng, shape, shape[1] * shape[2])

    @staticmethod
    def forward(cfg, p, buf, x: Tensor, training: bool, trace=None):
        def bn(h, prefix):
            return ops.batch_norm(h, p[f"{prefix}.weight"], p[f"{prefix}.bias"],
                                  buf[f"{prefix}.running_mean"], buf[f"{prefix}.running_var"], training)

        h = x
        for b in range(3):
            y = h
            for j in range(3):
                y = bn(ops.conv1d(y, p[f"block{b}.conv{j}.weight"]), f"block{b}.bn{j}")
                if j < 2:
                    y = ops.relu(y)
            if f"block{b}.shortcut.weight" in p:
                skip = bn(ops.conv1d(h, p[f"block{b}.shortcut.weight"]), f"block{b}.shortcut_bn")
            else:
                skip = h
            h = ops.relu(ops.add(y, skip))
        return ops.global_avg_pool(h)


class TST:
    """Transformer encoder: input projection, learned positions, 3 post-norm layers."""

    n_layers = 3

    @classmethod
    def schema(cls, cfg: ModelConfig) -> list[ParamSpec]:
        w = cfg.width
        specs = [ParamSpec("input.weight", (w, cfg.in_channels)), ParamSpec("input.bias", (w,)),
                 ParamSpec("pos_embedding", (cfg.seq_len, w))]
        for l in range(cls.n_layers):
            pre = f"layer{l}"
            for m in ("q", "k", "v", "out"):
                specs += [ParamSpec(f"{pre}.attn.{m}.weight", (w, w)), ParamSpec(f"{pre}.attn.{m}.bias", (w,))]
            specs += [ParamSpec(f"{pre}.norm1.weight", (w,)), ParamSpec(f"{pre}.norm1.bias", (w,)),
                      ParamSpec(f"{pre}.ff1.weight", (2 * w, w)), ParamSpec(f"{pre}.ff1.bias", (2 * w,)),
                      ParamSpec(f"{pre}.ff2.weight", (w, 2 * w)), ParamSpec(f"{pre}.ff2.bias", (w,)),
                      ParamSpec(f"{pre}.norm2.weight", (w,)), ParamSpec(f"{pre}.norm2.bias", (w,))]
        return specs + _head_specs(cfg, w)

    @staticmethod
    def init(spec: ParamSpec, rng) -> np.ndarray:
        name, shape = spec.name, spec.shape
        if name == "pos_embedding":
            return rng.normal(0.0, 0.02, size=shape)
        if "norm" in name:
            return np.ones(shape) if name.endswith("weight") else np.zeros(shape)
        if name.endswith("bias"):
            return np.zeros(shape)
        return _xavier(rng, shape)

    @classmethod
    def forward(cls, cfg, p, buf, x: Tensor, training: bool, trace=None):
        B = x.shape[0]
        L, w, H = cfg.seq_len, cfg.width, cfg.heads
        dk = w // H
        h = ops.linear(ops.transpose(x, (0, 2, 1)), p["input.weight"], p["input.bias"])
        h = ops.add(h, p["pos_embedding"])
        for l in range(cls.n_layers):
            pre = f"layer{l}"

            def heads(t):
                return ops.transpose(ops.reshape(t, (B, L, H, dk)), (0, 2, 1, 3))

            q = heads(ops.linear(h, p[f"{pre}.attn.q.weight"], p[f"{pre}.attn.q.bias"]))
            k = heads(ops.linear(h, p[f"{pre}.attn.k.weight"], p[f"{pre}.attn.k.bias"]))
            v = heads(ops.linear(h, p[f"{pre}.attn.v.weight"], p[f"{pre}.attn.v.bias"]))
            scores = ops.mul(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dk))
            attn = ops.softmax(scores, axis=-1)
            if trace is not None:
                trace.setdefault("attention", []).append(attn.data)
            ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (B, L, w))
            a = ops.linear(ctx, p[f"{pre}.attn.out.weight"], p[f"{pre}.attn.out.bias"])
            h = ops.layer_norm(ops.add(h, a), p[f"{pre}.norm1.weight"], p[f"{pre}.norm1.bias"])
            f = ops.relu(ops.linear(h, p[f"{pre}.ff1.weight"], p[f"{pre}.ff1.bias"]))
            f = ops.linear(f, p[f"{pre}.ff2.weight"], p[f"{pre}.ff2.bias"])
            h = ops.layer_norm(ops.add(h, f), p[f"{pre}.norm2.weight"], p[f"{pre}.norm2.bias"])
        return ops.mean(h, axis=1)


class LSTM:
    """Two stacked unidirectional LSTM layers, last hidden state -> FC -> relu."""

    @staticmethod
    def schema(cfg: ModelConfig) -> list[ParamSpec]:
        w = cfg.width
        specs = []
        for l, nin in enumerate((cfg.in_channels, w)):
            specs += [ParamSpec(f"lstm{l}.weight_ih", (4 * w, nin)),
                      ParamSpec(f"lstm{l}.weight_hh", (4 * w, w)),
                      ParamSpec(f"lstm{l}.bias", (4 * w,))]
        specs += [ParamSpec("fc.weight", (w, w)), ParamSpec("fc.bias", (w,))]
        return specs + _head_specs(cfg, w)

    @staticmethod
    def init(spec: ParamSpec, rng) -> np.ndarray:
        name, shape = spec.name, spec.shape
        if name.startswith("lstm"):
            hidden = shape[0] // 4
            lim = 1.0 / math.sqrt(hidden)
            return rng.uniform(-lim, lim, size=shape)
        if name.endswith("bias"):
            return np.zeros(shape)
        if name == "fc.weight":
            return _he(rng, shape, shape[1])
        return _xavier(rng, shape)

    @staticmethod
    def forward(cfg, p, buf, x: Tensor, training: bool, trace=None):
        B, _, L = x.shape
        w = cfg.width
        seq = ops.transpose(x, (2, 0, 1))  # (L, B, d)
        for l in range(2):
            proj = ops.add(ops.matmul(seq, ops.transpose(p[f"lstm{l}.weight_ih"])), p[f"lstm{l}.bias"])
            w_hh = ops.transpose(p[f"lstm{l}.weight_hh"])
            h = c = None
            outs = []
            for t in range(L):
                gates = ops.slice(proj, t)
                if h is not None:
                    gates = ops.add(gates, ops.matmul(h, w_hh))
                i = ops.sigmoid(gates[:, 0:w])
                f = ops.sigmoid(gates[:, w:2 * w])
                g = ops.tanh(gates[:, 2 * w:3 * w])
                o = ops.sigmoid(gates[:, 3 * w:4 * w])
                c = ops.mul(i, g) if c is None else ops.add(ops.mul(f, c), ops.mul(i, g))
                h = ops.mul(o, ops.tanh(c))
                if l == 0:
                    outs.append(ops.reshape(h, (1, B, w)))
            if l == 0:
                seq = ops.concat(outs, axis=0)
        if trace is not None:
            trace["hidden"] = h.data
        return ops.relu(ops.linear(h, p["fc.weight"], p["fc.bias"]))


_ARCH = {"ResNet1D": ResNet1D, "TST": TST, "LSTM": LSTM}


# --- model artifacts ----------------------------------------------------------

@dataclass
class ModelArtifacts:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    norm_stats: NormStats | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = [(s.name, s.shape) for s in self.schema]
        got = [(k, tuple(v.shape)) for k, v in self.weights.items()]
        if expected != got:
            raise CheckpointError(f"weights do not match the {self.config.arch} schema")
        for k, v in self.weights.items():
            if not np.isfinite(v).all():
                raise CheckpointError(f"weight {k} is not finite")

    @property
    def schema(self) -> list[ParamSpec]:
        return _ARCH[self.config.arch].schema(self.config)

    @property
    def trainable(self) -> list[str]:
        return [s.name for s in self.schema if not s.buffer]

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return {s.name: self.weights[s.name] for s in self.schema if s.buffer}

    @property
    def head(self) -> tuple[np.ndarray, np.ndarray]:
        return self.weights["head.weight"], self.weights["head.bias"]

    @property
    def feature_dim(self) -> int:
        return self.weights["head.weight"].shape[1]

    def param_count(self, include_buffers: bool = False) -> int:
        return int(sum(np.prod(s.shape) for s in self.schema if include_buffers or not s.buffer))

    def param_tensors(self, requires_grad: bool = False) -> dict[str, Tensor]:
        return {k: Tensor(self.weights[k], requires_grad=requires_grad) for k in self.trainable}

    def copy(self) -> "ModelArtifacts":
        return ModelArtifacts(self.config, {k: v.copy() for k, v in self.weights.items()},
                              self.norm_stats, json.loads(json.dumps(self.metadata)))


def build_model(config: ModelConfig) -> ModelArtifacts:
    arch = _ARCH[config.arch]
    rng = np.random.default_rng(config.seed)
    weights = {s.name: arch.init(s, rng).astype(np.float32) for s in arch.schema(config)}
    return ModelArtifacts(config, weights)


def build_resnet1d(config: ModelConfig) -> ModelArtifacts:
    return build_model(_with_arch(config, "ResNet1D"))


def build_tst(config: ModelConfig) -> ModelArtifacts:
    return build_model(_with_arch(config, "TST"))


def build_lstm(config: ModelConfig) -> ModelArtifacts:
    return build_model(_with_arch(config, "LSTM"))


def _with_arch(config: ModelConfig, arch: str) -> ModelConfig:
    if config.arch == arch:
        return config
    return ModelConfig(**{**asdict(config), "arch": arch})


def _check_batch(model: ModelArtifacts, shape) -> None:
    cfg = model.config
    if len(shape) != 3 or shape[1] != cfg.in_channels or shape[2] != cfg.seq_len:
        raise ShapeMismatchError(
            f"expected batch (b, {cfg.in_channels}, {cfg.seq_len}), got {tuple(shape)}")


def forward_tensors(model: ModelArtifacts, x: Tensor, params: dict[str, Tensor] | None = None,
                    training: bool = False, trace: dict | None = None) -> tuple[Tensor, Tensor]:
    """Tape-aware forward pass returning ``(logits, prelogit)`` tensors."""
    _check_batch(model, x.shape)
    if params is None:
        params = model.param_tensors()
    arch = _ARCH[model.config.arch]
    prelogit = arch.forward(model.config, params, model.buffers, x, training, trace)
    logits = ops.linear(prelogit, params["head.weight"], params["head.bias"])
    return logits, prelogit


def forward(model: ModelArtifacts, batch: np.ndarray, chunk: int = 256, trace: dict | None = None) -> ForwardOutputs:
    """Eval-mode forward pass on a normalized (b, d, L) batch."""
    batch = np.asarray(batch)
    _check_batch(model, batch.shape)
    params = model.param_tensors()
    logits, feats = [], []
    for start in range(0, max(batch.shape[0], 1), chunk):
        x = Tensor(batch[start:start + chunk])
        lg, pl = forward_tensors(model, x, params, training=False, trace=trace)
        logits.append(lg.data)
        feats.append(pl.data)
    return ForwardOutputs(np.concatenate(logits), np.concatenate(feats))


def input_gradient(model: ModelArtifacts, x: np.ndarray,
                   objective: Callable[[Tensor], Tensor]) -> np.ndarray:
    """d objective(logits(x)) / dx, computed on the tape in eval mode.

    A float64 ``x`` keeps the whole pass in float64.
    """
    x = np.asarray(x)
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    with Tape() as tape:
        xt = Tensor(x, requires_grad=True, dtype=dtype)
        logits, _ = forward_tensors(model, xt)
        y = objective(logits)
    return tape.backward(y, wrt=[xt])[xt].data


# --- checkpoints --------------------------------------------------------------

def save_checkpoint(model: ModelArtifacts, directory: str | os.PathLike) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian float32)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "arch": model.config.arch,
        "config": asdict(model.config),
        "weights": [{"name": s.name, "shape": list(s.shape), "buffer": s.buffer} for s in model.schema],
        "normalization": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "training": model.metadata,
    }
    with open(directory / "weights.bin", "wb") as fh:
        for s in model.schema:
            fh.write(np.ascontiguousarray(model.weights[s.name], dtype="<f4").tobytes())
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | os.PathLike) -> ModelArtifacts:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
        blob = (directory / "weights.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {directory}: {exc.filename}") from None
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"unsupported checkpoint schema {manifest.get('schema_version')!r}")
    config = ModelConfig(**manifest["config"])
    schema = _ARCH[config.arch].schema(config)
    listed = [(w["name"], tuple(w["shape"])) for w in manifest["weights"]]
    if listed != [(s.name, s.shape) for s in schema]:
        raise CheckpointError("manifest weight list does not match the architecture schema")
    total = sum(int(np.prod(s.shape)) for s in schema)
    if len(blob) != 4 * total:
        raise CheckpointError(f"weights.bin has {len(blob)} bytes, expected {4 * total}")
    flat = np.frombuffer(blob, dtype="<f4")
    weights, offset = {}, 0
    for s in schema:
        n = int(np.prod(s.shape))
        weights[s.name] = flat[offset:offset + n].reshape(s.shape).astype(np.float32)
        offset += n
    norm = manifest.get("normalization")
    return ModelArtifacts(config, weights, NormStats.from_dict(norm) if norm else None,
                          manifest.get("training") or {})
