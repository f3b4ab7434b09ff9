"""Post-hoc OOD scorers. Every score is oriented so that higher means more OOD.

Scorers are fitted from the trained model and ID training data only; the
``fit`` signature has no slot for anything else. Logit-based scores
recompute logits in float64 from the pre-logit features and head weights.
"""
from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import features as fm
from .autograd import ops
from .backbones import ModelArtifacts, forward, input_gradient
from .data import TimeSeriesDataset

METHODS = ("MSP", "ODIN", "EBO", "GradNorm", "ReACT", "DICE", "MDS", "DFM-PCA", "DFM-IF", "DFM-OCSVM")

DEFAULT_PARAMS: dict[str, dict] = {
    "MSP": {},
    "ODIN": {"temperature": 1000.0, "epsilon": 0.002},
    "EBO": {"temperature": 1.0},
    "GradNorm": {},
    "ReACT": {"temperature": 1.0, "percentile": 90.0},
    "DICE": {"temperature": 1.0, "prune_fraction": 0.7},
    "MDS": {},
    "DFM-PCA": {"retained": 0.97},
    "DFM-IF": {"n_trees": 100, "psi": 256, "seed": 0},
    "DFM-OCSVM": {"nu": 0.1, "gamma": None},
}

FEATURE_METHODS = ("MDS", "DFM-PCA", "DFM-IF", "DFM-OCSVM")


class UnknownMethodError(ValueError):
    pass


@dataclass(frozen=True)
class ScorerSpec:
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.method not in DEFAULT_PARAMS:
            raise UnknownMethodError(f"unknown scorer {self.method!r}; expected one of {METHODS}")
        unknown = set(self.params) - set(DEFAULT_PARAMS[self.method])
        if unknown:
            raise ValueError(f"{self.method}: unknown parameters {sorted(unknown)}")
        p = self.resolved()
        if "temperature" in p and not p["temperature"] > 0:
            raise ValueError(f"{self.method}: temperature must be > 0")
        if "epsilon" in p and p["epsilon"] < 0:
            raise ValueError("ODIN: epsilon must be >= 0")
        if "percentile" in p and not 0 < p["percentile"] <= 100:
            raise ValueError("ReACT: percentile must be in (0, 100]")
        if "prune_fraction" in p and not 0 <= p["prune_fraction"] < 1:
            raise ValueError("DICE: prune_fraction must be in [0, 1)")
        if "retained" in p and not 0 < p["retained"] <= 1:
            raise ValueError("DFM-PCA: retained must be in (0, 1]")
        if "nu" in p and not 0 < p["nu"] <= 1:
            raise ValueError("DFM-OCSVM: nu must be in (0, 1]")

    def resolved(self) -> dict:
        return {**DEFAULT_PARAMS[self.method], **self.params}

    @classmethod
    def from_config(cls, cfg) -> "ScorerSpec":
        if isinstance(cfg, str):
            return cls(cfg)
        return cls(cfg["method"], dict(cfg.get("params", {})))

    def to_config(self) -> dict:
        return {"method": self.method, "params": self.resolved()}


@dataclass
class FittedScorer:
    spec: ScorerSpec
    model: ModelArtifacts
    weight: np.ndarray  # float64 head weight used for logits (masked for DICE)
    bias: np.ndarray
    threshold: float | None = None  # ReACT clip value
    mask: np.ndarray | None = None  # DICE keep-mask
    mean_activation: np.ndarray | None = None  # DICE
    feature_model: object | None = None

    @property
    def method(self) -> str:
        return self.spec.method

    @property
    def params(self) -> dict:
        return self.spec.resolved()


# --- fitting ----------------------------------------------------------------------

def id_features(model: ModelArtifacts, id_train: TimeSeriesDataset) -> np.ndarray:
    return forward(model, id_train.instances.astype(np.float32)).prelogit.astype(np.float64)


def dice_mask(weight: np.ndarray, mean_activation: np.ndarray, prune_fraction: float) -> np.ndarray:
    """Keep the ceil((1 - p) F) largest contributions W_ij * hbar_j in each row."""
    F = weight.shape[1]
    keep = max(1, int(math.ceil((1.0 - prune_fraction) * F - 1e-9)))
    contrib = weight * mean_activation[None, :]
    order = np.argsort(-contrib, axis=1, kind="stable")
    mask = np.zeros_like(weight, dtype=bool)
    np.put_along_axis(mask, order[:, :keep], True, axis=1)
    return mask


def fit(spec: ScorerSpec, model: ModelArtifacts, id_train: TimeSeriesDataset,
        features: np.ndarray | None = None) -> FittedScorer:
    """Fit one scorer. ``features`` may pass precomputed ID-train prelogits."""
    W, b = (np.asarray(a, dtype=np.float64).copy() for a in model.head)
    p = spec.resolved()
    out = FittedScorer(spec, model, W, b)
    if spec.method in ("MSP", "ODIN", "EBO", "GradNorm"):
        return out
    feats = id_features(model, id_train) if features is None else np.asarray(features, dtype=np.float64)
    labels, C = id_train.labels, id_train.n_classes
    if spec.method == "ReACT":
        out.threshold = float(np.percentile(feats, p["percentile"]))
    elif spec.method == "DICE":
        out.mean_activation = feats.mean(axis=0)
        out.mask = dice_mask(W, out.mean_activation, p["prune_fraction"])
        out.weight = W * out.mask
    elif spec.method == "MDS":
        out.feature_model = fm.fit_gaussian_tied(feats, labels, C)
    elif spec.method == "DFM-PCA":
        out.feature_model = fm.fit_pca(feats, labels, C, retained=p["retained"])
    elif spec.method == "DFM-IF":
        out.feature_model = fm.fit_isolation_forest(feats, labels, C, n_trees=int(p["n_trees"]),
                                                    psi=int(p["psi"]), seed=int(p["seed"]))
    elif spec.method == "DFM-OCSVM":
        out.feature_model = fm.fit_ocsvm(feats, labels, C, nu=p["nu"], gamma=p["gamma"])
    return out


def fit_all(specs: Iterable[ScorerSpec], model: ModelArtifacts, id_train: TimeSeriesDataset) -> list[FittedScorer]:
    """Fit several scorers sharing one forward pass over the ID training set."""
    specs = list(specs)
    feats = id_features(model, id_train) if any(s.method not in ("MSP", "ODIN", "EBO", "GradNorm") for s in specs) else None
    return [fit(s, model, id_train, feats) for s in specs]


# --- score functionals --------------------------------------------------------------

def _logsumexp(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    return (m + np.log(np.exp(z - m).sum(axis=1, keepdims=True)))[:, 0]


def _max_softmax(z: np.ndarray) -> np.ndarray:
    return np.exp(z.max(axis=1) - _logsumexp(z))


def msp_score(logits: np.ndarray) -> np.ndarray:
    return -_max_softmax(np.asarray(logits, dtype=np.float64))


def energy_score(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return -temperature * _logsumexp(z / temperature)


def gradnorm_score(logits: np.ndarray, prelogit: np.ndarray) -> np.ndarray:
    """-||dL/dW||_1 with L = mean_i(-log softmax_i); dL/dW = (p - 1/C) h^T."""
    z = np.asarray(logits, dtype=np.float64)
    h = np.asarray(prelogit, dtype=np.float64)
    p = np.exp(z - _logsumexp(z)[:, None])
    return -(np.abs(p - 1.0 / z.shape[1]).sum(axis=1) * np.abs(h).sum(axis=1))


def _logits(fitted: FittedScorer, prelogit: np.ndarray) -> np.ndarray:
    return prelogit @ fitted.weight.T + fitted.bias


def _odin_objective(temperature: float):
    def objective(logits):
        return ops.neg(ops.log(ops.max(ops.softmax(ops.mul(logits, 1.0 / temperature), axis=1), axis=1)))
    return objective


def odin_perturb(fitted: FittedScorer, x: np.ndarray) -> np.ndarray:
    """x - eps * sign(grad_x[-log max softmax(logits / T)]), one sample at a time."""
    p = fitted.params
    objective = _odin_objective(p["temperature"])
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        # the objective sums over the batch, so per-sample calls give per-sample gradients
        g = input_gradient(fitted.model, x[i:i + 1], lambda lg: ops.sum(objective(lg)))
        out[i] = x[i] - p["epsilon"] * np.sign(g[0])
    return out


def score_from_features(fitted: FittedScorer, prelogit: np.ndarray) -> np.ndarray:
    """Score from pre-logit features (every method except ODIN with eps > 0)."""
    h = np.asarray(prelogit, dtype=np.float64)
    p = fitted.params
    m = fitted.method
    if m == "MSP":
        return msp_score(_logits(fitted, h))
    if m == "ODIN":
        return msp_score(_logits(fitted, h) / p["temperature"])
    if m in ("EBO", "DICE"):
        return energy_score(_logits(fitted, h), p["temperature"])
    if m == "GradNorm":
        return gradnorm_score(_logits(fitted, h), h)
    if m == "ReACT":
        return energy_score(_logits(fitted, np.minimum(h, fitted.threshold)), p["temperature"])
    if m == "MDS":
        return fm.mahalanobis_distance(fitted.feature_model, h).min(axis=1)
    if m == "DFM-PCA":
        return fm.reconstruction_error(fitted.feature_model, h).min(axis=1)
    if m == "DFM-IF":
        return fm.if_anomaly_score(fitted.feature_model, h).min(axis=1)
    if m == "DFM-OCSVM":
        return -fm.ocsvm_decision(fitted.feature_model, h).max(axis=1)
    raise UnknownMethodError(m)


def needs_input_gradient(fitted: FittedScorer) -> bool:
    return fitted.method == "ODIN" and fitted.params["epsilon"] > 0


def score(fitted: FittedScorer, x: np.ndarray) -> np.ndarray:
    """Scores for a (n, d, L) batch of normalized inputs."""
    x = np.asarray(x, dtype=np.float32)
    if needs_input_gradient(fitted):
        x = odin_perturb(fitted, x)
    return score_from_features(fitted, forward(fitted.model, x).prelogit)


class BatchScores(NamedTuple):
    scores: np.ndarray
    latency_ms: np.ndarray | None


def score_batch(fitted: FittedScorer, instances: np.ndarray, record_latency: bool = True) -> BatchScores:
    """Scores aligned with ``instances``.

    With ``record_latency`` each sample is scored on its own, sequentially,
    and the wall-clock time of that call (forward pass included) is kept.
    """
    instances = np.asarray(instances, dtype=np.float32)
    if not record_latency:
        return BatchScores(score(fitted, instances), None)
    scores = np.empty(instances.shape[0])
    latency = np.empty(instances.shape[0])
    for i in range(instances.shape[0]):
        t0 = time.perf_counter_ns()
        scores[i] = score(fitted, instances[i:i + 1])[0]
        latency[i] = (time.perf_counter_ns() - t0) / 1e6
    return BatchScores(scores, latency)


# --- persistence --------------------------------------------------------------------

def scorer_filename(method: str) -> str:
    return "scorer_" + method.lower().replace("-", "_")


def _write_blob(path: Path, arrays: dict[str, np.ndarray]) -> list[dict]:
    index, offset = [], 0
    with open(path, "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            dtype = "<i8" if arr.dtype.kind in "iub" else "<f8"
            data = np.ascontiguousarray(arr, dtype=dtype).tobytes()
            fh.write(data)
            index.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset})
            offset += len(data)
    return index


def _read_blob(path: Path, index: list[dict]) -> dict[str, np.ndarray]:
    blob = path.read_bytes()
    out = {}
    for entry in index:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype=entry["dtype"], count=n, offset=entry["offset"])
        out[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return out


def save_scorer(fitted: FittedScorer, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = scorer_filename(fitted.method)
    arrays = {"weight": fitted.weight, "bias": fitted.bias}
    if fitted.mask is not None:
        arrays["mask"] = fitted.mask.astype(np.int64)
        arrays["mean_activation"] = fitted.mean_activation
    model_meta = None
    if fitted.feature_model is not None:
        model_meta, model_arrays = fitted.feature_model.state()
        arrays.update({f"model.{k}": v for k, v in model_arrays.items()})
    index = _write_blob(directory / f"{stem}.bin", arrays)
    meta = {"spec": fitted.spec.to_config(), "threshold": fitted.threshold,
            "feature_model": model_meta, "arrays": index}
    path = directory / f"{stem}.json"
    path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return path


def load_scorer(directory: str | os.PathLike, method: str, model: ModelArtifacts) -> FittedScorer:
    directory = Path(directory)
    stem = scorer_filename(method)
    meta = json.loads((directory / f"{stem}.json").read_text())
    arrays = _read_blob(directory / f"{stem}.bin", meta["arrays"])
    spec = ScorerSpec.from_config(meta["spec"])
    feature_model = None
    if meta["feature_model"] is not None:
        sub = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
        feature_model = fm.model_from_state(meta["feature_model"], sub)
    mask = arrays["mask"].astype(bool) if "mask" in arrays else None
    return FittedScorer(spec, model, arrays["weight"], arrays["bias"], meta["threshold"], mask,
                        arrays.get("mean_activation"), feature_model)
