"""Threshold-free metrics, the ID-vs-OOD correlation study, latency benchmark and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata
from threadpoolctl import threadpool_limits

from .backbones import forward
from .scorers import FittedScorer, needs_input_gradient, score, score_from_features

SCHEMA_VERSION = 1
POSITIVE_CLASS = "ood"


class SingleClassError(ValueError):
    pass


class ZeroVarianceError(ValueError):
    pass


def _check_binary(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    if not np.isfinite(s).all():
        raise ValueError("scores contain NaN or inf")
    return s, y


def auroc(scores, labels) -> float:
    """P(score_ood > score_id) + P(tie) / 2, with label 1 = OOD."""
    s, y = _check_binary(scores, labels)
    n1 = int(y.sum())
    n0 = y.size - n1
    if n1 == 0 or n0 == 0:
        raise SingleClassError("AUROC needs both ID and OOD samples")
    ranks = rankdata(s)  # midranks for ties
    u = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


def aupr(scores, labels) -> float:
    """Average precision with OOD as the positive class; tied scores form one threshold."""
    s, y = _check_binary(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise SingleClassError("AUPR needs at least one OOD sample")
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = np.cumsum(y)[ends]
    fp = (ends + 1) - tp
    precision = tp / (tp + fp)
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pearson_corr(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson_corr needs two equal-length sequences of length >= 2")
    # compare values directly: the mean of equal floats need not equal them
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise ZeroVarianceError("pearson_corr is undefined for a constant sequence")
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt(float(dx @ dx)), math.sqrt(float(dy @ dy))
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


# --- correlation study ----------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationRow:
    method: str
    pcc: float | None
    n_runs: int
    note: str = ""


def correlation_study(runs: Sequence[dict]) -> list[CorrelationRow]:
    """PCC between ID accuracy and each method's AUROC across runs.

    Each run is ``{"id_accuracy": float, "auroc": {method: float}}``.
    Methods missing from a run are skipped for that run.
    """
    if len(runs) < 2:
        raise ValueError("correlation study needs at least two runs")
    methods: list[str] = []
    for r in runs:
        methods += [m for m in r["auroc"] if m not in methods]
    rows = []
    for m in methods:
        pairs = [(r["id_accuracy"], r["auroc"][m]) for r in runs
                 if m in r["auroc"] and r["auroc"][m] is not None]
        n = len(pairs)
        if n < 2:
            rows.append(CorrelationRow(m, None, n, "n/a: fewer than two runs"))
            continue
        acc, roc = zip(*pairs)
        try:
            pcc = pearson_corr(acc, roc)
        except ZeroVarianceError:
            rows.append(CorrelationRow(m, None, n, "n/a: zero variance"))
            continue
        rows.append(CorrelationRow(m, pcc, n, "degenerate: n=2" if n == 2 else ""))
    return rows


# --- overhead benchmark -------------------------------------------------------------------

@dataclass(frozen=True)
class OverheadRow:
    method: str
    mean_ms: float
    repeats: int
    warmup: int
    include_forward: bool


def overhead_benchmark(fitted: Iterable[FittedScorer], instances: np.ndarray, warmup: int = 20,
                       repeats: int = 100, include_forward: bool = False) -> list[OverheadRow]:
    """Mean wall-clock ms per single-sample scoring call, one method at a time.

    Runs with BLAS/OpenMP pools limited to one thread. In the default
    scoring-only mode the shared forward pass is computed once up front and
    excluded; ODIN with a nonzero step still pays for its gradient and its
    second forward pass, since those belong to the method.
    """
    if warmup < 1 or repeats < 1:
        raise ValueError("warmup and repeats must be >= 1")
    instances = np.asarray(instances, dtype=np.float32)
    n = instances.shape[0]
    if n == 0:
        raise ValueError("benchmark needs at least one sample")
    rows = []
    with threadpool_limits(limits=1):
        feats_cache: dict[int, np.ndarray] = {}
        for f in fitted:
            full_path = include_forward or needs_input_gradient(f)
            if not full_path and id(f.model) not in feats_cache:
                feats_cache[id(f.model)] = forward(f.model, instances).prelogit
            feats = None if full_path else feats_cache[id(f.model)]

            def call(i, f=f, feats=feats):
                if feats is None:
                    return score(f, instances[i:i + 1])
                return score_from_features(f, feats[i:i + 1])

            for i in range(warmup):
                call(i % n)
            total = 0
            for i in range(repeats):
                t0 = time.perf_counter_ns()
                call(i % n)
                total += time.perf_counter_ns() - t0
            rows.append(OverheadRow(f.method, total / repeats / 1e6, repeats, warmup, include_forward))
    return rows


# --- reports ---------------------------------------------------------------------------------

def config_digest(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode()).hexdigest()


@dataclass
class MethodResult:
    auroc: float
    aupr: float
    mean_latency_ms: float | None = None

    def __post_init__(self) -> None:
        for name in ("auroc", "aupr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass
class EvalReport:
    dataset: str
    split: dict
    config_digest: str
    seed: int
    id_accuracy: float
    n_id: int
    n_ood: int
    methods: dict[str, MethodResult] = field(default_factory=dict)

    def to_dict(self, include_latency: bool = True) -> dict:
        methods = {}
        for name, r in self.methods.items():
            entry = {"auroc": r.auroc, "aupr": r.aupr}
            if include_latency:
                entry["mean_latency_ms"] = r.mean_latency_ms
            methods[name] = entry
        return {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "split": self.split,
            "config_digest": self.config_digest,
            "seed": self.seed,
            "positive_class": POSITIVE_CLASS,
            "id_accuracy": self.id_accuracy,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "methods": methods,
        }

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True, allow_nan=False) + "\n")
        return path

    @classmethod
    def read(cls, path: str | os.PathLike) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported results schema {d.get('schema_version')!r}")
        methods = {k: MethodResult(**v) for k, v in d["methods"].items()}
        return cls(d["dataset"], d["split"], d["config_digest"], d["seed"], d["id_accuracy"],
                   d["n_id"], d["n_ood"], methods)


def results_without_latency(path: str | os.PathLike) -> str:
    """Canonical results.json text with the latency fields dropped, for comparisons."""
    d = json.loads(Path(path).read_text())
    for entry in d["methods"].values():
        entry.pop("mean_latency_ms", None)
    return json.dumps(d, indent=2, sort_keys=True)


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence],
              digest: str, seed: int) -> Path:
    """CSV preceded by one ``#`` comment line carrying the config digest and seed."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# tsood config_digest={digest} seed={seed} positive_class={POSITIVE_CLASS}\n")
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: str | os.PathLike) -> tuple[str, list[dict]]:
    """Returns the comment line and the rows as dicts."""
    with open(path, newline="") as fh:
        comment = fh.readline().rstrip("\n")
        return comment, list(csv.DictReader(fh))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)
