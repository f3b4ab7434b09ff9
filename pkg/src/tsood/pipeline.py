"""Config-driven runs: split, normalize, train, fit scorers, score, report.

A run is fully determined by one JSON config. Relative paths in the config
resolve against the directory holding the config file.
"""
from __future__ import annotations

import copy
import json
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from itertools import product
from pathlib import Path

import numpy as np

from . import scorers as S
from .augment import AugmentationSpec, UnknownKindError
from .backbones import ARCHS, ModelArtifacts, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .data import (
    NormStats,
    SplitSpec,
    TimeSeriesDataset,
    channel_normalize,
    generate_synthetic_splits,
    load_ts,
    load_uea,
    make_eval_mixture,
    split_id_ood,
)
from .evaluation import (
    EvalReport,
    MethodResult,
    aupr,
    auroc,
    config_digest,
    correlation_study,
    overhead_benchmark,
    write_csv,
)
from .training import LOSSES, TrainConfig, evaluate_id_accuracy, train, write_train_log


class ConfigError(ValueError):
    """Invalid or incomplete configuration (CLI exit code 2)."""


class RunError(RuntimeError):
    """A run failed after the configuration was accepted (CLI exit code 3)."""


class LeakageError(RuntimeError):
    pass


class DimsMismatchError(RunError):
    pass


DEFAULT_TRAIN = {"loss": "CE", "epochs": 100, "batch_size": 16, "learning_rate": 1e-3,
                 "temperature": 0.07, "probe_epochs": 50}
DEFAULT_BENCH = {"warmup": 20, "repeats": 100, "include_forward": False}
DEFAULT_SYNTHETIC = {"classes": 4, "n_train": 40, "n_test": 40, "dims": 3, "length": 64, "noise": 0.1}


# --- configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    raw: dict  # resolved config, paths absolute; digest source
    dataset: dict
    arch: str
    width: int
    train: TrainConfig
    scorers: tuple[S.ScorerSpec, ...]
    seed: int
    record_latency: bool
    bench: dict
    output_dir: Path | None

    @property
    def digest(self) -> str:
        return config_digest(self.raw)

    @property
    def dataset_name(self) -> str:
        return self.raw["dataset"]["name"]


def _section(cfg: dict, key: str, default=None) -> dict:
    value = cfg.get(key, default if default is not None else {})
    if not isinstance(value, dict):
        raise ConfigError(f"config key '{key}' must be an object")
    return value


def _resolve_path(value, key: str, base: Path) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"config key '{key}' must be a path string")
    p = Path(value)
    p = p if p.is_absolute() else base / p
    if not p.exists():
        raise ConfigError(f"config key '{key}': path does not exist: {p}")
    return str(p.resolve())


def _resolve_dataset(ds: dict, base: Path, key: str = "dataset") -> dict:
    if not isinstance(ds, dict):
        raise ConfigError(f"config key '{key}' must be an object")
    if "synthetic" in ds:
        syn = ds["synthetic"]
        if not isinstance(syn, dict):
            raise ConfigError(f"config key '{key}.synthetic' must be an object")
        unknown = set(syn) - set(DEFAULT_SYNTHETIC)
        if unknown:
            raise ConfigError(f"config key '{key}.synthetic': unknown fields {sorted(unknown)}")
        merged = {**DEFAULT_SYNTHETIC, **syn}
        for k in ("classes", "n_train", "n_test", "dims", "length"):
            if not isinstance(merged[k], int) or merged[k] <= 0:
                raise ConfigError(f"config key '{key}.synthetic.{k}' must be a positive integer")
        return {"name": ds.get("name", "synthetic"), "synthetic": merged}
    if "uea_dir" in ds:
        if "name" not in ds:
            raise ConfigError(f"config key '{key}.name' is required with '{key}.uea_dir'")
        d = _resolve_path(ds["uea_dir"], f"{key}.uea_dir", base)
        for part in ("TRAIN", "TEST"):
            f = Path(d) / f"{ds['name']}_{part}.ts"
            if not f.exists():
                raise ConfigError(f"config key '{key}.uea_dir': missing {f.name} in {d}")
        return {"name": ds["name"], "uea_dir": d}
    if "train" in ds or "test" in ds:
        out = {"name": ds.get("name", "dataset")}
        for part in ("train", "test"):
            if part not in ds:
                raise ConfigError(f"config key '{key}.{part}' is required")
            out[part] = _resolve_path(ds[part], f"{key}.{part}", base)
        return out
    raise ConfigError(f"config key '{key}' needs one of 'synthetic', 'uea_dir' or 'train'/'test'")


def resolve_config(cfg: dict, base: Path, seed: int | None = None, out: str | None = None,
                   dataset_key: str = "dataset") -> RunConfig:
    """Validate a single-run config and fill in defaults."""
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    if seed is None:
        seed = cfg.get("seed")
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("config key 'seed' must be an explicit integer")
    if dataset_key not in cfg:
        raise ConfigError(f"config key '{dataset_key}' is required")
    dataset = _resolve_dataset(cfg[dataset_key], base, dataset_key)

    model = _section(cfg, "model")
    arch = model.get("arch", "ResNet1D")
    if arch not in ARCHS:
        raise ConfigError(f"config key 'model.arch': unknown architecture {arch!r}; expected one of {ARCHS}")
    width = model.get("width", 64)
    if not isinstance(width, int) or width <= 0:
        raise ConfigError("config key 'model.width' must be a positive integer")

    tr = {**DEFAULT_TRAIN, **_section(cfg, "train")}
    unknown = set(tr) - set(DEFAULT_TRAIN)
    if unknown:
        raise ConfigError(f"config key 'train': unknown fields {sorted(unknown)}")
    if tr["loss"] not in LOSSES:
        raise ConfigError(f"config key 'train.loss': expected one of {LOSSES}, got {tr['loss']!r}")
    aug_cfg = cfg.get("augmentation")
    try:
        aug = None
        if aug_cfg is not None:
            aug = AugmentationSpec.from_config(aug_cfg)
            if not (isinstance(aug_cfg, dict) and "seed" in aug_cfg):
                aug = AugmentationSpec(aug.kind, aug.params, seed)
        train_cfg = TrainConfig(loss=tr["loss"], epochs=tr["epochs"], batch_size=tr["batch_size"],
                                learning_rate=float(tr["learning_rate"]), temperature=float(tr["temperature"]),
                                augmentation=aug, seed=seed, probe_epochs=tr["probe_epochs"])
    except (UnknownKindError, ValueError, TypeError) as exc:
        raise ConfigError(f"config key 'train'/'augmentation': {exc}") from exc

    scorer_cfg = cfg.get("scorers", list(S.METHODS))
    if not isinstance(scorer_cfg, list) or not scorer_cfg:
        raise ConfigError("config key 'scorers' must be a non-empty list")
    specs = []
    for i, item in enumerate(scorer_cfg):
        try:
            spec = S.ScorerSpec.from_config(item)
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"config key 'scorers[{i}]': {exc}") from exc
        if spec.method == "DFM-IF" and "seed" not in spec.params:
            spec = S.ScorerSpec(spec.method, {**spec.params, "seed": seed})
        specs.append(spec)
    names = [s.method for s in specs]
    if len(set(names)) != len(names):
        raise ConfigError("config key 'scorers' lists a method twice")

    ev = _section(cfg, "eval")
    record_latency = bool(ev.get("record_latency", True))
    bench = {**DEFAULT_BENCH, **_section(cfg, "bench")}
    if bench["warmup"] < 1 or bench["repeats"] < 1:
        raise ConfigError("config keys 'bench.warmup' and 'bench.repeats' must be >= 1")

    out_dir = out if out is not None else cfg.get("output_dir")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir = out_dir if out_dir.is_absolute() else base / out_dir

    raw = {
        "dataset": dataset,
        "model": {"arch": arch, "width": width},
        "train": {**tr, "augmentation": train_cfg.views.to_config() if train_cfg.loss == "MPC" else None},
        "scorers": [s.to_config() for s in specs],
        "eval": {"record_latency": record_latency},
        "bench": bench,
        "seed": seed,
    }
    return RunConfig(raw, dataset, arch, width, train_cfg, tuple(specs), seed, record_latency, bench, out_dir)


def load_config(path: str | os.PathLike) -> tuple[dict, Path]:
    path = Path(path)
    try:
        cfg = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return cfg, path.resolve().parent


# --- data ---------------------------------------------------------------------------

class LeakageGuard:
    """Holds the OOD test split until scorer fitting has finished."""

    def __init__(self, ood_test: TimeSeriesDataset):
        self._data = ood_test
        self._released = False

    def release(self) -> None:
        self._released = True

    @property
    def released(self) -> bool:
        return self._released

    def get(self) -> TimeSeriesDataset:
        if not self._released:
            raise LeakageError("ood_test was requested before scorer fitting completed")
        return self._data


@dataclass
class PreparedData:
    name: str
    id_train: TimeSeriesDataset
    id_test: TimeSeriesDataset
    ood: LeakageGuard
    split: SplitSpec
    norm: NormStats


def load_dataset(dataset: dict, seed: int) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    if "synthetic" in dataset:
        s = dataset["synthetic"]
        return generate_synthetic_splits(s["classes"], s["n_train"], s["n_test"], s["dims"], s["length"],
                                         seed, s["noise"])
    if "uea_dir" in dataset:
        return load_uea(dataset["uea_dir"], dataset["name"])
    return load_ts(dataset["train"], "train"), load_ts(dataset["test"], "test")


def prepare_data(run: RunConfig, norm: NormStats | None = None) -> PreparedData:
    """Split into ID/OOD and z-score with ID-train statistics (or the given ones)."""
    train_raw, test_raw = load_dataset(run.dataset, run.seed)
    id_train, id_test, ood_test, split = split_id_ood(train_raw, test_raw, run.seed)
    if norm is None:
        (id_train, id_test, ood_test), norm = channel_normalize(id_train, id_test, ood_test)
    else:
        if len(norm.mean) != id_train.dims:
            raise DimsMismatchError(f"checkpoint normalization has {len(norm.mean)} channels "
                                    f"but the dataset gives d={id_train.dims}")
        id_train, id_test, ood_test = (norm.apply(d) for d in (id_train, id_test, ood_test))
    return PreparedData(run.dataset_name, id_train, id_test, LeakageGuard(ood_test), split, norm)


# --- commands ---------------------------------------------------------------------------

def _require_out(run: RunConfig) -> Path:
    if run.output_dir is None:
        raise ConfigError("no output directory: pass --out or set 'output_dir'")
    return run.output_dir


def cmd_train(run: RunConfig) -> Path:
    out = _require_out(run)
    data = prepare_data(run)
    cfg = ModelConfig(run.arch, data.id_train.dims, data.id_train.length, data.id_train.n_classes,
                      width=run.width, seed=run.seed)
    result = train(build_model(cfg), data.id_train, run.train, id_val=data.id_test)
    model = result.model
    model.norm_stats = data.norm
    model.metadata = {**model.metadata, "dataset": data.name, "config_digest": run.digest,
                      "split": data.split.to_dict()}
    ckpt = save_checkpoint(model, out / "checkpoint")
    write_train_log(result.log, ckpt / "train_log.csv")
    return ckpt


def _check_dims(model: ModelArtifacts, data: PreparedData) -> None:
    c = model.config
    got = (data.id_train.dims, data.id_train.length, data.id_train.n_classes)
    if (c.in_channels, c.seq_len, c.n_classes) != got:
        raise DimsMismatchError(
            f"checkpoint expects (d={c.in_channels}, L={c.seq_len}, classes={c.n_classes}) "
            f"but the dataset gives (d={got[0]}, L={got[1]}, classes={got[2]})")


def _load_for_eval(run: RunConfig, checkpoint: Path | None) -> tuple[ModelArtifacts, PreparedData, Path]:
    out = _require_out(run)
    ckpt = Path(checkpoint) if checkpoint is not None else out / "checkpoint"
    if not (ckpt / "manifest.json").exists():
        raise RunError(f"no checkpoint at {ckpt}; run 'tsood train' first")
    model = load_checkpoint(ckpt)
    data = prepare_data(run, model.norm_stats)
    _check_dims(model, data)
    return model, data, ckpt


def fit_scorers(run: RunConfig, model: ModelArtifacts, data: PreparedData) -> list[S.FittedScorer]:
    if data.ood.released:
        raise LeakageError("ood_test released before scorer fitting")
    fitted = S.fit_all(run.scorers, model, data.id_train)
    data.ood.release()
    return fitted


def cmd_eval(run: RunConfig, checkpoint: Path | None = None) -> EvalReport:
    out = _require_out(run)
    model, data, ckpt = _load_for_eval(run, checkpoint)
    fitted = fit_scorers(run, model, data)
    for f in fitted:
        S.save_scorer(f, ckpt)
    ood_test = data.ood.get()
    mixture = make_eval_mixture(data.id_test, ood_test, run.seed)
    id_acc = evaluate_id_accuracy(model, data.id_test)

    report = EvalReport(data.name, data.split.to_dict(), run.digest, run.seed, id_acc,
                        int((mixture.is_ood == 0).sum()), int(mixture.is_ood.sum()))
    rows = []
    truth = np.where(mixture.is_ood == 1, "ood", "id")
    sample_ids = [f"{t}-{i}" for t, i in zip(truth, mixture.source_index)]
    for f in fitted:
        res = S.score_batch(f, mixture.instances, record_latency=run.record_latency)
        if not np.isfinite(res.scores).all():
            raise RunError(f"{f.method} produced non-finite scores")
        lat = float(res.latency_ms.mean()) if res.latency_ms is not None else None
        report.methods[f.method] = MethodResult(auroc(res.scores, mixture.is_ood),
                                                aupr(res.scores, mixture.is_ood), lat)
        for k in range(len(mixture)):
            rows.append([sample_ids[k], truth[k], f.method, float(res.scores[k]),
                         float(res.latency_ms[k]) if res.latency_ms is not None else None])
    report.write(out / "results.json")
    write_csv(out / "scores.csv", ["sample_id", "truth", "method", "score", "latency_ms"], rows,
              run.digest, run.seed)
    return report


def cmd_bench(run: RunConfig, checkpoint: Path | None = None) -> Path:
    """Per-method single-sample latency; always sequential with one thread."""
    out = _require_out(run)
    model, data, _ = _load_for_eval(run, checkpoint)
    fitted = fit_scorers(run, model, data)
    mixture = make_eval_mixture(data.id_test, data.ood.get(), run.seed)
    rows = overhead_benchmark(fitted, mixture.instances, warmup=int(run.bench["warmup"]),
                              repeats=int(run.bench["repeats"]),
                              include_forward=bool(run.bench["include_forward"]))
    return write_csv(out / "overhead.csv",
                     ["method", "mean_ms", "warmup", "repeats", "include_forward", "jobs", "threads"],
                     [[r.method, r.mean_ms, r.warmup, r.repeats, r.include_forward, 1, 1] for r in rows],
                     run.digest, run.seed)


# --- matrix -------------------------------------------------------------------------------

MATRIX_KEYS = ("datasets", "archs", "losses", "augmentations", "seeds")


def expand_matrix(cfg: dict, base: Path, seed: int | None = None) -> list[tuple[str, dict]]:
    """Cartesian product of the matrix lists as (cell name, single-run config) pairs.

    Augmentations only vary MPC runs; CE runs are listed once per combination.
    """
    m = cfg.get("matrix")
    if not isinstance(m, dict):
        raise ConfigError("config key 'matrix' must be an object")
    unknown = set(m) - set(MATRIX_KEYS)
    if unknown:
        raise ConfigError(f"config key 'matrix': unknown fields {sorted(unknown)}")
    datasets = m.get("datasets")
    if not isinstance(datasets, list) or not datasets:
        raise ConfigError("config key 'matrix.datasets' must be a non-empty list")
    archs = m.get("archs", [cfg.get("model", {}).get("arch", "ResNet1D")])
    losses = m.get("losses", [cfg.get("train", {}).get("loss", "CE")])
    augs = m.get("augmentations", [cfg.get("augmentation") or "Jitter"])
    seeds = m.get("seeds", [seed if seed is not None else cfg.get("seed")])
    if seed is not None:
        seeds = [seed]
    for key, values in (("archs", archs), ("losses", losses), ("augmentations", augs), ("seeds", seeds)):
        if not isinstance(values, list) or not values:
            raise ConfigError(f"config key 'matrix.{key}' must be a non-empty list")

    names = []
    for i, ds in enumerate(datasets):
        if not isinstance(ds, dict):
            raise ConfigError(f"config key 'matrix.datasets[{i}]' must be an object")
        names.append(ds.get("name", f"dataset{i}"))
    if len(set(names)) != len(names):
        raise ConfigError("config key 'matrix.datasets' has duplicate names")

    cells = []
    for (ds, name), arch, loss, seed_ in product(zip(datasets, names), archs, losses, seeds):
        for aug in (augs if loss == "MPC" else [None]):
            cell = copy.deepcopy({k: v for k, v in cfg.items() if k not in ("matrix", "output_dir")})
            cell["dataset"] = {**ds, "name": name}
            cell.setdefault("model", {})["arch"] = arch
            cell.setdefault("train", {})["loss"] = loss
            cell["seed"] = seed_
            if aug is None:
                cell.pop("augmentation", None)
                aug_name = "none"
            else:
                cell["augmentation"] = aug
                aug_name = aug if isinstance(aug, str) else aug.get("kind", "?")
            cell_name = f"{name}__{arch}__{loss}__{aug_name}__s{seed_}"
            # validate now so config errors surface before any training starts
            resolve_config(cell, base, dataset_key="dataset")
            cells.append((cell_name, cell))
    names = [c[0] for c in cells]
    if len(set(names)) != len(names):
        raise ConfigError("matrix cells are not unique; check the augmentation and seed lists")
    return cells


def _run_cell(name: str, cell: dict, base: str, out: str) -> dict:
    try:
        run = resolve_config(cell, Path(base), out=str(Path(out) / name))
        cmd_train(run)
        report = cmd_eval(run)
        return {"cell": name, "status": "ok", "error": "", "dataset": run.dataset_name, "arch": run.arch,
                "loss": run.train.loss,
                "augmentation": run.train.views.kind if run.train.loss == "MPC" else "none",
                "seed": run.seed, "id_accuracy": report.id_accuracy,
                "auroc": {m: r.auroc for m, r in report.methods.items()},
                "aupr": {m: r.aupr for m, r in report.methods.items()}}
    except Exception as exc:  # isolate failures per cell
        return {"cell": name, "status": "failed", "error": f"{type(exc).__name__}: {exc}",
                "traceback": traceback.format_exc()}


def _mean(values):
    return float(np.mean(values)) if values else None


def cmd_matrix(cfg: dict, base: Path, out: Path, jobs: int = 1, seed: int | None = None) -> list[dict]:
    cells = expand_matrix(cfg, base, seed)
    out.mkdir(parents=True, exist_ok=True)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_cell, n, c, str(base), str(out)) for n, c in cells]
            results = [f.result() for f in futures]
    else:
        results = [_run_cell(n, c, str(base), str(out)) for n, c in cells]

    digest = config_digest({k: v for k, v in cfg.items() if k != "output_dir"})
    seed_tag = seed if seed is not None else cfg.get("seed", "")
    write_csv(out / "matrix_status.csv", ["cell", "status", "error"],
              [[r["cell"], r["status"], r["error"]] for r in results], digest, seed_tag)
    ok = [r for r in results if r["status"] == "ok"]

    summary = []
    groupings = (("arch_method", "arch", None), ("loss_method", "loss", None),
                 ("augmentation_dataset", "augmentation", "dataset"))
    for grouping, key_a, key_b in groupings:
        groups: dict[tuple, dict] = {}
        for r in ok:
            if key_b is None:
                for m in r["auroc"]:
                    g = groups.setdefault((r[key_a], m), {"auroc": [], "aupr": []})
                    g["auroc"].append(r["auroc"][m])
                    g["aupr"].append(r["aupr"][m])
            else:
                g = groups.setdefault((r[key_a], r[key_b]), {"auroc": [], "aupr": []})
                g["auroc"].append(float(np.mean(list(r["auroc"].values()))))
                g["aupr"].append(float(np.mean(list(r["aupr"].values()))))
        for (a, b), g in groups.items():
            summary.append([grouping, a, b, _mean(g["auroc"]), _mean(g["aupr"]), len(g["auroc"])])
    write_csv(out / "summary.csv", ["grouping", "group", "subgroup", "mean_auroc", "mean_aupr", "n_runs"],
              summary, digest, seed_tag)

    corr_path = out / "correlation.csv"
    if len({r["dataset"] for r in ok}) >= 2:
        rows = correlation_study([{"id_accuracy": r["id_accuracy"], "auroc": r["auroc"]} for r in ok])
        write_csv(corr_path, ["method", "pcc", "n_runs", "note"],
                  [[r.method, r.pcc, r.n_runs, r.note] for r in rows], digest, seed_tag)
    elif corr_path.exists():
        corr_path.unlink()
    return results


# --- inspect ------------------------------------------------------------------------------

def inspect_checkpoint(path: str | os.PathLike) -> dict:
    path = Path(path)
    if not (path / "manifest.json").exists():
        raise RunError(f"no checkpoint at {path}")
    model = load_checkpoint(path)
    scorers = sorted(p.stem for p in path.glob("scorer_*.json"))
    return {
        "path": str(path),
        "arch": model.config.arch,
        "config": {k: getattr(model.config, k) for k in model.config.__dataclass_fields__},
        "parameters": model.param_count(),
        "buffers": model.param_count(include_buffers=True) - model.param_count(),
        "normalization": model.norm_stats.to_dict() if model.norm_stats is not None else None,
        "training": model.metadata,
        "scorers": scorers,
    }
