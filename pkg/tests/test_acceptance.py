"""End-to-end acceptance checks, one test per criterion.

Each test prints a single ``[criterion N] PASS|FAIL|SKIP`` line to the
terminal (outside pytest's capture) before asserting.
"""
import json
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import threadpoolctl

from tsood import augment as A
from tsood import scorers as S
from tsood.autograd import Tensor, finite_difference_check, ops
from tsood.backbones import ModelConfig, build_model, forward_tensors
from tsood.cli import main
from tsood.data import TimeSeriesDataset, load_uea
from tsood.evaluation import EvalReport, aupr, auroc, read_csv, results_without_latency
from tsood.features import average_path_length, fit_gaussian_tied, fit_pca, if_anomaly_score, \
    mahalanobis_distance, reconstruction_error, IsolationForestModel
from tsood.training import mpc_loss

from _cases import KERNEL_CASES

DATA = Path(__file__).parent / "data"


@pytest.fixture
def verdict(capsys):
    def emit(n: int, title: str, ok: bool, detail: str = "", skipped: bool = False):
        status = "SKIP" if skipped else ("PASS" if ok else "FAIL")
        with capsys.disabled():
            print(f"\n[criterion {n}] {status} {title}" + (f" ({detail})" if detail else ""))
        return ok
    return emit


def _write_cfg(path: Path, cfg: dict) -> Path:
    path.write_text(json.dumps(cfg))
    return path


# 1 ------------------------------------------------------------------------------------

def _backbone_trial(arch: str, rng: np.random.Generator) -> float:
    cfg = ModelConfig(arch, 2, 6, 3, width=4, seed=int(rng.integers(2**31)), heads=2)
    model = build_model(cfg)
    x = rng.normal(size=(1, 2, 6))  # eval mode, so one sample suffices
    w = rng.normal(size=(1, 3))

    def objective(logits):
        return ops.sub(ops.sum(ops.mul(logits, Tensor(w, dtype=np.float64))),
                       ops.sum(ops.logsumexp(logits, axis=1)))

    err_x = finite_difference_check(lambda t: objective(forward_tensors(model, t)[0]),
                                  x, h=1e-6, floor=1e-6)
    params = model.param_tensors()
    name = str(rng.choice(sorted(params)))

    def via_param(t):
        p = dict(params)
        p[name] = t
        return objective(forward_tensors(model, Tensor(x, dtype=np.float64), p)[0])

    err_p = finite_difference_check(via_param, params[name].data, h=1e-6, floor=1e-6)
    return max(err_x, err_p)


def test_criterion_1_autodiff_finite_differences(verdict):
    t0 = time.perf_counter()
    worst = {}
    for name, build in KERNEL_CASES.items():
        rng = np.random.default_rng(sum(map(ord, name)))
        worst[name] = max(finite_difference_check(*reversed(build(rng)), h=1e-4) for _ in range(100))
    for arch in ("ResNet1D", "TST", "LSTM"):
        rng = np.random.default_rng(len(arch))
        worst[arch] = max(_backbone_trial(arch, rng) for _ in range(100))
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v < 1e-3}
    ok = not bad and elapsed < 120
    verdict(1, "finite-difference gradients", ok,
            f"{len(KERNEL_CASES)} kernels + 3 backbones x 100 trials, max rel err "
            f"{max(worst.values()):.1e}, {elapsed:.0f}s" + (f", failing {sorted(bad)}" if bad else ""))
    assert ok


# 2 ------------------------------------------------------------------------------------

def _pair_count(s, y):
    pos, neg = s[y == 1], s[y == 0]
    gt = (pos[:, None] > neg[None, :]).sum()
    eq = (pos[:, None] == neg[None, :]).sum()
    return (gt + 0.5 * eq) / (pos.size * neg.size)


def test_criterion_2_metric_oracles(verdict):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for trial in range(1000):
        n = int(rng.integers(2, 501))
        y = rng.integers(0, 2, n)
        y[rng.choice(n, 2, replace=False)] = [0, 1]
        s = rng.integers(0, 10, n).astype(float) if trial % 3 == 0 else rng.normal(size=n)
        worst = max(worst, abs(auroc(s, y) - _pair_count(s, y)))
    fixtures = [
        (aupr([0.9, 0.8, 0.7], [1, 0, 1]), 0.8333, 1e-4),
        (aupr([0.9, 0.8, 0.1], [1, 1, 0]), 1.0, 1e-12),
        (aupr([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]), 0.5, 1e-12),
        (aupr([0.9, 0.5, 0.5], [1, 1, 0]), 0.5 + 0.5 * 2 / 3, 1e-12),
    ]
    fixtures_ok = all(abs(got - want) <= tol for got, want, tol in fixtures)
    ok = worst <= 1e-12 and fixtures_ok
    verdict(2, "AUROC pair-count oracle and AUPR fixtures", ok,
            f"1000 sets, max |diff| {worst:.1e}, AUPR fixtures {'ok' if fixtures_ok else 'mismatch'}")
    assert ok


# 3 ------------------------------------------------------------------------------------

def test_criterion_3_scorer_reductions(verdict):
    worst = {"ODIN->MSP": 0.0, "ReACT->EBO": 0.0, "DICE->EBO": 0.0}
    archs = ("ResNet1D", "TST", "LSTM")
    for i in range(50):
        rng = np.random.default_rng(i)
        arch = archs[i % 3]
        model = build_model(ModelConfig(arch, 2, 12, 3, width=8, seed=i))
        ds = TimeSeriesDataset(rng.normal(size=(12, 2, 12)).astype(np.float32), np.repeat([0, 1, 2], 4),
                               ("a", "b", "c"))
        x = rng.normal(size=(100, 2, 12)).astype(np.float32)
        msp = S.score(S.fit(S.ScorerSpec("MSP"), model, ds), x)
        ebo = S.score(S.fit(S.ScorerSpec("EBO"), model, ds), x)
        odin = S.score(S.fit(S.ScorerSpec("ODIN", {"temperature": 1.0, "epsilon": 0.0}), model, ds), x)
        react = S.fit(S.ScorerSpec("ReACT"), model, ds)
        react.threshold = math.inf
        dice = S.score(S.fit(S.ScorerSpec("DICE", {"prune_fraction": 0.0}), model, ds), x)
        worst["ODIN->MSP"] = max(worst["ODIN->MSP"], float(np.abs(odin - msp).max()))
        worst["ReACT->EBO"] = max(worst["ReACT->EBO"], float(np.abs(S.score(react, x) - ebo).max()))
        worst["DICE->EBO"] = max(worst["DICE->EBO"], float(np.abs(dice - ebo).max()))
    ok = all(v <= 1e-9 for v in worst.values())
    verdict(3, "scorer reduction identities", ok,
            "50 models x 100 samples, " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


# 4 ------------------------------------------------------------------------------------

class _ConstantDepthForest:
    """Stand-in forest whose every path has length c(psi)."""

    def __init__(self, psi, n_trees=7):
        self.psi, self.n_trees = psi, n_trees

    def path_lengths(self, x):
        return np.full((self.n_trees, x.shape[0]), average_path_length(self.psi))


def test_criterion_4_degenerate_identities(verdict):
    rng = np.random.default_rng(4)
    feats = rng.normal(size=(60, 5)) * np.array([3.0, 1.0, 0.5, 2.0, 1.5])
    labels = np.repeat([0, 1, 2], 20)

    g = fit_gaussian_tied(feats, labels, 3)
    mds_at_mean = float(np.abs(np.diag(mahalanobis_distance(g, g.means))).max())

    p = fit_pca(feats, labels, 3, retained=1.0)
    in_span = rng.normal(size=(10, 5)) * 7
    pca_err = float(np.abs(reconstruction_error(p, in_span)).max())

    if_scores = [float(if_anomaly_score(IsolationForestModel([_ConstantDepthForest(psi)], 7, psi, 0),
                                        rng.normal(size=(3, 5))).ravel()[0]) for psi in (2, 16, 256)]
    if_err = max(abs(s - 0.5) for s in if_scores)

    K = 6
    anchors = Tensor(np.tile(rng.normal(size=(1, 4)), (K, 1)), dtype=np.float64)
    mpc = mpc_loss(anchors, anchors, np.ones((K, K)), temperature=0.07).item()
    mpc_err = abs(mpc - math.log(K))

    ok = mds_at_mean <= 1e-9 and pca_err <= 1e-9 and if_err == 0.0 and mpc_err <= 1e-9
    verdict(4, "degenerate score identities", ok,
            f"MDS(mu) {mds_at_mean:.1e}, PCA in-span {pca_err:.1e}, IF-0.5 {if_err:.1e}, "
            f"MPC-lnK {mpc_err:.1e}")
    assert ok


# 5 ------------------------------------------------------------------------------------

@pytest.mark.slow
def test_criterion_5_synthetic_semantic_shift(verdict, tmp_path):
    t0 = time.perf_counter()
    pca, msp = [], []
    for seed in range(5):
        cfg = _write_cfg(tmp_path / f"s{seed}.json", {
            "dataset": {"synthetic": {"classes": 4}}, "model": {"arch": "ResNet1D"},
            "train": {"loss": "CE", "epochs": 100}, "scorers": ["MSP", "DFM-PCA"],
            "eval": {"record_latency": False}, "seed": seed})
        out = tmp_path / f"run{seed}"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
        rep = EvalReport.read(out / "results.json")
        pca.append(rep.methods["DFM-PCA"].auroc)
        msp.append(rep.methods["MSP"].auroc)
    elapsed = time.perf_counter() - t0
    med_pca, med_msp = float(np.median(pca)), float(np.median(msp))
    ok = med_pca >= 0.85 and med_pca >= med_msp and elapsed < 600
    verdict(5, "synthetic semantic shift (ResNet1D + CE, 5 seeds)", ok,
            f"median DFM-PCA {med_pca:.3f}, median MSP {med_msp:.3f}, {elapsed:.0f}s")
    assert ok


# 6 ------------------------------------------------------------------------------------

UEA_EXPECTED = {
    "Libras": {"n_train": 180, "n_test": 180, "d": 2, "L": 45, "C": 15},
    "RacketSports": {"n_train": 151, "n_test": 152, "d": 6, "L": 30, "C": 4},
}


def _stats(train, test):
    return {"n_train": len(train), "n_test": len(test), "d": train.dims, "L": train.length,
            "C": train.n_classes}


def _full_pipeline(tmp_path: Path, dataset: dict, seed: int = 0) -> tuple[EvalReport, float]:
    cfg = _write_cfg(tmp_path / "cfg.json", {"dataset": dataset, "model": {"arch": "ResNet1D"},
                                             "train": {"epochs": 100}, "seed": seed})
    t0 = time.perf_counter()
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    assert main(["eval", "--config", str(cfg), "--out", str(tmp_path / "out")]) == 0
    elapsed = time.perf_counter() - t0
    return EvalReport.read(tmp_path / "out" / "results.json"), elapsed


def _complete(rep: EvalReport, scores_csv: Path) -> bool:
    _, rows = read_csv(scores_csv)
    finite = all(math.isfinite(float(r["score"])) for r in rows)
    return sorted(rep.methods) == sorted(S.METHODS) and finite


@pytest.mark.slow
def test_criterion_6_bundled_real_data_smoke(verdict, tmp_path):
    train, test = load_uea(DATA, "BasicMotions")
    stats = _stats(train, test)
    stats_ok = stats == {"n_train": 40, "n_test": 40, "d": 6, "L": 100, "C": 4}
    rep, elapsed = _full_pipeline(tmp_path, {"uea_dir": str(DATA), "name": "BasicMotions"})
    ok = stats_ok and _complete(rep, tmp_path / "out" / "scores.csv") and elapsed < 900
    verdict(6, "real-data smoke on bundled BasicMotions", ok,
            f"stats {stats}, all 10 scorers in {elapsed:.0f}s")
    assert ok


@pytest.mark.slow
@pytest.mark.parametrize("name", sorted(UEA_EXPECTED))
def test_criterion_6_uea_archives(verdict, tmp_path, name):
    root = os.environ.get("TSOOD_UEA_DIR")
    if not root or not (Path(root) / f"{name}_TRAIN.ts").exists():
        verdict(6, f"{name} parser stats and full pipeline", False,
                "set TSOOD_UEA_DIR to a folder holding the .ts files", skipped=True)
        pytest.skip(f"{name} archive not available")
    train, test = load_uea(root, name)
    stats = _stats(train, test)
    rep, elapsed = _full_pipeline(tmp_path, {"uea_dir": root, "name": name})
    ok = stats == UEA_EXPECTED[name] and _complete(rep, tmp_path / "out" / "scores.csv") and elapsed < 900
    verdict(6, f"{name} parser stats and full pipeline", ok, f"stats {stats}, {elapsed:.0f}s")
    assert ok


# 7 ------------------------------------------------------------------------------------

IDENTITY = {
    "Jitter": {"sigma": 0.0},
    "Permutation": {"n_segments": 1},
    "MagnitudeWarp": {"sigma": 0.0},
    "WindowWarp": {"scales": [1.0]},
    "Resize": {"crop_ratio": 1.0},
    "TimeMask": {"mask_ratio": 0.0},
}


def test_criterion_7_augmentation_invariants(verdict):
    rng = np.random.default_rng(7)
    failures = []
    for kind, params in IDENTITY.items():
        for _ in range(20):
            x = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(2, 80))))
            out = A.apply(A.AugmentationSpec(kind, params, seed=int(rng.integers(2**31))), x)
            if not np.allclose(out, x, atol=1e-6, rtol=0):
                failures.append(f"identity {kind}")
                break
    flip_twice = A.flip(A.flip(np.arange(12.0).reshape(2, 6)))
    if not np.array_equal(flip_twice, np.arange(12.0).reshape(2, 6)):
        failures.append("flip involution")

    n = 10_000
    for i in range(n):
        kind = A.KINDS[i % len(A.KINDS)]
        d, L = int(rng.integers(1, 6)), int(rng.integers(2, 128))
        params = {"n_segments": int(rng.integers(1, min(8, L) + 1))} if kind == "Permutation" else {}
        spec = A.AugmentationSpec(kind, params, seed=int(rng.integers(2**32)))
        x = rng.normal(size=(d, L))
        a, b = A.apply(spec, x), A.apply(spec, x)
        if a.shape != x.shape or not np.array_equal(a, b) or not np.isfinite(a).all():
            failures.append(f"{kind} d={d} L={L}")
            break
    ok = not failures
    verdict(7, "augmentation identity, shape and determinism", ok,
            f"{len(IDENTITY)} identity kinds, {n} randomized applications" +
            (f", failures {failures}" if failures else ""))
    assert ok


# 8 ------------------------------------------------------------------------------------

def test_criterion_8_eval_reproducibility(verdict, tmp_path):
    cfg = _write_cfg(tmp_path / "c.json", {
        "dataset": {"synthetic": {"classes": 4, "n_train": 20, "n_test": 20, "dims": 2, "length": 32}},
        "model": {"arch": "ResNet1D", "width": 16}, "train": {"epochs": 10}, "seed": 3})
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0

    def run():
        assert main(["eval", "--config", str(cfg), "--out", str(out)]) == 0
        _, rows = read_csv(out / "scores.csv")
        return results_without_latency(out / "results.json"), \
            [{k: v for k, v in r.items() if k != "latency_ms"} for r in rows]

    first, second = run(), run()
    ok = first == second
    verdict(8, "repeated eval gives identical results.json and scores.csv", ok,
            "all 10 scorers, latency fields excluded")
    assert ok


# 9 ------------------------------------------------------------------------------------

def test_criterion_9_overhead_harness(verdict, tmp_path, monkeypatch):
    from tsood import evaluation

    cfg = _write_cfg(tmp_path / "c.json", {
        "dataset": {"synthetic": {"classes": 4, "n_train": 20, "n_test": 20, "dims": 2, "length": 32}},
        "model": {"arch": "ResNet1D", "width": 16}, "train": {"epochs": 5},
        "bench": {"warmup": 5, "repeats": 20}, "seed": 0})
    out = tmp_path / "out"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0

    pool_sizes = []
    real = evaluation.score_from_features

    def spy(*args, **kwargs):
        pool_sizes.extend(p["num_threads"] for p in threadpoolctl.threadpool_info())
        return real(*args, **kwargs)

    monkeypatch.setattr(evaluation, "score_from_features", spy)
    assert main(["bench", "--config", str(cfg), "--out", str(out), "--jobs", "8"]) == 0
    comment, rows = read_csv(out / "overhead.csv")
    shape_ok = [r["method"] for r in rows] == list(S.METHODS)
    positive = all(float(r["mean_ms"]) > 0 for r in rows)
    single = all(r["jobs"] == "1" and r["threads"] == "1" for r in rows) and \
        bool(pool_sizes) and set(pool_sizes) == {1}
    ok = shape_ok and positive and single and "config_digest=" in comment
    verdict(9, "overhead harness", ok,
            f"{len(rows)} methods, min {min(float(r['mean_ms']) for r in rows):.3f} ms, "
            f"thread pools seen {sorted(set(pool_sizes))}")
    assert ok
