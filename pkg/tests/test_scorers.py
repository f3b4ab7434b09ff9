import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsood import scorers as S
from tsood.autograd import Tape, Tensor, finite_difference_check, ops
from tsood.backbones import ModelConfig, build_model, forward, forward_tensors
from tsood.data import TimeSeriesDataset
from tsood.scorers import ScorerSpec, UnknownMethodError


def _model(F=8, C=3, d=2, L=16, seed=0, arch="ResNet1D"):
    return build_model(ModelConfig(arch, d, L, C, width=F, seed=seed))


def _dataset(n_per=10, C=3, d=2, L=16, seed=0):
    rng = np.random.default_rng(seed)
    x = np.concatenate([rng.normal(c, 1.0, size=(n_per, d, L)) for c in range(C)]).astype(np.float32)
    return TimeSeriesDataset(x, np.repeat(np.arange(C), n_per), tuple(f"k{c}" for c in range(C)))


def _fitted(method, model=None, ds=None, feats=None, **params):
    model = model or _model()
    ds = ds or _dataset()
    return S.fit(ScorerSpec(method, params), model, ds, feats)


def _with_head(method, W, b, **params):
    F = W.shape[1]
    fitted = _fitted(method, _model(F=F, C=W.shape[0]), _dataset(C=W.shape[0]), **params)
    fitted.weight, fitted.bias = np.asarray(W, float), np.asarray(b, float)
    return fitted


# --- logit scores ------------------------------------------------------------------

def test_msp_examples():
    assert S.msp_score([[0.0, 0.0, 0.0, 0.0]])[0] == pytest.approx(-0.25)
    e2 = math.exp(2)
    assert S.msp_score([[2.0, 0.0, 0.0]])[0] == pytest.approx(-e2 / (e2 + 2), abs=1e-12)
    assert S.msp_score([[2.0, 0.0, 0.0]])[0] == pytest.approx(-0.7869, abs=1e-4)
    z = np.random.default_rng(0).normal(size=(5, 4))
    np.testing.assert_allclose(S.msp_score(z + 17.0), S.msp_score(z), atol=1e-12)


def test_energy_examples():
    assert S.energy_score([[0.0, 0.0]])[0] == pytest.approx(-math.log(2), abs=1e-12)
    z = np.random.default_rng(1).normal(size=(5, 3))
    np.testing.assert_allclose(S.energy_score(z + 2.5), S.energy_score(z) - 2.5, atol=1e-12)
    bumped = z.copy()
    bumped[:, 1] += 0.5
    assert np.all(S.energy_score(bumped) < S.energy_score(z))


def test_odin_large_temperature_tends_to_uniform():
    f = _fitted("ODIN", temperature=1e8, epsilon=0.0)
    s = S.score(f, _dataset().instances)
    np.testing.assert_allclose(s, -1 / 3, atol=1e-6)


def test_odin_perturbation_sign_matches_finite_differences():
    model = _model(F=8, C=3, L=12, seed=3)
    f = S.fit(ScorerSpec("ODIN", {"temperature": 2.0, "epsilon": 0.01}), model, _dataset(L=12))
    x = np.random.default_rng(4).normal(size=(1, 2, 12))
    pert = S.odin_perturb(f, x.astype(np.float32))
    step = (x.astype(np.float32) - pert) / 0.01  # = sign of the gradient
    objective = S._odin_objective(2.0)
    fd = np.empty(x.size)
    h = 1e-6
    for i in range(x.size):
        a, b = x.copy().ravel(), x.copy().ravel()
        a[i] += h
        b[i] -= h
        fa = objective(forward_tensors(model, Tensor(a.reshape(x.shape), dtype=np.float64))[0]).item()
        fb = objective(forward_tensors(model, Tensor(b.reshape(x.shape), dtype=np.float64))[0]).item()
        fd[i] = (fa - fb) / (2 * h)
    clear = np.abs(fd) > 1e-6
    assert clear.sum() > x.size // 2
    np.testing.assert_array_equal(np.sign(fd[clear]), np.round(step.ravel()[clear]))


def test_odin_perturbation_lowers_objective():
    model = _model(seed=5)
    f = S.fit(ScorerSpec("ODIN", {"temperature": 1000.0, "epsilon": 0.002}), model, _dataset())
    x = _dataset().instances[:4]
    plain = S.fit(ScorerSpec("ODIN", {"temperature": 1000.0, "epsilon": 0.0}), model, _dataset())
    # a step against the gradient of -log max softmax raises max softmax
    assert np.all(S.score(f, x) <= S.score(plain, x) + 1e-9)


def test_gradnorm_uniform_logits_gives_zero():
    assert S.gradnorm_score(np.zeros((1, 4)), np.ones((1, 5)))[0] == 0.0


def test_gradnorm_closed_form_matches_tape_and_finite_differences():
    rng = np.random.default_rng(6)
    W, b = rng.normal(size=(3, 5)), rng.normal(size=3)
    h = rng.normal(size=(1, 5))

    def kl_uniform(w):
        z = ops.add(ops.matmul(Tensor(h, dtype=np.float64), ops.transpose(w)), b)
        return ops.sub(ops.logsumexp(z, axis=1), ops.mean(z, axis=1)).sum()

    with Tape() as tape:
        wt = Tensor(W, requires_grad=True, dtype=np.float64)
        loss = kl_uniform(wt)
    grad = tape.backward(loss, wrt=[wt])[wt].data
    closed = S.gradnorm_score(h @ W.T + b, h)[0]
    assert closed == pytest.approx(-np.abs(grad).sum(), rel=1e-12)
    assert finite_difference_check(kl_uniform, W, h=1e-6) < 1e-3


def test_gradnorm_doubles_with_features_at_fixed_softmax():
    W = np.array([[1.0, 0.0], [-2.0, 0.0], [0.5, 0.0]])
    b = np.array([0.3, -0.1, 0.7])
    h = np.array([[0.0, 1.5]])
    one = S.gradnorm_score(h @ W.T + b, h)
    two = S.gradnorm_score((2 * h) @ W.T + b, 2 * h)
    assert two[0] == pytest.approx(2 * one[0])
    assert one[0] < 0


# --- ReACT / DICE ----------------------------------------------------------------------

def test_react_threshold_percentile():
    model, ds = _model(), _dataset()
    feats = S.id_features(model, ds)
    assert _fitted("ReACT", model, ds).threshold == pytest.approx(np.percentile(feats, 90))
    full = _fitted("ReACT", model, ds, percentile=100.0)
    assert full.threshold == pytest.approx(feats.max())
    ebo = _fitted("EBO", model, ds)
    np.testing.assert_allclose(S.score_from_features(full, feats), S.score_from_features(ebo, feats), atol=1e-12)


def test_react_hand_example():
    W = np.array([[1.0, 2.0], [0.0, -1.0]])
    b = np.zeros(2)
    f = _with_head("ReACT", W, b)
    f.threshold = 1.0
    # h = (3, 0.5) -> clipped (1, 0.5) -> logits (2, -0.5)
    expected = -math.log(math.exp(2.0) + math.exp(-0.5))
    assert S.score_from_features(f, [[3.0, 0.5]])[0] == pytest.approx(expected, abs=1e-12)


def test_dice_mask_hand_ranking():
    W = np.array([[1.0, -2.0, 3.0], [4.0, 0.5, -1.0]])
    hbar = np.array([2.0, 1.0, 0.5])
    # contributions: row0 (2, -2, 1.5), row1 (8, 0.5, -0.5)
    mask = S.dice_mask(W, hbar, prune_fraction=0.5)  # keep ceil(1.5) = 2
    np.testing.assert_array_equal(mask, [[True, False, True], [True, True, False]])
    np.testing.assert_array_equal(S.dice_mask(W, hbar, 0.0), np.ones((2, 3), bool))
    np.testing.assert_array_equal(S.dice_mask(W, hbar, 0.99).sum(axis=1), [1, 1])
    np.testing.assert_array_equal(S.dice_mask(W, hbar, 0.99), [[True, False, False], [True, False, False]])


def test_dice_mask_keeps_ceil_count():
    W = np.random.default_rng(0).normal(size=(4, 10))
    hbar = np.abs(np.random.default_rng(1).normal(size=10))
    for p, k in [(0.7, 3), (0.75, 3), (0.71, 3), (0.9, 1), (0.0, 10), (0.05, 10)]:
        assert (S.dice_mask(W, hbar, p).sum(axis=1) == k).all(), p


# --- feature scores --------------------------------------------------------------------

def _feature_fit(method, feats, labels, C, **params):
    F = feats.shape[1]
    ds = TimeSeriesDataset(np.zeros((len(labels), 2, 16), np.float32), np.asarray(labels),
                           tuple(f"k{c}" for c in range(C)))
    return S.fit(ScorerSpec(method, params), _model(F=F, C=C), ds, feats)


def test_mds_examples():
    f = _feature_fit("MDS", np.array([[1.0, 0.5], [1.0, -0.5], [-1.0, 0.5], [-1.0, -0.5]]), [0, 0, 1, 1], 2)
    f.feature_model = S.fm.GaussianClassModel(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.eye(2), 0.0, np.eye(2))
    assert S.score_from_features(f, [[0.0, 0.0]])[0] == pytest.approx(1.0)
    assert S.score_from_features(f, [[-1.0, 0.0]])[0] == 0.0
    g = _feature_fit("MDS", np.random.default_rng(0).normal(size=(20, 3)), np.repeat([0, 1], 10), 2)
    assert g.feature_model.means.shape == (2, 3) and g.feature_model.covariance.shape == (3, 3)


def test_mds_affine_invariance():
    rng = np.random.default_rng(1)
    feats = np.concatenate([rng.normal(0, 1, (200, 3)), rng.normal(3, 1, (200, 3))])
    labels = np.repeat([0, 1], 200)
    A = np.array([[2.0, 0.3, 0.0], [0.1, 1.0, -0.4], [0.0, 0.5, 3.0]])
    probe = rng.normal(1, 2, size=(10, 3))
    base = S.score_from_features(_feature_fit("MDS", feats, labels, 2), probe)
    moved = S.score_from_features(_feature_fit("MDS", feats @ A.T + 4.0, labels, 2), probe @ A.T + 4.0)
    # the 1e-3 trace regularizer is not affine-equivariant, hence the loose tolerance
    np.testing.assert_allclose(moved, base, rtol=1e-2)


@pytest.mark.parametrize("method", ["DFM-PCA", "DFM-IF", "DFM-OCSVM", "MDS"])
def test_far_probe_outranks_id(method):
    rng = np.random.default_rng(2)
    # anisotropic cluster: PCA keeps the two wide directions
    feats = rng.normal(0, 1, size=(120, 4)) * np.array([1.0, 1.0, 0.1, 0.1])
    labels = np.repeat([0, 1], 60)
    f = _feature_fit(method, feats, labels, 2)
    id_scores = S.score_from_features(f, feats)
    diagonal = np.full((1, 4), 10.0 / 2.0)  # norm 10
    assert S.score_from_features(f, diagonal)[0] > id_scores.max()
    if method != "DFM-IF":
        # isolation trees split inside the training range, so a probe far out along a
        # single axis is isolated no faster than the extreme ID point on that axis
        axis = np.array([[0.0, 0.0, 0.0, 10.0]])
        assert S.score_from_features(f, axis)[0] > id_scores.max()


def test_dfm_pca_in_span_is_zero():
    rng = np.random.default_rng(3)
    feats = rng.normal(size=(40, 4))
    f = _feature_fit("DFM-PCA", feats, np.repeat([0, 1], 20), 2, retained=1.0)
    np.testing.assert_allclose(S.score_from_features(f, rng.normal(size=(5, 4)) * 9), 0, atol=1e-9)


def test_dfm_if_range():
    rng = np.random.default_rng(4)
    f = _feature_fit("DFM-IF", rng.normal(size=(40, 3)), np.repeat([0, 1], 20), 2, n_trees=20)
    s = S.score_from_features(f, rng.normal(size=(50, 3)) * 5)
    assert np.all((s > 0) & (s < 1))


# --- reductions and global properties ------------------------------------------------

@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["ResNet1D", "TST", "LSTM"]))
def test_reductions_exact(seed, arch):
    model = _model(F=8, C=3, L=8, seed=seed % 1000, arch=arch)
    ds = _dataset(n_per=4, L=8, seed=seed % 997)
    x = np.random.default_rng(seed).normal(size=(6, 2, 8)).astype(np.float32)
    pairs = [(("ODIN", {"temperature": 1.0, "epsilon": 0.0}), ("MSP", {})),
             (("ReACT", {"percentile": 100.0}), ("EBO", {})),
             (("DICE", {"prune_fraction": 0.0}), ("EBO", {}))]
    for (ma, pa), (mb, pb) in pairs:
        fa = S.fit(ScorerSpec(ma, pa), model, ds)
        fb = S.fit(ScorerSpec(mb, pb), model, ds)
        if ma == "ReACT":
            fa.threshold = math.inf
        assert np.abs(S.score(fa, x) - S.score(fb, x)).max() <= 1e-9


def test_react_infinite_threshold_equals_ebo_bitwise():
    f = _fitted("ReACT")
    f.threshold = math.inf
    h = np.random.default_rng(0).normal(size=(5, 8))
    np.testing.assert_array_equal(S.score_from_features(f, h), S.score_from_features(_fitted("EBO"), h))


@pytest.mark.parametrize("method", S.METHODS)
def test_all_scores_finite_and_deterministic(method):
    model, ds = _model(), _dataset()
    f = _fitted(method, model, ds)
    x = np.random.default_rng(1).normal(size=(5, 2, 16)).astype(np.float32) * 3
    a = S.score(f, x)
    assert a.shape == (5,) and np.isfinite(a).all()
    np.testing.assert_array_equal(a, S.score(f, x))


@pytest.mark.parametrize("method", ["MSP", "ODIN", "DFM-PCA"])
def test_score_batch_alignment_and_latency(method):
    f = _fitted(method)
    x = np.random.default_rng(2).normal(size=(7, 2, 16)).astype(np.float32)
    out = S.score_batch(f, x)
    assert out.latency_ms.shape == (7,) and (out.latency_ms >= 0).all()
    np.testing.assert_allclose(out.scores, S.score(f, x), rtol=1e-5, atol=1e-6)
    rev = S.score_batch(f, x[::-1])
    np.testing.assert_allclose(rev.scores, out.scores[::-1], rtol=1e-5, atol=1e-6)
    fast = S.score_batch(f, x, record_latency=False)
    assert fast.latency_ms is None


@pytest.mark.parametrize("method", S.METHODS)
def test_save_load_round_trip(tmp_path, method):
    model, ds = _model(), _dataset()
    f = _fitted(method, model, ds)
    path = S.save_scorer(f, tmp_path)
    assert path.name == f"{S.scorer_filename(method)}.json"
    back = S.load_scorer(tmp_path, method, model)
    x = np.random.default_rng(3).normal(size=(4, 2, 16)).astype(np.float32)
    np.testing.assert_array_equal(S.score(back, x), S.score(f, x))


def test_fit_all_shares_features():
    specs = [ScorerSpec(m) for m in S.METHODS]
    fitted = S.fit_all(specs, _model(), _dataset())
    assert [f.method for f in fitted] == list(S.METHODS)


def test_spec_validation():
    with pytest.raises(UnknownMethodError):
        ScorerSpec("KNN")
    with pytest.raises(ValueError):
        ScorerSpec("ODIN", {"temperature": 0.0})
    with pytest.raises(ValueError):
        ScorerSpec("ODIN", {"epsilon": -1.0})
    with pytest.raises(ValueError):
        ScorerSpec("ReACT", {"percentile": 0.0})
    with pytest.raises(ValueError):
        ScorerSpec("DICE", {"prune_fraction": 1.0})
    with pytest.raises(ValueError):
        ScorerSpec("MSP", {"temperature": 2.0})
    assert ScorerSpec.from_config("EBO").resolved() == {"temperature": 1.0}
