import math

import numpy as np
import pytest

from spurood.errors import ClassTooSmallError, EmptyInputError, NonPositiveTemperatureError, NotFittedError
from spurood.metrics import auroc
from spurood.numerics import Rng, spd_solve
from spurood.scores import (
    SCORE_FNS,
    GramFit,
    OdinConfig,
    ScoreCalibration,
    compute_scores,
    energy_score,
    fit_calibration,
    gram_entries,
    gram_fit,
    gram_score,
    hidden_of,
    logits_of,
    mahalanobis_fit,
    mahalanobis_score,
    msp,
    odin,
    select_odin_epsilon,
)
from spurood.train import MlpModel, TrainConfig, TrainData, train


def test_msp_examples():
    assert msp([0.0, 0.0]) == 0.5
    assert msp([2.0, 0.0]) == pytest.approx(math.exp(2) / (1 + math.exp(2)), abs=1e-15)
    with pytest.raises(EmptyInputError):
        msp([])


def test_energy_examples():
    assert energy_score([0.0, 0.0], 1.0) == pytest.approx(math.log(2), abs=1e-15)
    with pytest.raises(NonPositiveTemperatureError):
        energy_score([0.0, 0.0], 0.0)


def test_logit_shift_properties():
    z = np.random.default_rng(0).normal(size=(50, 3))
    for c in (-7.5, 0.3, 100.0):
        assert np.max(np.abs(msp(z + c) - msp(z))) <= 1e-12
        assert np.max(np.abs(energy_score(z + c) - energy_score(z) - c)) <= 1e-12 * max(1, abs(c))


def tiny_model(seed=0, d=5, hidden=(6, 4), K=3):
    return MlpModel.init((d, *hidden, K), Rng(seed))


def test_odin_reductions():
    m = tiny_model()
    X = np.random.default_rng(1).normal(size=(40, 5))
    assert np.array_equal(odin(m, X, OdinConfig(1.0, 0.0)), msp(logits_of(m, X)))
    assert np.all(np.abs(odin(m, X, OdinConfig(1e6, 0.0)) - 1 / 3) <= 1e-3)
    with pytest.raises(NonPositiveTemperatureError):
        OdinConfig(0.0)


def test_odin_perturbation_raises_confidence():
    m = tiny_model(3)
    X = np.random.default_rng(2).normal(size=(200, 5))
    base = odin(m, X, OdinConfig(1.0, 0.0))
    pushed = odin(m, X, OdinConfig(1.0, 0.01))
    assert pushed.mean() >= base.mean()


def test_select_odin_epsilon_prefers_first_on_ties():
    m = MlpModel.zeros((5, 4, 2))
    X = np.ones((10, 5))
    assert select_odin_epsilon(m, X, X, 1000.0, (0.005, 0.0)) == 0.005


def test_mahalanobis_fit_examples():
    fit = mahalanobis_fit([[0.0, 0.0], [2.0, 0.0]], [0, 0])
    assert np.allclose(fit.class_means, [[1.0, 0.0]])
    same = mahalanobis_fit([[1.0, 1.0]] * 4, [0, 0, 1, 1])
    assert np.allclose(same.shared_cov, 1e-12 * np.eye(2))
    with pytest.raises(ClassTooSmallError):
        mahalanobis_fit([[0.0], [1.0], [2.0]], [0, 0, 1])


def test_mahalanobis_score_examples():
    rng = np.random.default_rng(0)
    F = rng.normal(size=(500, 2))
    fit = mahalanobis_fit(F, np.zeros(500, int))
    fit.class_means[:] = 0.0
    fit.shared_cov = np.eye(2)
    fit._chol = None
    assert mahalanobis_score(fit, [[3.0, 4.0]])[0] == pytest.approx(-25.0)
    assert mahalanobis_score(fit, [[0.0, 0.0]])[0] == 0.0
    with pytest.raises(NotFittedError):
        mahalanobis_score(None, [[0.0, 0.0]])


def test_mahalanobis_means_and_quadratic_form_oracle():
    rng = np.random.default_rng(1)
    F = rng.normal(size=(300, 4)) + np.repeat([[0, 0, 0, 0], [2, 1, 0, -1], [0, 3, 3, 0]], 100, axis=0)
    y = np.repeat([0, 1, 2], 100)
    fit = mahalanobis_fit(F, y)
    for c in range(3):
        assert np.array_equal(fit.class_means[c], F[y == c].mean(axis=0))
    G = rng.normal(size=(50, 4))
    brute = np.array(
        [-min((g - mu) @ spd_solve(fit.shared_cov, g - mu) for mu in fit.class_means) for g in G]
    )
    got = mahalanobis_score(fit, G)
    assert np.allclose(got, brute, rtol=1e-10, atol=1e-10)
    assert np.array_equal(np.argsort(got), np.argsort(brute))


def test_mahalanobis_invariant_under_invertible_maps():
    rng = np.random.default_rng(2)
    F = rng.normal(size=(400, 5))
    y = rng.integers(0, 3, 400)
    G = rng.normal(size=(60, 5))
    base = mahalanobis_score(mahalanobis_fit(F, y), G)
    for _ in range(5):
        A = rng.normal(size=(5, 5)) + 2 * np.eye(5)
        mapped = mahalanobis_score(mahalanobis_fit(F @ A, y), G @ A)
        assert np.max(np.abs(mapped - base) / np.maximum(1, np.abs(base))) <= 1e-6


def brute_deviation(v, lo, hi):
    total = 0.0
    for x, a, b in zip(v, lo, hi):
        if x < a:
            total += (a - x) / max(abs(a), 1e-12)
        elif x > b:
            total += (x - b) / max(abs(b), 1e-12)
    return total


def test_gram_entries_definition():
    A = np.random.default_rng(0).normal(size=(3, 4))
    iu = np.triu_indices(4)
    for p in (1, 2, 3):
        Ap = A**p
        G = Ap[:, iu[0]] * Ap[:, iu[1]]
        ref = np.sign(G) * np.abs(G) ** (1 / p)
        assert np.allclose(gram_entries(A, p), ref, rtol=1e-12, atol=1e-14)


def test_gram_single_unit_order_one():
    a = np.array([[0.5], [2.0], [1.0]])
    fit = gram_fit([a], [0, 0, 0], [a], np.zeros(3, int), orders=(1,))
    assert fit.mins[(0, 0, 1)][0] == 0.25 and fit.maxs[(0, 0, 1)][0] == 4.0


def test_gram_training_samples_score_zero():
    rng = np.random.default_rng(3)
    layers = [np.abs(rng.normal(size=(40, 5))), np.abs(rng.normal(size=(40, 3)))]
    y = np.arange(40) % 2
    val = [np.abs(rng.normal(size=(30, 5))), np.abs(rng.normal(size=(30, 3)))]
    fit = gram_fit(layers, y, val, np.arange(30) % 2, orders=(1, 2, 3))
    assert np.all(gram_score(fit, layers, y) == 0.0)


def test_gram_below_min_formula_and_brute_force():
    lo, hi = np.array([2.0]), np.array([5.0])
    fit = GramFit((1,), {(0, 0, 1): lo}, {(0, 0, 1): hi}, np.array([1.0]))
    # sqrt(1.5)^2 = 1.5 < 2: deviation (2 - 1.5) / 2
    assert gram_score(fit, [np.array([[math.sqrt(1.5)]])], [0])[0] == pytest.approx(-0.25)

    rng = np.random.default_rng(4)
    tr = [rng.normal(size=(30, 4)), rng.normal(size=(30, 3))]
    ytr = np.arange(30) % 2
    va = [rng.normal(size=(20, 4)), rng.normal(size=(20, 3))]
    pv = np.arange(20) % 2
    orders = (1, 2, 3)
    fit = gram_fit(tr, ytr, va, pv, orders)
    te = [2 * rng.normal(size=(15, 4)), 2 * rng.normal(size=(15, 3))]
    pt = np.arange(15) % 2

    def layer_dev(layers, pred):
        out = np.zeros((len(pred), len(layers)))
        for i, c in enumerate(pred):
            for l, A in enumerate(layers):
                for p in orders:
                    v = gram_entries(A[i : i + 1], p)[0]
                    out[i, l] += brute_deviation(v, fit.mins[(c, l, p)], fit.maxs[(c, l, p)])
        return out

    assert np.allclose(fit.normalizers, np.maximum(layer_dev(va, pv).mean(axis=0), 1e-12))
    brute = -(layer_dev(te, pt) / fit.normalizers).sum(axis=1)
    assert np.allclose(gram_score(fit, te, pt), brute, rtol=1e-10, atol=1e-12)
    with pytest.raises(NotFittedError):
        gram_score(None, te, pt)


@pytest.fixture(scope="module")
def separable_setup():
    rng = np.random.default_rng(0)
    n = 300
    y = np.arange(n) % 2
    X = rng.normal(size=(n, 4)) * 0.5
    X[:, 0] += np.where(y == 1, 2.0, -2.0)
    data = TrainData(X, y, np.zeros(n, int), y, 2, 1, 2)
    m, _ = train(data, TrainConfig(epochs=60, hidden=(16, 8), seed=0, learning_rate=0.05))
    X_val = rng.normal(size=(100, 4)) * 0.5
    X_val[:, 0] += np.where(np.arange(100) % 2, 2.0, -2.0)
    X_ood = rng.normal(size=(100, 4)) * 0.5 + np.array([0.0, 6.0, -6.0, 6.0])
    return m, X, y, X_val, X_ood


def test_all_scores_rank_id_above_ood(separable_setup):
    m, X, y, X_val, X_ood = separable_setup
    cal = fit_calibration(m, X, y, X_val, X_ood[:30], odin_temperature=10.0)
    for name in SCORE_FNS:
        s_id = compute_scores(name, m, cal, X_val)
        s_ood = compute_scores(name, m, cal, X_ood)
        assert auroc(s_id, s_ood) > 0.5, name


def test_calibration_round_trip(separable_setup, tmp_path):
    m, X, y, X_val, X_ood = separable_setup
    cal = fit_calibration(m, X, y, X_val, X_ood[:30])
    cal.save(tmp_path / "c.cal")
    assert (tmp_path / "c.cal").read_bytes()[:4] == b"CAL1"
    back = ScoreCalibration.load(tmp_path / "c.cal")
    for name in SCORE_FNS:
        assert np.array_equal(compute_scores(name, m, cal, X_ood), compute_scores(name, m, back, X_ood)), name


def test_hidden_of_chunks_match_single_pass():
    m = tiny_model()
    X = np.random.default_rng(0).normal(size=(2500, 5))
    from spurood.train import forward

    full = forward(m, X).hidden
    assert all(np.allclose(a, b) for a, b in zip(hidden_of(m, X), full))


def test_unknown_score_name(separable_setup):
    m, X, y, X_val, _ = separable_setup
    with pytest.raises(ValueError):
        compute_scores("likelihood", m, fit_calibration(m, X, y, X_val, score_fns=("msp",)), X_val)
