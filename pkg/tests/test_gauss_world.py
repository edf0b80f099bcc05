import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spurood import gauss_world as gw
from spurood.errors import BadConfidenceError, BadEnvIndexError, DimensionMismatchError, TooManyEnvsError
from spurood.numerics import Rng
from spurood.theory import CONFIDENCE_GRID, fit_logistic


def world_1d(mu_inv=1.0, s2_inv=1.0, mu_e=2.0, s2_e=4.0, eta=0.5):
    return gw.GaussWorld(gw.InvSpec([mu_inv], s2_inv), [gw.EnvSpec([mu_e], s2_e)], eta)


def test_sample_empty_and_labels_at_extreme_prior():
    w = world_1d()
    assert len(gw.sample(w, 0, 0, Rng(0))) == 0
    w = world_1d(eta=1 - 1e-12)
    assert np.all(gw.sample(w, 0, 1000, Rng(0)).y == 1)


def test_sample_bad_env_index():
    with pytest.raises(BadEnvIndexError):
        gw.sample(world_1d(), 3, 10, Rng(0))


def test_sample_conditional_mean_clt():
    w = gw.GaussWorld(gw.InvSpec([1.0, -0.5], 2.0), [gw.EnvSpec([0.3], 1.0)], eta=0.3)
    n = 1_000_000
    b = gw.sample(w, 0, n, Rng(4))
    pos = b.z_inv[b.y == 1]
    bound = 4 * math.sqrt(2.0) / math.sqrt(w.eta * n)
    assert np.all(np.abs(pos.mean(axis=0) - w.inv.mu_inv) <= bound)


def test_sample_item_access():
    b = gw.sample(world_1d(), 0, 3, Rng(0))
    item = b[1]
    assert item.y in (-1, 1) and item.env_index == 0
    assert b.stacked().shape == (3, 2)


def test_bayes_reduces_to_invariant():
    w = gw.GaussWorld(gw.InvSpec([1.0, 2.0], 0.5), [gw.EnvSpec([1.0, 0.0, 0.0], 1.0)])
    c = gw.bayes_classifier(w, 0, np.eye(2), np.zeros((2, 3)))
    assert np.allclose(c.w, 2 * np.array([1.0, 2.0]) / 0.5)


def test_bayes_scalar_example():
    c = gw.bayes_classifier(world_1d(), 0, [[1.0], [0.0]], [[0.0], [1.0]])
    assert np.allclose(c.w, [2.0, 1.0], atol=1e-14)
    assert c.bias == 0.0


def test_bayes_shape_checks():
    with pytest.raises(DimensionMismatchError):
        gw.bayes_classifier(world_1d(), 0, np.eye(2), np.zeros((1, 1)))


def test_invariant_classifier_examples():
    w = gw.GaussWorld(gw.InvSpec([1.0, 1.0], 2.0), [gw.EnvSpec([1.0], 1.0)], eta=0.5)
    c = gw.invariant_classifier(w)
    assert np.allclose(c.w, [1, 1]) and c.bias == 0.0
    w9 = gw.GaussWorld(w.inv, w.envs, eta=0.9)
    assert gw.invariant_classifier(w9).bias == pytest.approx(2.19722, abs=1e-5)


def test_shortcut_single_env():
    sc = gw.shortcut([gw.EnvSpec([2.0, 0.0], 1.0)])
    assert np.allclose(sc.p, [1, 0]) and sc.beta == pytest.approx(2.0)


def test_shortcut_two_envs():
    envs = [gw.EnvSpec([1.0, 0.0], 1.0), gw.EnvSpec([0.0, 2.0], 1.0)]
    sc = gw.shortcut(envs)
    assert sc.beta == pytest.approx(1 / math.sqrt(1.25), abs=1e-12)
    assert np.allclose(sc.p, [0.894427191, 0.4472135955])
    assert np.all(gw.shortcut_residuals(envs, sc) <= 1e-12)


def test_shortcut_too_many_envs():
    envs = [gw.EnvSpec(v, 1.0) for v in ([1.0, 0.0], [0.0, 1.0], [1.0, 1.0])]
    with pytest.raises(TooManyEnvsError):
        gw.shortcut(envs)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_shortcut_invariance_random(seed):
    rng = Rng(seed)
    d_e = int(rng.integers(1, 9))
    w = gw.random_world(rng, 2, d_e, int(rng.integers(1, d_e + 1)))
    sc = gw.shortcut(w.envs)
    assert np.all(gw.shortcut_residuals(w.envs, sc) <= 1e-9)
    assert abs(np.linalg.norm(sc.p) - 1) <= 1e-12


def test_shortcut_classifier_example_and_env_bayes():
    w = gw.GaussWorld(gw.InvSpec([1.0], 1.0), [gw.EnvSpec([2.0], 1.0)])
    sc = gw.shortcut(w.envs)
    assert sc.beta == pytest.approx(2.0)
    assert np.allclose(gw.shortcut_classifier(w, sc).w, [2, 4])

    w = gw.random_world(Rng(9), 3, 5, 3)
    sc = gw.shortcut(w.envs)
    target = gw.shortcut_classifier(w, sc)
    M_inv, M_e = gw.shortcut_projections(w, sc)
    for e in range(3):
        c = gw.bayes_classifier(w, e, M_inv, M_e)
        assert np.max(np.abs(c.w - target.w)) <= 1e-9
        assert c.bias == target.bias


def test_posterior_examples():
    c = gw.LinearClassifier(np.array([1.0]), 0.0)
    assert gw.posterior(c, [[0.0]])[0] == 0.5
    assert gw.posterior(c, [[math.log(3)]])[0] == pytest.approx(0.75, abs=1e-15)
    assert gw.posterior(c, [[50.0]])[0] >= 1 - 1e-20
    with pytest.raises(DimensionMismatchError):
        c.logit([[1.0, 2.0]])


def test_spurious_point_examples():
    w = gw.GaussWorld(gw.InvSpec([1.0, 0.0], 1.0), [gw.EnvSpec([1.0], 1.0)], eta=0.5)
    sc = gw.shortcut(w.envs)
    assert sc.beta == pytest.approx(1.0)
    pt = gw.spurious_ood_point(w, sc, 0.5, 0, Rng(0))
    assert sc.p @ pt.z_e == pytest.approx(0.0, abs=1e-15)
    pt = gw.spurious_ood_point(w, sc, 0.9, 0, Rng(0))
    assert sc.p @ pt.z_e == pytest.approx(1.098612, abs=1e-6)
    with pytest.raises(BadConfidenceError):
        gw.spurious_ood_point(w, sc, 1.0, 0, Rng(0))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.05, 0.95))
def test_spurious_point_confidence_grid(seed, eta):
    rng = Rng(seed)
    s, d_e = int(rng.integers(1, 9)), int(rng.integers(1, 9))
    w = gw.random_world(rng, s, d_e, int(rng.integers(1, d_e + 1)), eta=eta)
    sc = gw.shortcut(w.envs)
    clf = gw.shortcut_classifier(w, sc)
    phi = gw.shortcut_features(sc)
    mu = w.inv.mu_inv
    for c in CONFIDENCE_GRID:
        pt = gw.spurious_ood_point(w, sc, c, 0, rng)
        assert abs(gw.posterior(clf, phi(pt.z_inv, pt.z_e))[0] - c) <= 1e-9
        zn = np.linalg.norm(pt.z_inv)
        assert abs(pt.z_inv @ mu) <= 1e-10 * zn * np.linalg.norm(mu) + 0.0


def test_spurious_point_norm_option():
    w = gw.random_world(Rng(1), 4, 3, 2)
    sc = gw.shortcut(w.envs)
    pt = gw.spurious_ood_point(w, sc, 0.7, 1, Rng(2), z_out_norm=3.0)
    assert np.linalg.norm(pt.z_inv) == pytest.approx(3.0)
    assert pt.y is None and pt.env_index == 1


def test_lemma4_conditions_examples():
    w = gw.GaussWorld(gw.InvSpec([1.0, 0.0], 1.0), [gw.EnvSpec([1.0], 4.0)], eta=0.5)
    assert gw.lemma4_check(w, 0, 1.0) == (True, True)
    assert gw.lemma4_check(w, 0, 0.1) == (False, True)


def test_mc_risk_examples():
    sep = gw.GaussWorld(gw.InvSpec([1.0], 1e-6), [gw.EnvSpec([1.0], 1.0)], eta=0.5)
    r = gw.mc_risk(gw.invariant_classifier(sep), gw.invariant_features, sep, 0, 100_000, Rng(0))
    assert r.risk <= 0.001

    w = gw.GaussWorld(gw.InvSpec([1.0], 1.0), [gw.EnvSpec([1.0], 1.0)], eta=0.7)
    zero = gw.LinearClassifier(np.zeros(1), 0.0)
    r = gw.mc_risk(zero, gw.invariant_features, w, 0, 200_000, Rng(3))
    assert abs(r.risk - 0.3) <= 3 * r.stderr
    again = gw.mc_risk(zero, gw.invariant_features, w, 0, 200_000, Rng(3))
    assert again == r


def test_mc_risk_matches_closed_form():
    # invariant classifier risk at eta = 0.5 is Phi(-|mu| / sigma)
    from scipy.stats import norm

    w = gw.GaussWorld(gw.InvSpec([0.6, 0.8], 1.0), [gw.EnvSpec([1.0], 1.0)], eta=0.5)
    r = gw.mc_risk(gw.invariant_classifier(w), gw.invariant_features, w, 0, 400_000, Rng(5))
    assert abs(r.risk - norm.cdf(-1.0)) <= 4 * r.stderr


def test_env_only_beats_invariant_when_conditions_hold():
    w = gw.GaussWorld(gw.InvSpec([0.5], 1.0), [gw.EnvSpec([2.0], 1.0)], eta=0.5)
    sc = gw.shortcut(w.envs)
    assert all(gw.lemma4_conditions(w, 0, sc.beta))
    n = 200_000
    env = gw.mc_risk(gw.env_only_classifier(w, sc), gw.env_only_features(sc), w, 0, n, Rng(1))
    inv = gw.mc_risk(gw.invariant_classifier(w), gw.invariant_features, w, 0, n, Rng(1))
    assert env.risk <= inv.risk + 3 * math.hypot(env.stderr, inv.stderr)


def test_closed_form_beats_logistic_fit():
    w = gw.GaussWorld(gw.InvSpec([0.8], 1.5), [gw.EnvSpec([1.2], 0.7)], eta=0.4)
    M_inv, M_e = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
    bayes = gw.bayes_classifier(w, 0, M_inv, M_e)
    train = gw.sample(w, 0, 200_000, Rng(0))
    test = gw.sample(w, 0, 200_000, Rng(1))
    fit = fit_logistic(train.stacked(), train.y.astype(float))
    assert gw.log_loss(bayes, test.stacked(), test.y) <= gw.log_loss(fit, test.stacked(), test.y) + 0.01
    assert np.all(np.abs(fit.w - bayes.w) / np.abs(bayes.w) <= 0.05)


def test_toy_figure(tmp_path):
    from spurood.theory import toy_world

    w = toy_world()
    sc = gw.shortcut(w.envs)
    fig = gw.toy_figure_data(w, sc, 50, Rng(0))
    inv = fig.lines["invariant"]
    # with balanced labels the invariant boundary is the vertical line x = 0
    assert inv.bias == 0.0 and inv.w[1] == 0.0
    for x, _, _, _, is_ood in fig.rows:
        if is_ood:
            assert abs(x) <= 1e-10
            assert abs(gw.posterior(inv, np.array([[x, 0.0]]))[0] - 0.5) <= 1e-9
    fig.write(tmp_path / "p.csv", tmp_path / "l.csv")
    with open(tmp_path / "p.csv") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["x", "y", "label", "env", "is_ood"]
    assert len(rows) == 2 * 50 + 20
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "kind,w0,w1,bias"


def test_world_validation():
    with pytest.raises(ValueError):
        gw.InvSpec([1.0], 0.0)
    with pytest.raises(ValueError):
        gw.GaussWorld(gw.InvSpec([1.0], 1.0), [gw.EnvSpec([1.0], 1.0), gw.EnvSpec([1.0, 2.0], 1.0)])
    with pytest.raises(ValueError):
        gw.GaussWorld(gw.InvSpec([1.0], 1.0), [gw.EnvSpec([1.0], 1.0)], eta=1.0)
