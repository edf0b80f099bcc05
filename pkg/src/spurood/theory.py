"""Numerical verification of the Gaussian-world results.

Each check builds random worlds from a seed, measures a residual and compares
it with a fixed tolerance. The report text contains no timings so that a
seeded rerun reproduces it byte for byte.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gauss_world as gw
from .numerics import Rng

CONFIDENCE_GRID = (0.01, *np.round(np.arange(0.05, 0.951, 0.05), 2).tolist(), 0.99)


@dataclass
class CheckResult:
    name: str
    passed: bool
    measured: dict[str, float]

    def line(self) -> str:
        vals = " ".join(f"{k}={v:.3e}" if isinstance(v, float) else f"{k}={v}" for k, v in self.measured.items())
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {vals}"


@dataclass
class TheoryReport:
    checks: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def text(self) -> str:
        lines = [c.line() for c in self.checks]
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines) + "\n"


def _random_shortcut_world(rng: Rng, max_s=8, max_d=8, eta=None):
    s = int(rng.integers(1, max_s + 1))
    d_e = int(rng.integers(1, max_d + 1))
    E = int(rng.integers(1, d_e + 1))
    return gw.random_world(rng, s, d_e, E, eta=eta)


def _shortcut(world: gw.GaussWorld, beta_offset: float) -> gw.Shortcut:
    sc = gw.shortcut(world.envs)
    return gw.Shortcut(sc.p, sc.beta + beta_offset) if beta_offset else sc


def check_theorem1(rng: Rng, n_worlds=20, beta_offset=0.0, tol=1e-9) -> CheckResult:
    """Constructed OOD points reach every target confidence under the shortcut classifier."""
    max_post = max_orth = max_proj = 0.0
    for k in range(n_worlds):
        wrng = rng.child(f"world-{k}")
        world = _random_shortcut_world(wrng)
        sc = _shortcut(world, beta_offset)
        clf = gw.shortcut_classifier(world, sc)
        phi = gw.shortcut_features(sc)
        mu = world.inv.mu_inv
        for c in CONFIDENCE_GRID:
            pt = gw.spurious_ood_point(world, sc, c, k % len(world.envs), wrng)
            post = float(gw.posterior(clf, phi(pt.z_inv, pt.z_e))[0])
            max_post = max(max_post, abs(post - c))
            zn = np.linalg.norm(pt.z_inv)
            if zn > 0:
                max_orth = max(max_orth, abs(pt.z_inv @ mu) / (zn * np.linalg.norm(mu)))
            max_proj = max(max_proj, abs(sc.p @ pt.z_e - gw.shortcut_target(world, sc, c)))
    ok = max_post <= tol and max_orth <= 1e-10 and max_proj <= 1e-12
    return CheckResult(
        "theorem1_confidence_grid",
        ok,
        {"worlds": n_worlds, "max_posterior_residual": max_post, "max_orthogonality": max_orth, "max_projection_residual": max_proj},
    )


def check_shortcut_invariance(rng: Rng, n_worlds=100, beta_offset=0.0) -> CheckResult:
    """p.mu_e / sigma_e^2 is the same beta in every environment, and the per-environment
    Bayes classifier on [z_inv; p.z_e] equals the shortcut classifier."""
    max_res = max_norm = max_bayes = 0.0
    for k in range(n_worlds):
        world = _random_shortcut_world(rng.child(f"world-{k}"))
        sc = _shortcut(world, beta_offset)
        max_res = max(max_res, float(gw.shortcut_residuals(world.envs, sc).max()))
        max_norm = max(max_norm, abs(float(np.linalg.norm(sc.p)) - 1.0))
        target = gw.shortcut_classifier(world, sc)
        M_inv, M_e = gw.shortcut_projections(world, sc)
        for e in range(len(world.envs)):
            bayes = gw.bayes_classifier(world, e, M_inv, M_e)
            max_bayes = max(max_bayes, float(np.abs(bayes.w - target.w).max()))
    ok = max_res <= 1e-9 and max_norm <= 1e-12 and max_bayes <= 1e-9
    return CheckResult(
        "lemma2_shortcut_invariance",
        ok,
        {"worlds": n_worlds, "max_beta_residual": max_res, "max_norm_error": max_norm, "max_bayes_mismatch": max_bayes},
    )


def fit_logistic(phi: np.ndarray, y: np.ndarray, iters: int = 50) -> gw.LinearClassifier:
    """Maximum-likelihood logistic regression (labels -1/+1) by damped Newton steps."""
    X = np.hstack([phi, np.ones((len(phi), 1))])
    theta = np.zeros(X.shape[1])

    def nll(t):
        return float(np.mean(np.logaddexp(0.0, -y * (X @ t))))

    f = nll(theta)
    for _ in range(iters):
        m = y * (X @ theta)
        s = 1.0 / (1.0 + np.exp(m))  # sigma(-m)
        grad = -(X * (y * s)[:, None]).mean(axis=0)
        w = s * (1.0 - s)
        H = (X * w[:, None]).T @ X / len(X)
        step = np.linalg.solve(H, grad)
        t = 1.0
        while t > 1e-8:
            cand = theta - t * step
            fc = nll(cand)
            if fc <= f:
                break
            t *= 0.5
        if f - fc < 1e-15:
            theta, f = cand, fc
            break
        theta, f = cand, fc
    return gw.LinearClassifier(theta[:-1], float(theta[-1]))


def check_bayes_optimality(rng: Rng, n_worlds=5, n=200_000) -> CheckResult:
    """Logistic regression fitted on samples lands on the closed-form optimum (2-D features)."""
    max_gap = max_rel = 0.0
    for k in range(n_worlds):
        wrng = rng.child(f"world-{k}")
        world = gw.random_world(wrng, 1, 1, 1)
        M_inv, M_e = np.array([[1.0], [0.0]]), np.array([[0.0], [1.0]])
        bayes = gw.bayes_classifier(world, 0, M_inv, M_e)
        train = gw.sample(world, 0, n, wrng.child("train"))
        test = gw.sample(world, 0, n, wrng.child("test"))
        fitted = fit_logistic(train.stacked(), train.y.astype(float))
        gap = gw.log_loss(fitted, test.stacked(), test.y) - gw.log_loss(bayes, test.stacked(), test.y)
        max_gap = max(max_gap, abs(gap))
        max_rel = max(max_rel, float(np.max(np.abs(fitted.w - bayes.w) / np.abs(bayes.w))))
    return CheckResult(
        "lemma1_bayes_oracle",
        max_gap <= 0.01 and max_rel <= 0.05,
        {"worlds": n_worlds, "samples": n, "max_logloss_gap": max_gap, "max_weight_rel_error": max_rel},
    )


def _lemma4_world(rng: Rng, max_tries=10_000):
    for _ in range(max_tries):
        s = int(rng.integers(1, 5))
        d_e = int(rng.integers(1, 5))
        E = int(rng.integers(1, d_e + 1))
        world = gw.random_world(rng, s, d_e, E, mean_scale=(0.3, 1.5), var_range=(0.3, 3.0))
        sc = gw.shortcut(world.envs)
        if all(gw.lemma4_conditions(world, 0, sc.beta)):
            return world, sc
    raise RuntimeError("no world satisfying both conditions found")


def check_env_only_risk(rng: Rng, n_worlds=20, n=1_000_000) -> CheckResult:
    """Where both conditions hold, the env-only predictor's risk does not exceed the invariant one's."""
    worst = -math.inf
    ok = True
    for k in range(n_worlds):
        wrng = rng.child(f"world-{k}")
        world, sc = _lemma4_world(wrng)
        # common random numbers: both predictors see the same samples
        env_risk = gw.mc_risk(gw.env_only_classifier(world, sc), gw.env_only_features(sc), world, 0, n, wrng.child("mc"))
        inv_risk = gw.mc_risk(gw.invariant_classifier(world), gw.invariant_features, world, 0, n, wrng.child("mc"))
        se = math.hypot(env_risk.stderr, inv_risk.stderr)
        slack = (env_risk.risk - inv_risk.risk) / se if se > 0 else (0.0 if env_risk.risk <= inv_risk.risk else math.inf)
        worst = max(worst, slack)
        ok &= env_risk.risk <= inv_risk.risk + 3 * se
    return CheckResult("lemma4_env_only_risk", ok, {"worlds": n_worlds, "samples": n, "worst_gap_in_stderr": worst})


def toy_world() -> gw.GaussWorld:
    """Two environments in a 2-D environmental space, balanced labels."""
    return gw.GaussWorld(
        gw.InvSpec(np.array([1.0, 0.0]), 0.5),
        (gw.EnvSpec(np.array([1.0, 0.2]), 0.5), gw.EnvSpec(np.array([0.3, 1.2]), 1.0)),
        eta=0.5,
    )


def check_toy_figure(rng: Rng, out_dir=None, n=200) -> CheckResult:
    """Spurious OOD points sit on the pure-invariant boundary (posterior 1/2) and the
    emitted boundary points satisfy their line equations."""
    world = toy_world()
    sc = gw.shortcut(world.envs)
    fig = gw.toy_figure_data(world, sc, n, rng)
    inv = gw.invariant_classifier(world)
    grid_rng = rng.child("grid")
    max_half = 0.0
    for c in CONFIDENCE_GRID:
        pt = gw.spurious_ood_point(world, sc, c, 0, grid_rng)
        max_half = max(max_half, abs(float(gw.posterior(inv, pt.z_inv[None, :])[0]) - 0.5))
    for x, _, _, _, is_ood in fig.rows:
        if is_ood:
            max_half = max(max_half, abs(float(gw.posterior(fig.lines["invariant"], np.array([[x, 0.0]]))[0]) - 0.5))
    max_line = max(float(np.abs(fig.lines[k].logit(pts)).max()) for k, pts in fig.boundary_points.items())
    if out_dir is not None:
        fig.write(Path(out_dir) / "fig4_points.csv", Path(out_dir) / "fig4_lines.csv")
    return CheckResult(
        "fig4b_invariant_posterior",
        max_half <= 1e-9 and max_line <= 1e-9,
        {"max_posterior_minus_half": max_half, "max_boundary_residual": max_line},
    )


def verify_theory(seed: int = 0, out_dir=None, beta_offset: float = 0.0, mc_samples: int = 1_000_000) -> TheoryReport:
    """Run every check; ``beta_offset`` corrupts the shortcut scale (negative-control hook)."""
    root = Rng(seed)
    report = TheoryReport()
    report.checks.append(check_theorem1(root.child("theorem1"), beta_offset=beta_offset))
    report.checks.append(check_shortcut_invariance(root.child("lemma2"), beta_offset=beta_offset))
    report.checks.append(check_bayes_optimality(root.child("lemma1")))
    report.checks.append(check_env_only_risk(root.child("lemma4"), n=mc_samples))
    report.checks.append(check_toy_figure(root.child("fig4"), out_dir))
    if out_dir is not None:
        Path(out_dir, "theory_report.txt").write_text(report.text())
    return report
