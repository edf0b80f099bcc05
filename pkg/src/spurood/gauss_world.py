"""Gaussian invariant/environmental data model and its closed-form classifiers.

Labels are y in {-1, +1} with P(y=+1) = eta. Conditioned on y, the invariant
latent is N(y * mu_inv, sigma_inv^2 I) (shared by all environments) and the
environmental latent of environment e is N(y * mu_e, sigma_e^2 I).

Classifiers are linear in a feature vector phi with an explicit constant term
``log(eta / (1 - eta))``; ``posterior`` returns P(y=+1 | phi).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import (
    BadConfidenceError,
    BadEnvIndexError,
    DimensionMismatchError,
    TooManyEnvsError,
)
from .numerics import Rng, min_norm_solve, sigmoid, spd_solve


@dataclass(frozen=True)
class InvSpec:
    mu_inv: np.ndarray
    sigma_inv_sq: float

    def __post_init__(self):
        object.__setattr__(self, "mu_inv", np.atleast_1d(np.asarray(self.mu_inv, dtype=float)))
        if not self.sigma_inv_sq > 0:
            raise ValueError("sigma_inv_sq must be positive")


@dataclass(frozen=True)
class EnvSpec:
    mu_e: np.ndarray
    sigma_e_sq: float

    def __post_init__(self):
        object.__setattr__(self, "mu_e", np.atleast_1d(np.asarray(self.mu_e, dtype=float)))
        if not self.sigma_e_sq > 0:
            raise ValueError("sigma_e_sq must be positive")


@dataclass(frozen=True)
class GaussWorld:
    inv: InvSpec
    envs: tuple[EnvSpec, ...]
    eta: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "envs", tuple(self.envs))
        if not self.envs:
            raise ValueError("a world needs at least one environment")
        if not 0 < self.eta < 1:
            raise ValueError("eta must lie in (0, 1)")
        if len({e.mu_e.shape for e in self.envs}) != 1:
            raise ValueError("all environments must share d_e")

    @property
    def s(self) -> int:
        return self.inv.mu_inv.shape[0]

    @property
    def d_e(self) -> int:
        return self.envs[0].mu_e.shape[0]

    @property
    def log_prior_odds(self) -> float:
        return math.log(self.eta / (1.0 - self.eta))

    def env(self, index: int) -> EnvSpec:
        if not 0 <= index < len(self.envs):
            raise BadEnvIndexError(f"environment {index} not in [0, {len(self.envs)})")
        return self.envs[index]


@dataclass(frozen=True)
class LinearClassifier:
    w: np.ndarray
    bias: float

    def logit(self, phi) -> np.ndarray:
        phi = np.asarray(phi, dtype=float)
        if phi.shape[-1] != self.w.shape[0]:
            raise DimensionMismatchError(f"feature dim {phi.shape[-1]} != classifier dim {self.w.shape[0]}")
        return phi @ self.w + self.bias


@dataclass(frozen=True)
class Shortcut:
    p: np.ndarray
    beta: float


@dataclass
class LatentSample:
    z_inv: np.ndarray
    z_e: np.ndarray
    y: int | None
    env_index: int


@dataclass
class LatentBatch:
    """Row-stacked latent samples from one environment."""

    z_inv: np.ndarray  # (n, s)
    z_e: np.ndarray  # (n, d_e)
    y: np.ndarray  # (n,) in {-1, +1}
    env_index: int

    def __len__(self) -> int:
        return self.y.shape[0]

    def __getitem__(self, i: int) -> LatentSample:
        return LatentSample(self.z_inv[i], self.z_e[i], int(self.y[i]), self.env_index)

    def stacked(self) -> np.ndarray:
        return np.hstack([self.z_inv, self.z_e])


def sample(world: GaussWorld, env_index: int, n: int, rng: Rng) -> LatentBatch:
    env = world.env(env_index)
    y = np.where(rng.uniform(n) <= world.eta, 1, -1)
    z_inv = y[:, None] * world.inv.mu_inv + math.sqrt(world.inv.sigma_inv_sq) * rng.normal((n, world.s))
    z_e = y[:, None] * env.mu_e + math.sqrt(env.sigma_e_sq) * rng.normal((n, world.d_e))
    return LatentBatch(z_inv, z_e, y, env_index)


def bayes_classifier(world: GaussWorld, env_index: int, M_inv, M_e) -> LinearClassifier:
    """Optimal linear classifier on ``phi = M_inv z_inv + M_e z_e`` for one environment."""
    env = world.env(env_index)
    M_inv = np.atleast_2d(np.asarray(M_inv, dtype=float))
    M_e = np.atleast_2d(np.asarray(M_e, dtype=float))
    if M_inv.shape[1] != world.s or M_e.shape[1] != world.d_e or M_inv.shape[0] != M_e.shape[0]:
        raise DimensionMismatchError("projection shapes do not match the world")
    mu_phi = M_inv @ world.inv.mu_inv + M_e @ env.mu_e
    sigma_phi = M_inv @ M_inv.T * world.inv.sigma_inv_sq + M_e @ M_e.T * env.sigma_e_sq
    return LinearClassifier(2.0 * spd_solve(sigma_phi, mu_phi), world.log_prior_odds)


def invariant_classifier(world: GaussWorld) -> LinearClassifier:
    return LinearClassifier(2.0 * world.inv.mu_inv / world.inv.sigma_inv_sq, world.log_prior_odds)


def shortcut(envs: Sequence[EnvSpec]) -> Shortcut:
    """Unit direction p with p.mu_e / sigma_e^2 equal to the same beta in every environment.

    Uses the minimum-norm solution of ``A p~ = b`` (rows mu_e, entries sigma_e^2),
    then ``p = p~ / |p~|`` and ``beta = 1 / |p~|``.
    """
    A = np.vstack([e.mu_e for e in envs])
    b = np.array([e.sigma_e_sq for e in envs])
    if A.shape[0] > A.shape[1]:
        raise TooManyEnvsError(f"{A.shape[0]} environments exceed d_e={A.shape[1]}")
    p_tilde = min_norm_solve(A, b)
    norm = float(np.linalg.norm(p_tilde))
    return Shortcut(p_tilde / norm, 1.0 / norm)


def shortcut_residuals(envs: Sequence[EnvSpec], sc: Shortcut) -> np.ndarray:
    return np.array([abs(sc.p @ e.mu_e / e.sigma_e_sq - sc.beta) for e in envs])


def shortcut_features(sc: Shortcut) -> Callable[[np.ndarray, np.ndarray], np.ndarray]:
    """Feature map (z_inv, z_e) -> [z_inv; p.z_e]."""

    def phi(z_inv, z_e):
        z_inv = np.atleast_2d(z_inv)
        z_e = np.atleast_2d(z_e)
        return np.hstack([z_inv, (z_e @ sc.p)[:, None]])

    return phi


def invariant_features(z_inv, z_e):
    return np.atleast_2d(z_inv)


def shortcut_projections(world: GaussWorld, sc: Shortcut) -> tuple[np.ndarray, np.ndarray]:
    """The (M_inv, M_e) pair that realises ``shortcut_features`` as a linear map."""
    M_inv = np.vstack([np.eye(world.s), np.zeros((1, world.s))])
    M_e = np.vstack([np.zeros((world.s, world.d_e)), sc.p[None, :]])
    return M_inv, M_e


def shortcut_classifier(world: GaussWorld, sc: Shortcut) -> LinearClassifier:
    """Classifier on ``[z_inv; p.z_e]``, identical for every environment."""
    if sc.p.shape[0] != world.d_e:
        raise DimensionMismatchError(f"shortcut has dim {sc.p.shape[0]}, world has d_e={world.d_e}")
    w = np.concatenate([2.0 * world.inv.mu_inv / world.inv.sigma_inv_sq, [2.0 * sc.beta]])
    return LinearClassifier(w, world.log_prior_odds)


def env_only_classifier(world: GaussWorld, sc: Shortcut) -> LinearClassifier:
    """Purely environmental predictor on the scalar feature ``p.z_e``."""
    return LinearClassifier(np.array([2.0 * sc.beta]), world.log_prior_odds)


def env_only_features(sc: Shortcut):
    def phi(z_inv, z_e):
        return (np.atleast_2d(z_e) @ sc.p)[:, None]

    return phi


def posterior(c: LinearClassifier, phi) -> float | np.ndarray:
    return sigmoid(c.logit(phi))


def shortcut_target(world: GaussWorld, sc: Shortcut, confidence: float) -> float:
    """Value of p.z_e that makes the shortcut classifier output ``confidence``."""
    if not 0 < confidence < 1:
        raise BadConfidenceError(f"confidence must lie in (0, 1), got {confidence}")
    eta = world.eta
    return math.log(confidence * (1 - eta) / (eta * (1 - confidence))) / (2.0 * sc.beta)


def _orthogonal_to(v: np.ndarray, g: np.ndarray) -> np.ndarray:
    u = v / np.linalg.norm(v)
    for _ in range(2):
        g = g - (g @ u) * u
    return g


def spurious_ood_point(
    world: GaussWorld,
    sc: Shortcut,
    confidence: float,
    env_index: int,
    rng: Rng,
    z_out_norm: float | None = None,
) -> LatentSample:
    """OOD latent with no invariant signal that the shortcut classifier labels +1 w.p. ``confidence``.

    ``z_out`` is a Gaussian direction projected onto the orthogonal complement of
    mu_inv and rescaled to ``z_out_norm`` (default |mu_inv|). The environmental
    part has its p-component pinned and N(0, sigma_e^2) noise elsewhere.
    """
    target = shortcut_target(world, sc, confidence)
    env = world.env(env_index)
    z_out = _orthogonal_to(world.inv.mu_inv, rng.normal(world.s))
    n = np.linalg.norm(z_out)
    scale = np.linalg.norm(world.inv.mu_inv) if z_out_norm is None else z_out_norm
    z_out = z_out * (scale / n) if n > 0 else np.zeros(world.s)
    noise = _orthogonal_to(sc.p, math.sqrt(env.sigma_e_sq) * rng.normal(world.d_e))
    z_e = target * sc.p + noise
    # clean up the last ulp so p.z_e hits the target exactly in floating point
    z_e = z_e + (target - sc.p @ z_e) * sc.p
    return LatentSample(z_out, z_e, None, env_index)


def lemma4_conditions(world: GaussWorld, env_index: int, beta: float) -> tuple[bool, bool]:
    """Conditions under which the env-only predictor beats the invariant one in ``env_index``.

    (1) sigma_e * beta > |mu_inv| / sigma_inv
    (2) 2 * sigma_e * beta * |mu_inv| / sigma_inv >= |log(eta / (1 - eta))|
    """
    env = world.env(env_index)
    sigma_e = math.sqrt(env.sigma_e_sq)
    snr_inv = float(np.linalg.norm(world.inv.mu_inv)) / math.sqrt(world.inv.sigma_inv_sq)
    cond1 = sigma_e * beta > snr_inv
    cond2 = 2.0 * sigma_e * beta * snr_inv >= abs(world.log_prior_odds)
    return cond1, cond2


lemma4_check = lemma4_conditions


@dataclass
class RiskEstimate:
    risk: float
    stderr: float
    n: int


def mc_risk(
    c: LinearClassifier,
    feature_map,
    world: GaussWorld,
    env_index: int,
    n: int,
    rng: Rng,
    chunk: int = 250_000,
) -> RiskEstimate:
    """Monte-Carlo 0-1 risk; predicts +1 when the logit is >= 0."""
    if n < 1:
        raise ValueError("n must be >= 1")
    errors = 0
    done = 0
    while done < n:
        m = min(chunk, n - done)
        batch = sample(world, env_index, m, rng)
        pred = np.where(c.logit(feature_map(batch.z_inv, batch.z_e)) >= 0, 1, -1)
        errors += int(np.count_nonzero(pred != batch.y))
        done += m
    r = errors / n
    return RiskEstimate(r, math.sqrt(r * (1 - r) / n), n)


def log_loss(c: LinearClassifier, phi: np.ndarray, y: np.ndarray) -> float:
    """Mean logistic loss with labels in {-1, +1}."""
    m = y * c.logit(phi)
    return float(np.mean(np.logaddexp(0.0, -m)))


@dataclass
class ToyFigure:
    """2-D data behind the toy decision-boundary figure.

    Points are projected to (z_inv . mu_inv/|mu_inv|, p.z_e). ``lines`` maps a
    boundary kind to a 2-D classifier on those coordinates; ``boundary_points``
    holds two points on each boundary.
    """

    rows: list[tuple[float, float, int, int, int]]
    lines: dict[str, LinearClassifier]
    boundary_points: dict[str, np.ndarray] = field(default_factory=dict)

    def write(self, points_path, lines_path) -> None:
        with open(points_path, "w", newline="\n") as f:
            f.write("x,y,label,env,is_ood\n")
            for x, y, label, env, is_ood in self.rows:
                f.write(f"{x:.10g},{y:.10g},{label},{env},{is_ood}\n")
        with open(lines_path, "w", newline="\n") as f:
            f.write("kind,w0,w1,bias\n")
            for kind, c in self.lines.items():
                f.write(f"{kind},{c.w[0]:.12g},{c.w[1]:.12g},{c.bias:.12g}\n")


def _boundary_points(c: LinearClassifier, span: float) -> np.ndarray:
    w0, w1 = c.w
    if abs(w1) >= abs(w0):
        xs = np.array([-span, span])
        return np.column_stack([xs, -(c.bias + w0 * xs) / w1])
    ys = np.array([-span, span])
    return np.column_stack([-(c.bias + w1 * ys) / w0, ys])


def toy_figure_data(
    world: GaussWorld,
    sc: Shortcut,
    n: int,
    rng: Rng,
    n_ood: int = 20,
    confidences: Sequence[float] = (0.9, 0.95, 0.99),
) -> ToyFigure:
    u = world.inv.mu_inv / np.linalg.norm(world.inv.mu_inv)
    rows = []
    for e in range(len(world.envs)):
        batch = sample(world, e, n, rng.child(f"toy-env-{e}"))
        for zi, ze, y in zip(batch.z_inv @ u, batch.z_e @ sc.p, batch.y):
            rows.append((float(zi), float(ze), int(y), e, 0))
    ood_rng = rng.child("toy-ood")
    for k in range(n_ood):
        conf = confidences[k % len(confidences)]
        pt = spurious_ood_point(world, sc, conf, k % len(world.envs), ood_rng)
        rows.append((float(pt.z_inv @ u), float(pt.z_e @ sc.p), 0, pt.env_index, 1))

    mu_norm = float(np.linalg.norm(world.inv.mu_inv))
    w_inv = 2.0 * mu_norm / world.inv.sigma_inv_sq
    lines = {
        "shortcut": LinearClassifier(np.array([w_inv, 2.0 * sc.beta]), world.log_prior_odds),
        "invariant": LinearClassifier(np.array([w_inv, 0.0]), world.log_prior_odds),
    }
    span = 3.0 * max(mu_norm, 1.0)
    pts = {k: _boundary_points(c, span) for k, c in lines.items()}
    return ToyFigure(rows, lines, pts)


def random_world(
    rng: Rng,
    s: int,
    d_e: int,
    n_envs: int,
    eta: float | None = None,
    mean_scale: tuple[float, float] = (0.5, 1.5),
    var_range: tuple[float, float] = (0.5, 2.0),
) -> GaussWorld:
    """Random world with positive-ish means; used by oracles and the theory report."""
    lo, hi = mean_scale
    vlo, vhi = var_range

    def mean(k):
        v = rng.normal(k)
        return v / np.linalg.norm(v) * (lo + (hi - lo) * rng.uniform())

    inv = InvSpec(mean(s), vlo + (vhi - vlo) * float(rng.uniform()))
    envs = [EnvSpec(mean(d_e), vlo + (vhi - vlo) * float(rng.uniform())) for _ in range(n_envs)]
    if eta is None:
        eta = 0.2 + 0.6 * float(rng.uniform())
    return GaussWorld(inv, envs, eta)
