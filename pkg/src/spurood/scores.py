"""Post-hoc OOD scores: MSP, ODIN, energy, Mahalanobis and Gram.

Every score is oriented so that larger values mean "more in-distribution".
Output-based scores read the logits; Mahalanobis reads the last hidden layer;
Gram reads every hidden layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular

from . import storage
from .errors import (
    ClassTooSmallError,
    EmptyInputError,
    EmptySplitError,
    NonPositiveTemperatureError,
    NotFittedError,
    NotSpdError,
)
from .metrics import auroc
from .numerics import log_sum_exp, softmax, spd_factor
from .train import MlpModel, backward, forward

SCORE_FNS = ("msp", "odin", "energy", "mahalanobis", "gram")
ODIN_EPSILONS = (0.0, 0.0014, 0.005, 0.01)
CHUNK = 1024


def msp(logits) -> np.ndarray | float:
    logits = np.asarray(logits, dtype=float)
    if logits.size == 0 or logits.shape[-1] == 0:
        raise EmptyInputError("empty logits")
    out = softmax(logits, axis=-1).max(axis=-1)
    return float(out) if out.ndim == 0 else out


def energy_score(logits, T: float = 1.0) -> np.ndarray | float:
    """Negative free energy ``T * logsumexp(logits / T)``."""
    if not T > 0:
        raise NonPositiveTemperatureError(f"temperature must be positive, got {T}")
    logits = np.asarray(logits, dtype=float)
    return T * log_sum_exp(logits / T, axis=None if logits.ndim == 1 else -1)


@dataclass(frozen=True)
class OdinConfig:
    temperature: float = 1000.0
    epsilon: float = 0.0

    def __post_init__(self):
        if not self.temperature > 0:
            raise NonPositiveTemperatureError("ODIN temperature must be positive")
        if self.epsilon < 0:
            raise ValueError("ODIN epsilon must be nonnegative")


def logits_of(model: MlpModel, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(X)
    return np.concatenate([forward(model, X[i : i + CHUNK]).logits for i in range(0, len(X), CHUNK)])


def hidden_of(model: MlpModel, X: np.ndarray) -> list[np.ndarray]:
    X = np.atleast_2d(X)
    parts = [forward(model, X[i : i + CHUNK]).hidden for i in range(0, len(X), CHUNK)]
    return [np.concatenate([p[layer] for p in parts]) for layer in range(len(parts[0]))]


def odin(model: MlpModel, X, cfg: OdinConfig) -> np.ndarray:
    """Temperature-scaled MSP after nudging the input toward higher confidence.

    ``x' = x - eps * sign(-grad_x log max_k softmax(f(x) / T)_k)``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T = cfg.temperature
    out = []
    for i in range(0, len(X), CHUNK):
        xb = X[i : i + CHUNK]
        cache = forward(model, xb)
        z = cache.logits / T
        p = softmax(z)
        k = z.argmax(axis=1)
        dz = -p
        dz[np.arange(len(k)), k] += 1.0
        _, gx = backward(model, cache, dz / T, need_input_grad=True)
        xp = xb - cfg.epsilon * np.sign(-gx)
        out.append(softmax(forward(model, xp).logits / T).max(axis=1))
    return np.concatenate(out)


def select_odin_epsilon(model, X_id_val, X_ood_val, temperature: float = 1000.0, grid=ODIN_EPSILONS) -> float:
    """Pick the perturbation size with the best validation AUROC (first wins ties)."""
    best_eps, best_auc = grid[0], -1.0
    for eps in grid:
        cfg = OdinConfig(temperature, eps)
        auc = auroc(odin(model, X_id_val, cfg), odin(model, X_ood_val, cfg))
        if auc > best_auc:
            best_eps, best_auc = eps, auc
    return best_eps


# --- Mahalanobis ----------------------------------------------------------------


@dataclass
class MahalanobisFit:
    class_means: np.ndarray  # (K, d)
    shared_cov: np.ndarray  # (d, d), shrinkage included when applied
    _chol: np.ndarray | None = field(default=None, repr=False)

    @property
    def chol(self) -> np.ndarray:
        if self._chol is None:
            self._chol = spd_factor(self.shared_cov)
        return self._chol


def mahalanobis_fit(features, labels) -> MahalanobisFit:
    """Class means and the pooled within-class covariance.

    A covariance that fails the SPD factorization gets ``eps * I`` added, with
    ``eps = 1e-3 * trace / d`` floored at 1e-12 so a zero covariance still
    becomes positive definite. Full-rank covariances are used as they are,
    which keeps the score invariant under invertible feature maps.
    """
    F = np.asarray(features, dtype=float)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    means, centered = [], []
    for c in classes:
        Fc = F[labels == c]
        if len(Fc) < 2:
            raise ClassTooSmallError(f"class {c} has {len(Fc)} samples, need >= 2")
        mu = Fc.mean(axis=0)
        means.append(mu)
        centered.append(Fc - mu)
    C = np.concatenate(centered)
    cov = C.T @ C / len(C)
    d = cov.shape[0]
    try:
        return MahalanobisFit(np.array(means), cov, spd_factor(cov))
    except NotSpdError:
        eps = max(1e-3 * np.trace(cov) / d, 1e-12)
        return MahalanobisFit(np.array(means), cov + eps * np.eye(d))


def mahalanobis_distances(fit: MahalanobisFit, features) -> np.ndarray:
    """Squared distances to every class mean, shape (n, K)."""
    F = np.atleast_2d(np.asarray(features, dtype=float))
    L = fit.chol
    out = np.empty((len(F), len(fit.class_means)))
    for c, mu in enumerate(fit.class_means):
        v = solve_triangular(L, (F - mu).T, lower=True)
        out[:, c] = np.sum(v * v, axis=0)
    return out


def mahalanobis_score(fit: MahalanobisFit | None, features) -> np.ndarray:
    """Negative distance to the closest class mean."""
    if fit is None:
        raise NotFittedError("Mahalanobis calibration has not been fitted")
    return -mahalanobis_distances(fit, features).min(axis=1)


# --- Gram -----------------------------------------------------------------------


def gram_entries(A: np.ndarray, p: int) -> np.ndarray:
    """Upper-triangle entries of ``sign(G) |G|^(1/p)`` with ``G = a^p (a^p)^T`` per row of ``A``.

    Per entry this equals ``t_i t_j`` with ``t = sign(a)^p |a|``, which avoids the root.
    """
    A = np.asarray(A, dtype=float)
    t = A if p % 2 else np.abs(A)
    iu = np.triu_indices(A.shape[1])
    return t[:, iu[0]] * t[:, iu[1]]


@dataclass
class GramFit:
    orders: tuple[int, ...]
    mins: dict  # (class, layer, p) -> entry-wise minimum
    maxs: dict
    normalizers: np.ndarray  # (n_layers,)


def _deviation(v: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    below = np.maximum(lo - v, 0.0) @ (1.0 / np.maximum(np.abs(lo), 1e-12))
    above = np.maximum(v - hi, 0.0) @ (1.0 / np.maximum(np.abs(hi), 1e-12))
    return below + above


def gram_layer_deviations(fit_mins, fit_maxs, orders, layers, classes) -> np.ndarray:
    """Per-sample, per-layer summed deviation; shape (n, n_layers)."""
    n = len(classes)
    out = np.zeros((n, len(layers)))
    for l, A in enumerate(layers):
        for c in np.unique(classes):
            rows = np.flatnonzero(classes == c)
            for start in range(0, rows.size, 128):
                r = rows[start : start + 128]
                for p in orders:
                    key = (int(c), l, p)
                    out[r, l] += _deviation(gram_entries(A[r], p), fit_mins[key], fit_maxs[key])
    return out


def gram_fit(train_layers: Sequence[np.ndarray], labels, val_layers, val_pred, orders=(1, 2, 3, 4, 5)) -> GramFit:
    """Entry-wise Gram ranges per (class, layer, order) plus per-layer normalizers.

    Normalizers are the mean layer deviation over the held-out split, scored
    against each sample's predicted class.
    """
    if len(train_layers) == 0 or len(orders) == 0:
        raise EmptySplitError("need at least one layer and one order")
    labels = np.asarray(labels)
    if labels.size == 0 or len(val_pred) == 0:
        raise EmptySplitError("fit and held-out splits must be nonempty")
    mins, maxs = {}, {}
    for l, A in enumerate(train_layers):
        for c in np.unique(labels):
            Ac = A[labels == c]
            for p in orders:
                lo = hi = None
                for start in range(0, len(Ac), 128):
                    g = gram_entries(Ac[start : start + 128], p)
                    lo = g.min(axis=0) if lo is None else np.minimum(lo, g.min(axis=0))
                    hi = g.max(axis=0) if hi is None else np.maximum(hi, g.max(axis=0))
                mins[(int(c), l, p)] = lo
                maxs[(int(c), l, p)] = hi
    dev = gram_layer_deviations(mins, maxs, orders, val_layers, np.asarray(val_pred))
    return GramFit(tuple(orders), mins, maxs, np.maximum(dev.mean(axis=0), 1e-12))


def gram_score(fit: GramFit | None, layers: Sequence[np.ndarray], predicted_class) -> np.ndarray:
    if fit is None:
        raise NotFittedError("Gram calibration has not been fitted")
    pred = np.atleast_1d(np.asarray(predicted_class))
    known = {k[0] for k in fit.mins}
    unknown = set(np.unique(pred).tolist()) - known
    if unknown:
        raise ValueError(f"no Gram ranges for predicted classes {sorted(unknown)}")
    dev = gram_layer_deviations(fit.mins, fit.maxs, fit.orders, [np.atleast_2d(a) for a in layers], pred)
    return -(dev / fit.normalizers).sum(axis=1)


# --- calibration bundle ---------------------------------------------------------


@dataclass
class ScoreCalibration:
    mahalanobis: MahalanobisFit | None = None
    gram: GramFit | None = None
    odin: OdinConfig = field(default_factory=OdinConfig)
    energy_temperature: float = 1.0

    def save(self, path) -> None:
        sections = {
            "odin": {"temperature": np.array([self.odin.temperature]), "epsilon": np.array([self.odin.epsilon])},
            "energy": {"temperature": np.array([self.energy_temperature])},
        }
        if self.mahalanobis is not None:
            sections["mahalanobis"] = {
                "class_means": self.mahalanobis.class_means,
                "shared_cov": self.mahalanobis.shared_cov,
            }
        if self.gram is not None:
            g = {"orders": np.array(self.gram.orders, dtype=float), "normalizers": self.gram.normalizers}
            for (c, l, p), v in sorted(self.gram.mins.items()):
                g[f"min/{c}/{l}/{p}"] = v
                g[f"max/{c}/{l}/{p}"] = self.gram.maxs[(c, l, p)]
            sections["gram"] = g
        storage.save(path, storage.CALIBRATION_MAGIC, sections)

    @classmethod
    def load(cls, path) -> ScoreCalibration:
        s = storage.load(path, storage.CALIBRATION_MAGIC)
        cal = cls(
            odin=OdinConfig(float(s["odin"]["temperature"][0]), float(s["odin"]["epsilon"][0])),
            energy_temperature=float(s["energy"]["temperature"][0]),
        )
        if "mahalanobis" in s:
            cal.mahalanobis = MahalanobisFit(s["mahalanobis"]["class_means"], s["mahalanobis"]["shared_cov"])
        if "gram" in s:
            g = s["gram"]
            mins, maxs = {}, {}
            for key, v in g.items():
                kind, *rest = key.split("/")
                if kind in ("min", "max"):
                    (mins if kind == "min" else maxs)[tuple(int(x) for x in rest)] = v
            cal.gram = GramFit(tuple(int(p) for p in g["orders"]), mins, maxs, g["normalizers"])
        return cal


def fit_calibration(
    model: MlpModel,
    X_train,
    y_train,
    X_val,
    X_val_ood=None,
    odin_temperature: float = 1000.0,
    odin_grid=ODIN_EPSILONS,
    gram_orders=(1, 2, 3, 4, 5),
    score_fns: Sequence[str] = SCORE_FNS,
) -> ScoreCalibration:
    """Fit whatever the requested scorers need from the training and validation splits."""
    cal = ScoreCalibration(odin=OdinConfig(odin_temperature, 0.0))
    if "mahalanobis" in score_fns or "gram" in score_fns:
        train_hidden = hidden_of(model, X_train)
    if "mahalanobis" in score_fns:
        cal.mahalanobis = mahalanobis_fit(train_hidden[-1], y_train)
    if "gram" in score_fns:
        val_pred = logits_of(model, X_val).argmax(axis=1)
        cal.gram = gram_fit(train_hidden, y_train, hidden_of(model, X_val), val_pred, gram_orders)
    if "odin" in score_fns and X_val_ood is not None:
        eps = select_odin_epsilon(model, X_val, X_val_ood, odin_temperature, odin_grid)
        cal.odin = OdinConfig(odin_temperature, eps)
    return cal


def compute_scores(name: str, model: MlpModel, cal: ScoreCalibration, X) -> np.ndarray:
    """Score every row of ``X`` with the named scorer."""
    if name == "msp":
        return msp(logits_of(model, X))
    if name == "energy":
        return energy_score(logits_of(model, X), cal.energy_temperature)
    if name == "odin":
        return odin(model, X, cal.odin)
    if name == "mahalanobis":
        return mahalanobis_score(cal.mahalanobis, hidden_of(model, X)[-1])
    if name == "gram":
        pred = logits_of(model, X).argmax(axis=1)
        return gram_score(cal.gram, hidden_of(model, X), pred)
    raise ValueError(f"unknown score function {name!r}")
