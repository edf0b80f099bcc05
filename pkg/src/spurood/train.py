"""ReLU multilayer perceptron with hand-written backprop, trained by SGD under
ERM, IRMv1, GroupDRO or REx.

All objectives reduce to a gradient with respect to the logits, which is then
backpropagated through the network, so one backward pass serves every loss.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import storage
from .errors import (
    DimensionMismatchError,
    EmptyBatchError,
    EmptyEnvironmentError,
)
from .numerics import Rng, log_sum_exp, softmax

OBJECTIVES = ("erm", "irmv1", "gdro", "rex")


@dataclass
class MlpModel:
    weights: list[np.ndarray]  # W[i] has shape (fan_in, fan_out)
    biases: list[np.ndarray]

    @classmethod
    def init(cls, dims: Sequence[int], rng: Rng) -> MlpModel:
        """He-normal weights, zero biases."""
        weights, biases = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in))
            biases.append(np.zeros(fan_out))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, dims: Sequence[int]) -> MlpModel:
        return cls(
            [np.zeros((a, b)) for a, b in zip(dims[:-1], dims[1:])],
            [np.zeros(b) for b in dims[1:]],
        )

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0], *(w.shape[1] for w in self.weights))

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpModel:
        return copy.deepcopy(self)

    def n_params(self) -> int:
        return sum(p.size for p in self.params())


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre: list[np.ndarray]  # pre-activations of each layer
    hidden: list[np.ndarray]  # post-ReLU activations of hidden layers
    logits: np.ndarray


def forward(m: MlpModel, X: np.ndarray) -> ForwardCache:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != m.dims[0]:
        raise DimensionMismatchError(f"input dim {X.shape[-1]} != model input dim {m.dims[0]}")
    pre, hidden = [], []
    a = X
    last = len(m.weights) - 1
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        z = a @ w + b
        pre.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
            hidden.append(a)
    return ForwardCache(X, pre, hidden, pre[-1])


def mlp_apply(m: MlpModel, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Forward one input (or a batch); returns logits and the hidden activations."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    cache = forward(m, x[None, :] if single else x)
    if single:
        return cache.logits[0], [h[0] for h in cache.hidden]
    return cache.logits, cache.hidden


def backward(m: MlpModel, cache: ForwardCache, dlogits: np.ndarray, need_input_grad: bool = False):
    """Backpropagate ``dlogits``; returns (param grads in ``params()`` order, input grad)."""
    grads: list[np.ndarray] = []
    delta = dlogits
    for i in range(len(m.weights) - 1, -1, -1):
        a_prev = cache.inputs if i == 0 else cache.hidden[i - 1]
        grads = [a_prev.T @ delta, delta.sum(axis=0)] + grads
        if i > 0 or need_input_grad:
            delta = delta @ m.weights[i].T
            if i > 0:
                delta = delta * (cache.pre[i - 1] > 0)
    return grads, (delta if need_input_grad else None)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample softmax cross-entropy."""
    return log_sum_exp(logits, axis=1) - logits[np.arange(len(labels)), labels]


def _ce_dlogits(logits, labels):
    p = softmax(logits)
    p[np.arange(len(labels)), labels] -= 1.0
    return p


def mlp_grad(m: MlpModel, X, labels) -> list[np.ndarray]:
    """Analytic gradient of mean cross-entropy over the batch."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise EmptyBatchError("empty batch")
    cache = forward(m, X)
    grads, _ = backward(m, cache, _ce_dlogits(cache.logits, labels) / len(labels))
    return grads


# --- objective pieces -----------------------------------------------------------


def irmv1_scalar_grad(logits: np.ndarray, labels: np.ndarray) -> float:
    """d/dw of mean cross-entropy of ``w * logits`` at w = 1."""
    if len(labels) == 0:
        raise EmptyEnvironmentError("environment has no samples")
    p = softmax(logits)
    return float(np.mean(np.sum(p * logits, axis=1) - logits[np.arange(len(labels)), labels]))


def _irmv1_scalar_dlogits(logits, labels):
    """Gradient of ``irmv1_scalar_grad`` with respect to each logit."""
    p = softmax(logits)
    expected = np.sum(p * logits, axis=1, keepdims=True)
    d = p * (1.0 + logits - expected)
    d[np.arange(len(labels)), labels] -= 1.0
    return d / len(labels)


def irmv1_penalty(per_env_logits, per_env_labels) -> float:
    """Sum over environments of the squared scalar-multiplier gradient."""
    if len(per_env_logits) == 0:
        raise EmptyEnvironmentError("no environments")
    return float(sum(irmv1_scalar_grad(z, y) ** 2 for z, y in zip(per_env_logits, per_env_labels)))


def rex_penalty(per_env_risks) -> float:
    """Population variance of per-environment risks."""
    r = np.asarray(per_env_risks, dtype=float)
    return float(np.mean((r - r.mean()) ** 2)) if r.size else 0.0


@dataclass
class GroupWeights:
    q: np.ndarray

    @classmethod
    def uniform(cls, n_groups: int) -> GroupWeights:
        return cls(np.full(n_groups, 1.0 / n_groups))


def gdro_reweight(q: GroupWeights, group_losses, step: float) -> GroupWeights:
    """Exponentiated-gradient ascent step on the group simplex."""
    logq = np.log(np.maximum(q.q, 1e-300)) + step * np.asarray(group_losses, dtype=float)
    logq -= logq.max()
    w = np.where(q.q > 0, np.exp(logq), 0.0)
    return GroupWeights(w / w.sum())


# --- training -------------------------------------------------------------------


@dataclass
class TrainConfig:
    objective: str = "erm"
    learning_rate: float = 0.01
    l2_penalty: float = 1e-4
    penalty_weight: float = 10.0
    gdro_step: float = 0.01
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    hidden: tuple[int, ...] = (256, 64)

    def __post_init__(self):
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}, got {self.objective!r}")
        for name in ("learning_rate", "gdro_step", "batch_size", "epochs"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_penalty < 0 or self.penalty_weight < 0:
            raise ValueError("penalty weights must be nonnegative")


@dataclass
class TrainData:
    X: np.ndarray
    y: np.ndarray  # class indices
    env: np.ndarray
    group: np.ndarray
    n_classes: int
    n_envs: int
    n_groups: int

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx) -> TrainData:
        return TrainData(self.X[idx], self.y[idx], self.env[idx], self.group[idx], self.n_classes, self.n_envs, self.n_groups)

    @classmethod
    def from_colored(cls, ds) -> TrainData:
        return cls(
            ds.features(),
            ds.labels.astype(np.int64),
            ds.env.astype(np.int64),
            ds.group.astype(np.int64),
            n_classes=2,
            n_envs=4,
            n_groups=8,
        )

    @classmethod
    def from_latent(cls, batches) -> TrainData:
        """Stack Gaussian-world batches; labels -1/+1 become classes 0/1."""
        n_envs = max(b.env_index for b in batches) + 1
        X = np.vstack([b.stacked() for b in batches])
        y = np.concatenate([(b.y > 0).astype(np.int64) for b in batches])
        env = np.concatenate([np.full(len(b), b.env_index) for b in batches])
        return cls(X, y, env, y * n_envs + env, 2, n_envs, 2 * n_envs)


@dataclass
class ObjectiveValue:
    total: float
    loss: float  # mean cross-entropy
    penalty: float
    group_losses: np.ndarray
    dlogits: np.ndarray


def objective(
    logits: np.ndarray,
    data: TrainData,
    cfg: TrainConfig,
    q: GroupWeights | None = None,
) -> ObjectiveValue:
    """Data term of the chosen objective and its gradient with respect to the logits.

    ERM: mean cross-entropy. IRMv1 / REx: mean per-environment risk plus
    ``penalty_weight`` times the penalty. GDRO: q-weighted group risks (q fixed).
    """
    n = len(data)
    if n == 0:
        raise EmptyBatchError("empty batch")
    ce = cross_entropy(logits, data.y)
    base = _ce_dlogits(logits, data.y)
    group_losses = np.zeros(data.n_groups)
    group_counts = np.bincount(data.group, minlength=data.n_groups)
    np.add.at(group_losses, data.group, ce)
    group_losses = np.divide(group_losses, group_counts, out=np.zeros_like(group_losses), where=group_counts > 0)

    penalty = 0.0
    if cfg.objective == "erm":
        return ObjectiveValue(float(ce.mean()), float(ce.mean()), 0.0, group_losses, base / n)

    if cfg.objective == "gdro":
        if q is None:
            raise ValueError("gdro objective needs group weights")
        weight = np.divide(q.q, group_counts, out=np.zeros(data.n_groups), where=group_counts > 0)
        total = float(np.sum(q.q * group_losses))
        return ObjectiveValue(total, float(ce.mean()), 0.0, group_losses, base * weight[data.group][:, None])

    envs = np.unique(data.env)
    E = envs.size
    dlogits = np.zeros_like(logits)
    risks = np.empty(E)
    for k, e in enumerate(envs):
        mask = data.env == e
        risks[k] = ce[mask].mean()
        dlogits[mask] += base[mask] / (mask.sum() * E)
    if cfg.objective == "irmv1":
        for e in envs:
            mask = data.env == e
            g = irmv1_scalar_grad(logits[mask], data.y[mask])
            penalty += g * g
            dlogits[mask] += cfg.penalty_weight * 2.0 * g * _irmv1_scalar_dlogits(logits[mask], data.y[mask])
    else:  # rex
        penalty = rex_penalty(risks)
        for k, e in enumerate(envs):
            mask = data.env == e
            coef = cfg.penalty_weight * 2.0 * (risks[k] - risks.mean()) / E
            dlogits[mask] += coef * base[mask] / mask.sum()
    total = float(risks.mean() + cfg.penalty_weight * penalty)
    return ObjectiveValue(total, float(ce.mean()), float(penalty), group_losses, dlogits)


def total_objective(m: MlpModel, data: TrainData, cfg: TrainConfig, q: GroupWeights | None = None):
    """Objective including the ``0.5 * l2 * sum |W|^2`` weight penalty, and its parameter gradient."""
    cache = forward(m, data.X)
    val = objective(cache.logits, data, cfg, q)
    grads, _ = backward(m, cache, val.dlogits)
    l2 = 0.5 * cfg.l2_penalty * sum(float(np.sum(w * w)) for w in m.weights)
    for i, w in enumerate(m.weights):
        grads[2 * i] = grads[2 * i] + cfg.l2_penalty * w
    return val.total + l2, grads, val


def _stratified_batches(env: np.ndarray, batch_size: int, rng: Rng) -> list[np.ndarray]:
    n = env.size
    n_batches = max(1, math.ceil(n / batch_size))
    chunks: list[list[np.ndarray]] = [[] for _ in range(n_batches)]
    for e in np.unique(env):
        idx = np.flatnonzero(env == e)
        idx = idx[rng.permutation(idx.size)]
        for b, part in enumerate(np.array_split(idx, n_batches)):
            chunks[b].append(part)
    return [np.sort(np.concatenate(c)) for c in chunks if sum(p.size for p in c)]


def _shuffled_batches(n: int, batch_size: int, rng: Rng) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TrainLog:
    n_groups: int
    rows: list[dict] = field(default_factory=list)

    def write_csv(self, path) -> None:
        cols = ["epoch", "loss", "penalty"] + [f"group_{g}" for g in range(self.n_groups)]
        with open(path, "w", newline="\n") as f:
            f.write(",".join(cols) + "\n")
            for row in self.rows:
                vals = [str(row["epoch"]), f"{row['loss']:.10g}", f"{row['penalty']:.10g}"]
                vals += [f"{v:.10g}" for v in row["group_losses"]]
                f.write(",".join(vals) + "\n")


def train(data: TrainData, cfg: TrainConfig) -> tuple[MlpModel, TrainLog]:
    """Plain SGD. After each epoch the full-data objective is compared with the
    best so far; on an increase the epoch is rolled back and the step size halved.
    """
    if len(data) == 0:
        raise EmptyBatchError("training set is empty")
    rng = Rng(cfg.seed)
    dims = (data.X.shape[1], *cfg.hidden, data.n_classes)
    model = MlpModel.init(dims, rng.child("init"))
    q = GroupWeights.uniform(data.n_groups) if cfg.objective == "gdro" else None
    lr = cfg.learning_rate
    log = TrainLog(data.n_groups)

    best, _, val = total_objective(model, data, cfg, q)
    for epoch in range(1, cfg.epochs + 1):
        snapshot, q_snapshot = model.copy(), copy.deepcopy(q)
        erng = rng.child(f"epoch-{epoch}")
        if cfg.objective in ("irmv1", "rex"):
            batches = _stratified_batches(data.env, cfg.batch_size, erng)
        else:
            batches = _shuffled_batches(len(data), cfg.batch_size, erng)
        for idx in batches:
            batch = data.take(idx)
            if q is not None:
                cache = forward(model, batch.X)
                gl = objective(cache.logits, batch, cfg, q).group_losses
                q = gdro_reweight(q, gl, cfg.gdro_step)
            _, grads, _ = total_objective(model, batch, cfg, q)
            for p, g in zip(model.params(), grads):
                p -= lr * g
        current, _, cur_val = total_objective(model, data, cfg, q)
        if not np.isfinite(current) or current > best:
            model, q = snapshot, q_snapshot
            lr *= 0.5
        else:
            best, val = current, cur_val
        log.rows.append(
            {"epoch": epoch, "loss": best, "penalty": val.penalty, "group_losses": val.group_losses, "lr": lr}
        )
    return model, log


def predict(m: MlpModel, X: np.ndarray, chunk: int = 4096) -> np.ndarray:
    return np.concatenate([forward(m, X[i : i + chunk]).logits.argmax(axis=1) for i in range(0, len(X), chunk)])


def save_model(path, m: MlpModel) -> None:
    arrays = {"dims": np.array(m.dims, dtype=float)}
    for i, (w, b) in enumerate(zip(m.weights, m.biases)):
        arrays[f"W{i}"] = w
        arrays[f"b{i}"] = b
    storage.save(path, storage.MODEL_MAGIC, {"mlp": arrays})


def load_model(path) -> MlpModel:
    arrays = storage.load(path, storage.MODEL_MAGIC)["mlp"]
    n_layers = len(arrays["dims"]) - 1
    return MlpModel([arrays[f"W{i}"] for i in range(n_layers)], [arrays[f"b{i}"] for i in range(n_layers)])
