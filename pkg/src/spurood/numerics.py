"""Deterministic numerical kernels: seeded RNG, Gaussian sampling, small dense solves."""

from __future__ import annotations

import hashlib
import math

import numpy as np
from scipy.linalg import solve_triangular

from .errors import (
    EmptyInputError,
    NonPositiveVarianceError,
    NotSpdError,
    RankDeficientError,
    ShapeMismatchError,
)

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(next_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x, z ^ (z >> 31)


def _label_hash(label: str) -> int:
    return int.from_bytes(hashlib.blake2b(label.encode(), digest_size=8).digest(), "little")


class Rng:
    """Seeded PCG64 stream whose 128-bit state and increment come from splitmix64.

    ``child(label)`` derives a new stream from this stream's *seed* and the
    label only, so children are unaffected by how many draws the parent made.
    """

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        s = self.seed
        words = []
        for _ in range(4):
            s, out = splitmix64(s)
            words.append(out)
        bitgen = np.random.PCG64()
        bitgen.state = {
            "bit_generator": "PCG64",
            "state": {"state": (words[0] << 64) | words[1], "inc": ((words[2] << 64) | words[3]) | 1},
            "has_uint32": 0,
            "uinteger": 0,
        }
        self._gen = np.random.Generator(bitgen)

    def child(self, label: str) -> Rng:
        _, mixed = splitmix64(self.seed ^ _label_hash(label))
        return Rng(mixed)

    def uniform(self, size=None) -> np.ndarray:
        """Uniform draws on the half-open interval (0, 1]."""
        return 1.0 - self._gen.random(size)

    def normal(self, size) -> np.ndarray:
        """Standard normal draws via Box-Muller (both branches used)."""
        shape = (size,) if np.isscalar(size) else tuple(size)
        n = int(np.prod(shape))
        m = (n + 1) // 2
        u1 = self.uniform(m)
        u2 = self._gen.random(m)
        radius = np.sqrt(-2.0 * np.log(u1))
        angle = 2.0 * np.pi * u2
        out = np.empty(2 * m)
        out[0::2] = radius * np.cos(angle)
        out[1::2] = radius * np.sin(angle)
        return out[:n].reshape(shape)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)


def gaussian_vector(rng: Rng, mean, variance: float, n: int) -> np.ndarray:
    """``n`` i.i.d. draws from N(mean, variance * I), shape ``(n, len(mean))``."""
    if not variance > 0:
        raise NonPositiveVarianceError(f"variance must be positive, got {variance}")
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    return mean + math.sqrt(variance) * rng.normal((n, mean.shape[0]))


def cholesky(S: np.ndarray, pivot_tol: float) -> np.ndarray:
    """Lower Cholesky factor; raises NotSpdError when a pivot is <= ``pivot_tol``."""
    n = S.shape[0]
    L = np.zeros_like(S, dtype=float)
    for j in range(n):
        row = L[j, :j]
        d = S[j, j] - row @ row
        if not d > pivot_tol:
            raise NotSpdError(f"pivot {d:.3e} at column {j} below tolerance {pivot_tol:.3e}")
        L[j, j] = math.sqrt(d)
        if j + 1 < n:
            L[j + 1 :, j] = (S[j + 1 :, j] - L[j + 1 :, :j] @ row) / L[j, j]
    return L


def _cho_solve(L: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    y = solve_triangular(L, rhs, lower=True)
    return solve_triangular(L.T, y, lower=False)


def _as_square(S) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeMismatchError(f"expected a square matrix, got shape {S.shape}")
    return S


def spd_factor(S) -> np.ndarray:
    """Cholesky factor of a symmetric positive-definite matrix.

    Pivot tolerance is ``1e-12 * trace(S) / d``.
    """
    S = _as_square(S)
    if not np.allclose(S, S.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(S).max(initial=0.0))):
        raise NotSpdError("matrix is not symmetric")
    d = S.shape[0]
    tol = 1e-12 * max(np.trace(S), 0.0) / d
    return cholesky(S, tol)


def spd_solve(S, rhs) -> np.ndarray:
    S = _as_square(S)
    rhs = np.asarray(rhs, dtype=float)
    if rhs.shape[0] != S.shape[0]:
        raise ShapeMismatchError(f"rhs has {rhs.shape[0]} rows, matrix has {S.shape[0]}")
    L = spd_factor(S)
    x = _cho_solve(L, rhs)
    # one step of iterative refinement keeps the residual contract on ill-conditioned inputs
    x = x + _cho_solve(L, rhs - S @ x)
    return x


def min_norm_solve(A, b) -> np.ndarray:
    """Minimum-Euclidean-norm solution of ``A x = b`` for full-row-rank ``A`` (E <= d).

    Computes ``A^T (A A^T)^{-1} b``. The Gram matrix ``A A^T`` is factored with
    a pivot tolerance of ``1e-10 * trace(A A^T) / E``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    b = np.atleast_1d(np.asarray(b, dtype=float))
    E, d = A.shape
    if b.shape != (E,):
        raise ShapeMismatchError(f"b has shape {b.shape}, expected ({E},)")
    if E > d:
        raise ShapeMismatchError(f"system has more rows ({E}) than unknowns ({d})")
    G = A @ A.T
    tol = 1e-10 * max(np.trace(G), 0.0) / E
    try:
        L = cholesky(G, tol)
    except NotSpdError as exc:
        raise RankDeficientError(f"rows of A are linearly dependent: {exc}") from None
    x = A.T @ _cho_solve(L, b)
    x = x + A.T @ _cho_solve(L, b - A @ x)
    return x


def log_sum_exp(v, axis=None):
    """Max-shifted ``log(sum(exp(v)))``; reduces over ``axis`` (all entries if None)."""
    v = np.asarray(v, dtype=float)
    if v.size == 0 or (axis is not None and v.shape[axis] == 0):
        raise EmptyInputError("log_sum_exp of an empty vector")
    m = np.max(v, axis=axis, keepdims=True)
    out = np.log(np.sum(np.exp(v - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)
