"""Differentiable reward models over sequences of embedding vectors.

A reward model maps ``e`` of shape ``(L, d)`` to a scalar and exposes the
gradient with respect to every input vector. Inputs need not be rows of the
embedding table, which is what lets guidance feed soft or blended
embeddings. Gradients are derived by hand for each model and checked
against central differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
from scipy.spatial.distance import pdist

from .core import finite_diff_grad, relative_error
from .errors import InvalidInputError, InvalidParameterError
from .rng import Stream, derive_key

__all__ = [
    "EmbeddingTable",
    "build_embedding_table",
    "soft_embedding",
    "RewardModel",
    "QuadraticReward",
    "PrototypeReward",
    "MLPReward",
    "ScaledReward",
    "score_discrete",
    "GradientCheckReport",
    "check_reward_gradient",
]

# stream namespaces, kept apart from trajectory paths
_EMBED_NS = 0x454D42
_MLP_NS = 0x4D4C50


class EmbeddingTable:
    """``K x d`` token embeddings shared by the sampler and the reward model."""

    FORMAT = "entrgi-embedding v1"

    def __init__(self, rows, seed: int | None = None, unit_norm: bool = False):
        rows = np.array(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[0] < 2 or rows.shape[1] < 1:
            raise InvalidInputError("embedding table must be K x d with K >= 2, d >= 1")
        if not np.all(np.isfinite(rows)):
            raise InvalidInputError("embedding rows must be finite")
        if pdist(rows).min() <= 0:
            raise InvalidInputError("embedding rows must be pairwise distinct")
        rows.setflags(write=False)
        self.rows = rows
        self.seed = seed
        self.unit_norm = bool(unit_norm)

    @property
    def K(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def lookup(self, tokens) -> np.ndarray:
        return self.rows[np.asarray(tokens, dtype=np.int64)]

    def dumps(self) -> str:
        seed = "none" if self.seed is None else str(self.seed)
        lines = [self.FORMAT, f"K={self.K} d={self.d} seed={seed} unit_norm={int(self.unit_norm)}"]
        lines += [" ".join(repr(float(v)) for v in row) for row in self.rows]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "EmbeddingTable":
        lines = text.splitlines()
        if not lines or lines[0].strip() != cls.FORMAT:
            raise InvalidInputError("not an embedding-table snapshot")
        hdr = dict(kv.split("=", 1) for kv in lines[1].split())
        K, d = int(hdr["K"]), int(hdr["d"])
        rows = np.array([[float(v) for v in ln.split()] for ln in lines[2:2 + K]])
        if rows.shape != (K, d):
            raise InvalidInputError(f"expected {K}x{d} values, got {rows.shape}")
        seed = None if hdr["seed"] == "none" else int(hdr["seed"])
        return cls(rows, seed=seed, unit_norm=bool(int(hdr["unit_norm"])))

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        return cls.loads(Path(path).read_text())


def build_embedding_table(K: int, d: int, seed: int = 0, unit_norm: bool = False) -> EmbeddingTable:
    """I.i.d. standard normal rows from a seeded stream, optionally unit length."""
    if K < 2:
        raise InvalidParameterError("K must be at least 2")
    if d < 1:
        raise InvalidParameterError("d must be at least 1")
    rows = Stream(derive_key(seed, (_EMBED_NS,))).normal((K, d))
    if unit_norm:
        rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    return EmbeddingTable(rows, seed=seed, unit_norm=unit_norm)


def soft_embedding(q, table: EmbeddingTable) -> np.ndarray:
    """Probability-weighted mean of embedding rows (row-wise for 2-D ``q``)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != table.K:
        raise InvalidInputError(f"q has {q.shape[-1]} entries but the table has {table.K} rows")
    return q @ table.rows


class RewardModel(Protocol):
    def value(self, e: np.ndarray, prompt_context=None) -> float: ...

    def input_gradient(self, e: np.ndarray, prompt_context=None) -> np.ndarray: ...


def _as_input(e, d):
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 2 or e.shape[1] != d:
        raise InvalidInputError(f"reward input must have shape (L, {d}), got {e.shape}")
    return e


@dataclass(frozen=True, eq=False)
class QuadraticReward:
    """``R(e) = -sum_l ||e_l - c_l||^2``; concave with maximum at ``e = c``."""

    targets: np.ndarray

    def __post_init__(self):
        c = np.array(self.targets, dtype=np.float64)
        c.setflags(write=False)
        object.__setattr__(self, "targets", c)

    def value(self, e, prompt_context=None):
        diff = _as_input(e, self.targets.shape[1]) - self.targets
        return -float(np.sum(diff * diff))

    def input_gradient(self, e, prompt_context=None):
        return -2.0 * (_as_input(e, self.targets.shape[1]) - self.targets)


@dataclass(frozen=True, eq=False)
class PrototypeReward:
    """``R(e) = mean_l <e_l, p>`` for a unit prototype direction ``p``."""

    prototype: np.ndarray

    def __post_init__(self):
        p = np.array(self.prototype, dtype=np.float64).reshape(-1)
        n = np.linalg.norm(p)
        if not n > 0:
            raise InvalidParameterError("prototype must be non-zero")
        p = p / n
        p.setflags(write=False)
        object.__setattr__(self, "prototype", p)

    def value(self, e, prompt_context=None):
        e = _as_input(e, self.prototype.size)
        return float(np.mean(e @ self.prototype))

    def input_gradient(self, e, prompt_context=None):
        e = _as_input(e, self.prototype.size)
        return np.tile(self.prototype / e.shape[0], (e.shape[0], 1))


@dataclass(frozen=True, eq=False)
class MLPReward:
    """Two affine layers with a tanh between them, applied to the mean embedding.

    ``R(e) = w2 . tanh(W1 ebar + b1) + b2`` with ``ebar = mean_l e_l``.
    """

    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float = 0.0
    seed: int | None = field(default=None, compare=False)

    FORMAT = "entrgi-mlp v1"

    def __post_init__(self):
        for name in ("W1", "b1", "w2"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "b2", float(self.b2))
        h, d = self.W1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h,):
            raise InvalidInputError("inconsistent MLP parameter shapes")

    @classmethod
    def from_seed(cls, d: int, hidden: int = 32, seed: int = 0) -> "MLPReward":
        s = Stream(derive_key(seed, (_MLP_NS,)))
        W1 = s.normal((hidden, d)) * (2.0 / np.sqrt(d))
        b1 = s.normal(hidden) * 0.5
        w2 = s.normal(hidden) / np.sqrt(hidden)
        return cls(W1, b1, w2, 0.0, seed=seed)

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    def _hidden(self, e):
        pooled = _as_input(e, self.d).mean(axis=0)
        return np.tanh(self.W1 @ pooled + self.b1)

    def value(self, e, prompt_context=None):
        return float(self.w2 @ self._hidden(e) + self.b2)

    def input_gradient(self, e, prompt_context=None):
        e = _as_input(e, self.d)
        hid = self._hidden(e)
        g_pool = self.W1.T @ (self.w2 * (1.0 - hid * hid))
        return np.tile(g_pool / e.shape[0], (e.shape[0], 1))

    def dumps(self) -> str:
        h, d = self.W1.shape
        seed = "none" if self.seed is None else str(self.seed)
        fmt = lambda v: " ".join(repr(float(x)) for x in v)  # noqa: E731
        lines = [self.FORMAT, f"d={d} hidden={h} seed={seed}"]
        lines += [fmt(row) for row in self.W1]
        lines += [fmt(self.b1), fmt(self.w2), repr(self.b2)]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "MLPReward":
        lines = text.splitlines()
        if not lines or lines[0].strip() != cls.FORMAT:
            raise InvalidInputError("not an MLP snapshot")
        hdr = dict(kv.split("=", 1) for kv in lines[1].split())
        h = int(hdr["hidden"])
        vec = lambda ln: np.array([float(x) for x in ln.split()])  # noqa: E731
        W1 = np.array([vec(ln) for ln in lines[2:2 + h]])
        b1, w2 = vec(lines[2 + h]), vec(lines[3 + h])
        b2 = float(lines[4 + h])
        seed = None if hdr["seed"] == "none" else int(hdr["seed"])
        return cls(W1, b1, w2, b2, seed=seed)


def score_discrete(tokens, table: EmbeddingTable, model: RewardModel, prompt_context=None) -> float:
    """Reward of a finished sequence, evaluated on its hard embeddings."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if np.any(tokens < 0) or np.any(tokens >= table.K):
        raise InvalidInputError("sequence contains mask or out-of-vocabulary tokens")
    return model.value(table.lookup(tokens), prompt_context)


@dataclass
class GradientCheckReport:
    max_rel_error: float
    errors: list[float]
    failures: list[str] = field(default_factory=list)

    @property
    def trials(self) -> int:
        return len(self.errors)

    def passed(self, tol: float) -> bool:
        return not self.failures and self.max_rel_error <= tol


def check_reward_gradient(model: RewardModel, L: int, d: int, trials: int = 10, seed: int = 0,
                          scale: float = 1.0, h: float = 1e-4, prompt_context=None) -> GradientCheckReport:
    """Compare ``input_gradient`` with central differences of ``value`` on random inputs."""
    if trials < 1:
        raise InvalidParameterError("trials must be at least 1")
    errors, failures = [], []
    for i in range(trials):
        e = Stream(derive_key(seed, (i,))).normal((L, d)) * scale
        try:
            fd = finite_diff_grad(lambda x: model.value(x, prompt_context), e, h)
            an = model.input_gradient(e, prompt_context)
            errors.append(relative_error(an, fd))
        except Exception as exc:  # reported, not raised
            failures.append(f"trial {i}: {exc}")
    finite = [x for x in errors if np.isfinite(x)]
    max_err = max(finite) if finite else float("inf")
    if len(finite) != len(errors):
        failures.append("non-finite relative error")
    return GradientCheckReport(max_err, errors, failures)


@dataclass(frozen=True)
class ScaledReward:
    """``scale * base``; sets the reward's units relative to the guidance step size."""

    base: RewardModel
    scale: float = 1.0

    def value(self, e, prompt_context=None):
        return self.scale * self.base.value(e, prompt_context)

    def input_gradient(self, e, prompt_context=None):
        return self.scale * np.asarray(self.base.input_gradient(e, prompt_context))
