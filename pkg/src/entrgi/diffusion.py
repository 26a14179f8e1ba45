"""Masked diffusion reverse process in unmask-and-commit mode.

The sampler starts from an all-mask string of length ``L`` and, at every
reverse step, picks the ``k`` masked positions with the lowest predictive
entropy, samples their tokens and freezes them. Token ids ``0..K-1`` are the
actual vocabulary; id ``K`` is the mask.

The reference denoiser is a smoothed count table keyed by the nearest
unmasked token on each side of a position. It is fitted by counting and
never trained by gradients, which is all the guidance loop needs: it only
ever reads denoiser logits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import entropy, inverse_cdf_sample, softmax_temp
from .errors import ContractViolationError, InvalidInputError, InvalidParameterError
from .rng import TrajectoryRNG

__all__ = [
    "Vocabulary",
    "SequenceState",
    "Denoiser",
    "ConstantDenoiser",
    "ContextTableDenoiser",
    "fit_context_table",
    "select_unmask_set",
    "commit_step",
    "unguided_step",
    "generate_unguided",
    "read_corpus",
    "write_corpus",
]


@dataclass(frozen=True)
class Vocabulary:
    K: int
    eos_id: int | None = None

    def __post_init__(self):
        if self.K < 1:
            raise InvalidParameterError("vocabulary needs at least one actual token")
        if self.eos_id is not None and not 0 <= self.eos_id < self.K:
            raise InvalidParameterError("eos_id must be an actual token id")

    @property
    def mask_id(self) -> int:
        return self.K


@dataclass(frozen=True, eq=False)
class SequenceState:
    """Partially masked sequence ``z_t``.

    ``tokens`` is stored as a read-only int64 array; ``masked_positions`` is
    derived from it so the two can never disagree.
    """

    tokens: np.ndarray
    t: int
    mask_id: int
    masked_positions: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        tok = np.array(self.tokens, dtype=np.int64)
        if tok.ndim != 1:
            raise InvalidInputError("tokens must be a 1-D sequence")
        if np.any(tok < 0) or np.any(tok > self.mask_id):
            raise InvalidInputError("token ids must lie in [0, mask_id]")
        tok.setflags(write=False)
        masked = np.flatnonzero(tok == self.mask_id)
        masked.setflags(write=False)
        object.__setattr__(self, "tokens", tok)
        object.__setattr__(self, "masked_positions", masked)

    @classmethod
    def all_masked(cls, L: int, T: int, mask_id: int) -> "SequenceState":
        return cls(np.full(L, mask_id, dtype=np.int64), T, mask_id)

    @property
    def L(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_masked(self) -> int:
        return int(self.masked_positions.size)

    def is_complete(self) -> bool:
        return self.n_masked == 0

    def __eq__(self, other):
        if not isinstance(other, SequenceState):
            return NotImplemented
        return (self.t == other.t and self.mask_id == other.mask_id
                and np.array_equal(self.tokens, other.tokens))

    def __hash__(self):
        return hash((self.t, self.mask_id, self.tokens.tobytes()))


class Denoiser(Protocol):
    """Frozen model giving one logit row per masked position of ``z``."""

    K: int

    def predict(self, z: SequenceState) -> np.ndarray:
        """Array of shape ``(len(z.masked_positions), K)``, rows in position order."""
        ...


class ConstantDenoiser:
    """Returns the same logit vector at every masked position."""

    def __init__(self, logits):
        self.logits = np.array(logits, dtype=np.float64)
        self.logits.setflags(write=False)
        self.K = self.logits.shape[0]

    def predict(self, z):
        return np.tile(self.logits, (z.n_masked, 1))


class ContextTableDenoiser:
    """Logits ``ln(counts + alpha)`` indexed by nearest unmasked neighbours.

    ``counts`` has shape ``(K + 1, K + 1, K)``: index ``K`` on either context
    axis is the sentinel for "no unmasked token on this side". Context pairs
    that never occurred in the corpus fall back to the unigram counts.
    """

    FORMAT = "entrgi-context-table v1"

    def __init__(self, counts, unigram, alpha: float, seen=None):
        counts = np.array(counts, dtype=np.float64)
        unigram = np.array(unigram, dtype=np.float64)
        if not alpha > 0:
            raise InvalidParameterError("smoothing alpha must be positive")
        K = unigram.shape[0]
        if counts.shape != (K + 1, K + 1, K):
            raise InvalidInputError(f"counts must have shape {(K + 1, K + 1, K)}, got {counts.shape}")
        if np.any(counts < 0) or np.any(unigram < 0):
            raise InvalidInputError("counts must be nonnegative")
        if seen is None:
            seen = counts.sum(axis=-1) > 0
        self.K = K
        self.alpha = float(alpha)
        self.counts = counts
        self.unigram = unigram
        self.seen = np.array(seen, dtype=bool)
        table = np.where(self.seen[..., None], counts, unigram[None, None, :])
        self._logits = np.log(table + self.alpha)
        for arr in (self.counts, self.unigram, self.seen, self._logits):
            arr.setflags(write=False)

    @property
    def sentinel(self) -> int:
        return self.K

    def contexts(self, z: SequenceState) -> tuple[np.ndarray, np.ndarray]:
        """Nearest unmasked left/right tokens for each masked position."""
        masked = z.masked_positions
        unmasked = np.flatnonzero(z.tokens != z.mask_id)
        left = np.full(masked.size, self.sentinel, dtype=np.int64)
        right = np.full(masked.size, self.sentinel, dtype=np.int64)
        if unmasked.size and masked.size:
            pos = np.searchsorted(unmasked, masked)
            has_left = pos > 0
            has_right = pos < unmasked.size
            left[has_left] = z.tokens[unmasked[pos[has_left] - 1]]
            right[has_right] = z.tokens[unmasked[pos[has_right]]]
        return left, right

    def logits_for(self, left, right) -> np.ndarray:
        return self._logits[np.asarray(left), np.asarray(right)]

    def predict(self, z):
        left, right = self.contexts(z)
        return np.array(self.logits_for(left, right))

    # snapshot i/o ---------------------------------------------------------

    def dumps(self) -> str:
        lines = [self.FORMAT, f"K={self.K} alpha={self.alpha!r}"]
        lines.append("unigram " + " ".join(repr(float(c)) for c in self.unigram))
        for a, b in zip(*np.nonzero(self.seen)):
            row = " ".join(repr(float(c)) for c in self.counts[a, b])
            lines.append(f"{a} {b} {row}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "ContextTableDenoiser":
        lines = text.splitlines()
        if not lines or lines[0].strip() != cls.FORMAT:
            raise InvalidInputError("not a context-table snapshot")
        header = dict(kv.split("=", 1) for kv in lines[1].split())
        K = int(header["K"])
        alpha = float(header["alpha"])
        parts = lines[2].split()
        if parts[0] != "unigram":
            raise InvalidInputError("missing unigram line")
        unigram = np.array([float(v) for v in parts[1:]])
        counts = np.zeros((K + 1, K + 1, K))
        seen = np.zeros((K + 1, K + 1), dtype=bool)
        for line in lines[3:]:
            if not line.strip():
                continue
            vals = line.split()
            a, b = int(vals[0]), int(vals[1])
            counts[a, b] = [float(v) for v in vals[2:]]
            seen[a, b] = True
        return cls(counts, unigram, alpha, seen=seen)

    @classmethod
    def load(cls, path) -> "ContextTableDenoiser":
        return cls.loads(Path(path).read_text())


def fit_context_table(corpus: Sequence[Sequence[int]], alpha: float = 1.0, K: int | None = None) -> ContextTableDenoiser:
    """Count ``(left neighbour, right neighbour) -> token`` over a corpus.

    Every position of every sequence is a prediction target with its full
    context: the left neighbour is the previous token (sentinel at the first
    position) and the right neighbour the next token (sentinel at the last).
    """
    if len(corpus) == 0:
        raise InvalidInputError("corpus is empty")
    seqs = [np.asarray(s, dtype=np.int64) for s in corpus]
    if any(s.ndim != 1 or s.size == 0 for s in seqs):
        raise InvalidInputError("corpus sequences must be non-empty 1-D token lists")
    top = max(int(s.max()) for s in seqs)
    if K is None:
        K = top + 1
    if top >= K or min(int(s.min()) for s in seqs) < 0:
        raise InvalidInputError(f"corpus tokens must lie in [0, {K})")
    counts = np.zeros((K + 1, K + 1, K))
    unigram = np.zeros(K)
    sentinel = K
    for s in seqs:
        left = np.concatenate([[sentinel], s[:-1]])
        right = np.concatenate([s[1:], [sentinel]])
        np.add.at(counts, (left, right, s), 1.0)
        np.add.at(unigram, s, 1.0)
    return ContextTableDenoiser(counts, unigram, alpha)


def select_unmask_set(q_block, k: int, eos_deprioritize: bool = False, eos_id: int | None = None,
                      positions=None) -> np.ndarray:
    """Pick ``k`` rows of ``q_block`` to unmask.

    Rows are ranked by ascending entropy, ties broken by position. With
    ``eos_deprioritize`` every row whose argmax is ``eos_id`` ranks after all
    other rows. Returns entries of ``positions`` (row indices by default).
    """
    q_block = np.asarray(q_block, dtype=np.float64)
    m = q_block.shape[0]
    positions = np.arange(m) if positions is None else np.asarray(positions)
    if not 1 <= k <= m:
        raise InvalidParameterError(f"cannot unmask {k} of {m} masked positions")
    h = np.asarray(entropy(q_block)).reshape(m)
    if eos_deprioritize and eos_id is not None:
        is_eos = (np.argmax(q_block, axis=1) == eos_id).astype(np.int64)
    else:
        is_eos = np.zeros(m, dtype=np.int64)
    # lexsort: last key is primary
    order = np.lexsort((positions, h, is_eos))
    return positions[order[:k]]


def commit_step(z: SequenceState, q_block, selected, rng) -> SequenceState:
    """Sample tokens for ``selected`` by inverse CDF and freeze them.

    ``q_block`` rows follow ``z.masked_positions``. One uniform is drawn from
    ``rng`` per selected position, in the order given.
    """
    selected = np.asarray(selected, dtype=np.int64).reshape(-1)
    q_block = np.asarray(q_block, dtype=np.float64)
    masked = z.masked_positions
    if q_block.shape[0] != masked.size:
        raise ContractViolationError("q_block must have one row per masked position")
    ok = np.isin(selected, masked)
    if not np.all(ok):
        raise ContractViolationError(f"positions {selected[~ok].tolist()} are already committed")
    rows = np.searchsorted(masked, selected)
    u = np.atleast_1d(rng.random(selected.size))
    new = inverse_cdf_sample(q_block[rows], u)
    tokens = z.tokens.copy()
    tokens[selected] = new
    return SequenceState(tokens, z.t - 1, z.mask_id)


def _commit_rng(rng, t):
    return rng.commit(t) if isinstance(rng, TrajectoryRNG) else rng


def unguided_step(z: SequenceState, denoiser: Denoiser, k: int, tau: float, rng,
                  eos_deprioritize: bool = False, eos_id: int | None = None) -> SequenceState:
    """One reverse step: predict, temperature softmax, select, commit."""
    q = softmax_temp(denoiser.predict(z), tau)
    sel = select_unmask_set(q, k, eos_deprioritize, eos_id, positions=z.masked_positions)
    return commit_step(z, q, sel, _commit_rng(rng, z.t))


def generate_unguided(denoiser: Denoiser, L: int, T: int, k: int = 1, tau: float = 1.0, rng=None,
                      eos_deprioritize: bool = False, eos_id: int | None = None) -> SequenceState:
    """Run the full reverse chain from ``m^L`` at time ``T`` down to ``t = 0``.

    ``rng`` is either a :class:`TrajectoryRNG` (one substream per timestep)
    or any object with a ``random(size)`` method used sequentially.
    """
    if T * k != L:
        raise InvalidParameterError(f"T * k must equal L (got T={T}, k={k}, L={L})")
    if rng is None:
        rng = TrajectoryRNG(0)
    z = SequenceState.all_masked(L, T, denoiser.K)
    while z.t > 0:
        z = unguided_step(z, denoiser, k, tau, rng, eos_deprioritize, eos_id)
    return z


def read_corpus(path) -> list[list[int]]:
    """One sequence per line, whitespace-separated integer token ids."""
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            out.append([int(tok) for tok in line.split()])
    return out


def write_corpus(path, corpus) -> None:
    Path(path).write_text("".join(" ".join(str(int(t)) for t in seq) + "\n" for seq in corpus))
