"""Approximation and alignment error measurements for guided sampling.

For a masked position with soft embedding ``ebar``, sampled hard embedding
``etilde`` and blend weight ``w``, the reward sees
``ehat = (1 - w) ebar + w etilde`` while gradients flow through ``ebar``.

* approximation error: ``||ehat - ebar|| = w ||etilde - ebar||``
* alignment error: distance from ``ehat`` to the nearest embedding row

This module also aggregates per-step records into the error-vs-timestep
series and entropy/error histograms, and writes them as CSV.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import inverse_cdf_sample
from .errors import InvalidParameterError

__all__ = [
    "StepTelemetry",
    "HeatmapGrid",
    "approx_error",
    "align_error",
    "variance_identity_check",
    "TimeSeries",
    "TelemetryAccumulator",
    "write_csv",
    "aggregate_timeseries",
    "heatmap_bin",
    "default_heatmap",
    "fmt_num",
    "write_steps_csv",
    "write_heatmap_csv",
    "write_runs_csv",
    "read_csv",
    "STEPS_HEADER",
    "HEATMAP_HEADER",
    "RUNS_HEADER",
]

STEPS_HEADER = ("t", "j", "mean_entropy", "mean_approx_error", "mean_align_error", "masked_count", "reward")
HEATMAP_HEADER = ("entropy_bin_lo", "error_bin_lo", "count")
RUNS_HEADER = ("trajectory_id", "seed", "schedule", "final_reward")


@dataclass(frozen=True, eq=False)
class StepTelemetry:
    """One inner iteration ``j`` at reverse timestep ``t`` of one trajectory.

    Per-position arrays follow ``positions`` (the masked set at time ``t``).
    ``input_shift`` is ``||ehat - ebar||`` measured on the reward input
    itself, as opposed to ``approx_error`` which is computed as ``w * gap``.
    """

    t: int
    j: int
    positions: np.ndarray
    entropy: np.ndarray
    weight: np.ndarray
    gap: np.ndarray
    approx_error: np.ndarray
    align_error: np.ndarray
    reward: float
    input_shift: np.ndarray | None = None

    @property
    def masked_count(self) -> int:
        return int(self.positions.size)


def approx_error(w, e_hard, e_soft) -> np.ndarray | float:
    """``w * ||e_hard - e_soft||``, row-wise for stacked inputs."""
    gap = np.linalg.norm(np.asarray(e_hard, dtype=np.float64) - np.asarray(e_soft, dtype=np.float64), axis=-1)
    out = np.asarray(w, dtype=np.float64) * gap
    return float(out) if out.ndim == 0 else out


def align_error(e_hat, table) -> np.ndarray | float:
    """Distance from ``e_hat`` to the nearest row of the embedding table.

    Brute force over all rows with explicit differences, so an input that
    equals a row gives exactly zero.
    """
    rows = getattr(table, "rows", table)
    e = np.asarray(e_hat, dtype=np.float64)
    diff = e[..., None, :] - rows
    out = np.sqrt(np.min(np.einsum("...kd,...kd->...k", diff, diff), axis=-1))
    return float(out) if out.ndim == 0 else out


def variance_identity_check(q, table, n_samples: int, rng) -> tuple[float, float, float]:
    """Compare ``sum_k q_k ||E_k - ebar||^2`` with a Monte-Carlo mean of ``||etilde - ebar||^2``.

    Returns ``(analytic, empirical, rel_gap)``; ``rel_gap`` is 0 when both are 0.
    """
    if n_samples < 1:
        raise InvalidParameterError("n_samples must be at least 1")
    rows = getattr(table, "rows", table)
    q = np.asarray(q, dtype=np.float64)
    ebar = q @ rows
    sq = np.sum((rows - ebar) ** 2, axis=1)
    analytic = float(q @ sq)
    u = np.asarray(rng.random(n_samples))
    draws = inverse_cdf_sample(np.broadcast_to(q, (n_samples, q.size)), u)
    empirical = float(np.mean(sq[draws]))
    if analytic == 0.0:
        rel = 0.0 if empirical == 0.0 else float("inf")
    else:
        rel = abs(empirical - analytic) / analytic
    return analytic, empirical, rel


@dataclass
class TimeSeries:
    t: np.ndarray
    j: np.ndarray
    mean_entropy: np.ndarray
    mean_approx_error: np.ndarray
    mean_align_error: np.ndarray
    masked_count: np.ndarray
    reward: np.ndarray

    def __len__(self):
        return self.t.size

    def rows(self):
        for i in range(len(self)):
            yield (int(self.t[i]), int(self.j[i]), float(self.mean_entropy[i]), float(self.mean_approx_error[i]),
                   float(self.mean_align_error[i]), int(self.masked_count[i]), float(self.reward[i]))


def _flatten(records):
    # accepts a flat stream or a list of per-trajectory lists
    for r in records:
        if isinstance(r, StepTelemetry):
            yield r
        else:
            yield from _flatten(r)


class TelemetryAccumulator:
    """Streaming sums behind :func:`aggregate_timeseries` and :func:`default_heatmap`.

    Keeps per-``(t, j)`` sums plus the ``(entropy, approx_error)`` pairs of
    every record, so large runs need not hold the records themselves.
    Merging accumulators in a fixed order gives bitwise-reproducible means.
    """

    def __init__(self):
        # (t, j) -> [sum_entropy, sum_approx, sum_align, n_positions, sum_masked, sum_reward, n_records]
        self.sums: dict[tuple[int, int], list[float]] = {}
        self._ent: list[np.ndarray] = []
        self._err: list[np.ndarray] = []

    def add(self, records) -> "TelemetryAccumulator":
        for r in _flatten(records):
            acc = self.sums.setdefault((r.t, r.j), [0.0, 0.0, 0.0, 0, 0, 0.0, 0])
            acc[0] += float(np.sum(r.entropy))
            acc[1] += float(np.sum(r.approx_error))
            acc[2] += float(np.sum(r.align_error))
            acc[3] += r.masked_count
            acc[4] += r.masked_count
            acc[5] += r.reward
            acc[6] += 1
            self._ent.append(r.entropy)
            self._err.append(r.approx_error)
        return self

    def merge(self, other: "TelemetryAccumulator") -> "TelemetryAccumulator":
        for key, vals in other.sums.items():
            acc = self.sums.setdefault(key, [0.0, 0.0, 0.0, 0, 0, 0.0, 0])
            for i, v in enumerate(vals):
                acc[i] += v
        self._ent.extend(other._ent)
        self._err.extend(other._err)
        return self

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        if not self._ent:
            return np.array([]), np.array([])
        return np.concatenate(self._ent), np.concatenate(self._err)

    def timeseries(self) -> TimeSeries:
        final_j: dict[int, int] = {}
        for t, j in self.sums:
            final_j[t] = max(final_j.get(t, j), j)
        ts = sorted(final_j, reverse=True)
        rows = [self.sums[(t, final_j[t])] for t in ts]
        col = lambda i: np.array([r[i] for r in rows], dtype=np.float64)  # noqa: E731
        npos = np.maximum(col(3), 1.0)
        nrec = np.maximum(col(6), 1.0)
        return TimeSeries(
            t=np.array(ts, dtype=np.int64),
            j=np.array([final_j[t] for t in ts], dtype=np.int64),
            mean_entropy=col(0) / npos,
            mean_approx_error=col(1) / npos,
            mean_align_error=col(2) / npos,
            masked_count=np.rint(col(4) / nrec).astype(np.int64),
            reward=col(5) / nrec,
        )

    def heatmap(self, K: int, bins: int = 40) -> "HeatmapGrid":
        ent, err = self.pairs()
        top = float(err.max()) if err.size else 0.0
        if not top > 0:
            top = 1.0
        return _histogram(ent, err, np.linspace(0.0, np.log(K), bins + 1), np.linspace(0.0, top, bins + 1))


def aggregate_timeseries(records: Iterable) -> TimeSeries:
    """Per-timestep means over masked positions and trajectories at the final inner iteration.

    Committed positions are excluded; ``masked_count`` is kept so averages
    over the full length can be rebuilt. Timesteps are listed in decoding
    order (descending ``t``). ``reward`` is the mean ``R(ehat)`` over
    trajectories. An empty stream gives an empty series.
    """
    return TelemetryAccumulator().add(records).timeseries()


@dataclass
class HeatmapGrid:
    entropy_edges: np.ndarray
    error_edges: np.ndarray
    counts: np.ndarray
    log_scale: bool = True

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def log_counts(self) -> np.ndarray:
        """``log10(1 + count)`` for colouring."""
        return np.log10(1.0 + self.counts)


def _bin_index(values, edges):
    # clamp out-of-range values into the boundary bins
    idx = np.searchsorted(edges, values, side="right") - 1
    return np.clip(idx, 0, edges.size - 2)


def _check_edges(name, edges):
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise InvalidParameterError(f"{name} edges must be strictly increasing with at least two entries")


def _histogram(ent, err, ee, re, log_scale=True) -> HeatmapGrid:
    counts = np.zeros((ee.size - 1, re.size - 1), dtype=np.int64)
    if ent.size:
        np.add.at(counts, (_bin_index(ent, ee), _bin_index(err, re)), 1)
    return HeatmapGrid(ee, re, counts, log_scale)


def heatmap_bin(records, entropy_edges, error_edges, log_scale: bool = True) -> HeatmapGrid:
    """2-D histogram of ``(entropy, approx_error)`` over every position of every record.

    Values outside the edges are counted in the boundary bins.
    """
    ee = np.asarray(entropy_edges, dtype=np.float64)
    re = np.asarray(error_edges, dtype=np.float64)
    _check_edges("entropy", ee)
    _check_edges("error", re)
    ent, err = TelemetryAccumulator().add(records).pairs()
    return _histogram(ent, err, ee, re, log_scale)


def default_heatmap(records, K: int, bins: int = 40) -> HeatmapGrid:
    """Heatmap over entropy ``[0, ln K]`` and error ``[0, observed max]``."""
    return TelemetryAccumulator().add(records).heatmap(K, bins)


def fmt_num(x) -> str:
    """Shortest round-trip decimal for floats, plain digits for ints."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def write_csv(path, header: Sequence[str], rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([v if isinstance(v, str) else fmt_num(v) for v in row])


def write_steps_csv(path, series: TimeSeries) -> None:
    write_csv(path, STEPS_HEADER, series.rows())


def write_heatmap_csv(path, grid: HeatmapGrid) -> None:
    rows = ((float(grid.entropy_edges[a]), float(grid.error_edges[b]), int(grid.counts[a, b]))
            for a in range(grid.counts.shape[0]) for b in range(grid.counts.shape[1]))
    write_csv(path, HEATMAP_HEADER, rows)


def write_runs_csv(path, rows) -> None:
    """Rows of ``(trajectory_id, seed, schedule, final_reward)``."""
    write_csv(path, RUNS_HEADER, rows)


def read_csv(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
