"""Synthetic tasks, experiment runs over strategy arms, and paired comparisons.

A task fixes the vocabulary, the sequence length, a Markov-chain corpus
used to fit the context-table denoiser, and a rule that turns a prompt index
into a reward model. A run evaluates every arm (one guidance configuration
each) on the same ``prompts x seeds`` grid, with trajectory ``i`` of prompt
``p`` under seed ``s`` always keyed by ``(s, p, i)``. Arms therefore share
random streams and differ only through what guidance does.

Output layout of a run directory::

    manifest.txt         resolved manifest plus the snapshot digest
    runs.csv             trajectory_id, seed, schedule, final_reward
    metrics.csv          per-arm Top@1 / Avg@N means and standard errors
    prompts.csv          per (arm, prompt, seed) Top@1 and Avg@N
    <arm>/steps.csv      error and entropy series by timestep
    <arm>/heatmap.csv    entropy x approximation-error histogram
"""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from .core import inverse_cdf_sample
from .diffusion import ContextTableDenoiser, fit_context_table
from .errors import InvalidInputError, InvalidParameterError
from .guidance import GuidanceConfig, WeightSchedule, _parse_bool, generate_guided
from .reward import (EmbeddingTable, MLPReward, PrototypeReward, QuadraticReward, ScaledReward,
                     build_embedding_table)
from .rng import Stream, derive_key
from .telemetry import TelemetryAccumulator, fmt_num, write_csv, write_heatmap_csv, write_runs_csv, write_steps_csv

__all__ = [
    "TaskSpec",
    "RunManifest",
    "Arm",
    "parse_arm",
    "generate_corpus",
    "transition_matrix",
    "reward_for_prompt",
    "prepare",
    "run_experiment",
    "ExperimentResult",
    "CellResult",
    "compare_arms",
    "PairedComparison",
    "sweep",
]

log = logging.getLogger(__name__)

TOOL_VERSION = "entrgi 0.1.0"

_CORPUS_NS = 0x434F52
_PROMPT_NS = 0x50524D

REWARD_BACKENDS = ("prototype", "quadratic", "mlp")


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic stand-in for a prompt benchmark.

    The corpus comes from an order-1 Markov chain whose successor of token
    ``i`` is one of ``i+1, ..., i+band`` (mod ``K``). ``band_weights`` is
    ``random`` (Dirichlet(1) weights within the band) or ``uniform``.

    ``reward_scale`` multiplies every prompt's reward. The prototype reward
    averages over ``L`` positions, so unscaled its logit gradients are too
    small for ``eta = 0.5`` to move the sampler at all; 8 makes guidance
    visible without saturating it.
    """

    name: str = "markov-grammar"
    K: int = 64
    d: int = 16
    L: int = 32
    n_prompts: int = 200
    reward: str = "prototype"
    corpus_size: int = 2000
    band: int = 4
    band_weights: str = "random"
    corpus_seed: int = 0
    table_seed: int = 0
    task_seed: int = 0
    alpha: float = 1.0
    unit_norm: bool = False
    eos_id: int | None = None
    mlp_hidden: int = 32
    reward_scale: float = 8.0

    def __post_init__(self):
        if self.K < 2 or self.d < 1 or self.L < 1 or self.n_prompts < 1:
            raise InvalidParameterError("task needs K >= 2, d >= 1, L >= 1, n_prompts >= 1")
        if not 1 <= self.band <= self.K:
            raise InvalidParameterError("band must lie in [1, K]")
        if self.band_weights not in ("random", "uniform"):
            raise InvalidParameterError("band_weights must be 'random' or 'uniform'")
        if self.reward not in REWARD_BACKENDS:
            raise InvalidParameterError(f"reward must be one of {REWARD_BACKENDS}")
        if self.corpus_size < 1:
            raise InvalidParameterError("corpus_size must be >= 1")
        if self.eos_id is not None and not 0 <= self.eos_id < self.K:
            raise InvalidParameterError("eos_id must be an actual token")


def transition_matrix(task: TaskSpec, seed: int) -> np.ndarray:
    """Banded ``K x K`` transition matrix of the corpus chain."""
    K, b = task.K, task.band
    if task.band_weights == "uniform":
        weights = np.full((K, b), 1.0 / b)
    else:
        # Dirichlet(1) = normalised Exp(1) draws
        expo = -np.log1p(-Stream(derive_key(seed, (_CORPUS_NS, 1))).random((K, b)))
        weights = expo / expo.sum(axis=1, keepdims=True)
    P = np.zeros((K, K))
    rows = np.repeat(np.arange(K), b)
    cols = (rows + 1 + np.tile(np.arange(b), K)) % K
    np.add.at(P, (rows, cols), weights.reshape(-1))
    return P


def generate_corpus(task: TaskSpec, seed: int | None = None, n: int | None = None) -> list[list[int]]:
    """Sequences of length ``task.L`` from the seeded banded Markov chain."""
    seed = task.corpus_seed if seed is None else seed
    n = task.corpus_size if n is None else n
    P = transition_matrix(task, seed)
    s = Stream(derive_key(seed, (_CORPUS_NS, 2)))
    out = np.empty((n, task.L), dtype=np.int64)
    out[:, 0] = np.minimum((s.random(n) * task.K).astype(np.int64), task.K - 1)
    for pos in range(1, task.L):
        out[:, pos] = inverse_cdf_sample(P[out[:, pos - 1]], s.random(n))
    return out.tolist()


def reward_for_prompt(task: TaskSpec, prompt: int, table: EmbeddingTable):
    """Reward model for one prompt, a pure function of ``(task, prompt)``."""
    base = _base_reward(task, prompt, table)
    return base if task.reward_scale == 1.0 else ScaledReward(base, task.reward_scale)


def _base_reward(task, prompt, table):
    s = Stream(derive_key(task.task_seed, (_PROMPT_NS, int(prompt))))
    if task.reward == "prototype":
        return PrototypeReward(s.normal(task.d))
    if task.reward == "quadratic":
        target = np.minimum((s.random(task.L) * task.K).astype(np.int64), task.K - 1)
        return QuadraticReward(table.rows[target])
    seed = int(derive_key(task.task_seed, (_PROMPT_NS, int(prompt)))[0] % (2**31))
    return MLPReward.from_seed(task.d, task.mlp_hidden, seed)


@dataclass(frozen=True)
class Arm:
    """A named strategy: a schedule, optionally with a forced constant weight."""

    name: str
    schedule: WeightSchedule
    forced_weight: float | None = None


def parse_arm(token: str) -> Arm:
    """``bon`` / ``none`` / any schedule name, or ``w=<value>`` for a forced weight."""
    tok = token.strip().lower()
    if tok.startswith("w="):
        try:
            w = float(tok[2:])
        except ValueError as exc:
            raise InvalidParameterError(f"bad forced-weight arm {token!r}") from exc
        return Arm(tok, WeightSchedule.ENTRGI, w)
    if tok == "bon":
        return Arm("bon", WeightSchedule.NONE)
    try:
        return Arm(tok, WeightSchedule(tok))
    except ValueError as exc:
        raise InvalidParameterError(f"unknown arm {token!r}") from exc


_GUIDANCE_KEYS = ("eta", "m_steps", "n_trajectories", "tau", "clip_norm", "k", "eos_deprioritize", "freeze_x")


@dataclass
class RunManifest:
    """Everything that determines a run's output files."""

    task: TaskSpec = field(default_factory=TaskSpec)
    arms: tuple[str, ...] = ("bon", "expectation", "aps", "entrgi")
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    out_dir: str = "runs/default"
    denoiser: str | None = None
    workers: int = 1
    version: str = TOOL_VERSION

    def __post_init__(self):
        self.arms = tuple(self.arms)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.arms:
            raise InvalidParameterError("at least one arm is required")
        if not self.seeds:
            raise InvalidParameterError("at least one seed is required")
        names = [parse_arm(a).name for a in self.arms]
        if len(set(names)) != len(names):
            raise InvalidParameterError("arm names must be unique")
        if self.task.L % self.guidance.k:
            raise InvalidParameterError("L must be a multiple of k")
        if self.workers < 1:
            raise InvalidParameterError("workers must be >= 1")

    def arm_configs(self) -> dict[str, GuidanceConfig]:
        out = {}
        for token in self.arms:
            arm = parse_arm(token)
            out[arm.name] = replace(self.guidance, schedule=arm.schedule, forced_weight=arm.forced_weight)
        return out

    # flat key=value file ----------------------------------------------------

    @staticmethod
    def keys() -> list[str]:
        task_keys = [f.name for f in fields(TaskSpec)]
        return task_keys + list(_GUIDANCE_KEYS) + ["arms", "seeds", "out_dir", "denoiser", "workers"]

    def to_mapping(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self.task).items():
            out[k] = _fmt(v)
        for k in _GUIDANCE_KEYS:
            out[k] = _fmt(getattr(self.guidance, k))
        out["arms"] = ",".join(self.arms)
        out["seeds"] = ",".join(str(s) for s in self.seeds)
        out["out_dir"] = self.out_dir
        out["denoiser"] = _fmt(self.denoiser)
        out["workers"] = str(self.workers)
        return out

    def to_kv(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_mapping().items())

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "RunManifest":
        unknown = set(raw) - set(cls.keys())
        if unknown:
            raise InvalidParameterError(f"unknown manifest keys: {sorted(unknown)}")
        try:
            task_kwargs = {}
            for f in fields(TaskSpec):
                if f.name in raw:
                    task_kwargs[f.name] = _parse_task_value(f.name, raw[f.name])
            g_kwargs = {k: raw[k] for k in _GUIDANCE_KEYS if k in raw}
            guidance = GuidanceConfig.from_mapping(g_kwargs)
            kwargs = {"task": TaskSpec(**task_kwargs), "guidance": guidance}
            if "arms" in raw:
                kwargs["arms"] = tuple(a.strip() for a in raw["arms"].split(",") if a.strip())
            if "seeds" in raw:
                kwargs["seeds"] = tuple(int(s) for s in raw["seeds"].split(",") if s.strip())
            if "out_dir" in raw:
                kwargs["out_dir"] = raw["out_dir"]
            if "denoiser" in raw:
                kwargs["denoiser"] = None if raw["denoiser"].lower() in ("", "none") else raw["denoiser"]
            if "workers" in raw:
                kwargs["workers"] = int(raw["workers"])
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InvalidParameterError):
                raise
            raise InvalidParameterError(str(exc)) from exc
        return cls(**kwargs)

    @classmethod
    def from_kv(cls, text: str) -> "RunManifest":
        return cls.from_mapping(parse_kv(text))

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls.from_kv(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidParameterError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        raw[k] = v
    return raw


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_task_value(name, val):
    if not isinstance(val, str):
        return val
    if name in ("name", "reward", "band_weights"):
        return val
    if name in ("alpha", "reward_scale"):
        return float(val)
    if name == "unit_norm":
        return _parse_bool(val)
    if name == "eos_id":
        return None if val.lower() in ("", "none") else int(val)
    return int(val)


def prepare(manifest: RunManifest, denoiser: ContextTableDenoiser | None = None):
    """Embedding table and denoiser for a manifest, fitted or loaded."""
    task = manifest.task
    table = build_embedding_table(task.K, task.d, task.table_seed, task.unit_norm)
    if denoiser is None:
        if manifest.denoiser:
            denoiser = ContextTableDenoiser.load(manifest.denoiser)
        else:
            denoiser = fit_context_table(generate_corpus(task), task.alpha, K=task.K)
    if denoiser.K != table.K:
        raise InvalidInputError("denoiser vocabulary does not match the task")
    return table, denoiser


def snapshot_digest(denoiser: ContextTableDenoiser, table: EmbeddingTable) -> str:
    h = hashlib.sha256()
    h.update(denoiser.dumps().encode())
    h.update(table.dumps().encode())
    return h.hexdigest()


@dataclass
class CellResult:
    arm: str
    prompt: int
    seed: int
    rewards: np.ndarray
    n_failed: int

    @property
    def top1(self) -> float:
        return float(np.max(self.rewards)) if self.ok else float("nan")

    @property
    def avg(self) -> float:
        return float(np.mean(self.rewards)) if self.ok else float("nan")

    @property
    def ok(self) -> bool:
        return self.n_failed == 0


@dataclass
class ArmSummary:
    arm: str
    schedule: str
    cells: int
    excluded: int
    top1_mean: float
    top1_se: float
    avg_mean: float
    avg_se: float


@dataclass
class ExperimentResult:
    manifest: RunManifest
    digest: str
    cells: dict[str, list[CellResult]]
    summaries: dict[str, ArmSummary]
    out_dir: Path
    runtime_s: float = 0.0

    def per_prompt(self, arm: str, metric: str = "top1") -> dict[int, float]:
        """Metric per prompt, averaged over seeds; prompts with any failure are dropped."""
        by_prompt: dict[int, list[float]] = {}
        bad = set()
        for c in self.cells[arm]:
            if not c.ok:
                bad.add(c.prompt)
            by_prompt.setdefault(c.prompt, []).append(getattr(c, metric))
        return {p: float(np.mean(v)) for p, v in sorted(by_prompt.items()) if p not in bad}


def _se(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1) / np.sqrt(x.size)) if x.size > 1 else 0.0


def _run_unit(args):
    """All prompts of one (arm, seed): cells, runs rows and telemetry accumulator."""
    arm_name, config, seed, task, table, denoiser = args
    cfg = replace(config, seed=seed)
    acc = TelemetryAccumulator()
    cells, rows = [], []
    n = cfg.n_trajectories
    for p in range(task.n_prompts):
        rm = reward_for_prompt(task, p, table)
        res = generate_guided(p, denoiser, rm, table, cfg, task.L, prompt_id=p, eos_id=task.eos_id)
        for tr in res.trajectories:
            acc.add(tr.telemetry)
            rows.append((p * n + tr.index, seed, arm_name, tr.reward))
        cells.append(CellResult(arm_name, p, seed, res.rewards, res.n_failed))
    return cells, rows, acc


def run_experiment(manifest: RunManifest, denoiser: ContextTableDenoiser | None = None,
                   write: bool = True) -> ExperimentResult:
    """Evaluate every arm on the prompt x seed grid and write the CSV outputs."""
    import time

    start = time.perf_counter()
    task = manifest.task
    table, denoiser = prepare(manifest, denoiser)
    digest = snapshot_digest(denoiser, table)
    out = Path(manifest.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "manifest.txt").write_text(manifest.to_kv() + f"version = {manifest.version}\ndigest = {digest}\n")
    configs = manifest.arm_configs()
    units = [(a, cfg, s, task, table, denoiser) for a, cfg in configs.items() for s in manifest.seeds]
    if manifest.workers > 1:
        with ProcessPoolExecutor(manifest.workers) as pool:
            results = list(pool.map(_run_unit, units))
    else:
        results = [_run_unit(u) for u in units]

    cells: dict[str, list[CellResult]] = {a: [] for a in configs}
    runs_rows = []
    accs: dict[str, TelemetryAccumulator] = {a: TelemetryAccumulator() for a in configs}
    for (arm, *_), (c, rows, acc) in zip(units, results):
        cells[arm].extend(c)
        runs_rows.extend(rows)
        accs[arm].merge(acc)

    summaries = {}
    for arm, cfg in configs.items():
        ok = [c for c in cells[arm] if c.ok]
        top = np.array([c.top1 for c in ok])
        avg = np.array([c.avg for c in ok])
        summaries[arm] = ArmSummary(
            arm, str(cfg.schedule), len(ok), len(cells[arm]) - len(ok),
            float(top.mean()) if top.size else float("nan"), _se(top),
            float(avg.mean()) if avg.size else float("nan"), _se(avg))
        if summaries[arm].excluded:
            log.warning("arm %s: %d cells excluded after numeric failures", arm, summaries[arm].excluded)

    if write:
        write_runs_csv(out / "runs.csv", runs_rows)
        write_csv(out / "metrics.csv",
                   ("arm", "schedule", "cells", "excluded", "top1_mean", "top1_se", "avg_mean", "avg_se"),
                   (tuple(asdict(s).values()) for s in summaries.values()))
        write_csv(out / "prompts.csv", ("arm", "prompt", "seed", "top1", "avg_n", "failed"),
                   ((c.arm, c.prompt, c.seed, c.top1, c.avg, c.n_failed) for a in cells for c in cells[a]))
        for arm, acc in accs.items():
            write_steps_csv(out / arm / "steps.csv", acc.timeseries())
            write_heatmap_csv(out / arm / "heatmap.csv", acc.heatmap(task.K))
    return ExperimentResult(manifest, digest, cells, summaries, out, time.perf_counter() - start)


@dataclass
class PairedComparison:
    arm_a: str
    arm_b: str
    n_prompts: int
    mean_difference: float
    wins: int
    losses: int
    ties: int
    p_value: float


def compare_arms(metrics, arm_a: str, arm_b: str, metric: str = "top1") -> PairedComparison:
    """Paired per-prompt comparison of two arms with an exact two-sided sign test.

    ``metrics`` is an :class:`ExperimentResult` or a mapping from arm name to
    ``{prompt: value}``. Ties are dropped from the sign test; no non-tied
    prompt gives ``p = 1``.
    """
    if isinstance(metrics, ExperimentResult):
        a, b = metrics.per_prompt(arm_a, metric), metrics.per_prompt(arm_b, metric)
        grid_a = {(c.prompt, c.seed) for c in metrics.cells[arm_a]}
        grid_b = {(c.prompt, c.seed) for c in metrics.cells[arm_b]}
        if grid_a != grid_b:
            raise InvalidInputError("arms were run on different prompt/seed grids")
        common = sorted(set(a) & set(b))
    else:
        a, b = metrics[arm_a], metrics[arm_b]
        if set(a) != set(b):
            raise InvalidInputError("arms cover different prompts")
        common = sorted(a)
    diff = np.array([a[p] - b[p] for p in common])
    wins, losses = int(np.sum(diff > 0)), int(np.sum(diff < 0))
    n = wins + losses
    p = 1.0 if n == 0 else float(stats.binomtest(wins, n, 0.5).pvalue)
    mean = float(diff.mean()) if diff.size else 0.0
    return PairedComparison(arm_a, arm_b, len(common), mean, wins, losses, diff.size - n, p)


def sweep(manifest: RunManifest, m_values=(1, 3), taus=(0.1, 0.7), backends=("prototype",),
          schedules=None, denoiser: ContextTableDenoiser | None = None) -> list[dict]:
    """Grid over M, tau, reward backend and schedule; one sub-run per (backend, tau, M)."""
    rows = []
    root = Path(manifest.out_dir)
    arms = tuple(schedules) if schedules else manifest.arms
    for backend in backends:
        task = replace(manifest.task, reward=backend)
        _, den = prepare(replace(manifest, task=task), denoiser)
        for tau in taus:
            for m in m_values:
                sub = replace(manifest, task=task, arms=arms,
                              guidance=replace(manifest.guidance, tau=float(tau), m_steps=int(m)),
                              out_dir=str(root / f"{backend}_tau{fmt_num(float(tau))}_m{m}"))
                res = run_experiment(sub, den)
                for s in res.summaries.values():
                    rows.append({"reward": backend, "tau": float(tau), "m_steps": int(m), **asdict(s)})
    if rows:
        write_csv(root / "sweep.csv", tuple(rows[0]), (tuple(r.values()) for r in rows))
    return rows
