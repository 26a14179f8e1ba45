"""Verification suites: gradient oracles, error identities and sampler invariants.

Each function runs one suite and returns a :class:`CheckResult` with the
measured worst case next to its tolerance. The CLI ``check`` verb and the
acceptance tests both call these.
"""

from __future__ import annotations

import filecmp
import itertools
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import finite_diff_grad, relative_error, softmax_temp
from .diffusion import SequenceState
from .guidance import (GuidanceConfig, WeightSchedule, build_reward_input, generate_guided, guidance_gradient)
from .harness import RunManifest, TaskSpec, compare_arms, run_experiment
from .reward import (EmbeddingTable, MLPReward, PrototypeReward, QuadraticReward, build_embedding_table,
                     check_reward_gradient, soft_embedding)
from .rng import Stream, TrajectoryRNG, derive_key
from .telemetry import align_error, read_csv, variance_identity_check

__all__ = [
    "CheckResult",
    "random_reward",
    "random_state",
    "surrogate_gradient_error",
    "check_gradient_chain",
    "check_reward_models",
    "check_error_identities",
    "check_entropy_limits",
    "check_variance_identity",
    "check_schedule_subsumption",
    "check_monotone_ascent",
    "check_sampler_invariants",
    "load_prompt_metrics",
    "check_directional_trend",
    "check_timestep_errors",
    "run_all",
]

_CHECK_NS = 0x43484B

GRADIENT_SCHEDULES = (WeightSchedule.EXPECTATION, WeightSchedule.APS, WeightSchedule.ENTRGI,
                      WeightSchedule.INV_ENTRGI, WeightSchedule.L2NORM)
BACKENDS = ("prototype", "quadratic", "mlp")


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.value:.3e} (tol {self.tolerance:g}) {self.detail}".rstrip()


def _stream(seed, *path):
    return Stream(derive_key(seed, (_CHECK_NS,) + tuple(path)))


def random_reward(backend: str, L: int, d: int, table: EmbeddingTable, seed: int):
    s = _stream(seed, 1)
    if backend == "prototype":
        return PrototypeReward(s.normal(d))
    if backend == "quadratic":
        tokens = np.minimum((s.random(L) * table.K).astype(np.int64), table.K - 1)
        return QuadraticReward(table.rows[tokens] + 0.1 * s.normal((L, d)))
    if backend == "mlp":
        return MLPReward.from_seed(d, 16, seed)
    raise ValueError(f"unknown backend {backend!r}")


def random_state(L: int, K: int, seed: int, committed_frac: float = 0.4) -> SequenceState:
    """Partially masked state with at least one masked position."""
    s = _stream(seed, 2)
    keep = s.random(L) < committed_frac
    keep[int(s.random() * L) % L] = False
    tokens = np.where(keep, np.minimum((s.random(L) * K).astype(np.int64), K - 1), K)
    return SequenceState(tokens, int(np.sum(~keep)), K)


def surrogate_gradient_error(z, psi, tau, schedule, table, reward_model, rng, h=None) -> float:
    """Relative error between the implemented logit gradient and central differences
    of ``psi -> R(ebar(psi) + c)`` with ``c = ehat - ebar`` frozen at ``psi``.
    """
    ri = build_reward_input(z, psi, tau, schedule, table, rng)
    g = guidance_gradient(reward_model, ri, table, tau)
    frozen = ri.e_hat[ri.positions] - ri.e_soft
    base = ri.e_hat.copy()

    def surrogate(p):
        e = base.copy()
        e[ri.positions] = soft_embedding(softmax_temp(p, tau), table) + frozen
        return reward_model.value(e)

    step = 1e-4 * tau if h is None else h
    return relative_error(g, finite_diff_grad(surrogate, psi, step))


def check_gradient_chain(n_configs: int = 100, seed: int = 0, tol: float = 1e-4) -> CheckResult:
    """Logit gradients against the frozen-offset surrogate over a grid of random configurations.

    Backends and schedules cycle with the configuration index so every one is
    covered; K, d, L and tau are drawn from the stated sets.
    """
    grid = list(itertools.product((8, 50), (4, 16), (4, 16), (0.1, 0.7, 1.0)))
    worst, where = 0.0, ""
    for i in range(n_configs):
        s = _stream(seed, 3, i)
        K, d, L, tau = grid[int(s.random() * len(grid)) % len(grid)]
        backend = BACKENDS[i % len(BACKENDS)]
        schedule = GRADIENT_SCHEDULES[i % len(GRADIENT_SCHEDULES)]
        table = build_embedding_table(K, d, seed=seed * 1000 + i)
        model = random_reward(backend, L, d, table, seed * 1000 + i)
        z = random_state(L, K, seed * 1000 + i)
        psi = s.normal((z.n_masked, K))
        err = surrogate_gradient_error(z, psi, tau, schedule, table, model, _stream(seed, 4, i))
        if not err <= worst:  # NaN counts as worst
            worst, where = err, f"worst at K={K} d={d} L={L} tau={tau} {backend}/{schedule}"
    return CheckResult("gradient chain vs finite differences", worst <= tol, worst, tol, where)


def check_reward_models(seed: int = 0) -> list[CheckResult]:
    out = []
    for K, d, L in itertools.product((8, 50), (4, 16), (4, 16)):
        table = build_embedding_table(K, d, seed=seed)
        for backend, tol in (("prototype", 1e-10), ("quadratic", 1e-6), ("mlp", 1e-4)):
            model = random_reward(backend, L, d, table, seed)
            rep = check_reward_gradient(model, L, d, trials=5, seed=seed)
            out.append(CheckResult(f"reward gradient {backend} K={K} d={d} L={L}", rep.passed(tol),
                                   rep.max_rel_error, tol))
    return out


def _run_records(schedule, task: TaskSpec, n_prompts: int, seed: int, **cfg):
    from .harness import prepare, reward_for_prompt

    man = RunManifest(task=replace(task, n_prompts=n_prompts), seeds=(seed,))
    table, den = prepare(man)
    config = GuidanceConfig(schedule=schedule, seed=seed, **cfg)
    records = []
    for p in range(n_prompts):
        res = generate_guided(p, den, reward_for_prompt(man.task, p, table), table, config, task.L, prompt_id=p)
        for tr in res.trajectories:
            records.extend(tr.telemetry)
    return records


def check_error_identities(task: TaskSpec | None = None, n_prompts: int = 4, seed: int = 0,
                           tol: float = 1e-12) -> list[CheckResult]:
    """Per-record identities on full guided runs of APS and EntRGi.

    ``input_shift`` is measured on the reward input; the identities compare it
    with the hard-soft gap and the weight.
    """
    task = task or TaskSpec()
    aps = _run_records(WeightSchedule.APS, task, n_prompts, seed)
    ent = _run_records(WeightSchedule.ENTRGI, task, n_prompts, seed)
    aps_shift = max(float(np.max(np.abs(r.input_shift - r.gap))) for r in aps)
    aps_align = max(float(np.max(r.align_error)) for r in aps)
    ent_ident = max(float(np.max(np.abs(r.input_shift - r.weight * r.gap))) for r in ent)
    ent_stored = max(float(np.max(np.abs(r.approx_error - r.weight * r.gap))) for r in ent)
    # E_EntRGi <= E_APS on the same cached (q, gap): APS error at a record is its gap
    excess = max(float(np.max(r.approx_error - r.gap)) for r in ent)
    n = sum(r.masked_count for r in aps) + sum(r.masked_count for r in ent)
    return [
        CheckResult("E_APS == ||etilde - ebar|| (exact)", aps_shift == 0.0, aps_shift, 0.0, f"{n} positions"),
        CheckResult("D_APS == 0 (exact)", aps_align == 0.0, aps_align, 0.0),
        CheckResult("E_EntRGi == w ||etilde - ebar||", ent_ident <= tol and ent_stored <= tol,
                    max(ent_ident, ent_stored), tol),
        CheckResult("E_EntRGi <= E_APS per record", excess <= 0.0, max(excess, 0.0), 0.0),
    ]


def check_entropy_limits(n_cases: int = 50, seed: int = 0, tol: float = 1e-3) -> list[CheckResult]:
    """Low temperature with a clear argmax drives w, E and D to 0; uniform logits give w = 1."""
    worst_w = worst_e = worst_d = 0.0
    worst_uniform = 0.0
    for i in range(n_cases):
        s = _stream(seed, 5, i)
        K = 8 + int(s.random() * 56)
        d = 4 + int(s.random() * 13)
        L = 4 + int(s.random() * 12)
        table = build_embedding_table(K, d, seed=i)
        z = random_state(L, K, i)
        psi = s.normal((z.n_masked, K))
        top = np.argmax(psi, axis=1)
        # push the argmax at least 1 above the runner-up
        second = np.sort(psi, axis=1)[:, -2]
        psi[np.arange(z.n_masked), top] = np.maximum(psi[np.arange(z.n_masked), top], second + 1.0)
        ri = build_reward_input(z, psi, 0.01, WeightSchedule.ENTRGI, table, _stream(seed, 6, i))
        e = ri.w * np.linalg.norm(ri.e_hard - ri.e_soft, axis=1)
        dist = align_error(ri.e_hat[ri.positions], table)
        worst_w = max(worst_w, float(ri.w.max()))
        worst_e = max(worst_e, float(e.max()))
        worst_d = max(worst_d, float(np.max(dist)))
        flat = build_reward_input(z, np.zeros((z.n_masked, K)), 0.7, WeightSchedule.ENTRGI, table,
                                  _stream(seed, 7, i))
        worst_uniform = max(worst_uniform, float(np.max(np.abs(flat.w - 1.0))))
    return [
        CheckResult("tau=0.01: max w", worst_w <= tol, worst_w, tol),
        CheckResult("tau=0.01: max E_EntRGi", worst_e <= tol, worst_e, tol),
        CheckResult("tau=0.01: max D_EntRGi", worst_d <= tol, worst_d, tol),
        CheckResult("uniform logits: |w - 1|", worst_uniform <= 1e-9, worst_uniform, 1e-9),
    ]


def check_variance_identity(n_q: int = 20, n_samples: int = 100_000, seed: int = 0,
                            tol: float = 0.02) -> CheckResult:
    worst = 0.0
    for i in range(n_q):
        s = _stream(seed, 8, i)
        K = 4 + int(s.random() * 60)
        table = build_embedding_table(K, 8, seed=i)
        expo = (-np.log1p(-s.random(K))) ** (1 + 2 * s.random())
        q = expo / expo.sum()
        _, _, rel = variance_identity_check(q, table, n_samples, _stream(seed, 9, i))
        worst = rel if not rel <= worst else worst  # NaN propagates
    return CheckResult("variance identity (Monte Carlo)", worst <= tol, worst, tol, f"{n_q} random q")


def _strip_schedule(path):
    rows = read_csv(path)
    return [(r["trajectory_id"], r["seed"], r["final_reward"]) for r in rows]


def check_schedule_subsumption(task: TaskSpec | None = None, n_prompts: int = 6, seeds=(0, 1),
                               reward: str = "mlp") -> list[CheckResult]:
    """Forced w=0 / w=1 arms against Expectation / APS: trajectories, metrics and CSVs.

    Uses a nonlinear reward by default so the schedules do not coincide trivially.
    """
    task = replace(task or TaskSpec(), n_prompts=n_prompts, reward=reward)
    out = []
    with tempfile.TemporaryDirectory() as tmp:
        man = RunManifest(task=task, seeds=tuple(seeds), arms=("expectation", "w=0", "aps", "w=1"),
                          out_dir=tmp)
        res = run_experiment(man)
        root = Path(tmp)
        runs = read_csv(root / "runs.csv")
        by_arm: dict[str, list] = {}
        for r in runs:
            by_arm.setdefault(r["schedule"], []).append((r["trajectory_id"], r["seed"], r["final_reward"]))
        for base, forced in (("expectation", "w=0"), ("aps", "w=1")):
            same_runs = by_arm[base] == by_arm[forced]
            same_cells = [(c.prompt, c.seed, c.rewards.tobytes()) for c in res.cells[base]] == \
                         [(c.prompt, c.seed, c.rewards.tobytes()) for c in res.cells[forced]]
            sa, sf = res.summaries[base], res.summaries[forced]
            same_metrics = (sa.top1_mean, sa.top1_se, sa.avg_mean, sa.avg_se) == \
                           (sf.top1_mean, sf.top1_se, sf.avg_mean, sf.avg_se)
            same_files = all(filecmp.cmp(root / base / f, root / forced / f, shallow=False)
                             for f in ("steps.csv", "heatmap.csv"))
            ok = same_runs and same_cells and same_metrics and same_files
            out.append(CheckResult(f"forced {forced} == {base}", ok, 0.0 if ok else 1.0, 0.0,
                                   f"runs={same_runs} cells={same_cells} metrics={same_metrics} csv={same_files}"))
    return out


def check_monotone_ascent(n_instances: int = 100, seed: int = 0, eta: float = 0.05, m_steps: int = 10,
                          tol: float = -1e-9) -> CheckResult:
    """Expectation-schedule ascent on a quadratic reward at a small step.

    Instances draw tau from {0.7, 1.0}; the reward is recorded at every inner
    iteration and once more after the last update.
    """
    worst = np.inf
    for i in range(n_instances):
        s = _stream(seed, 10, i)
        K = (8, 16, 50)[int(s.random() * 3) % 3]
        d = (4, 16)[int(s.random() * 2) % 2]
        L = (4, 8, 16)[int(s.random() * 3) % 3]
        tau = (0.7, 1.0)[int(s.random() * 2) % 2]
        table = build_embedding_table(K, d, seed=i)
        model = QuadraticReward(table.rows[np.minimum((s.random(L) * K).astype(np.int64), K - 1)])
        z = random_state(L, K, i)
        psi = 2.0 * s.normal((z.n_masked, K))
        rng = TrajectoryRNG(seed, i)
        vals = []
        for j in range(1, m_steps + 1):
            ri = build_reward_input(z, psi, tau, WeightSchedule.EXPECTATION, table, rng.inner(z.t, j))
            vals.append(model.value(ri.e_hat))
            psi = psi + eta * guidance_gradient(model, ri, table, tau)
        ri = build_reward_input(z, psi, tau, WeightSchedule.EXPECTATION, table, rng.inner(z.t, m_steps + 1))
        vals.append(model.value(ri.e_hat))
        worst = min(worst, float(np.min(np.diff(vals))))
    return CheckResult("monotone ascent (min reward increment)", worst >= tol, worst, tol)


def check_sampler_invariants(task: TaskSpec | None = None, n_prompts: int = 3, seed: int = 0) -> list[CheckResult]:
    from .harness import prepare, reward_for_prompt

    task = replace(task or TaskSpec(), n_prompts=n_prompts)
    man = RunManifest(task=task, seeds=(seed,))
    table, den = prepare(man)
    mutated = bad_count = 0
    steps = 0
    for schedule in (WeightSchedule.NONE, WeightSchedule.APS, WeightSchedule.ENTRGI):
        cfg = GuidanceConfig(schedule=schedule, seed=seed)
        for p in range(n_prompts):
            res = generate_guided(p, den, reward_for_prompt(task, p, table), table, cfg, task.L,
                                  prompt_id=p, keep_states=True)
            for tr in res.trajectories:
                for a, b in zip(tr.states, tr.states[1:]):
                    steps += 1
                    done = a.tokens != a.mask_id
                    if not np.array_equal(a.tokens[done], b.tokens[done]):
                        mutated += 1
                    if a.n_masked - b.n_masked != cfg.k:
                        bad_count += 1
                if tr.states[-1].t != 0 or tr.states[-1].n_masked != 0:
                    bad_count += 1
    out = [
        CheckResult("committed tokens never change", mutated == 0, float(mutated), 0.0, f"{steps} steps"),
        CheckResult("mask count drops by k, zero at t=0", bad_count == 0, float(bad_count), 0.0),
    ]
    with tempfile.TemporaryDirectory() as tmp:
        names = ("runs.csv", "metrics.csv", "prompts.csv")
        man_a = replace(man, out_dir=str(Path(tmp) / "a"), arms=("bon", "aps", "entrgi"))
        man_b = replace(man_a, out_dir=str(Path(tmp) / "b"))
        run_experiment(man_a)
        run_experiment(man_b)
        files = list(names) + [f"{a}/{f}" for a in ("bon", "aps", "entrgi") for f in ("steps.csv", "heatmap.csv")]
        same = all(filecmp.cmp(Path(man_a.out_dir) / f, Path(man_b.out_dir) / f, shallow=False) for f in files)
        out.append(CheckResult("same manifest -> byte-identical files", same, 0.0 if same else 1.0, 0.0,
                               f"{len(files)} files"))
    return out


def load_prompt_metrics(out_dir, metric: str = "top1") -> dict[str, dict[int, float]]:
    """Per-arm ``{prompt: metric averaged over seeds}`` from a run's ``prompts.csv``.

    Prompts with a failed trajectory under any seed are dropped for that arm.
    """
    col = {"top1": "top1", "avg": "avg_n"}[metric]
    vals: dict[str, dict[int, list[float]]] = {}
    bad: dict[str, set] = {}
    for r in read_csv(Path(out_dir) / "prompts.csv"):
        arm, p = r["arm"], int(r["prompt"])
        vals.setdefault(arm, {}).setdefault(p, []).append(float(r[col]))
        if int(r["failed"]):
            bad.setdefault(arm, set()).add(p)
    return {arm: {p: float(np.mean(v)) for p, v in sorted(d.items()) if p not in bad.get(arm, ())}
            for arm, d in vals.items()}


def check_directional_trend(result, alpha: float = 0.05) -> list[CheckResult]:
    """Every gradient arm beats BoN on Top@1 (sign test), and EntRGi >= APS in mean Top@1.

    ``result`` is an ExperimentResult or a run directory.
    """
    if isinstance(result, (str, Path)):
        metrics = load_prompt_metrics(result)
    else:
        metrics = {arm: result.per_prompt(arm) for arm in result.cells}
    for arm in ("bon", "expectation", "aps", "entrgi"):
        if arm not in metrics:
            return [CheckResult(f"directional trend: arm {arm} missing", False, float("nan"), alpha)]
    out = []
    for arm in ("expectation", "aps", "entrgi"):
        cmp = compare_arms(metrics, arm, "bon")
        ok = cmp.mean_difference > 0 and cmp.p_value <= alpha
        out.append(CheckResult(f"{arm} > bon (Top@1 sign test p)", ok, cmp.p_value, alpha,
                               f"mean diff {cmp.mean_difference:+.4f}, W/L/T {cmp.wins}/{cmp.losses}/{cmp.ties}"))
    cmp = compare_arms(metrics, "entrgi", "aps")
    out.append(CheckResult("entrgi >= aps (mean Top@1 difference)", cmp.mean_difference >= 0, cmp.mean_difference,
                           0.0, f"sign test p={cmp.p_value:.3g}, W/L/T {cmp.wins}/{cmp.losses}/{cmp.ties}"))
    return out


def check_timestep_errors(out_dir) -> CheckResult:
    """EntRGi's mean approximation error is at most APS's at every timestep of a run."""
    ent = {r["t"]: float(r["mean_approx_error"]) for r in read_csv(Path(out_dir) / "entrgi" / "steps.csv")}
    aps = {r["t"]: float(r["mean_approx_error"]) for r in read_csv(Path(out_dir) / "aps" / "steps.csv")}
    ok = bool(ent) and set(ent) == set(aps)
    worst = max((ent[t] - aps[t] for t in ent), default=np.inf)
    return CheckResult("E_EntRGi <= E_APS at every timestep", ok and worst <= 0.0, worst, 0.0,
                       f"{len(ent)} timesteps")


def run_all(quick: bool = True) -> list[CheckResult]:
    """Gradient, identity and property suites. ``quick`` shrinks sample counts."""
    n = 20 if quick else 100
    results = [check_gradient_chain(n_configs=n)]
    results += check_reward_models()
    results += check_error_identities(n_prompts=2 if quick else 4)
    results += check_entropy_limits(n_cases=10 if quick else 50)
    results.append(check_variance_identity(n_q=5 if quick else 20))
    results += check_schedule_subsumption(n_prompts=3 if quick else 6)
    results.append(check_monotone_ascent(n_instances=n))
    results += check_sampler_invariants(n_prompts=2 if quick else 3)
    return results
