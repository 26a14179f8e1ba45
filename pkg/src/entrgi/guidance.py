"""Entropy-aware reward guidance of the masked diffusion sampler.

At each reverse step the denoiser logits ``psi`` of the masked positions
are refined by ``M`` rounds of gradient ascent on a reward model before the
usual lowest-entropy unmask-and-commit. In each round, position ``l`` feeds
the reward the blend

    ehat_l = ebar_l + sg(w_l * (etilde_l - ebar_l))

of its soft embedding ``ebar_l = q_l @ E`` and a freshly sampled hard
embedding ``etilde_l``, where ``sg`` is stop-gradient. Gradients reach
``psi_l`` only through ``ebar_l``:

    grad_psi_l R = dR/dehat_l @ E.T @ J_sm(q_l, tau)

The blend weight ``w_l`` selects the strategy: 0 is the expectation
(continuous relaxation) baseline, 1 is the straight-through APS baseline,
``H(q_l) / ln K`` is EntRGi. Skipping the loop altogether gives plain
sampling, which with ``N`` trajectories and a final argmax is Best-of-N.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .core import entropy, inverse_cdf_sample, jacobian_vector_product, softmax_temp
from .diffusion import Denoiser, SequenceState, commit_step, select_unmask_set
from .errors import ContractViolationError, InvalidParameterError, NumericFailureError
from .reward import EmbeddingTable, RewardModel, score_discrete, soft_embedding
from .rng import TrajectoryRNG
from .telemetry import StepTelemetry, align_error

__all__ = [
    "WeightSchedule",
    "GuidanceConfig",
    "RewardInput",
    "compute_weights",
    "build_reward_input",
    "guidance_gradient",
    "guided_denoise_step",
    "TrajectoryResult",
    "GuidedResult",
    "generate_guided",
    "top_at_1",
    "avg_at_n",
    "with_schedule",
]


class WeightSchedule(str, enum.Enum):
    EXPECTATION = "expectation"
    APS = "aps"
    ENTRGI = "entrgi"
    INV_ENTRGI = "inv_entrgi"
    L2NORM = "l2norm"
    NONE = "none"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class GuidanceConfig:
    """Settings for one guided-sampling arm.

    ``forced_weight`` overrides the schedule with a constant blend weight;
    it exists to check that the schedules are special cases of one pipeline.
    ``freeze_x`` reuses the first hard-token draw for every inner iteration
    of a timestep instead of resampling.
    """

    schedule: WeightSchedule = WeightSchedule.ENTRGI
    eta: float = 0.5
    m_steps: int = 3
    n_trajectories: int = 4
    tau: float = 0.7
    seed: int = 0
    clip_norm: float | None = None
    k: int = 1
    eos_deprioritize: bool = True
    freeze_x: bool = False
    forced_weight: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "schedule", WeightSchedule(self.schedule))
        if not self.eta > 0:
            raise InvalidParameterError("eta must be positive")
        if self.m_steps < 0:
            raise InvalidParameterError("m_steps must be >= 0")
        if self.n_trajectories < 1:
            raise InvalidParameterError("n_trajectories must be >= 1")
        if not (np.isfinite(self.tau) and self.tau > 0):
            raise InvalidParameterError("tau must be positive")
        if self.k < 1:
            raise InvalidParameterError("k must be >= 1")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise InvalidParameterError("clip_norm must be positive when set")
        if self.forced_weight is not None and not 0.0 <= self.forced_weight <= 1.0:
            raise InvalidParameterError("forced_weight must lie in [0, 1]")

    @property
    def guided(self) -> bool:
        return self.schedule is not WeightSchedule.NONE and self.m_steps > 0

    # flat key=value serialisation -----------------------------------------

    def to_kv(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, float):
                text = repr(v)
            else:
                text = str(v)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_kv(cls, text: str) -> "GuidanceConfig":
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidParameterError(f"expected key=value, got {line!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            raw[key] = val
        return cls.from_mapping(raw)

    @classmethod
    def from_mapping(cls, raw: dict) -> "GuidanceConfig":
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, val in raw.items():
            if key not in known:
                raise InvalidParameterError(f"unknown guidance key {key!r}")
            kwargs[key] = _parse_value(key, val)
        return cls(**kwargs)

    def save(self, path) -> None:
        Path(path).write_text(self.to_kv())

    @classmethod
    def load(cls, path) -> "GuidanceConfig":
        return cls.from_kv(Path(path).read_text())


_INT_KEYS = {"m_steps", "n_trajectories", "seed", "k"}
_FLOAT_KEYS = {"eta", "tau"}
_OPT_FLOAT_KEYS = {"clip_norm", "forced_weight"}
_BOOL_KEYS = {"eos_deprioritize", "freeze_x"}


def _parse_bool(val: str) -> bool:
    low = str(val).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise InvalidParameterError(f"not a boolean: {val!r}")


def _parse_value(key, val):
    if not isinstance(val, str):
        return val
    try:
        if key in _INT_KEYS:
            return int(val)
        if key in _FLOAT_KEYS:
            return float(val)
        if key in _OPT_FLOAT_KEYS:
            return None if val.lower() in ("", "none") else float(val)
        if key in _BOOL_KEYS:
            return _parse_bool(val)
        if key == "schedule":
            return WeightSchedule(val.lower())
    except ValueError as exc:
        raise InvalidParameterError(f"bad value for {key}: {val!r}") from exc
    return val


def compute_weights(q_block, schedule: WeightSchedule, e_hard=None, e_soft=None,
                    forced_weight: float | None = None) -> np.ndarray:
    """Blend weight per masked position for ``schedule``.

    ``L2NORM`` needs the hard and soft embeddings; it scales the hard-soft
    gap by its maximum over positions and is all zeros when every gap is 0.
    """
    q_block = np.asarray(q_block, dtype=np.float64)
    m, K = q_block.shape
    if m == 0:
        raise ContractViolationError("q_block is empty")
    if forced_weight is not None:
        return np.full(m, float(forced_weight))
    schedule = WeightSchedule(schedule)
    if schedule in (WeightSchedule.EXPECTATION, WeightSchedule.NONE):
        return np.zeros(m)
    if schedule is WeightSchedule.APS:
        return np.ones(m)
    if schedule in (WeightSchedule.ENTRGI, WeightSchedule.INV_ENTRGI):
        w = np.clip(np.asarray(entropy(q_block)) / np.log(K), 0.0, 1.0)
        return w if schedule is WeightSchedule.ENTRGI else 1.0 - w
    if schedule is WeightSchedule.L2NORM:
        if e_hard is None or e_soft is None:
            raise ContractViolationError("L2NORM weights need hard and soft embeddings")
        gap = np.linalg.norm(np.asarray(e_hard) - np.asarray(e_soft), axis=-1)
        top = gap.max()
        return gap / top if top > 0 else np.zeros(m)
    raise InvalidParameterError(f"unknown schedule {schedule!r}")


@dataclass(frozen=True, eq=False)
class RewardInput:
    """Reward-model input ``ehat`` together with the per-position pieces it was built from.

    ``committed`` flags rows that hold the hard embedding of an already
    unmasked token; all other rows are blends at ``positions``.
    """

    e_hat: np.ndarray
    committed: np.ndarray
    positions: np.ndarray
    q: np.ndarray
    e_soft: np.ndarray
    e_hard: np.ndarray
    x: np.ndarray
    w: np.ndarray

    @property
    def provenance(self) -> list[str]:
        return ["committed-hard" if c else "guided-blend" for c in self.committed]

    def reconstruction_error(self) -> float:
        """Max deviation of ``ehat - ebar`` from ``w (etilde - ebar)`` over guided rows."""
        lhs = self.e_hat[self.positions] - self.e_soft
        rhs = self.w[:, None] * (self.e_hard - self.e_soft)
        return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def build_reward_input(z: SequenceState, psi_block, tau: float, schedule: WeightSchedule,
                       table: EmbeddingTable, rng=None, forced_weight: float | None = None,
                       x=None) -> RewardInput:
    """Assemble ``ehat`` for all ``L`` positions from the current logits.

    A hard index per masked position is drawn from ``rng`` (one uniform per
    position, in position order) unless ``x`` is given. The blend is
    evaluated as ``(1 - w) ebar + w etilde`` so that ``w = 0`` and ``w = 1``
    reproduce ``ebar`` and ``etilde`` bit for bit.
    """
    psi_block = np.asarray(psi_block, dtype=np.float64)
    pos = z.masked_positions
    if psi_block.ndim != 2 or psi_block.shape[0] != pos.size or psi_block.shape[1] != table.K:
        raise ContractViolationError(
            f"psi_block shape {psi_block.shape} does not match {pos.size} masked positions x K={table.K}")
    q = softmax_temp(psi_block, tau)
    if x is None:
        if rng is None:
            raise ContractViolationError("either rng or x is required")
        x = inverse_cdf_sample(q, np.atleast_1d(rng.random(pos.size)))
    x = np.asarray(x, dtype=np.int64)
    e_hard = table.rows[x]
    e_soft = soft_embedding(q, table)
    w = compute_weights(q, schedule, e_hard, e_soft, forced_weight)
    e_hat = np.empty((z.L, table.d))
    committed = z.tokens != z.mask_id
    e_hat[committed] = table.rows[z.tokens[committed]]
    e_hat[pos] = (1.0 - w)[:, None] * e_soft + w[:, None] * e_hard
    return RewardInput(e_hat, committed, pos, q, e_soft, e_hard, x, w)


def guidance_gradient(reward_model: RewardModel, reward_input: RewardInput, table: EmbeddingTable,
                      tau: float, prompt_context=None) -> np.ndarray:
    """Logit gradient per masked position, shape ``(m, K)``.

    ``dR/dehat`` comes from one joint evaluation over the whole sequence, so
    positions interact through the reward model. The softmax Jacobian enters
    as a Jacobian-vector product, equal to the explicit ``v @ J_sm``.
    """
    g_e = np.asarray(reward_model.input_gradient(reward_input.e_hat, prompt_context), dtype=np.float64)
    if not np.all(np.isfinite(g_e)):
        raise NumericFailureError("reward gradient is not finite")
    v = g_e[reward_input.positions] @ table.rows.T
    return jacobian_vector_product(reward_input.q, v, tau)


def _record(z, ri, j, reward_model, table, prompt_context) -> StepTelemetry:
    gap = np.linalg.norm(ri.e_hard - ri.e_soft, axis=1)
    e_in = ri.e_hat[ri.positions]
    return StepTelemetry(
        t=z.t, j=j, positions=ri.positions,
        entropy=np.asarray(entropy(ri.q)).reshape(-1),
        weight=ri.w, gap=gap, approx_error=ri.w * gap,
        align_error=np.asarray(align_error(e_in, table)).reshape(-1),
        reward=float(reward_model.value(ri.e_hat, prompt_context)),
        input_shift=np.linalg.norm(e_in - ri.e_soft, axis=1),
    )


def guided_denoise_step(z: SequenceState, denoiser: Denoiser, reward_model: RewardModel, table: EmbeddingTable,
                        config: GuidanceConfig, rng: TrajectoryRNG, prompt_context=None,
                        eos_id: int | None = None, record: bool = True,
                        ) -> tuple[SequenceState, list[StepTelemetry]]:
    """One guided reverse step from ``z_t`` to ``z_{t-1}``.

    Inner iteration ``j`` draws its hard tokens from substream ``(t, j)`` and
    the commit draws from ``(t, 0)``, so an unguided arm with the same key
    consumes exactly the same commit uniforms.
    """
    if z.t < 1:
        raise ContractViolationError("sequence is already at t = 0")
    psi = np.array(denoiser.predict(z), dtype=np.float64)
    records: list[StepTelemetry] = []
    if config.guided:
        x_frozen = None
        for j in range(1, config.m_steps + 1):
            stream = rng.inner(z.t, j)
            ri = build_reward_input(z, psi, config.tau, config.schedule, table, stream,
                                    config.forced_weight, x=x_frozen)
            if config.freeze_x and x_frozen is None:
                x_frozen = ri.x
            g = guidance_gradient(reward_model, ri, table, config.tau, prompt_context)
            if record:
                records.append(_record(z, ri, j, reward_model, table, prompt_context))
            if config.clip_norm is not None:
                norm = np.linalg.norm(g)
                if norm > config.clip_norm:
                    g = g * (config.clip_norm / norm)
            psi = psi + config.eta * g
            if not np.all(np.isfinite(psi)):
                raise NumericFailureError(f"logits became non-finite at t={z.t}, j={j}")
    q = softmax_temp(psi, config.tau)
    sel = select_unmask_set(q, config.k, config.eos_deprioritize, eos_id, positions=z.masked_positions)
    return commit_step(z, q, sel, rng.commit(z.t)), records


@dataclass
class TrajectoryResult:
    index: int
    tokens: np.ndarray | None
    reward: float
    telemetry: list[StepTelemetry] = field(default_factory=list)
    failed: bool = False
    note: str = ""
    states: list[SequenceState] | None = None


@dataclass
class GuidedResult:
    trajectories: list[TrajectoryResult]
    config: GuidanceConfig

    @property
    def rewards(self) -> np.ndarray:
        return np.array([tr.reward for tr in self.trajectories])

    @property
    def sequences(self) -> list[np.ndarray | None]:
        return [tr.tokens for tr in self.trajectories]

    @property
    def n_failed(self) -> int:
        return sum(tr.failed for tr in self.trajectories)

    @property
    def telemetry(self) -> list[list[StepTelemetry]]:
        return [tr.telemetry for tr in self.trajectories]

    def top_at_1(self) -> float:
        return top_at_1(self.rewards)

    def avg_at_n(self) -> float:
        return avg_at_n(self.rewards)


def top_at_1(rewards) -> float:
    """Best reward among the trajectories of one prompt."""
    return float(np.max(np.asarray(rewards, dtype=np.float64)))


def avg_at_n(rewards) -> float:
    """Mean reward over the trajectories of one prompt."""
    return float(np.mean(np.asarray(rewards, dtype=np.float64)))


def generate_guided(prompt_context, denoiser: Denoiser, reward_model: RewardModel, table: EmbeddingTable,
                    config: GuidanceConfig, L: int, prompt_id: int = 0, eos_id: int | None = None,
                    record: bool = True, keep_states: bool = False) -> GuidedResult:
    """Run ``config.n_trajectories`` independent guided trajectories for one prompt.

    Trajectory ``i`` uses the key ``(config.seed, prompt_id, i)``. A numeric
    failure marks that trajectory failed (reward NaN) and the others go on.
    """
    if L % config.k:
        raise InvalidParameterError(f"L={L} is not a multiple of k={config.k}")
    if denoiser.K != table.K:
        raise InvalidParameterError("denoiser and embedding table disagree on K")
    T = L // config.k
    out = []
    for i in range(config.n_trajectories):
        rng = TrajectoryRNG(config.seed, prompt_id, i)
        z = SequenceState.all_masked(L, T, denoiser.K)
        telemetry: list[StepTelemetry] = []
        states = [z] if keep_states else None
        try:
            while z.t > 0:
                z, recs = guided_denoise_step(z, denoiser, reward_model, table, config, rng,
                                              prompt_context, eos_id, record)
                telemetry.extend(recs)
                if keep_states:
                    states.append(z)
            reward = score_discrete(z.tokens, table, reward_model, prompt_context)
            if not np.isfinite(reward):
                raise NumericFailureError("final reward is not finite")
            out.append(TrajectoryResult(i, np.array(z.tokens), reward, telemetry, states=states))
        except NumericFailureError as exc:
            out.append(TrajectoryResult(i, None, float("nan"), telemetry, failed=True,
                                        note=f"t={z.t}: {exc}", states=states))
    return GuidedResult(out, config)


def with_schedule(config: GuidanceConfig, schedule, **changes) -> GuidanceConfig:
    """Copy of ``config`` with a different schedule (and any other fields)."""
    return replace(config, schedule=WeightSchedule(schedule), **changes)
