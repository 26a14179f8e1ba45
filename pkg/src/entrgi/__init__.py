"""Entropy-aware reward guidance for masked discrete diffusion samplers."""

from .core import (entropy, finite_diff_grad, jacobian_vector_product, normalized_entropy, softmax_jacobian,
                   softmax_temp)
from .diffusion import (ConstantDenoiser, ContextTableDenoiser, SequenceState, Vocabulary, commit_step,
                        fit_context_table, generate_unguided, select_unmask_set)
from .errors import (ContractViolationError, EntrgiError, InvalidInputError, InvalidParameterError,
                     NumericFailureError, OracleFailureError)
from .guidance import (GuidanceConfig, WeightSchedule, build_reward_input, compute_weights, generate_guided,
                       guidance_gradient, guided_denoise_step)
from .reward import (EmbeddingTable, MLPReward, PrototypeReward, QuadraticReward, build_embedding_table,
                     check_reward_gradient, score_discrete, soft_embedding)
from .rng import TrajectoryRNG
from .telemetry import aggregate_timeseries, align_error, approx_error, heatmap_bin, variance_identity_check

__version__ = "0.1.0"
