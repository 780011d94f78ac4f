"""Attention with mixtures of Gaussian or linear keys, on a small numpy autodiff core."""

from .complexity import complexity_report, mgk_flops, mgk_flops_grouped, mgk_params, softmax_flops, softmax_params
from .diagnostics import dump_attention, head_similarity, matrix_rank, rank_distribution
from .em import GaussianKeyMixture, hard_assign, mstep_prior_update, nll_queries, soft_responsibilities
from .equivalence import equivalence_suite
from .estimators import MGKClassifier, MixtureKeyAttention
from .exceptions import (
    ConfigurationError,
    ContractError,
    DegenerateRowError,
    DimensionError,
    DomainError,
    EmptyInputError,
    MGKError,
    TrainingFailure,
)
from .kernels import (
    AttentionConfig,
    AttentionOutput,
    gaussian_attention,
    init_attention_params,
    linear_attention,
    mgk_attention,
    mlk_attention,
    multi_head,
    softmax_attention,
)
from .model import ModelSpec, Network
from .rng import SplitMix64
from .tasks import TaskSpec, generate_task
from .tensor import Tensor, backward
from .training import OptimizerSpec, TrainReport, evaluate, train

__version__ = "0.1.0"
