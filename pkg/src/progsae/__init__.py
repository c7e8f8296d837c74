"""Progressive-coding sparse autoencoders: TopK and Matryoshka SAEs, dictionary
permutation, power-law and scaling-law analysis."""

__version__ = "0.1.0"

from .core import (
    CorruptCodeError,
    FormatError,
    RegressionFit,
    SparseCodeBatch,
    UndefinedCorrelationError,
    ols_loglog,
    pearson,
    sparse_decode_matmul,
    sym_eigvals,
    topk_select,
)
from .matryoshka import GranularitySchedule, matryoshka_forward, matryoshka_loss, per_granularity_k, sample_granularity
from .sae import SaeConfig, SaeParams, apply_permutation, decode, encode, init_params, sae_loss
from .training import TrainConfig, compute_grads, train
