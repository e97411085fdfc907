"""Multiplicative recurrent cells for character-level language modeling."""

from .autodiff import GradCheckReport, Node, ShapeError, grad_check, make_rng
from .cells import (
    CellDims,
    CellKind,
    CellState,
    CellVariant,
    InitScheme,
    init_params,
    intermediate_state,
    param_count,
    param_shapes,
    step,
    zero_state,
)
from .data import CorpusError, CorpusSplits, Vocabulary, batchify, load_ptb, load_raw, load_text8
from .model import (
    LmConfig,
    LmParams,
    bpc,
    init_lm_params,
    lift,
    make_config,
    named_arrays,
    sample,
    sequence_loss,
    zero_lm_params,
)
from .training import (
    AdamState,
    BudgetError,
    Checkpoint,
    CheckpointError,
    ConfigError,
    MetricsLog,
    NumericError,
    OptimizerError,
    TrainConfig,
    adam_step,
    clip_global_norm,
    evaluate,
    evaluate_ids,
    load_checkpoint,
    save_checkpoint,
    solve_hidden_size,
    train,
)

__version__ = "0.1.0"
