"""Character-level language model: one recurrent cell plus a softmax readout.

The model is trained by teacher forcing: within a (B, T) id batch, token t
is consumed and token t+1 predicted, giving T-1 predictions per row. Loss
is reported in nats; bpc() converts to bits per character.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .cells import (
    CellDims,
    CellKind,
    CellVariant,
    InitScheme,
    detach_state,
    glorot_uniform,
    init_params,
    lift_state,
    param_shapes,
    step,
    zero_state,
)

LN2 = float(np.log(2.0))


@dataclass(frozen=True)
class LmConfig:
    cell_kind: CellKind
    dims: CellDims
    seq_len: int = 150
    tie_intermediate_to_input: bool = False
    variant: CellVariant = field(default_factory=CellVariant)

    def __post_init__(self):
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")


def make_config(cell_kind, vocab_size, hidden_dim, intermediate_dim=None, seq_len=150,
                variant=CellVariant()):
    """Build an LmConfig; a missing intermediate size is tied to the input width."""
    tie = intermediate_dim is None
    m = vocab_size if tie else intermediate_dim
    dims = CellDims(input_dim=vocab_size, hidden_dim=hidden_dim, intermediate_dim=m)
    return LmConfig(cell_kind=CellKind(cell_kind), dims=dims, seq_len=seq_len,
                    tie_intermediate_to_input=tie, variant=variant)


@dataclass
class LmParams:
    """Cell parameters plus the hidden -> vocabulary output projection."""

    cell: dict
    W_out: np.ndarray
    b_out: np.ndarray

    def copy(self):
        return LmParams(
            cell={k: v.copy() for k, v in self.cell.items()},
            W_out=self.W_out.copy(),
            b_out=self.b_out.copy(),
        )


def init_lm_params(config, rng, scheme=InitScheme()):
    cell = init_params(config.cell_kind, config.dims, rng, scheme, config.variant)
    V, n = config.dims.input_dim, config.dims.hidden_dim
    return LmParams(cell=cell, W_out=glorot_uniform(rng, V, n), b_out=np.zeros((V, 1)))


def zero_lm_params(config):
    """All-zero parameters; the model then predicts the uniform distribution."""
    cell = {
        name: np.zeros(shape)
        for name, shape in param_shapes(config.cell_kind, config.dims, config.variant).items()
    }
    V, n = config.dims.input_dim, config.dims.hidden_dim
    return LmParams(cell=cell, W_out=np.zeros((V, n)), b_out=np.zeros((V, 1)))


def named_arrays(params):
    """Flat name -> array view of all trainable parameters, in stable order."""
    flat = {f"cell.{name}": arr for name, arr in params.cell.items()}
    flat["W_out"] = params.W_out
    flat["b_out"] = params.b_out
    return flat


@dataclass
class LmLeaves:
    """Graph leaves for one training window: cell params plus the readout."""

    cell: dict
    W_out: Node
    b_out: Node

    def grads(self):
        flat = {f"cell.{name}": node.grad for name, node in self.cell.items()}
        flat["W_out"] = self.W_out.grad
        flat["b_out"] = self.b_out.grad
        return flat


def lift(params):
    """Wrap parameter arrays in fresh leaves (zero grads) for a new tape."""
    return LmLeaves(
        cell={name: Node(arr, op="param") for name, arr in params.cell.items()},
        W_out=Node(params.W_out, op="param"),
        b_out=Node(params.b_out, op="param"),
    )


def leaves_from_flat(flat):
    """Rebuild structured leaves from a flat {name: Node} map (grad checks)."""
    cell = {name[len("cell."):]: node for name, node in flat.items() if name.startswith("cell.")}
    return LmLeaves(cell=cell, W_out=flat["W_out"], b_out=flat["b_out"])


def one_hot(ids, n_classes):
    """(V, B) one-hot column block for a vector of ids."""
    ids = np.asarray(ids, dtype=np.int64).ravel()
    if ids.size and (ids.min() < 0 or ids.max() >= n_classes):
        bad = int(ids[(ids < 0) | (ids >= n_classes)][0])
        raise IndexError(f"token id {bad} outside [0, {n_classes})")
    x = np.zeros((n_classes, ids.shape[0]))
    x[ids, np.arange(ids.shape[0])] = 1.0
    return x


def sequence_loss(leaves, config, batch, initial_state=None):
    """Teacher-forced mean loss (nats) over a (B, T) id batch.

    For t in 1..T-1 the model consumes token t and predicts token t+1, so
    the loss averages B*(T-1) predictions. Returns the loss node and the
    detached state after the last consumed token, ready to carry into the
    next window.
    """
    batch = np.asarray(batch, dtype=np.int64)
    if batch.ndim != 2 or batch.shape[1] < 2:
        raise ValueError(f"batch must be (B, T) with T >= 2, got {batch.shape}")
    n_rows, n_steps = batch.shape
    V = config.dims.input_dim
    if initial_state is None:
        initial_state = zero_state(config.cell_kind, config.dims.hidden_dim, n_rows)
    state = lift_state(initial_state)
    total = None
    for t in range(n_steps - 1):
        x = Node(one_hot(batch[:, t], V), op="input")
        state = step(config.cell_kind, leaves.cell, state, x, config.variant)
        logits = ad.add(ad.matmul(leaves.W_out, state.h), leaves.b_out)
        loss_t = ad.softmax_cross_entropy(logits, batch[:, t + 1])
        total = loss_t if total is None else ad.add(total, loss_t)
    return ad.scale(total, 1.0 / (n_steps - 1)), detach_state(state)


def bpc(loss_nats):
    """Bits per character: nats divided by ln 2."""
    return float(loss_nats) / LN2


def sample(params, config, vocab, prime, length, temperature=1.0, rng=None):
    """Continue `prime` with `length` characters drawn from the model.

    The prime is filtered to in-vocabulary characters first; temperature 0
    means greedy argmax. Returns only the generated continuation.
    """
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if rng is None:
        rng = np.random.default_rng()
    prime_ids = vocab.encode_known(prime)
    if len(prime_ids) == 0:
        raise ValueError("prime contains no in-vocabulary characters")
    V = config.dims.input_dim
    leaves = lift(params)
    state = zero_state(config.cell_kind, config.dims.hidden_dim, 1)

    def consume(token_id):
        # detach each step: sampling needs no gradients, keep the graph flat
        lifted = lift_state(state)
        return detach_state(step(config.cell_kind, leaves.cell, lifted, Node(one_hot([token_id], V)), config.variant))

    for token in prime_ids:
        state = consume(int(token))
    out_ids = []
    for _ in range(length):
        logits = (params.W_out @ state.h + params.b_out)[:, 0]
        if temperature == 0:
            next_id = int(np.argmax(logits))
        else:
            probs = ad.softmax_columns((logits / temperature).reshape(-1, 1))[:, 0]
            next_id = int(rng.choice(probs.shape[0], p=probs))
        out_ids.append(next_id)
        state = consume(next_id)
    return vocab.decode(out_ids)
