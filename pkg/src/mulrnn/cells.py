"""The recurrent cell family behind one uniform step interface.

Nine architectures: a plain tanh RNN; the input-indexed-transition RNN
(trnn), which keeps one full hidden transition matrix per input symbol and
serves as the exact reference the factorized cells approximate; the
multiplicative RNN (mrnn); LSTM and GRU baselines; and the multiplicative
gated variants. The m* cells (mlstm, mgru) share a single intermediate
state across all gates while the tm* cells (tmlstm, tmgru) give every gate
its own factorization.

Parameters are name -> matrix maps. Their layouts are the single source of
truth for initialization, and param_count gives independent closed-form
totals that the tests reconcile against enumeration.

Shape conventions, with V = input width, n = hidden size, m = intermediate
size, B = batch: inputs are (V, B) one-hot (or dense) column blocks, states
are (n, B), and the intermediate state is (m, B).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Node


class CellKind(str, Enum):
    RNN = "rnn"
    TRNN = "trnn"
    MRNN = "mrnn"
    LSTM = "lstm"
    MLSTM = "mlstm"
    TMLSTM = "tmlstm"
    GRU = "gru"
    MGRU = "mgru"
    TMGRU = "tmgru"


LSTM_FAMILY = frozenset({CellKind.LSTM, CellKind.MLSTM, CellKind.TMLSTM})
GRU_FAMILY = frozenset({CellKind.GRU, CellKind.MGRU, CellKind.TMGRU})
MULTIPLICATIVE_KINDS = frozenset(
    {CellKind.MRNN, CellKind.MLSTM, CellKind.TMLSTM, CellKind.MGRU, CellKind.TMGRU}
)
USES_INTERMEDIATE = MULTIPLICATIVE_KINDS


@dataclass(frozen=True)
class CellDims:
    """Sizes of a cell: input (vocabulary) width, hidden, intermediate.

    intermediate_dim is ignored by rnn/trnn/lstm/gru and may stay 0 there.
    """

    input_dim: int
    hidden_dim: int
    intermediate_dim: int = 0

    def __post_init__(self):
        if self.input_dim < 1 or self.hidden_dim < 1 or self.intermediate_dim < 0:
            raise ValueError(f"invalid dims {self}")


@dataclass(frozen=True)
class CellVariant:
    """Printed-form toggles for the LSTM family.

    mlstm_form "text" drives the gates from the input plus the shared
    intermediate state; "printed" drives them from the previous hidden
    state instead (full n x n gate matrices). lstm_output chooses the
    squash applied to the memory cell before the output gate.
    """

    mlstm_form: str = "text"
    lstm_output: str = "sigmoid"

    def __post_init__(self):
        if self.mlstm_form not in ("text", "printed"):
            raise ValueError(f"mlstm_form must be 'text' or 'printed', got {self.mlstm_form!r}")
        if self.lstm_output not in ("sigmoid", "tanh"):
            raise ValueError(f"lstm_output must be 'sigmoid' or 'tanh', got {self.lstm_output!r}")


@dataclass(frozen=True)
class InitScheme:
    """Weight initialization knobs; forget_bias stabilizes LSTM-family training."""

    forget_bias: float = 1.0


@dataclass
class CellState:
    """Recurrent state for one batch: h always, c only for the LSTM family.

    Holds Nodes while a step graph is alive and plain arrays when carried
    between truncated-backprop windows.
    """

    h: object
    c: object = None


def zero_state(kind, hidden_dim, batch):
    """All-zero start state (arrays), with a memory cell for the LSTM family."""
    h = np.zeros((hidden_dim, batch))
    c = np.zeros((hidden_dim, batch)) if kind in LSTM_FAMILY else None
    return CellState(h=h, c=c)


def lift_state(state):
    """Wrap a carried array state in fresh graph leaves."""
    if isinstance(state.h, Node):
        return state
    c = Node(state.c, op="state") if state.c is not None else None
    return CellState(h=Node(state.h, op="state"), c=c)


def detach_state(state):
    """Drop the graph, keeping plain value arrays for the next window."""
    if not isinstance(state.h, Node):
        return state
    return CellState(h=state.h.value, c=state.c.value if state.c is not None else None)


def _require_intermediate(kind, dims):
    if kind in USES_INTERMEDIATE and dims.intermediate_dim < 1:
        raise ValueError(f"{kind.value} needs intermediate_dim >= 1, got {dims.intermediate_dim}")


def param_shapes(kind, dims, variant=CellVariant()):
    """Declared parameter layout: name -> (rows, cols), insertion-ordered."""
    _require_intermediate(kind, dims)
    V, n, m = dims.input_dim, dims.hidden_dim, dims.intermediate_dim
    kind = CellKind(kind)
    if kind is CellKind.RNN:
        return {"U": (n, V), "W": (n, n), "b": (n, 1)}
    if kind is CellKind.TRNN:
        shapes = {"U": (n, V)}
        shapes.update({f"W_{i}": (n, n) for i in range(V)})
        shapes["b"] = (n, 1)
        return shapes
    if kind is CellKind.MRNN:
        return {"U": (n, V), "V": (n, m), "W_x": (m, V), "W_h": (m, n), "b": (n, 1)}
    if kind is CellKind.LSTM:
        shapes = {}
        for g in "ifoh":
            shapes[f"U_{g}"] = (n, V)
            shapes[f"W_{g}"] = (n, n)
            shapes[f"b_{g}"] = (n, 1)
        return shapes
    if kind is CellKind.MLSTM:
        shapes = {}
        if variant.mlstm_form == "printed":
            for g in "ifo":
                shapes[f"W_{g}"] = (n, n)
                shapes[f"V_{g}"] = (n, m)
                shapes[f"b_{g}"] = (n, 1)
            shapes["U_h"] = (n, V)
            shapes["V_h"] = (n, m)
            shapes["b_h"] = (n, 1)
        else:
            for g in "ifoh":
                shapes[f"U_{g}"] = (n, V)
                shapes[f"V_{g}"] = (n, m)
                shapes[f"b_{g}"] = (n, 1)
        shapes["W_x"] = (m, V)
        shapes["W_h"] = (m, n)
        return shapes
    if kind is CellKind.TMLSTM:
        shapes = {}
        for g in "ifoh":
            shapes[f"U_{g}"] = (n, V)
            shapes[f"V_{g}"] = (n, m)
            shapes[f"b_{g}"] = (n, 1)
        for g in "ifoh":
            shapes[f"W_{g}x"] = (m, V)
            shapes[f"W_{g}h"] = (m, n)
        return shapes
    if kind is CellKind.GRU:
        shapes = {}
        for g in "zrh":
            shapes[f"U_{g}"] = (n, V)
            shapes[f"W_{g}"] = (n, n)
            shapes[f"b_{g}"] = (n, 1)
        return shapes
    if kind is CellKind.MGRU:
        # r filters the intermediate state, so the r gate lives in the
        # intermediate dimension; z gates the hidden state as usual
        shapes = {
            "U_z": (n, V), "V_z": (n, m), "b_z": (n, 1),
            "U_r": (m, V), "V_r": (m, m), "b_r": (m, 1),
            "U_h": (n, V), "V_h": (n, m), "b_h": (n, 1),
            "W_x": (m, V), "W_h": (m, n),
        }
        return shapes
    if kind is CellKind.TMGRU:
        shapes = {}
        for g in "zrh":
            shapes[f"U_{g}"] = (n, V)
            shapes[f"V_{g}"] = (n, m)
            shapes[f"b_{g}"] = (n, 1)
        for g in "zr":
            shapes[f"W_{g}x"] = (m, V)
            shapes[f"W_{g}h"] = (m, n)
        shapes["W_x"] = (m, V)
        shapes["W_h"] = (m, n)
        return shapes
    raise ValueError(f"unknown cell kind {kind!r}")


def param_count(kind, dims, variant=CellVariant()):
    """Closed-form parameter total (biases included).

    Written out per architecture, independently of param_shapes, so the
    two can be reconciled by enumeration in tests.
    """
    _require_intermediate(kind, dims)
    V, n, m = dims.input_dim, dims.hidden_dim, dims.intermediate_dim
    kind = CellKind(kind)
    if kind is CellKind.RNN:
        return n * V + n * n + n
    if kind is CellKind.TRNN:
        return n * V + V * n * n + n
    if kind is CellKind.MRNN:
        return n * V + n * m + m * V + m * n + n
    if kind is CellKind.LSTM:
        return 4 * (n * V + n * n + n)
    if kind is CellKind.MLSTM:
        if variant.mlstm_form == "printed":
            return 3 * (n * n + n * m + n) + (n * V + n * m + n) + m * V + m * n
        return 4 * (n * V + n * m + n) + m * V + m * n
    if kind is CellKind.TMLSTM:
        return 4 * (n * V + n * m + n) + 4 * (m * V + m * n)
    if kind is CellKind.GRU:
        return 3 * (n * V + n * n + n)
    if kind is CellKind.MGRU:
        return 2 * (n * V + n * m + n) + (m * V + m * m + m) + m * V + m * n
    if kind is CellKind.TMGRU:
        return 3 * (n * V + n * m + n) + 3 * (m * V + m * n)
    raise ValueError(f"unknown cell kind {kind!r}")


def glorot_uniform(rng, rows, cols):
    limit = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-limit, limit, size=(rows, cols))


def init_params(kind, dims, rng, scheme=InitScheme(), variant=CellVariant()):
    """Fresh parameter map: Glorot-uniform weights, zero biases.

    The forget-gate bias starts at scheme.forget_bias so an untrained
    LSTM-family cell begins by retaining its memory.
    """
    params = {}
    for name, (rows, cols) in param_shapes(kind, dims, variant).items():
        if name.startswith("b"):
            fill = scheme.forget_bias if name == "b_f" else 0.0
            params[name] = np.full((rows, cols), float(fill))
        else:
            params[name] = glorot_uniform(rng, rows, cols)
    return params


def _affine(a, x, b, y, bias):
    # a @ x + b @ y + bias (bias broadcast over columns)
    return ad.add(ad.add(ad.matmul(a, x), ad.matmul(b, y)), bias)


def intermediate_state(w_x, w_h, x, h_prev):
    """The factorized second-order term (W_x x) * (W_h h_prev).

    This is the input acting as a learned filter on the factors of the
    previous hidden state; it stands in for an input-selected transition
    matrix at a fraction of the parameters.
    """
    return ad.hadamard(ad.matmul(w_x, x), ad.matmul(w_h, h_prev))


def rnn_step(params, state, x):
    """h = tanh(U x + W h_prev + b)."""
    return CellState(h=ad.tanh(_affine(params["U"], x, params["W"], state.h, params["b"])))


def trnn_step(params, state, x):
    """h = tanh(U x + (sum_i x_i W_i) h_prev + b).

    One full transition matrix per input symbol: a one-hot input selects
    its slice exactly, a dense input blends the slices per batch column.
    Kept as a small-scale reference; the parameter count is quadratic in
    the hidden size times the input width.
    """
    n_inputs, _ = x.value.shape
    n = params["U"].value.shape[0]
    total = ad.matmul(params["U"], x)
    ones = Node(np.ones((n, 1)), op="const")
    for i in range(n_inputs):
        selector = np.zeros((1, n_inputs))
        selector[0, i] = 1.0
        weight_row = ad.matmul(Node(selector, op="const"), x)  # (1, B): x_i per column
        tiled = ad.matmul(ones, weight_row)
        total = ad.add(total, ad.hadamard(ad.matmul(params[f"W_{i}"], state.h), tiled))
    return CellState(h=ad.tanh(ad.add(total, params["b"])))


def mrnn_step(params, state, x):
    """h = tanh(U x + V m + b) with shared m = (W_x x) * (W_h h_prev)."""
    m = intermediate_state(params["W_x"], params["W_h"], x, state.h)
    return CellState(h=ad.tanh(_affine(params["U"], x, params["V"], m, params["b"])))


def _lstm_finish(i, f, o, candidate, c_prev, variant):
    # c = f * c_prev + i * tanh(candidate); h = o * squash(c)
    c = ad.add(ad.hadamard(f, c_prev), ad.hadamard(i, ad.tanh(candidate)))
    squash = ad.tanh if variant.lstm_output == "tanh" else ad.sigmoid
    return CellState(h=ad.hadamard(o, squash(c)), c=c)


def lstm_step(params, state, x, variant=CellVariant()):
    """Gated memory cell: i/f/o gates and a candidate, all affine in (x, h_prev)."""
    i = ad.sigmoid(_affine(params["U_i"], x, params["W_i"], state.h, params["b_i"]))
    f = ad.sigmoid(_affine(params["U_f"], x, params["W_f"], state.h, params["b_f"]))
    o = ad.sigmoid(_affine(params["U_o"], x, params["W_o"], state.h, params["b_o"]))
    candidate = _affine(params["U_h"], x, params["W_h"], state.h, params["b_h"])
    return _lstm_finish(i, f, o, candidate, state.c, variant)


def mlstm_step(params, state, x, variant=CellVariant()):
    """LSTM with one shared intermediate state replacing h_prev everywhere.

    A single m = (W_x x) * (W_h h_prev) feeds all three gates and the
    candidate, each through its own V weighting. The printed variant
    drives the gates from h_prev directly instead of the input.
    """
    m = intermediate_state(params["W_x"], params["W_h"], x, state.h)
    if variant.mlstm_form == "printed":
        i = ad.sigmoid(_affine(params["W_i"], state.h, params["V_i"], m, params["b_i"]))
        f = ad.sigmoid(_affine(params["W_f"], state.h, params["V_f"], m, params["b_f"]))
        o = ad.sigmoid(_affine(params["W_o"], state.h, params["V_o"], m, params["b_o"]))
    else:
        i = ad.sigmoid(_affine(params["U_i"], x, params["V_i"], m, params["b_i"]))
        f = ad.sigmoid(_affine(params["U_f"], x, params["V_f"], m, params["b_f"]))
        o = ad.sigmoid(_affine(params["U_o"], x, params["V_o"], m, params["b_o"]))
    candidate = _affine(params["U_h"], x, params["V_h"], m, params["b_h"])
    return _lstm_finish(i, f, o, candidate, state.c, variant)


def tmlstm_step(params, state, x, variant=CellVariant()):
    """LSTM with a separately factorized intermediate state per gate.

    Every gate (and the candidate) owns its own (W_*x, W_*h) pair, so each
    gets an independent input-filtered view of h_prev.
    """
    ms = {
        g: intermediate_state(params[f"W_{g}x"], params[f"W_{g}h"], x, state.h)
        for g in "ifoh"
    }
    i = ad.sigmoid(_affine(params["U_i"], x, params["V_i"], ms["i"], params["b_i"]))
    f = ad.sigmoid(_affine(params["U_f"], x, params["V_f"], ms["f"], params["b_f"]))
    o = ad.sigmoid(_affine(params["U_o"], x, params["V_o"], ms["o"], params["b_o"]))
    candidate = _affine(params["U_h"], x, params["V_h"], ms["h"], params["b_h"])
    return _lstm_finish(i, f, o, candidate, state.c, variant)


def _gru_blend(z, h_prev, candidate):
    # h = (1 - z) * h_prev + z * tanh(candidate)
    return ad.add(ad.hadamard(ad.one_minus(z), h_prev), ad.hadamard(z, ad.tanh(candidate)))


def gru_step(params, state, x):
    """Update/reset gated cell; the reset gate masks h_prev inside the candidate."""
    z = ad.sigmoid(_affine(params["U_z"], x, params["W_z"], state.h, params["b_z"]))
    r = ad.sigmoid(_affine(params["U_r"], x, params["W_r"], state.h, params["b_r"]))
    candidate = ad.add(
        ad.add(ad.matmul(params["U_h"], x), ad.matmul(params["W_h"], ad.hadamard(r, state.h))),
        params["b_h"],
    )
    return CellState(h=_gru_blend(z, state.h, candidate))


def tmgru_step(params, state, x):
    """GRU with per-gate factorized intermediate states.

    z and r each get their own (W_*x, W_*h) factorization of h_prev; the
    candidate's intermediate state applies the reset gate to h_prev before
    factorizing, m_h = (W_x x) * (W_h (r * h_prev)).
    """
    m_z = intermediate_state(params["W_zx"], params["W_zh"], x, state.h)
    m_r = intermediate_state(params["W_rx"], params["W_rh"], x, state.h)
    z = ad.sigmoid(_affine(params["U_z"], x, params["V_z"], m_z, params["b_z"]))
    r = ad.sigmoid(_affine(params["U_r"], x, params["V_r"], m_r, params["b_r"]))
    m_h = intermediate_state(params["W_x"], params["W_h"], x, ad.hadamard(r, state.h))
    candidate = _affine(params["U_h"], x, params["V_h"], m_h, params["b_h"])
    return CellState(h=_gru_blend(z, state.h, candidate))


def mgru_step(params, state, x):
    """GRU sharing one intermediate state, with the reset gate filtering it.

    Resetting m instead of h_prev breaks the circular dependency a shared
    state would otherwise create between r and m: when every component of
    r is zero the candidate sees no history at all, exactly as if h_prev
    were zero.
    """
    m = intermediate_state(params["W_x"], params["W_h"], x, state.h)
    z = ad.sigmoid(_affine(params["U_z"], x, params["V_z"], m, params["b_z"]))
    r = ad.sigmoid(_affine(params["U_r"], x, params["V_r"], m, params["b_r"]))
    candidate = _affine(params["U_h"], x, params["V_h"], ad.hadamard(r, m), params["b_h"])
    return CellState(h=_gru_blend(z, state.h, candidate))


def step(kind, params, state, x, variant=CellVariant()):
    """Advance any cell kind by one time step; returns the new state."""
    kind = CellKind(kind)
    if kind is CellKind.RNN:
        return rnn_step(params, state, x)
    if kind is CellKind.TRNN:
        return trnn_step(params, state, x)
    if kind is CellKind.MRNN:
        return mrnn_step(params, state, x)
    if kind is CellKind.LSTM:
        return lstm_step(params, state, x, variant)
    if kind is CellKind.MLSTM:
        return mlstm_step(params, state, x, variant)
    if kind is CellKind.TMLSTM:
        return tmlstm_step(params, state, x, variant)
    if kind is CellKind.GRU:
        return gru_step(params, state, x)
    if kind is CellKind.MGRU:
        return mgru_step(params, state, x)
    if kind is CellKind.TMGRU:
        return tmgru_step(params, state, x)
    raise ValueError(f"unknown cell kind {kind!r}")
