"""Adam optimization, the epoch loop, evaluation, checkpoints, and sizing.

Training keeps the checkpoint with the lowest validation BPC across
epochs; that checkpoint is the only regularizer. Hidden state carries
across consecutive contiguous batches within an epoch and resets at epoch
boundaries. All metrics go through an append-only line sink so two runs
with the same seed (and the same clock) produce identical streams.
"""

from __future__ import annotations

import logging
import struct
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cells import CellDims, CellKind, CellVariant, param_count
from .data import Vocabulary, batchify
from .model import LmConfig, LmParams, bpc, lift, named_arrays, sequence_loss

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid run configuration."""


class OptimizerError(RuntimeError):
    """The optimizer was fed values it cannot use."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


class BudgetError(ValueError):
    """No hidden size can meet the requested parameter budget."""


class CheckpointError(Exception):
    """A checkpoint file is malformed or corrupt."""


@dataclass
class AdamState:
    """First/second moment estimates plus hyperparameters and step count."""

    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, flat, alpha=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            alpha=alpha,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m={name: np.zeros_like(arr) for name, arr in flat.items()},
            v={name: np.zeros_like(arr) for name, arr in flat.items()},
        )

    def copy(self):
        return AdamState(
            alpha=self.alpha,
            beta1=self.beta1,
            beta2=self.beta2,
            eps=self.eps,
            t=self.t,
            m={k: v.copy() for k, v in self.m.items()},
            v={k: v.copy() for k, v in self.v.items()},
        )


def adam_step(params_flat, grads, state):
    """One bias-corrected Adam update, in place on the parameter arrays."""
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    for name, theta in params_flat.items():
        g = grads[name]
        if not np.isfinite(g).all():
            raise OptimizerError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1 ** state.t)
        v_hat = v / (1.0 - b2 ** state.t)
        theta -= state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)


def clip_global_norm(grads, max_norm):
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns (norm_before, fired). Direction is preserved when the clip
    fires; nothing changes when it does not.
    """
    total = 0.0
    for g in grads.values():
        total += float((g * g).sum())
    norm = float(np.sqrt(total))
    if norm <= max_norm or norm == 0.0:
        return norm, False
    factor = max_norm / norm
    for g in grads.values():
        g *= factor
    return norm, True


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    seq_len: int = 150
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip_norm: float | None = None
    seed: int = 0
    eval_carry: bool = True
    eval_batch_size: int | None = None
    log_interval: int = 50
    stop_below_bpc: float | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.seq_len < 2:
            raise ConfigError("need batch_size >= 1 and seq_len >= 2")


@dataclass
class Checkpoint:
    """A complete snapshot: config, parameters, optimizer, and provenance."""

    config: LmConfig
    params: LmParams
    vocab: Vocabulary
    adam: AdamState | None = None
    epoch: int = 0
    val_bpc: float = float("inf")
    seed: int = 0
    version: int = 1


class MetricsLog:
    """Append-only metrics stream; one line per record, optionally mirrored to a file."""

    FIELDS = ("step", "epoch", "split", "loss_nats", "bpc", "chars_per_sec", "wall_ms")

    def __init__(self, stream=None):
        self.lines = []
        self._stream = stream

    def emit(self, step, epoch, split, loss_nats, bpc_value, chars_per_sec, wall_ms):
        line = (
            f"step={step} epoch={epoch} split={split} "
            f"loss_nats={loss_nats:.6f} bpc={bpc_value:.6f} "
            f"chars_per_sec={chars_per_sec:.1f} wall_ms={wall_ms:.1f}"
        )
        self.lines.append(line)
        if self._stream is not None:
            self._stream.write(line + "\n")
            self._stream.flush()


def evaluate_ids(config, params, ids, batch_size, seq_len=None, carry=True):
    """Deterministic single-pass BPC of params over a pre-encoded id stream."""
    seq_len = seq_len or config.seq_len
    leaves = lift(params)
    state = None
    losses = []
    for batch in batchify(ids, None, batch_size, seq_len, mode="contiguous"):
        loss, new_state = sequence_loss(leaves, config, batch, state if carry else None)
        state = new_state
        losses.append(float(loss.value[0, 0]))
    if not losses:
        raise ConfigError("no evaluation batches; split too small for batch configuration")
    return bpc(sum(losses) / len(losses))


def evaluate(checkpoint, text, eval_carry=True, batch_size=32, seq_len=None):
    """BPC of a checkpointed model over a text split."""
    ids = checkpoint.vocab.encode(text)
    return evaluate_ids(checkpoint.config, checkpoint.params, ids, batch_size, seq_len, eval_carry)


def train(config, params, splits, vocab, tconf, sink=None, clock=time.perf_counter):
    """Run the epoch loop and return (best, last) checkpoints.

    Each epoch makes a full contiguous pass over the training split with
    hidden state carried between consecutive batches, then a full
    validation pass. The best checkpoint is the one with the lowest
    validation BPC. Aborts with NumericError on a non-finite loss.
    """
    sink = sink or MetricsLog()
    train_ids = vocab.encode(splits.train)
    valid_ids = vocab.encode(splits.valid)
    B, T = tconf.batch_size, tconf.seq_len
    if len(train_ids) < B * T:
        raise ConfigError(f"training split ({len(train_ids)} chars) too small for {B}x{T} batches")
    eval_bs = tconf.eval_batch_size or B
    if len(valid_ids) < eval_bs * T:
        raise ConfigError(f"validation split ({len(valid_ids)} chars) too small for {eval_bs}x{T} batches")

    flat = named_arrays(params)
    adam = AdamState.for_params(
        flat, alpha=tconf.learning_rate, beta1=tconf.beta1, beta2=tconf.beta2, eps=tconf.eps
    )
    best = None
    global_step = 0
    start = clock()
    interval_chars = 0
    interval_start = start

    for epoch in range(1, tconf.epochs + 1):
        state = None  # reset carried state at epoch boundaries
        epoch_losses = []
        for batch in batchify(train_ids, None, B, T, mode="contiguous"):
            leaves = lift(params)
            loss, state = sequence_loss(leaves, config, batch, state)
            loss_value = float(loss.value[0, 0])
            if not np.isfinite(loss_value):
                raise NumericError(
                    f"non-finite training loss at step {global_step + 1}"
                    f" (lr={adam.alpha:g}, epoch={epoch})"
                )
            loss.backward()
            grads = leaves.grads()
            if tconf.grad_clip_norm:
                norm, fired = clip_global_norm(grads, tconf.grad_clip_norm)
                if fired:
                    log.info("gradient clip fired at step %d: norm %.4f -> %.4f",
                             global_step + 1, norm, tconf.grad_clip_norm)
            adam_step(flat, grads, adam)
            global_step += 1
            epoch_losses.append(loss_value)
            interval_chars += B * (T - 1)
            if global_step % tconf.log_interval == 0:
                now = clock()
                rate = interval_chars / max(now - interval_start, 1e-9)
                sink.emit(global_step, epoch, "train", loss_value, bpc(loss_value),
                          rate, (now - start) * 1000.0)
                interval_chars = 0
                interval_start = now
        if not epoch_losses:
            raise ConfigError("training stream produced no batches")

        eval_start = clock()
        val = evaluate_ids(config, params, valid_ids, eval_bs, T, tconf.eval_carry)
        eval_end = clock()
        val_nats = val * float(np.log(2.0))
        eval_rate = len(valid_ids) / max(eval_end - eval_start, 1e-9)
        sink.emit(global_step, epoch, "valid", val_nats, val, eval_rate, (eval_end - start) * 1000.0)

        if best is None or val < best.val_bpc:
            best = Checkpoint(config=config, params=params.copy(), vocab=vocab,
                              adam=adam.copy(), epoch=epoch, val_bpc=val, seed=tconf.seed)
        if tconf.stop_below_bpc is not None and val < tconf.stop_below_bpc:
            break

    last = Checkpoint(config=config, params=params.copy(), vocab=vocab,
                      adam=adam.copy(), epoch=epoch, val_bpc=val, seed=tconf.seed)
    return best, last


def solve_hidden_size(kind, input_dim, intermediate_dim, target_params, variant=CellVariant()):
    """Smallest-deviation hidden size for a parameter budget.

    param_count grows strictly with the hidden size, so a bracketing
    binary search finds the two candidates around the target; ties break
    toward the smaller size.
    """
    kind = CellKind(kind)

    def count(n):
        return param_count(kind, CellDims(input_dim, n, intermediate_dim), variant)

    if target_params < count(1):
        raise BudgetError(
            f"budget {target_params} is below the {kind.value} minimum {count(1)} at hidden size 1"
        )
    lo, hi = 1, 2
    while count(hi) <= target_params:
        lo, hi = hi, hi * 2
    # invariant: count(lo) <= target < count(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if count(mid) <= target_params:
            lo = mid
        else:
            hi = mid
    below = target_params - count(lo)
    above = count(hi) - target_params
    return lo if below <= above else hi


_MAGIC = b"MULRNN"
_FORMAT_VERSION = 1


def _escape(text):
    return text.encode("unicode_escape").decode("ascii")


def _unescape(text):
    return text.encode("ascii").decode("unicode_escape")


def _config_block(ckpt):
    lines = [
        f"cell = {ckpt.config.cell_kind.value}",
        f"input_dim = {ckpt.config.dims.input_dim}",
        f"hidden_dim = {ckpt.config.dims.hidden_dim}",
        f"intermediate_dim = {ckpt.config.dims.intermediate_dim}",
        f"tie_intermediate = {int(ckpt.config.tie_intermediate_to_input)}",
        f"seq_len = {ckpt.config.seq_len}",
        f"mlstm_form = {ckpt.config.variant.mlstm_form}",
        f"lstm_output = {ckpt.config.variant.lstm_output}",
        f"epoch = {ckpt.epoch}",
        f"val_bpc = {ckpt.val_bpc!r}",
        f"seed = {ckpt.seed}",
        f"vocab_chars = {_escape(''.join(ckpt.vocab.chars))}",
        f"vocab_unk = {int(ckpt.vocab.unk_id is not None)}",
        f"adam = {int(ckpt.adam is not None)}",
    ]
    if ckpt.adam is not None:
        lines += [
            f"adam_t = {ckpt.adam.t}",
            f"adam_alpha = {ckpt.adam.alpha!r}",
            f"adam_beta1 = {ckpt.adam.beta1!r}",
            f"adam_beta2 = {ckpt.adam.beta2!r}",
            f"adam_eps = {ckpt.adam.eps!r}",
        ]
    return "\n".join(lines)


def _checkpoint_arrays(ckpt):
    arrays = dict(named_arrays(ckpt.params))
    if ckpt.adam is not None:
        for name, arr in ckpt.adam.m.items():
            arrays[f"adam.m.{name}"] = arr
        for name, arr in ckpt.adam.v.items():
            arrays[f"adam.v.{name}"] = arr
    return arrays


def dumps_checkpoint(ckpt):
    """Serialize to bytes: magic, version, config text, arrays, crc32 trailer."""
    buf = bytearray()
    buf += _MAGIC
    buf += struct.pack("<I", _FORMAT_VERSION)
    block = _config_block(ckpt).encode("utf-8")
    buf += struct.pack("<I", len(block)) + block
    arrays = _checkpoint_arrays(ckpt)
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays.items():
        encoded = name.encode("utf-8")
        buf += struct.pack("<H", len(encoded)) + encoded
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    return bytes(buf)


def loads_checkpoint(data):
    """Inverse of dumps_checkpoint; verifies magic, version, and checksum."""
    if len(data) < len(_MAGIC) + 12 or data[: len(_MAGIC)] != _MAGIC:
        raise CheckpointError("not a model checkpoint (bad magic)")
    (stored_crc,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch")
    pos = len(_MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        values = struct.unpack_from(fmt, data, pos)
        pos += size
        return values

    (version,) = take("<I")
    if version != _FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (block_len,) = take("<I")
    block = data[pos : pos + block_len].decode("utf-8")
    pos += block_len
    fields = {}
    for line in block.splitlines():
        key, sep, value = line.partition(" = ")
        if not sep:
            raise CheckpointError(f"malformed config line {line!r}")
        fields[key] = value

    (n_arrays,) = take("<I")
    arrays = {}
    for _ in range(n_arrays):
        (name_len,) = take("<H")
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = take("<B")
        shape = take(f"<{rank}I")
        n_items = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(data, dtype="<f8", count=n_items, offset=pos).reshape(shape)
        pos += n_items * 8
        arrays[name] = arr.astype(np.float64)  # writable copy

    vocab = Vocabulary(_unescape(fields["vocab_chars"]), has_unk=fields["vocab_unk"] == "1")
    variant = CellVariant(mlstm_form=fields["mlstm_form"], lstm_output=fields["lstm_output"])
    dims = CellDims(
        input_dim=int(fields["input_dim"]),
        hidden_dim=int(fields["hidden_dim"]),
        intermediate_dim=int(fields["intermediate_dim"]),
    )
    config = LmConfig(
        cell_kind=CellKind(fields["cell"]),
        dims=dims,
        seq_len=int(fields["seq_len"]),
        tie_intermediate_to_input=fields["tie_intermediate"] == "1",
        variant=variant,
    )
    cell = {}
    adam_m = {}
    adam_v = {}
    W_out = b_out = None
    for name, arr in arrays.items():
        if name.startswith("adam.m."):
            adam_m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam_v[name[len("adam.v."):]] = arr
        elif name.startswith("cell."):
            cell[name[len("cell."):]] = arr
        elif name == "W_out":
            W_out = arr
        elif name == "b_out":
            b_out = arr
        else:
            raise CheckpointError(f"unexpected parameter {name!r}")
    if W_out is None or b_out is None:
        raise CheckpointError("checkpoint is missing the output projection")
    params = LmParams(cell=cell, W_out=W_out, b_out=b_out)
    adam = None
    if fields.get("adam") == "1":
        adam = AdamState(
            alpha=float(fields["adam_alpha"]),
            beta1=float(fields["adam_beta1"]),
            beta2=float(fields["adam_beta2"]),
            eps=float(fields["adam_eps"]),
            t=int(fields["adam_t"]),
            m=adam_m,
            v=adam_v,
        )
    return Checkpoint(
        config=config,
        params=params,
        vocab=vocab,
        adam=adam,
        epoch=int(fields["epoch"]),
        val_bpc=float(fields["val_bpc"]),
        seed=int(fields["seed"]),
        version=version,
    )


def save_checkpoint(ckpt, path):
    Path(path).write_bytes(dumps_checkpoint(ckpt))


def load_checkpoint(path):
    return loads_checkpoint(Path(path).read_bytes())
