"""Command-line surface: train, eval, gradcheck, params, sample.

Experiments are described by flat INI-style config files with model /
train / data sections; command-line flags override file values and the
fully resolved config is always written next to the run artifacts, so a
run can be reproduced from its output directory alone.
"""

from __future__ import annotations

import argparse
import configparser
import io
import sys
from dataclasses import dataclass, fields as dataclass_fields
from pathlib import Path

from .autodiff import grad_check, make_rng
from .cells import CellDims, CellKind, CellVariant, InitScheme, param_count, param_shapes
from .data import CorpusError, load_ptb, load_raw, load_text8
from .model import (
    init_lm_params,
    leaves_from_flat,
    make_config,
    named_arrays,
    sample,
    sequence_loss,
)
from .training import (
    BudgetError,
    CheckpointError,
    ConfigError,
    MetricsLog,
    NumericError,
    OptimizerError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    solve_hidden_size,
    train,
)

_DATASET_SEQ_LEN = {"ptb": 150, "text8": 200, "raw": 150}


@dataclass
class ExperimentConfig:
    # model
    cell: str = "mlstm"
    hidden: int = 256
    intermediate: int = 0  # 0 ties the intermediate size to the vocabulary
    mlstm_form: str = "text"
    lstm_output: str = "sigmoid"
    forget_bias: float = 1.0
    # train
    epochs: int = 10
    batch_size: int = 32
    seq_len: int = 0  # 0 picks the dataset default
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    eval_carry: bool = True
    log_interval: int = 50
    # data
    dataset: str = "text8"
    data_dir: str = ""
    out_dir: str = "runs/exp"
    fixture: bool = False


_SECTIONS = {
    "model": ("cell", "hidden", "intermediate", "mlstm_form", "lstm_output", "forget_bias"),
    "train": ("epochs", "batch_size", "seq_len", "lr", "beta1", "beta2", "eps",
              "grad_clip", "seed", "eval_carry", "log_interval"),
    "data": ("dataset", "data_dir", "out_dir", "fixture"),
}
_FIELD_TYPES = {f.name: f.type for f in dataclass_fields(ExperimentConfig)}


def _parse_value(key, raw):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        lowered = raw.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"key {key!r} expects a boolean, got {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r} expects {kind}, got {raw!r}") from None
    return raw


def read_config(path):
    """Load an ExperimentConfig from an INI file, rejecting unknown keys."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as handle:
            parser.read_file(handle)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}] of {path}")
            setattr(cfg, key, _parse_value(key, raw))
    return cfg


def config_text(cfg):
    """Render every key explicitly so the file round-trips the config."""
    parser = configparser.ConfigParser(interpolation=None)
    for section, keys in _SECTIONS.items():
        parser[section] = {}
        for key in keys:
            value = getattr(cfg, key)
            if isinstance(value, bool):
                value = int(value)
            elif isinstance(value, float):
                value = repr(value)
            parser[section][key] = str(value)
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()


def _apply_overrides(cfg, args):
    overrides = {
        "cell": args.cell, "hidden": args.hidden, "intermediate": args.intermediate,
        "mlstm_form": args.mlstm_form, "lstm_output": args.lstm_output,
        "epochs": args.epochs, "batch_size": args.batch_size, "seq_len": args.seq_len,
        "lr": args.lr, "grad_clip": args.grad_clip, "seed": args.seed,
        "eval_carry": args.eval_carry, "log_interval": args.log_interval,
        "dataset": args.dataset, "data_dir": args.data_dir, "out_dir": args.out_dir,
        "fixture": args.fixture,
    }
    for key, value in overrides.items():
        if value is not None:
            setattr(cfg, key, value)
    return cfg


def _parse_cell(name):
    try:
        return CellKind(name.lower())
    except ValueError:
        valid = ", ".join(k.value for k in CellKind)
        raise ConfigError(f"unknown cell kind {name!r}; valid kinds: {valid}") from None


def _load_dataset(cfg):
    kind = cfg.dataset
    root = Path(cfg.data_dir)
    if kind == "ptb":
        return load_ptb(root / "train.txt", root / "valid.txt", root / "test.txt")
    if kind == "text8":
        path = root if root.is_file() else next(
            (p for p in (root / "text8", root / "text8.txt") if p.is_file()), root / "text8"
        )
        return load_text8(path, fixture=cfg.fixture)
    if kind == "raw":
        path = root if root.is_file() else root / "input.txt"
        return load_raw(path)
    raise ConfigError(f"unknown dataset kind {kind!r}; expected ptb, text8, or raw")


def _resolve(cfg, vocab_size):
    """Fill dataset-dependent defaults and build the model/train configs."""
    if cfg.seq_len == 0:
        cfg.seq_len = _DATASET_SEQ_LEN[cfg.dataset]
    kind = _parse_cell(cfg.cell)
    variant = CellVariant(mlstm_form=cfg.mlstm_form, lstm_output=cfg.lstm_output)
    lm_config = make_config(
        kind, vocab_size, cfg.hidden,
        intermediate_dim=cfg.intermediate if cfg.intermediate > 0 else None,
        seq_len=cfg.seq_len, variant=variant,
    )
    tconf = TrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, seq_len=cfg.seq_len,
        learning_rate=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
        grad_clip_norm=cfg.grad_clip or None, seed=cfg.seed,
        eval_carry=cfg.eval_carry, log_interval=cfg.log_interval,
    )
    return lm_config, tconf


def cmd_train(args):
    cfg = read_config(args.config) if args.config else ExperimentConfig()
    _apply_overrides(cfg, args)
    print(f"seed={cfg.seed}", file=sys.stderr)
    splits, vocab = _load_dataset(cfg)
    lm_config, tconf = _resolve(cfg, vocab.size)

    rng = make_rng(cfg.seed)
    params = init_lm_params(lm_config, rng, InitScheme(forget_bias=cfg.forget_bias))

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "resolved.cfg").write_text(config_text(cfg), encoding="utf-8")
    with open(out_dir / "metrics.log", "w", encoding="utf-8") as stream:
        sink = MetricsLog(stream)
        best, last = train(lm_config, params, splits, vocab, tconf, sink)
    save_checkpoint(best, out_dir / "best.ckpt")
    save_checkpoint(last, out_dir / "last.ckpt")
    print(f"best_val_bpc={best.val_bpc:.4f} best_epoch={best.epoch} out_dir={out_dir}")
    return 0


def cmd_eval(args):
    print(f"seed={args.seed}", file=sys.stderr)
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ExperimentConfig(dataset=args.dataset or "text8", data_dir=args.data_dir or "",
                           fixture=bool(args.fixture))
    splits, _ = _load_dataset(cfg)
    text = getattr(splits, args.split)
    value = evaluate(ckpt, text, eval_carry=args.eval_carry,
                     batch_size=args.batch_size, seq_len=args.seq_len or None)
    print(f"bpc={value:.4f}")
    return 0


def cmd_gradcheck(args):
    print(f"seed={args.seed}", file=sys.stderr)
    kinds = list(CellKind) if args.cell == "all" else [_parse_cell(args.cell)]
    rng = make_rng(args.seed)
    all_passed = True
    for kind in kinds:
        config = make_config(kind, args.vocab, args.hidden, args.intermediate, seq_len=args.steps)
        params = init_lm_params(config, rng)
        batch = rng.integers(0, args.vocab, size=(args.batch_size, args.steps))

        def loss_fn(flat):
            return sequence_loss(leaves_from_flat(flat), config, batch)[0]

        report = grad_check(loss_fn, named_arrays(params), step=1e-5, tol=args.tol)
        print(f"[{kind.value}]")
        print(report.summary())
        all_passed &= report.passed
    return 0 if all_passed else 1


def cmd_params(args):
    variant = CellVariant(mlstm_form=args.mlstm_form, lstm_output=args.lstm_output)
    intermediate = args.intermediate or args.vocab  # default ties it to the input width
    budget = args.budget
    if budget is None and args.anchor:
        anchor = _parse_cell(args.anchor)
        budget = param_count(anchor, CellDims(args.vocab, args.hidden, intermediate), variant)
        print(f"budget={budget} (from {anchor.value} at hidden={args.hidden})")
    if budget is not None:
        print(f"{'cell':<8} {'hidden':>7} {'params':>12} {'deviation':>10}")
        for kind in CellKind:
            n = solve_hidden_size(kind, args.vocab, intermediate, budget, variant)
            total = param_count(kind, CellDims(args.vocab, n, intermediate), variant)
            print(f"{kind.value:<8} {n:>7} {total:>12} {total - budget:>+10}")
        return 0
    kind = _parse_cell(args.cell)
    dims = CellDims(args.vocab, args.hidden, intermediate)
    total = 0
    for name, (rows, cols) in param_shapes(kind, dims, variant).items():
        print(f"{name:<8} {rows:>5} x {cols:<5} = {rows * cols}")
        total += rows * cols
    assert total == param_count(kind, dims, variant)
    print(f"total    {total}")
    return 0


def cmd_sample(args):
    print(f"seed={args.seed}", file=sys.stderr)
    ckpt = load_checkpoint(args.checkpoint)
    text = sample(ckpt.params, ckpt.config, ckpt.vocab, args.prime, args.length,
                  temperature=args.temperature, rng=make_rng(args.seed))
    print(text)
    return 0


def _add_model_flags(p):
    p.add_argument("--cell", default=None, help="cell kind (rnn, trnn, mrnn, lstm, mlstm, tmlstm, gru, mgru, tmgru)")
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--intermediate", type=int, default=None)
    p.add_argument("--mlstm-form", dest="mlstm_form", choices=("text", "printed"), default=None)
    p.add_argument("--lstm-output", dest="lstm_output", choices=("sigmoid", "tanh"), default=None)


def _add_data_flags(p):
    p.add_argument("--dataset", choices=("ptb", "text8", "raw"), default=None)
    p.add_argument("--data-dir", dest="data_dir", default=None)
    p.add_argument("--fixture", action="store_true", default=None,
                   help="accept scaled-down text8 files")


def build_parser():
    parser = argparse.ArgumentParser(prog="mulrnn",
                                     description="Multiplicative recurrent character language models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and keep the best-on-validation checkpoint")
    p.add_argument("--config", default=None, help="INI config file; flags override it")
    _add_model_flags(p)
    _add_data_flags(p)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-carry", dest="eval_carry", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--log-interval", dest="log_interval", type=int, default=None)
    p.add_argument("--out-dir", dest="out_dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="report BPC of a checkpoint on a corpus split")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    _add_data_flags(p)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=0)
    p.add_argument("--eval-carry", dest="eval_carry", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of a cell's sequence loss")
    p.add_argument("--cell", default="all")
    p.add_argument("--vocab", type=int, default=7)
    p.add_argument("--hidden", type=int, default=8)
    p.add_argument("--intermediate", type=int, default=5)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=3)
    p.add_argument("--steps", type=int, default=4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="per-matrix parameter breakdown or budget solving")
    p.add_argument("--cell", default="mlstm")
    p.add_argument("--vocab", type=int, required=True)
    p.add_argument("--hidden", type=int, default=1)
    p.add_argument("--intermediate", type=int, default=0)
    p.add_argument("--budget", type=int, default=None, help="solve hidden sizes for this parameter count")
    p.add_argument("--anchor", default=None, help="derive the budget from this cell kind at --hidden")
    p.add_argument("--mlstm-form", dest="mlstm_form", choices=("text", "printed"), default="text")
    p.add_argument("--lstm-output", dest="lstm_output", choices=("sigmoid", "tanh"), default="sigmoid")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("sample", help="generate text from a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--prime", required=True)
    p.add_argument("--length", type=int, default=200)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, BudgetError, ValueError) as exc:
        print(f"error=config: {exc}", file=sys.stderr)
        return 1
    except (CorpusError, CheckpointError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error=data: {exc}", file=sys.stderr)
        return 2
    except (NumericError, OptimizerError) as exc:
        print(f"error=numeric: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
