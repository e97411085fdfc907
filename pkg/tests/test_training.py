import numpy as np
import numpy.testing as npt
import pytest

import mulrnn as M
from mulrnn.cells import CellDims, CellKind
from mulrnn.data import CorpusSplits, Vocabulary
from mulrnn.model import init_lm_params, make_config, named_arrays, zero_lm_params
from mulrnn.training import (
    AdamState,
    BudgetError,
    Checkpoint,
    CheckpointError,
    ConfigError,
    MetricsLog,
    NumericError,
    OptimizerError,
    adam_step,
    clip_global_norm,
    dumps_checkpoint,
    evaluate,
    load_checkpoint,
    loads_checkpoint,
    save_checkpoint,
    solve_hidden_size,
    train,
)


def fake_clock():
    t = [0.0]

    def tick():
        t[0] += 0.125
        return t[0]

    return tick


def tiny_run(text="the quick brown fox jumps over the lazy dog " * 40, epochs=3, seed=0,
             kind="mgru", clock=None, lr=1e-3):
    splits = CorpusSplits(train=text, valid=text, test=text)
    vocab = Vocabulary.build(text)
    config = make_config(kind, vocab.size, 12, 8, seq_len=20)
    params = init_lm_params(config, M.make_rng(seed))
    tconf = M.TrainConfig(epochs=epochs, batch_size=4, seq_len=20, learning_rate=lr,
                          seed=seed, log_interval=5)
    sink = MetricsLog()
    best, last = train(config, params, splits, vocab, tconf, sink,
                       clock=clock or fake_clock())
    return best, last, sink, params


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_gradient_is_identity():
    theta = {"w": np.array([[1.0, -2.0], [3.0, 0.5]])}
    state = AdamState.for_params(theta)
    before = theta["w"].copy()
    for _ in range(5):
        adam_step(theta, {"w": np.zeros((2, 2))}, state)
    npt.assert_array_equal(theta["w"], before)
    assert state.t == 5


def test_adam_first_step_size():
    theta = {"w": np.array([[2.0]])}
    state = AdamState.for_params(theta, alpha=0.1)
    adam_step(theta, {"w": np.array([[1.0]])}, state)
    # bias-corrected m_hat = v_hat = 1, so the step is alpha/(1 + eps)
    npt.assert_allclose(theta["w"][0, 0], 2.0 - 0.1, atol=1e-6)


def test_adam_converges_on_quadratic_bowl():
    theta = {"w": np.array([[3.0]])}
    state = AdamState.for_params(theta, alpha=0.05)
    for _ in range(500):
        adam_step(theta, {"w": 2.0 * theta["w"]}, state)
    assert abs(theta["w"][0, 0]) < 1e-3


def test_adam_rejects_non_finite_gradient():
    theta = {"ok": np.ones((2, 1)), "broken": np.ones((2, 1))}
    state = AdamState.for_params(theta)
    bad = {"ok": np.zeros((2, 1)), "broken": np.array([[np.nan], [0.0]])}
    with pytest.raises(OptimizerError, match="broken"):
        adam_step(theta, bad, state)


# ---------------------------------------------------------------------------
# clipping


def test_clip_noop_below_threshold():
    grads = {"a": np.array([[0.3]]), "b": np.array([[0.4]])}
    norm, fired = clip_global_norm(grads, 1.0)
    assert not fired
    npt.assert_allclose(norm, 0.5)
    npt.assert_array_equal(grads["a"], [[0.3]])


def test_clip_preserves_direction_and_shrinks_norm():
    rng = np.random.default_rng(0)
    grads = {k: rng.uniform(-1, 1, (4, 3)) for k in "abc"}
    flat_before = np.concatenate([g.ravel().copy() for g in grads.values()])
    norm, fired = clip_global_norm(grads, 0.5)
    flat_after = np.concatenate([g.ravel() for g in grads.values()])
    assert fired and norm > 0.5
    npt.assert_allclose(np.linalg.norm(flat_after), 0.5, rtol=1e-12)
    cos = flat_before @ flat_after / (np.linalg.norm(flat_before) * np.linalg.norm(flat_after))
    assert abs(cos - 1.0) < 1e-12


# ---------------------------------------------------------------------------
# budget solver


def test_solver_fixed_point():
    target = M.param_count(CellKind.MLSTM, CellDims(50, 700, 50))
    assert solve_hidden_size(CellKind.MLSTM, 50, 50, target) == 700


def test_solver_budget_too_small():
    floor = M.param_count(CellKind.LSTM, CellDims(50, 1, 1))
    with pytest.raises(BudgetError):
        solve_hidden_size(CellKind.LSTM, 50, 1, floor - 1)


def test_solver_ptb_style_within_five_percent():
    anchor = M.param_count(CellKind.MLSTM, CellDims(50, 700, 50))
    for kind in (CellKind.MGRU, CellKind.TMLSTM, CellKind.TMGRU):
        n = solve_hidden_size(kind, 50, 50, anchor)
        got = M.param_count(kind, CellDims(50, n, 50))
        assert abs(got - anchor) / anchor < 0.05, (kind, n, got)


def test_solver_text8_style_within_five_percent():
    anchor = M.param_count(CellKind.MLSTM, CellDims(27, 450, 27))
    for kind in (CellKind.MGRU, CellKind.TMLSTM, CellKind.TMGRU):
        n = solve_hidden_size(kind, 27, 27, anchor)
        got = M.param_count(kind, CellDims(27, n, 27))
        assert abs(got - anchor) / anchor < 0.05, (kind, n, got)


def test_solver_no_strictly_better_neighbor():
    rng = np.random.default_rng(5)
    for _ in range(20):
        kind = list(CellKind)[rng.integers(0, 9)]
        V = int(rng.integers(5, 60))
        m = int(rng.integers(1, 40))
        target = int(rng.integers(M.param_count(kind, CellDims(V, 1, m)), 2_000_000))
        n = solve_hidden_size(kind, V, m, target)
        best = abs(M.param_count(kind, CellDims(V, n, m)) - target)
        for other in (n - 1, n + 1):
            if other >= 1:
                assert abs(M.param_count(kind, CellDims(V, other, m)) - target) >= best


# ---------------------------------------------------------------------------
# checkpoints


def make_checkpoint(seed=0, kind="mlstm", with_adam=True):
    vocab = Vocabulary.build("abcdefghij ", reserve_unk=True)
    config = make_config(kind, vocab.size, 6, 4, seq_len=9)
    params = init_lm_params(config, M.make_rng(seed))
    adam = None
    if with_adam:
        adam = AdamState.for_params(named_arrays(params), alpha=2e-3)
        adam.t = 17
        for arr in adam.m.values():
            arr += 0.25
    return Checkpoint(config=config, params=params, vocab=vocab, adam=adam,
                      epoch=4, val_bpc=1.2345678901234567, seed=seed)


def test_checkpoint_round_trip_bitwise():
    ckpt = make_checkpoint()
    loaded = loads_checkpoint(dumps_checkpoint(ckpt))
    assert loaded.config == ckpt.config
    assert loaded.vocab == ckpt.vocab
    assert loaded.epoch == ckpt.epoch and loaded.seed == ckpt.seed
    assert loaded.val_bpc == ckpt.val_bpc  # exact, not approximate
    for name, arr in named_arrays(ckpt.params).items():
        npt.assert_array_equal(named_arrays(loaded.params)[name], arr)
    assert loaded.adam.t == 17 and loaded.adam.alpha == 2e-3
    for name, arr in ckpt.adam.m.items():
        npt.assert_array_equal(loaded.adam.m[name], arr)


def test_checkpoint_without_adam():
    ckpt = make_checkpoint(with_adam=False)
    loaded = loads_checkpoint(dumps_checkpoint(ckpt))
    assert loaded.adam is None


def test_checkpoint_file_round_trip(tmp_path):
    ckpt = make_checkpoint(seed=3)
    path = tmp_path / "model.ckpt"
    save_checkpoint(ckpt, path)
    loaded = load_checkpoint(path)
    assert loaded.config == ckpt.config


def test_checkpoint_rejects_corruption():
    blob = bytearray(dumps_checkpoint(make_checkpoint()))
    blob[30] ^= 0xFF
    with pytest.raises(CheckpointError, match="checksum"):
        loads_checkpoint(bytes(blob))
    with pytest.raises(CheckpointError, match="magic"):
        loads_checkpoint(b"NOTACKPT" + bytes(blob))


def test_checkpoint_evaluate_stable_across_reload(tmp_path):
    text = "abcabdabeabc" * 30
    vocab = Vocabulary.build(text)
    config = make_config("gru", vocab.size, 8, seq_len=12)
    params = init_lm_params(config, M.make_rng(9))
    ckpt = Checkpoint(config=config, params=params, vocab=vocab)
    before = evaluate(ckpt, text, batch_size=3)
    save_checkpoint(ckpt, tmp_path / "m.ckpt")
    after = evaluate(load_checkpoint(tmp_path / "m.ckpt"), text, batch_size=3)
    assert before == after


def test_evaluate_carry_flag_changes_result():
    rng = np.random.default_rng(21)
    text = "".join(rng.choice(list("abcdef "), size=400))
    vocab = Vocabulary.build(text)
    config = make_config("mgru", vocab.size, 10, 6, seq_len=10)
    ckpt = Checkpoint(config=config, params=init_lm_params(config, M.make_rng(2)), vocab=vocab)
    carried = evaluate(ckpt, text, eval_carry=True, batch_size=4)
    reset = evaluate(ckpt, text, eval_carry=False, batch_size=4)
    assert carried != reset  # state carry across windows must matter
    assert evaluate(ckpt, text, eval_carry=True, batch_size=4) == carried


def test_evaluate_zero_weight_uniform():
    text = ("ab cdefghijklmnopqrstuvwxyz" * 60)[:1200]
    vocab = Vocabulary.build(text)
    assert vocab.size == 27
    config = make_config("rnn", 27, 8, seq_len=10)
    ckpt = Checkpoint(config=config, params=zero_lm_params(config), vocab=vocab)
    value = evaluate(ckpt, text, batch_size=4)
    assert abs(value - np.log2(27.0)) < 1e-9


# ---------------------------------------------------------------------------
# the training loop


def test_train_keeps_best_validation_checkpoint():
    best, last, sink, _ = tiny_run(epochs=4)
    valid_bpcs = [float(line.split("bpc=")[1].split()[0])
                  for line in sink.lines if "split=valid" in line]
    assert len(valid_bpcs) == 4
    assert abs(best.val_bpc - min(valid_bpcs)) < 1e-6
    assert last.epoch == 4


def test_train_same_seed_bitwise_identical_streams():
    _, _, sink_a, params_a = tiny_run(seed=11, epochs=2)
    _, _, sink_b, params_b = tiny_run(seed=11, epochs=2)
    assert sink_a.lines == sink_b.lines
    for name, arr in named_arrays(params_a).items():
        npt.assert_array_equal(named_arrays(params_b)[name], arr)


def test_train_loss_decreases_on_memorizable_text():
    best, _, sink, _ = tiny_run(epochs=5)
    train_bpcs = [float(line.split("bpc=")[1].split()[0])
                  for line in sink.lines if "split=train" in line]
    assert train_bpcs[-1] < train_bpcs[0]


def test_train_aborts_on_non_finite_loss():
    text = "abcd " * 100
    splits = CorpusSplits(train=text, valid=text, test=text)
    vocab = Vocabulary.build(text)
    config = make_config("rnn", vocab.size, 6, seq_len=10)
    params = init_lm_params(config, M.make_rng(0))
    params.W_out[0, 0] = np.nan
    tconf = M.TrainConfig(epochs=1, batch_size=4, seq_len=10)
    with pytest.raises(NumericError, match="step 1"):
        train(config, params, splits, vocab, tconf, MetricsLog(), clock=fake_clock())


def test_train_rejects_undersized_splits():
    text = "abcd " * 8  # 40 chars
    splits = CorpusSplits(train=text, valid=text, test=text)
    vocab = Vocabulary.build(text)
    config = make_config("rnn", vocab.size, 6, seq_len=30)
    params = init_lm_params(config, M.make_rng(0))
    tconf = M.TrainConfig(epochs=1, batch_size=4, seq_len=30)
    with pytest.raises(ConfigError, match="too small"):
        train(config, params, splits, vocab, tconf, MetricsLog(), clock=fake_clock())


def test_train_config_validation():
    with pytest.raises(ConfigError):
        M.TrainConfig(epochs=0)
    with pytest.raises(ConfigError):
        M.TrainConfig(learning_rate=0.0)


def test_metrics_line_format():
    sink = MetricsLog()
    sink.emit(12, 1, "train", 1.5, 2.164, 1000.0, 250.0)
    line = sink.lines[0]
    assert line.startswith("step=12 epoch=1 split=train loss_nats=1.500000 bpc=2.164000")
    assert "chars_per_sec=1000.0" in line and "wall_ms=250.0" in line
