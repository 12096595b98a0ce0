import numpy as np
import pytest

from pstgcn.data import generate_synthetic, stratified_split
from pstgcn.descriptor import from_widths
from pstgcn.graph import load_topology
from pstgcn.net import build_model, predict_scores
from pstgcn.optim import SGD, step_lr
from pstgcn.tensor import softmax
from pstgcn.training import (
    TrainConfig,
    TrainingDiverged,
    fit_batch,
    load_model,
    train_final,
    train_step,
    two_stream_fuse,
)

TOY = load_topology("toy11")


def small_run(seed=0):
    ds = stratified_split(generate_synthetic(3, 8, T=8, seed=seed), 0.25, seed=seed)
    model = build_model(from_widths((6,), 3, 11, 3, K=3), TOY, seed)
    return ds, model


def test_milestone_schedule():
    assert step_lr(29, 0.1, (30, 40)) == pytest.approx(0.1)
    assert step_lr(30, 0.1, (30, 40)) == pytest.approx(0.01)
    assert step_lr(40, 0.1, (30, 40)) == pytest.approx(0.001)


def test_logged_lr_follows_schedule():
    ds, model = small_run()
    _, log = train_final(model, ds, TrainConfig(epochs=4, base_lr=0.1, milestones=(2, 3), batch_size=8))
    assert [e["lr"] for e in log.epochs] == pytest.approx([0.1, 0.1, 0.01, 0.001])
    assert all("val_accuracy" in e and "test_accuracy" in e for e in log.epochs)


def test_zero_epochs_leave_model_unchanged():
    ds, model = small_run()
    before = model.state_dict()
    out, log = train_final(model, ds, TrainConfig(epochs=0))
    after = out.state_dict()
    assert log.epochs == [] and set(before) == set(after)
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_training_config_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        TrainConfig(milestones=(40, 30))


def test_overfit_tiny_batch():
    rng = np.random.default_rng(0)
    model = build_model(from_widths((20, 40), 3, 11, 4, K=3), TOY, 0)
    x = rng.standard_normal((8, 3, 8, 11))
    y = np.arange(8) % 4
    losses = fit_batch(model, x, y, 200)
    assert min(losses) < 0.01


def test_divergence_restores_last_good_epoch(monkeypatch):
    ds, model = small_run()
    from pstgcn import training

    calls = {"n": 0}
    real = training.train_step

    def flaky(model, xb, yb, opt):
        calls["n"] += 1
        if calls["n"] > 2:  # batch size 32 covers the train set in one step per epoch
            raise TrainingDiverged("loss is nan")
        return real(model, xb, yb, opt)

    monkeypatch.setattr(training, "train_step", flaky)
    cfg = TrainConfig(epochs=5, batch_size=32)
    snapshot = {}

    def keep(model, x, y, opt, batch_size, rng, _real=training.train_epoch):
        loss = _real(model, x, y, opt, batch_size, rng)
        snapshot.update(model.state_dict())
        return loss

    monkeypatch.setattr(training, "train_epoch", keep)
    out, log = train_final(model, ds, cfg)
    assert log.aborted and len(log.epochs) == 2
    state = out.state_dict()
    assert all(np.array_equal(state[k], snapshot[k]) for k in state)


def test_non_finite_loss_raises():
    model = build_model(from_widths((4,), 3, 11, 2, K=3), TOY, 0)
    opt = SGD(model.named_parameters(), 0.1)
    with pytest.raises(TrainingDiverged):
        train_step(model, np.full((2, 3, 4, 11), np.nan), np.array([0, 1]), opt)


def test_best_checkpoint_matches_best_epoch(tmp_path):
    ds, model = small_run(seed=1)
    path = tmp_path / "best.pstg"
    _, log = train_final(model, ds, TrainConfig(epochs=4, batch_size=8), checkpoint_path=path)
    best, _ = load_model(path)
    x_val, y_val = ds.subset("val")
    acc = float((predict_scores(x_val, best).argmax(1) == y_val).mean())
    assert acc == log.best_val_accuracy
    assert log.best_val_accuracy == max(e["val_accuracy"] for e in log.epochs)


# ------------------------------------------------------------------ fusion


def test_fusion_example():
    assert two_stream_fuse([[0.6, 0.4]], [[0.3, 0.7]]).tolist() == [1]


def test_fusion_identical_streams():
    s = softmax(np.random.default_rng(0).standard_normal((20, 5)))
    assert np.array_equal(two_stream_fuse(s, s), s.argmax(1))


def test_fusion_uniform_stream_defers_to_other():
    s = softmax(np.random.default_rng(1).standard_normal((20, 5)))
    u = np.full_like(s, 0.2)
    assert np.array_equal(two_stream_fuse(s, u), s.argmax(1))
    assert np.array_equal(two_stream_fuse(u, s), s.argmax(1))


def test_fusion_ties_go_to_lower_class():
    assert two_stream_fuse([[0.5, 0.5]], [[0.25, 0.25]]).tolist() == [0]
    assert two_stream_fuse([[0.2, 0.4, 0.4]], [[0.2, 0.3, 0.3]]).tolist() == [1]


def test_fusion_constant_shift_invariance():
    rng = np.random.default_rng(2)
    a, b = softmax(rng.standard_normal((30, 4))), softmax(rng.standard_normal((30, 4)))
    shift = rng.standard_normal((30, 1))  # one constant per sample, across all classes
    assert np.array_equal(two_stream_fuse(a + shift, b + shift), two_stream_fuse(a, b))


def test_fusion_weights_and_shape_mismatch():
    assert two_stream_fuse([[0.6, 0.4]], [[0.3, 0.7]], alpha=(3.0, 1.0)).tolist() == [0]
    with pytest.raises(ValueError, match="differ"):
        two_stream_fuse(np.zeros((2, 3)), np.zeros((2, 4)))
