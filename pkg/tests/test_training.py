import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from flowsteer import autodiff as ad
from flowsteer.autodiff import DimensionError, Tensor
from flowsteer.data import DatasetError
from flowsteer.model import ConfigError
from flowsteer.training import (
    LAMBDA1,
    LAMBDA2,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    fold_views,
    kl_term,
    make_folds,
    prediction_loss,
    read_curve,
    save_run,
    total_loss,
    train,
    vae_loss,
    write_curve,
)

from conftest import tiny_sequences


def pl(pred, y, alpha=1.0):
    with ad.precision(np.float64):
        return prediction_loss(Tensor(np.asarray(pred, float)), np.asarray(y, float), alpha).item()


# --- losses ------------------------------------------------------------------------


def test_prediction_loss_examples():
    assert pl([0.3, -0.2], [0.3, -0.2]) == 0.0
    assert pl([1.0], [0.0]) == 1.0
    assert pl([0.0, 0.0], [0.0, 1.0]) == pytest.approx(np.e / (1 + np.e), rel=1e-12)


def test_prediction_loss_errors():
    with pytest.raises(DimensionError):
        prediction_loss(Tensor(np.zeros(3)), np.zeros(2))
    with pytest.raises(ValueError):
        prediction_loss(Tensor(np.zeros(0)), np.zeros(0))


vec = arrays(np.float64, st.integers(1, 12), elements=st.floats(-1, 1))


@settings(max_examples=60, deadline=None)
@given(vec, st.floats(0, 1), st.integers(0, 1000))
def test_prediction_loss_equal_magnitudes_is_mse(pred, mag, seed):
    signs = np.random.default_rng(seed).choice([-1.0, 1.0], size=pred.shape)
    y = signs * mag
    assert pl(pred, y) == pytest.approx(np.mean((pred - y) ** 2), rel=1e-9, abs=1e-15)


@settings(max_examples=60, deadline=None)
@given(vec, st.integers(0, 1000), st.floats(0.2, 3))
def test_prediction_loss_permutation_and_sign_invariance(pred, seed, alpha):
    rng = np.random.default_rng(seed)
    y = rng.uniform(-1, 1, pred.shape)
    base = pl(pred, y, alpha)
    p = rng.permutation(pred.size)
    assert pl(pred[p], y[p], alpha) == pytest.approx(base, rel=1e-9, abs=1e-15)
    assert pl(-pred, -y, alpha) == pytest.approx(base, rel=1e-12, abs=1e-15)


def test_prediction_loss_matches_its_gradient():
    pred = np.array([0.1, -0.4, 0.7])
    y = np.array([0.0, 0.5, -1.0])
    w = np.exp(np.abs(y))
    with ad.precision(np.float64):
        p = Tensor(pred, requires_grad=True)
        with ad.Tape() as tape:
            loss = prediction_loss(p, y)
        g = ad.backward(tape, loss, [p])[p].data
    np.testing.assert_allclose(g, 2 * w * (pred - y) / w.sum(), rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 4), elements=st.floats(-3, 3)), arrays(np.float64, (3, 4), elements=st.floats(-3, 3)))
def test_kl_nonnegative(mu, logvar):
    with ad.precision(np.float64):
        v = kl_term(Tensor(mu), Tensor(logvar)).item()
    assert v >= 0.0
    # exp(x) - x - 1 rounds to zero for |x| below ~1e-8, so test strictness away from that
    if np.abs(mu).max() > 1e-3 or np.abs(logvar).max() > 1e-3:
        assert v > 0.0
    if not mu.any() and not logvar.any():
        assert v == 0.0


def test_vae_loss_examples():
    with ad.precision(np.float64):
        x = Tensor(np.full((1, 3, 4, 4), 0.25))
        z = Tensor(np.zeros((1, 32)))
        assert vae_loss(x, x, z, z).item() == 0.0
        off = Tensor(np.full((1, 3, 4, 4), 1.25))
        assert vae_loss(x, off, z, z).item() == pytest.approx(LAMBDA1, rel=1e-12)
        mu = np.zeros((1, 32))
        mu[0, 0] = 1.0
        assert vae_loss(x, x, Tensor(mu), z).item() == pytest.approx(LAMBDA2 * 0.5 / 32, rel=1e-12)
    assert LAMBDA2 == pytest.approx(0.15 * np.exp(-2))
    with pytest.raises(DimensionError):
        vae_loss(x, Tensor(np.zeros((1, 3, 4, 5))), z, z)


def test_total_loss_examples():
    lp, lv = Tensor(0.3), Tensor(0.2)
    assert total_loss(lp, lv, 0) is lp
    assert total_loss(lp, Tensor(0.0), 1).item() == pytest.approx(0.3)
    assert total_loss(lp, lv, 1).item() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        total_loss(lp, lv, 0.5)


# --- folds --------------------------------------------------------------------------


def test_folds_of_ten():
    plan = make_folds(100, 10)
    assert [len(f) for f in plan.folds] == [10] * 10
    allidx = np.concatenate(plan.folds)
    assert sorted(allidx.tolist()) == list(range(100))
    assert all(np.all(np.diff(f) == 1) for f in plan.folds)


def test_fold_split_uses_ninety_ten_of_the_rest():
    plan = make_folds(100, 10)
    tr, va, te = plan.split(0)
    np.testing.assert_array_equal(te, np.arange(10))
    assert len(tr) == 81 and len(va) == 9
    assert set(tr) | set(va) == set(range(10, 100))
    assert not set(tr) & set(va)
    np.testing.assert_array_equal(va, np.arange(91, 100))
    tr, va, te = plan.split(9)
    assert set(te) == set(range(90, 100)) and not (set(tr) | set(va)) & set(te)


def test_fold_errors():
    with pytest.raises(ValueError):
        make_folds(5, 10)
    with pytest.raises(IndexError):
        make_folds(20, 10).split(10)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 10), st.integers(0, 40))
def test_folds_partition(k, extra):
    size = k + extra
    plan = make_folds(size, k)
    sizes = [len(f) for f in plan.folds]
    assert sum(sizes) == size and max(sizes) - min(sizes) <= 1
    assert np.array_equal(np.concatenate(plan.folds), np.arange(size))


# --- config ----------------------------------------------------------------------------


def test_config_file_round_trip(tmp_path):
    cfg = TrainConfig(modality="flow", steps=7, lr=0.01, alpha=2.0)
    p = tmp_path / "c.txt"
    p.write_text("# comment\n" + cfg.to_text())
    assert TrainConfig.from_file(p) == cfg
    assert cfg.with_overrides(steps=3, lr=None).steps == 3


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"colour": "red"})
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"steps": "many"})
    with pytest.raises(ConfigError):
        TrainConfig(fusion="hybrid")
    with pytest.raises(ConfigError):
        TrainConfig(alpha=0)
    p = tmp_path / "bad.txt"
    p.write_text("steps 3\n")
    with pytest.raises(ConfigError):
        TrainConfig.from_file(p)


# --- training ----------------------------------------------------------------------------

SMALL = dict(batch=2, seq_len=4, steps=3)


def test_training_is_deterministic(tmp_path):
    seqs = tiny_sequences(3, 6)
    cfg = TrainConfig(modality="flow", **SMALL)
    for name in ("a", "b"):
        save_run(train(cfg, seqs[:2], seqs[2:]), tmp_path / name)
    for f in ("model.ckpt", "curve.csv", "config.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    other = train(TrainConfig(modality="flow", seed=1, **SMALL), seqs[:2], seqs[2:])
    assert other.curve != read_curve(tmp_path / "a" / "curve.csv")


def test_learning_curve_has_one_row_per_step(tmp_path):
    seqs = tiny_sequences(2, 2, seed=1)
    cfg = TrainConfig(batch=1, seq_len=2, steps=100, val_every=25)
    result = train(cfg, seqs[:1], seqs[1:])
    assert [c[0] for c in result.curve] == list(range(1, 101))
    assert [c[0] for c in result.curve if c[2] is not None] == [25, 50, 75, 100]
    write_curve(result.curve, tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "step,train_mse,val_mse" and len(lines) == 101
    assert read_curve(tmp_path / "c.csv") == result.curve


def test_descent_on_flow_toy():
    # steering equals the (uniform) horizontal flow / 20; every step sees the same batch
    seqs = tiny_sequences(2, 6, seed=2)
    cfg = TrainConfig(modality="flow", batch=6, seq_len=4, steps=15, lr=3e-3)
    curve = train(cfg, seqs, []).curve
    assert curve[-1][1] < curve[0][1]


@pytest.mark.parametrize("encoder,head", [("vae", "ncp"), ("cnn", "lstm")])
def test_other_architectures_train(encoder, head):
    seqs = tiny_sequences(2, 4, seed=3)
    cfg = TrainConfig(encoder=encoder, head=head, modality="flow", **SMALL)
    result = train(cfg, seqs[:1], seqs[1:])
    assert len(result.curve) == 3 and np.isfinite(result.curve[-1][1])


def test_hybrid_fusion_trains():
    seqs = tiny_sequences(2, 4, seed=3)
    cfg = TrainConfig(fusion="hybrid", modality="flow", batch=1, seq_len=2, steps=2)
    assert len(train(cfg, seqs[:1], seqs[1:]).curve) == 2


def test_divergence_is_reported():
    seqs = tiny_sequences(2, 4, seed=4)
    cfg = TrainConfig(lr=1e30, batch=2, seq_len=4, steps=5)
    with pytest.raises(TrainingDiverged):
        train(cfg, seqs[:1], seqs[1:])


def test_empty_training_split():
    with pytest.raises(DatasetError):
        train(TrainConfig(**SMALL), [], [])
    with pytest.raises(DatasetError):
        train(TrainConfig(**SMALL), tiny_sequences(1, 3), [])


def test_evaluate_uses_non_overlapping_windows():
    seqs = tiny_sequences(3, 9, seed=5)
    result = train(TrainConfig(modality="flow", **SMALL), seqs[:2], [])
    ev = evaluate(result.model, seqs[2:], seq_len=4)
    assert ev.predictions.shape == (2, 4)
    np.testing.assert_array_equal(ev.labels, seqs[2].labels[:8].reshape(2, 4))
    assert ev.mse == pytest.approx(np.mean((ev.predictions.astype(float) - ev.labels) ** 2))


def test_fold_views_select_sequences():
    seqs = tiny_sequences(10, 2, with_flow=False)
    tr, va, te = fold_views(seqs, make_folds(10, 5), 1)
    assert [s.name for s in te] == ["seq_0002", "seq_0003"]
    assert [s.name for s in va] == ["seq_0009"]
    assert len(tr) == 7
