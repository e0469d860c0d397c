import json

import numpy as np
import pytest

from instrumentnet import network as N
from instrumentnet import trainer as T
from instrumentnet.dataset import scan_training
from instrumentnet.dsp import MelSpectrogram


def toy_chunks(n_per_class=6, classes=(0, 3), frames=3, seed=0):
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for c in classes:
        centre = rng.standard_normal(128) * 2
        xs.append(centre + 0.3 * rng.standard_normal((n_per_class, frames, 128)))
        ys += [c] * n_per_class
    return np.concatenate(xs), np.array(ys)


FAST = dict(batch_size=8, max_epochs=3, validation_fraction=0.25)


@pytest.mark.parametrize("seconds,count,frames", [(0.5, 6, 21), (1.0, 3, 43), (1.5, 2, 64), (3.0, 1, 129)])
def test_slice_excerpt(seconds, count, frames):
    mel = MelSpectrogram(np.arange(129 * 128, dtype=float).reshape(129, 128))
    chunks = T.slice_excerpt(mel, seconds)
    assert len(chunks) == count and all(c.shape == (frames, 128) for c in chunks)
    np.testing.assert_array_equal(chunks[-1][0], mel.values[(count - 1) * frames])


def test_slice_excerpt_too_short():
    with pytest.raises(ValueError):
        T.slice_excerpt(np.zeros((20, 128)), 1.0)


def test_split_validation():
    rng = np.random.default_rng(0)
    tr, va = T.split_validation(100, 0.15, rng)
    assert len(va) == 15 and len(tr) == 85
    assert sorted(np.concatenate([tr, va])) == list(range(100))
    tr2, va2 = T.split_validation(100, 0.15, np.random.default_rng(0))
    np.testing.assert_array_equal(va, va2)
    for n in np.random.default_rng(1).integers(7, 500, 20):
        tr, va = T.split_validation(int(n), 0.15, rng)
        assert len(set(tr) & set(va)) == 0 and len(tr) + len(va) == n
    with pytest.raises(ValueError):
        T.split_validation(2, 0.15, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        T.TrainingConfig(validation_fraction=0.0)
    with pytest.raises(ValueError):
        T.TrainingConfig(window_seconds=0.7)
    with pytest.raises(ValueError):
        T.TrainingConfig(loss="hinge")
    assert T.TrainingConfig().window_frames() == 43


def test_early_stopping_counts_non_improving_epochs():
    stop = T.EarlyStopping(2)
    decisions = [stop.update(e, v) for e, v in enumerate([1.0, 0.8, 0.9, 0.85], 1)]
    assert decisions == [False, False, False, True]
    assert stop.best_epoch == 2
    rising = T.EarlyStopping(2)
    assert [rising.update(e, v) for e, v in enumerate([1.0, 1.1, 1.2], 1)] == [False, False, True]


def test_pairwise_sum_is_fixed_order():
    items = [1e16, 1.0, -1e16, 1.0, 3.0]
    assert T.pairwise_sum(items) == ((1e16 + 1.0) + (-1e16 + 1.0)) + 3.0
    arrays = [np.full(2, float(i)) for i in range(7)]
    np.testing.assert_array_equal(T.pairwise_sum(arrays), np.full(2, 21.0))


def test_one_hot():
    np.testing.assert_array_equal(T.one_hot(np.array([2, 0]), 3), [[0, 0, 1], [1, 0, 0]])


def test_train_is_deterministic_and_thread_invariant():
    x, y = toy_chunks()
    m1, r1 = T.train(x, y, T.TrainingConfig(seed=5, **FAST))
    m2, r2 = T.train(x, y, T.TrainingConfig(seed=5, **FAST))
    m3, r3 = T.train(x, y, T.TrainingConfig(seed=5, threads=3, **FAST))
    assert r1.epoch_losses == r2.epoch_losses == r3.epoch_losses
    for a, b, c in zip(m1.parameters, m2.parameters, m3.parameters):
        np.testing.assert_array_equal(a.value, b.value)
        np.testing.assert_array_equal(a.value, c.value)


def test_train_restores_best_epoch():
    x, y = toy_chunks()
    cfg = T.TrainingConfig(seed=1, **{**FAST, "max_epochs": 4, "patience_epochs": 4})
    model, report = T.train(x, y, cfg)
    tr_idx, va_idx = T.split_validation(len(x), cfg.validation_fraction, np.random.default_rng([cfg.seed, 0]))
    val = T.evaluate_loss(model, x[va_idx], y[va_idx], cfg.loss)
    assert val == pytest.approx(report.best_validation_loss, rel=1e-12)
    assert report.best_validation_loss == min(v for _, v in report.epoch_losses)
    assert report.stopped_epoch == 4


def test_train_stops_early():
    x, y = toy_chunks()
    _, report = T.train(x, y, T.TrainingConfig(seed=0, learning_rate=0.5, patience_epochs=1,
                                               **{**FAST, "max_epochs": 30}))
    assert report.stopped_epoch < 30


def test_train_rejects_bad_data():
    x, y = toy_chunks()
    with pytest.raises(ValueError):
        T.train(x[:6], y[:6])
    with pytest.raises(ValueError):
        T.train(x[:0], y[:0])


@pytest.mark.parametrize("loss", T.LOSSES)
def test_every_loss_trains(loss):
    x, y = toy_chunks()
    _, report = T.train(x, y, T.TrainingConfig(loss=loss, **{**FAST, "max_epochs": 1}))
    assert np.isfinite(report.epoch_losses[0][0])


def test_report_serialisation(tmp_path):
    report = T.TrainReport([(1.0, 0.9), (0.8, 0.85)], 2, 2, 0.85, 12.5)
    data = json.loads(report.save_json(tmp_path / "r.json").read_text())
    assert "wall_time" not in data and data["epoch_losses"][1]["validation"] == 0.85
    assert report.to_dict()["wall_time"] == 12.5
    assert report.log_lines()[-1].startswith("stopped epoch=2")


def test_load_training_chunks(tiny_corpus):
    x, y = T.load_training_chunks(scan_training(tiny_corpus / "train"), 1.0)
    assert x.shape == (36, 43, 128)
    assert list(np.bincount(y)) == [12, 12, 12]
