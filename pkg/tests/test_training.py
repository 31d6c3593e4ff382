import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctzip import models, training
from ctzip.errors import ConfigError, FormatError, ShapeError
from ctzip.synthdata import PorousSpec, porous_dataset


def test_splitmix_reference_outputs():
    r = training.SplitMix64(0)
    assert [r.next() for _ in range(3)] == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
    r = training.SplitMix64(1234567)
    assert [r.next() for _ in range(5)] == [6457827717110365317, 3203168211198807973, 9817491932198370423,
                                            4593380528125082431, 16408922859458223821]


@given(st.integers(0, 300), st.integers(0, 2 ** 64 - 1))
def test_permutation_is_permutation(n, seed):
    p = training.permutation(n, seed)
    assert sorted(p) == list(range(n))
    assert p == training.permutation(n, seed)


def test_below_range():
    r = training.SplitMix64(42)
    draws = [r.below(7) for _ in range(7000)]
    counts = np.bincount(draws, minlength=7)
    assert counts.min() > 850 and counts.max() < 1150


def test_split_sizes_and_disjointness():
    items = list(range(256))
    tr, va = training.split_dataset(items, 0.8, seed=0)
    assert len(tr) == 204 and len(va) == 52
    assert sorted(tr + va) == items
    assert training.split_dataset(items, 0.8, 0) == (tr, va)
    assert training.split_dataset(items, 0.8, 1) != (tr, va)


@given(st.integers(2, 200), st.floats(0.01, 0.99))
def test_split_counts_property(n, frac):
    tr, va = training.split_dataset(list(range(n)), frac, 3)
    assert len(tr) == min(max(math.floor(frac * n + 1e-9), 1), n - 1)
    assert len(tr) + len(va) == n and va


def test_split_errors():
    with pytest.raises(ConfigError):
        training.split_dataset([1], 0.8)
    with pytest.raises(ConfigError):
        training.split_dataset([1, 2], 1.0)


@pytest.mark.parametrize("kwargs", [dict(epochs=0), dict(batch_size=0), dict(split_fraction=1.0), dict(lr=0)])
def test_config_invariants(kwargs):
    with pytest.raises(ConfigError):
        training.TrainConfig(**kwargs)


def _tiny_images(n, size=16, seed=0):
    return list(porous_dataset(n, PorousSpec(size, size, correlation_length=4, seed=seed)))


def test_single_image_single_step():
    m = models.build_dcnn("l1", 16)
    log = training.train(m, _tiny_images(1), training.TrainConfig(epochs=1, batch_size=1))
    assert len(log.steps) == 1 and len(log.epochs) == 1
    assert math.isnan(log.epochs[0].val_loss)
    assert all(p.step_count == 1 for p in m.params())


@pytest.mark.parametrize("n,batch,epochs", [(10, 3, 2), (8, 8, 1), (5, 16, 3)])
def test_step_count(n, batch, epochs):
    m = models.build_dcnn("l1", 16)
    log = training.train(m, _tiny_images(n), training.TrainConfig(epochs=epochs, batch_size=batch))
    assert len(log.steps) == epochs * math.ceil(n / batch)
    assert [s.step for s in log.steps if s.epoch == 0] == list(range(math.ceil(n / batch)))


def test_epoch_loss_is_sample_weighted_mean():
    m = models.build_dcnn("l1", 16)
    log = training.train(m, _tiny_images(7), training.TrainConfig(epochs=1, batch_size=3))
    sizes = [3, 3, 1]
    expected = sum(s.loss * k for s, k in zip(log.steps, sizes)) / 7
    assert log.epochs[0].train_loss == pytest.approx(expected, rel=1e-15)


def test_vq_step_components():
    m = models.build_vqvae("l1", 16, 8)
    log = training.train(m, _tiny_images(4), training.TrainConfig(epochs=1, batch_size=2, kind="vqvae"))
    for s in log.steps:
        assert s.loss == pytest.approx(s.reconstruction + s.codebook + s.commitment, rel=1e-15)
        assert s.commitment == pytest.approx(0.25 * s.codebook, rel=1e-12)


def test_validation_does_not_touch_parameters():
    m = models.build_vqvae("l1", 16, 8)
    before = [p.value.copy() for p in m.params()]
    loss = training.evaluate_loss(m, _tiny_images(5), batch_size=2)
    assert np.isfinite(loss)
    assert all(np.array_equal(a, p.value) for a, p in zip(before, m.params()))
    assert all(not p.grad.any() for p in m.params())


def test_validation_reported_per_epoch():
    imgs = _tiny_images(10)
    m = models.build_dcnn("l1", 16)
    log = training.train(m, imgs[:8], training.TrainConfig(epochs=2, batch_size=4), imgs[8:])
    assert all(np.isfinite(e.val_loss) for e in log.epochs)
    assert log.epochs[-1].val_loss == training.evaluate_loss(m, imgs[8:], 4)


def test_reproducible_logs_and_weights():
    imgs = _tiny_images(6)
    runs = []
    for _ in range(2):
        m = models.build_vqvae("l1", 16, 8, seed=4)
        cfg = training.TrainConfig(epochs=2, batch_size=4, seed=4, kind="vqvae", record_time=False)
        log = training.train(m, imgs[:4], cfg, imgs[4:])
        runs.append((log, models.checkpoint_bytes(m)))
    assert runs[0][0].losses() == runs[1][0].losses()
    assert runs[0][0].epochs == runs[1][0].epochs  # seconds are 0 with record_time off
    assert runs[0][1] == runs[1][1]


def test_shuffle_depends_on_epoch():
    assert training.permutation(20, 5) != training.permutation(20, 6)


def test_wrong_input_shape():
    m = models.build_dcnn("l1", 16)
    with pytest.raises(ShapeError):
        training.train(m, _tiny_images(2, size=32), training.TrainConfig(epochs=1))


def test_bce_decreases_over_first_epochs():
    imgs = list(porous_dataset(64, PorousSpec(correlation_length=16)))
    m = models.build_dcnn("l1", 64)
    log = training.train(m, imgs, training.TrainConfig(epochs=10, batch_size=4, lr=2e-3))
    losses = [e.train_loss for e in log.epochs]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_loss_csv_round_trip(tmp_path):
    m = models.build_dcnn("l1", 16)
    log = training.train(m, _tiny_images(4), training.TrainConfig(epochs=3, batch_size=2), _tiny_images(2, seed=9))
    p = tmp_path / "loss.csv"
    training.export_loss_csv(log, p)
    assert p.read_text().splitlines()[0] == ",".join(training.LOSS_CSV_HEADER)
    assert training.read_loss_csv(p) == log.epochs
    p.write_text("epoch,loss\n")
    with pytest.raises(FormatError):
        training.read_loss_csv(p)


def test_as_batch():
    imgs = _tiny_images(3)
    x = training.as_batch(imgs)
    assert x.shape == (3, 16, 16, 1) and x.dtype == np.float64
    assert training.as_batch(x) is x
    assert training.as_batch([np.zeros((2, 2))]).shape == (1, 2, 2, 1)
