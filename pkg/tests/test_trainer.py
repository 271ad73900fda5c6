import numpy as np
import pytest

from dissectprune.concept_data import ArrayDataset
from dissectprune.model import ModelSpec, build_model, named_tensors
from dissectprune.pruner import PruneConfig, PruningMask
from dissectprune.trainer import (
    CheckpointSeries,
    TrainingError,
    TrainingSchedule,
    finetune_standard,
    learning_rate_at,
    restore,
    train,
)

SPEC = ModelSpec(input_size=(8, 8), widths=(4, 8), blocks=(1, 1), num_classes=2)


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 2, 48)
    x = rng.normal(size=(48, 3, 8, 8)).astype(np.float32) + y[:, None, None, None].astype(np.float32)
    return ArrayDataset(x, y)


def _same(a, b):
    return a.keys() == b.keys() and all(a[k].tobytes() == b[k].tobytes() for k in a)


@pytest.mark.parametrize("epoch,lr", [(0, 0.1), (90, 0.1), (91, 0.01), (100, 0.01), (135, 0.01), (136, 0.001), (150, 0.001)])
def test_reference_schedule(epoch, lr):
    sched = TrainingSchedule(epochs=182, lr=0.1, decay_epochs=(91, 136))
    assert learning_rate_at(sched, epoch) == pytest.approx(lr, rel=1e-12)


def test_schedule_domain():
    sched = TrainingSchedule(epochs=10, decay_epochs=(5,))
    with pytest.raises(ValueError):
        learning_rate_at(sched, 10)
    with pytest.raises(ValueError):
        learning_rate_at(sched, -1)
    with pytest.raises(ValueError):
        TrainingSchedule(epochs=10, decay_epochs=(5, 5))
    with pytest.raises(ValueError):
        TrainingSchedule(epochs=10, decay_epochs=(10,))
    with pytest.raises(ValueError):
        TrainingSchedule(epochs=10, lr=0)


def test_zero_epochs_returns_model_unchanged(data):
    model = build_model(SPEC, 0)
    before = named_tensors(model)
    series, model = train(model, data, TrainingSchedule(epochs=0))
    assert series.epochs == [0]
    assert _same(before, named_tensors(model))


def test_lr_trace_follows_schedule(data):
    sched = TrainingSchedule(epochs=4, lr=0.05, decay_epochs=(1, 3), batch_size=16)
    series, _ = train(build_model(SPEC, 0), data, sched)
    assert series.epochs == [0, 1, 2, 3, 4]
    assert len(series.lr_trace) == 4 * 3
    for epoch, _, lr in series.lr_trace:
        assert lr == learning_rate_at(sched, epoch)


def test_fully_masked_tensor_stays_zero(data):
    model = build_model(SPEC, 1)
    mask = PruningMask.full(named_tensors(model), PruneConfig())
    mask.masks["stage2.0.conv1.weight"][:] = False
    mask.masks["stem.0.weight"][0] = False
    series, model = train(model, data, TrainingSchedule(epochs=3, batch_size=16, weight_decay=1e-3), mask=mask)
    for snap in series.snapshots.values():
        assert not snap.tensors["stage2.0.conv1.weight"].any()
        assert not snap.tensors["stem.0.weight"][0].any()
    assert named_tensors(model)["stage2.0.conv1.weight"].sum() == 0


def test_replay_from_checkpoint_bit_identical(data, tmp_path):
    sched = TrainingSchedule(epochs=2, batch_size=16, seed=3)
    series, model = train(build_model(SPEC, 2), data, sched)
    series.save(tmp_path / "s")
    loaded = CheckpointSeries.load(tmp_path / "s")
    snap = loaded[1]
    resumed = restore(build_model(SPEC, 99), snap)
    series2, resumed = train(resumed, data, sched, start_epoch=1, momentum_state=snap.momentum)
    assert series2.epochs == [1, 2]
    assert _same(named_tensors(model), named_tensors(resumed))
    assert _same(series[2].momentum, series2[2].momentum)


def test_training_deterministic(data):
    sched = TrainingSchedule(epochs=2, batch_size=16, seed=5)
    a, _ = train(build_model(SPEC, 4), data, sched)
    b, _ = train(build_model(SPEC, 4), data, sched)
    for e in a.epochs:
        assert _same(a[e].tensors, b[e].tensors)


def test_series_roundtrip_and_hash_check(data, tmp_path):
    series, _ = train(build_model(SPEC, 0), data, TrainingSchedule(epochs=1, batch_size=16))
    series.save(tmp_path)
    assert sorted(p.name for p in (tmp_path / "epoch_1").iterdir()) == [
        "manifest.json", "optimizer.bin", "rng.bin", "tensors.bin"]
    back = CheckpointSeries.load(tmp_path)
    assert back.spec == SPEC and back.schedule == series.schedule
    assert _same(back[1].tensors, series[1].tensors)
    blob = bytearray((tmp_path / "epoch_1" / "tensors.bin").read_bytes())
    blob[-1] ^= 1
    (tmp_path / "epoch_1" / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(ValueError, match="hash"):
        CheckpointSeries.load(tmp_path)


def test_diverging_loss_reports_epoch(data):
    bad = ArrayDataset(np.full_like(data.images, np.nan), data.labels)
    with pytest.raises(TrainingError) as err:
        train(build_model(SPEC, 0), bad, TrainingSchedule(epochs=2, batch_size=16))
    assert err.value.epoch == 0


def test_finetune_standard_uses_final_lr(data):
    sched = TrainingSchedule(epochs=6, lr=0.1, decay_epochs=(2, 4))
    model = build_model(SPEC, 0)
    mask = PruningMask.full(named_tensors(model))
    before = named_tensors(model)
    assert _same(before, named_tensors(finetune_standard(model, mask, 0, sched, data)))
    trace = []
    finetune_standard(model, mask, 2, sched, data, callback=lambda e, s, lr, loss: trace.append(lr))
    assert trace and all(lr == learning_rate_at(sched, 5) for lr in trace)
