import logging
import math
from types import SimpleNamespace

import numpy as np
import pytest

from spineage.autograd import AdamState, PlateauScheduler, Tensor, adam_step, mse_loss, smooth_l1_loss
from spineage.model import (
    CheckpointException,
    NetConfig,
    Sample,
    SpineAgeNet,
    TrainConfig,
    TrainingException,
    VolumeDataset,
    age_loss,
    contrast,
    forward,
    gradcam,
    input_shape_for,
    load_checkpoint,
    predict,
    read_checkpoint,
    restore_rng,
    save_checkpoint,
    to_network_input,
    train,
    write_gradcam,
    write_training_log,
)
from spineage.synthvol import Volume
from spineage.utils import read_csv

TINY = dict(input_shape=(2, 32, 32), channels=(2, 2, 2, 2, 2), top_channels=2, dtype='float64')

EXPECTED_CENSUS = [
    ("conv1", 896), ("bn1", 64), ("conv2", 55360), ("bn2", 128), ("conv3", 221312), ("bn3", 256),
    ("conv4", 884992), ("bn4", 512), ("conv5", 1769728), ("bn5", 512), ("top_conv", 16448),
    ("top_bn", 128), ("fc", 65),
]


def tiny_net(seed=0):
    return SpineAgeNet(NetConfig(seed=seed, **TINY))


def tiny_dataset(n_train=4, n_val=2, seed=0):
    rng = np.random.default_rng(seed)
    volumes = {}
    samples = []
    for index in range(n_train + n_val):
        subject_id = "sub-{}".format(index)
        volumes[subject_id] = rng.uniform(0.0, 1.0, size=(1,) + TINY["input_shape"])
        samples.append(Sample(subject_id, 30.0 + 8.0 * index))
    return VolumeDataset(train=samples[:n_train], val=samples[n_train:], loader=volumes.__getitem__)


def test_full_width_parameter_census():
    net = SpineAgeNet(NetConfig())

    assert net.parameter_census() == EXPECTED_CENSUS
    assert net.parameter_count() == 2950401


def test_input_shape_for():
    assert input_shape_for((96, 192, 8)) == (8, 96, 192)


def test_to_network_input_layout():
    intensities = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    volume = Volume(intensities=intensities, spacing=(1, 1, 1), mask=np.ones((2, 3, 4), np.uint8),
                    region_labels=np.zeros((2, 3, 4), np.uint8))
    batch = to_network_input(volume)

    assert batch.shape == (1, 1, 4, 2, 3)
    assert batch[0, 0, 3, 1, 2] == intensities[1, 2, 3]


def test_zero_head_predicts_bias():
    net = tiny_net().eval()
    net.params["fc.weight"].data[:] = 0.0
    net.params["fc.bias"].data[:] = 0.7
    batch = np.random.default_rng(1).uniform(size=(3, 1) + TINY["input_shape"])

    assert np.allclose(forward(net, batch), 0.7)


def test_eval_predictions_do_not_depend_on_batching():
    net = tiny_net(seed=2).eval()
    volumes = list(np.random.default_rng(3).uniform(size=(3, 1) + TINY["input_shape"]))

    together = predict(net, volumes, batch_size=3)
    alone = predict(net, volumes, batch_size=1)

    assert together.shape == (3,)
    assert np.allclose(together, alone)


def test_one_epoch_takes_two_steps(tmp_path):
    net = tiny_net()
    log = train(net, tiny_dataset(), epochs=1, batch_size=2, config=TrainConfig(seed=0))

    assert log.steps == 2
    assert len(log.epochs) == 1
    assert log.best_epoch == 1
    assert net.age_offset == pytest.approx(42.0)
    assert not net.training

    path = str(tmp_path / "log.csv")
    write_training_log(path, log)
    assert read_csv(path)[0]["epoch"] == "1"


def test_training_is_deterministic():
    states = []
    for _ in range(2):
        net = tiny_net(seed=4)
        train(net, tiny_dataset(), epochs=2, batch_size=2, config=TrainConfig(seed=4))
        states.append(net.state_dict())

    assert states[0].keys() == states[1].keys()
    for name in states[0]:
        assert np.array_equal(states[0][name], states[1][name])


def test_training_argument_checks():
    with pytest.raises(TrainingException):
        train(tiny_net(), tiny_dataset(), loss="huber", epochs=1)
    with pytest.raises(TrainingException):
        train(tiny_net(), tiny_dataset(n_val=0), epochs=1)


def test_training_writes_best_checkpoint(tmp_path):
    path = str(tmp_path / "model.ckpt")
    net = tiny_net()
    dataset = tiny_dataset()
    log = train(net, dataset, loss="smooth_l1", epochs=2, batch_size=2, checkpoint_path=path, config_hash="abc")

    checkpoint = read_checkpoint(path)
    assert checkpoint.epoch == log.best_epoch
    assert checkpoint.config_hash == "abc"
    assert checkpoint.optimizer.step == 2 * log.best_epoch

    volumes = [dataset.loader(sample.subject_id) for sample in dataset.val]
    assert np.allclose(predict(checkpoint.net, volumes), predict(net, volumes))


def test_checkpoint_round_trip(tmp_path):
    path = str(tmp_path / "model.ckpt")
    net = tiny_net(seed=5)
    net.age_offset, net.age_scale = 55.0, 12.5
    optimizer = AdamState(lr=0.003, step=7)
    optimizer.first_moment["fc.bias"] = np.array([0.25])
    optimizer.second_moment["fc.bias"] = np.array([0.5])
    rng = np.random.default_rng(9)
    rng.random(3)

    save_checkpoint(net, path, optimizer=optimizer, scheduler=PlateauScheduler(), rng=rng, epoch=3)
    checkpoint = read_checkpoint(path)

    volumes = list(np.random.default_rng(6).uniform(size=(2, 1) + TINY["input_shape"]))
    assert np.array_equal(predict(load_checkpoint(path), volumes), predict(net.eval(), volumes))
    assert checkpoint.net.age_scale == 12.5
    assert checkpoint.optimizer.lr == 0.003 and checkpoint.optimizer.step == 7
    assert np.array_equal(checkpoint.optimizer.first_moment["fc.bias"], [0.25])
    assert np.array_equal(checkpoint.optimizer.second_moment["fc.bias"], [0.5])
    assert math.isinf(checkpoint.scheduler.best)
    assert restore_rng(checkpoint.rng_state).random() == rng.random()


def test_checkpoint_rejects_damage(tmp_path):
    path = tmp_path / "model.ckpt"
    save_checkpoint(tiny_net(), str(path))
    raw = path.read_bytes()

    path.write_bytes(b"NOTACKPT" + raw[8:])
    with pytest.raises(CheckpointException):
        read_checkpoint(str(path))

    path.write_bytes(raw[:-10])
    with pytest.raises(CheckpointException):
        read_checkpoint(str(path))

    path.write_bytes(raw[:10])
    with pytest.raises(CheckpointException):
        read_checkpoint(str(path))


def test_contrast_endpoints():
    assert contrast(np.array([0.0]))[0] == 0.0
    assert contrast(np.array([1.0 / 288.0]))[0] == pytest.approx(0.0)
    assert contrast(np.array([1.0]))[0] == pytest.approx(1.0)


def test_gradcam_of_flat_head_is_zero(caplog):
    net = tiny_net()
    net.params["fc.weight"].data[:] = 0.0
    batch = np.random.default_rng(7).uniform(size=(1, 1) + TINY["input_shape"])

    with caplog.at_level(logging.WARNING):
        cam = gradcam(net, batch)

    assert cam.heatmap.shape == (32, 32)
    assert not cam.heatmap.any()
    assert "constant" in caplog.text


def test_gradcam_range(tmp_path):
    net = tiny_net(seed=8)
    batch = np.random.default_rng(8).uniform(size=(1, 1) + TINY["input_shape"])
    cam = gradcam(net, batch)

    assert cam.heatmap.shape == (32, 32)
    assert cam.heatmap.min() >= 0.0 and cam.heatmap.max() <= 1.0
    assert cam.slice_index == 1
    assert all(tensor.grad is None for tensor in net.params.values())

    prefix = str(tmp_path / "cam")
    write_gradcam(prefix, cam)
    assert len(read_csv(prefix + ".csv")) == 32


@pytest.mark.parametrize("error", [2.0, 5.0, 10.0, -15.0, 0.5])
def test_loss_switch_sits_at_one_year(error):
    net = SimpleNamespace(age_offset=50.0, age_scale=17.0)
    gradients = {}
    for loss_fn in (mse_loss, smooth_l1_loss):
        outputs = Tensor(np.array([[error / 17.0]]), requires_grad=True)
        age_loss(net, loss_fn, outputs, [50.0]).backward()
        gradients[loss_fn] = outputs.grad[0, 0]

    expected = 0.5 if abs(error) < 1.0 else 1.0 / (2.0 * abs(error))
    assert gradients[smooth_l1_loss] / gradients[mse_loss] == pytest.approx(expected)


def _adam_update(net, optimizer, batch, ages):
    net.train()
    net.zero_grad()
    age_loss(net, mse_loss, net.forward(batch), ages).backward()
    adam_step({name: tensor.data for name, tensor in net.params.items()},
              {name: tensor.grad for name, tensor in net.params.items()}, optimizer)


def test_reloaded_optimizer_continues_identically(tmp_path):
    path = str(tmp_path / "model.ckpt")
    batch = np.random.default_rng(4).uniform(size=(2, 1) + TINY["input_shape"])
    ages = [35.0, 61.0]
    net = tiny_net(seed=4)
    optimizer = AdamState(lr=0.01)

    _adam_update(net, optimizer, batch, ages)
    save_checkpoint(net, path, optimizer=optimizer)
    reloaded = read_checkpoint(path)

    _adam_update(net, optimizer, batch, ages)
    _adam_update(reloaded.net, reloaded.optimizer, batch, ages)

    assert reloaded.optimizer.step == optimizer.step == 2
    for name, tensor in net.params.items():
        assert np.allclose(reloaded.net.params[name].data, tensor.data), name


def test_gradcam_range_over_random_nets():
    rng = np.random.default_rng(21)
    for seed in range(50):
        cam = gradcam(tiny_net(seed=seed), rng.uniform(size=(1, 1) + TINY["input_shape"]))

        assert np.isfinite(cam.heatmap).all()
        assert cam.heatmap.min() >= 0.0 and cam.heatmap.max() <= 1.0


if __name__ == "__main__":
    test_full_width_parameter_census()
    test_training_is_deterministic()
