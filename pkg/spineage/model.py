"""
The spine-age network: five conv blocks, a 1x1x1 top block with global max
pooling and a single linear output, plus training, checkpointing and Grad-CAM.

Inputs are channels-first volumes [N, 1, D, H, W] where D runs over the slice
(z) axis of a ``Volume`` and H, W over its x and y axes.
"""
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional

import arrow
import numpy as np
from scipy import ndimage

from .autograd import (
    LOSSES,
    AdamState,
    BatchNormState,
    PlateauScheduler,
    ShapeException,
    Tensor,
    adam_step,
    batchnorm3d,
    conv3d,
    global_maxpool3d,
    linear,
    maxpool3d,
    no_grad,
    parameter,
    relu,
    scheduler_step,
)
from .file_io import atomic_write
from .synthvol import DESK_SHAPE, FULL_SCALE_SHAPE, Volume
from .utils import save_graymap, write_csv

logger = logging.getLogger(__name__)

BLOCK_CHANNELS = (32, 64, 128, 256, 256)
TOP_CHANNELS = 64
GRADCAM_BLOCK = 5
GRADCAM_CONTRAST = 288.0

CHECKPOINT_MAGIC = b"SPAGECKP"
CHECKPOINT_VERSION = 1
CHECKPOINT_PREFIX = struct.Struct('<8sII')

TRAINING_LOG_HEADER = ["epoch", "lr", "train_loss", "val_loss"]


class CheckpointException(Exception):
    pass


class TrainingException(Exception):
    pass


def input_shape_for(volume_shape):
    """(x, y, z) volume grid -> (D, H, W) network input."""
    x, y, z = volume_shape
    return (z, x, y)


@dataclass
class NetConfig:
    input_shape: tuple = input_shape_for(DESK_SHAPE)
    channels: tuple = BLOCK_CHANNELS
    top_channels: int = TOP_CHANNELS
    dtype: str = 'float32'
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(dim) for dim in self.input_shape)
        self.channels = tuple(int(width) for width in self.channels)

    def validate(self):
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ShapeException("input_shape needs three positive dims, got {}".format(self.input_shape))
        if len(self.channels) != 5 or min(self.channels) < 1 or self.top_channels < 1:
            raise ShapeException("The network has five conv blocks with positive widths, got {}".format(
                self.channels))
        if self.dtype not in ('float32', 'float64'):
            raise ShapeException("Unsupported network dtype {}".format(self.dtype))


FULL_SCALE = NetConfig(input_shape=input_shape_for(FULL_SCALE_SHAPE))


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 2
    lr: float = 0.01
    lr_factor: float = 0.3
    lr_patience: int = 5
    min_lr: float = 1e-6
    seed: int = 0


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


class SpineAgeNet:
    """
    Five conv3d -> batchnorm3d -> relu -> maxpool3d blocks, a 1x1x1 top block and a
    linear head. Parameters live in ``params`` under stable dotted names.
    """

    def __init__(self, config: NetConfig = None):
        self.config = config or NetConfig()
        self.config.validate()
        self.training = True
        self.age_offset = 0.0
        self.age_scale = 1.0
        self.activations = {}

        dtype = np.dtype(self.config.dtype)
        rng = np.random.default_rng(self.config.seed)
        self.params = {}
        self.bn_states = {}

        in_channels = 1
        for block, out_channels in enumerate(self.config.channels, start=1):
            self._add_conv("conv{}".format(block), rng, out_channels, in_channels, 3, dtype)
            self._add_batchnorm("bn{}".format(block), out_channels, dtype)
            in_channels = out_channels

        self._add_conv("top_conv", rng, self.config.top_channels, in_channels, 1, dtype)
        self._add_batchnorm("top_bn", self.config.top_channels, dtype)
        self.params["fc.weight"] = parameter(
            _he_normal(rng, (1, self.config.top_channels), self.config.top_channels, dtype), "fc.weight")
        self.params["fc.bias"] = parameter(np.zeros(1, dtype=dtype), "fc.bias")

    def _add_conv(self, name, rng, out_channels, in_channels, kernel, dtype):
        shape = (out_channels, in_channels, kernel, kernel, kernel)
        self.params[name + ".weight"] = parameter(
            _he_normal(rng, shape, in_channels * kernel ** 3, dtype), name + ".weight")
        self.params[name + ".bias"] = parameter(np.zeros(out_channels, dtype=dtype), name + ".bias")

    def _add_batchnorm(self, name, channels, dtype):
        self.params[name + ".gamma"] = parameter(np.ones(channels, dtype=dtype), name + ".gamma")
        self.params[name + ".beta"] = parameter(np.zeros(channels, dtype=dtype), name + ".beta")
        self.bn_states[name] = BatchNormState.create(channels, dtype)

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def zero_grad(self):
        for tensor in self.params.values():
            tensor.zero_grad()

    def parameter_count(self):
        return sum(tensor.data.size for tensor in self.params.values())

    def parameter_census(self):
        """Trainable parameter count per layer, in network order."""
        census = []
        for name, tensor in self.params.items():
            layer = name.rsplit(".", 1)[0]
            if census and census[-1][0] == layer:
                census[-1] = (layer, census[-1][1] + tensor.data.size)
            else:
                census.append((layer, tensor.data.size))
        return census

    def _block(self, x, conv, bn):
        x = conv3d(x, self.params[conv + ".weight"], self.params[conv + ".bias"])
        x = batchnorm3d(x, self.params[bn + ".gamma"], self.params[bn + ".beta"], self.bn_states[bn],
                        training=self.training)
        return relu(x)

    def forward(self, batch) -> Tensor:
        """Standardised predictions [N, 1]; ``predict`` maps them back to years."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        expected = (1,) + self.config.input_shape
        if x.data.ndim != 5 or x.shape[1:] != expected:
            raise ShapeException("Expected input [N, {}], got {}".format(
                ", ".join(str(dim) for dim in expected), x.shape))
        if x.dtype != np.dtype(self.config.dtype):
            x = Tensor(x.data.astype(self.config.dtype), requires_grad=x.requires_grad)

        for block in range(1, len(self.config.channels) + 1):
            x = self._block(x, "conv{}".format(block), "bn{}".format(block))
            self.activations["block{}".format(block)] = x
            x = maxpool3d(x)

        x = self._block(x, "top_conv", "top_bn")
        x = global_maxpool3d(x)
        return linear(x, self.params["fc.weight"], self.params["fc.bias"])

    def to_ages(self, outputs):
        return np.asarray(outputs, dtype=np.float64) * self.age_scale + self.age_offset

    def state_dict(self):
        state = {name: tensor.data.copy() for name, tensor in self.params.items()}
        for name, bn_state in self.bn_states.items():
            state[name + ".running_mean"] = bn_state.running_mean.copy()
            state[name + ".running_var"] = bn_state.running_var.copy()
        return state

    def load_state_dict(self, state):
        for name, tensor in self.params.items():
            if state[name].shape != tensor.shape:
                raise ShapeException("Block {} has shape {}, expected {}".format(
                    name, state[name].shape, tensor.shape))
            tensor.data = state[name].astype(tensor.dtype, copy=True)
        for name, bn_state in self.bn_states.items():
            bn_state.running_mean = state[name + ".running_mean"].copy()
            bn_state.running_var = state[name + ".running_var"].copy()


def to_network_input(volume: Volume, dtype=np.float32):
    """One volume as a [1, 1, D, H, W] batch."""
    return np.ascontiguousarray(volume.intensities.transpose(2, 0, 1)[None, None]).astype(dtype)


def forward(net: SpineAgeNet, batch, training=False):
    """Predicted ages, one per batch element."""
    previous = net.training
    net.training = training
    try:
        with no_grad():
            outputs = net.forward(batch)
    finally:
        net.training = previous
    return net.to_ages(outputs.data[:, 0])


def predict(net: SpineAgeNet, volumes, batch_size=2):
    """Eval-mode ages for a sequence of [1, D, H, W] arrays."""
    predictions = []
    for start in range(0, len(volumes), batch_size):
        batch = np.stack(volumes[start:start + batch_size])
        predictions.append(forward(net, batch))
    return np.concatenate(predictions) if predictions else np.zeros(0)


@dataclass
class Sample:
    subject_id: str
    age: float


@dataclass
class VolumeDataset:
    """Train and validation samples plus a loader returning a [1, D, H, W] array per subject."""
    train: List[Sample]
    val: List[Sample]
    loader: Callable[[str], np.ndarray]

    def batch(self, samples):
        volumes = np.stack([self.loader(sample.subject_id) for sample in samples])
        ages = np.array([sample.age for sample in samples], dtype=np.float64)
        return volumes, ages


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_loss: float


@dataclass
class TrainingLog:
    epochs: List[EpochRecord] = field(default_factory=list)
    steps: int = 0
    best_epoch: int = 0
    best_val_loss: float = math.inf
    started: str = ""
    finished: str = ""

    def rows(self):
        return [[record.epoch, record.lr, record.train_loss, record.val_loss] for record in self.epochs]


def age_loss(net, loss_fn, outputs, ages):
    """The loss between predicted and true ages, both in years."""
    centred = np.asarray(ages, dtype=np.float64) - net.age_offset
    return loss_fn(outputs * net.age_scale, centred[:, None])


def _validation_loss(net, dataset, loss_fn, batch_size):
    net.eval()
    total = 0.0
    with no_grad():
        for start in range(0, len(dataset.val), batch_size):
            samples = dataset.val[start:start + batch_size]
            volumes, ages = dataset.batch(samples)
            outputs = net.forward(volumes)
            total += float(age_loss(net, loss_fn, outputs, ages).data) * len(samples)
    return total / len(dataset.val)


def train(net: SpineAgeNet, dataset: VolumeDataset, loss='mse', epochs=None, batch_size=None,
          config: TrainConfig = None, checkpoint_path=None, config_hash=""):
    """
    Adam with a reduce-on-plateau schedule over seeded shuffles of the training
    split. The weights with the lowest validation loss are restored at the end
    and, when ``checkpoint_path`` is given, saved there on every improvement.
    """
    config = config or TrainConfig()
    epochs = config.epochs if epochs is None else epochs
    batch_size = config.batch_size if batch_size is None else batch_size
    if loss not in LOSSES:
        raise TrainingException("Unknown loss {!r}; expected one of {}".format(loss, sorted(LOSSES)))
    if not dataset.train or not dataset.val:
        raise TrainingException("Training needs nonempty train and val splits ({} / {})".format(
            len(dataset.train), len(dataset.val)))
    if epochs < 1 or batch_size < 1:
        raise TrainingException("epochs and batch_size must be positive")

    loss_fn = LOSSES[loss]
    train_ages = np.array([sample.age for sample in dataset.train], dtype=np.float64)
    net.age_offset = float(train_ages.mean())
    spread = float(train_ages.std())
    net.age_scale = spread if spread > 0 else 1.0

    rng = np.random.default_rng(config.seed)
    adam = AdamState(lr=config.lr)
    scheduler = PlateauScheduler(factor=config.lr_factor, patience=config.lr_patience, min_lr=config.min_lr)
    log = TrainingLog(started=arrow.utcnow().isoformat())
    best_state = net.state_dict()

    for epoch in range(1, epochs + 1):
        net.train()
        lr = adam.lr
        order = rng.permutation(len(dataset.train))
        total = 0.0

        for start in range(0, len(order), batch_size):
            samples = [dataset.train[index] for index in order[start:start + batch_size]]
            volumes, ages = dataset.batch(samples)

            net.zero_grad()
            batch_loss = age_loss(net, loss_fn, net.forward(volumes), ages)
            batch_loss.backward()
            adam_step({name: tensor.data for name, tensor in net.params.items()},
                      {name: tensor.grad for name, tensor in net.params.items()}, adam)
            total += float(batch_loss.data) * len(samples)

        train_loss = total / len(order)
        val_loss = _validation_loss(net, dataset, loss_fn, batch_size)
        log.epochs.append(EpochRecord(epoch, lr, train_loss, val_loss))
        logger.debug("epoch %d lr %g train %.6f val %.6f", epoch, lr, train_loss, val_loss)

        if val_loss < log.best_val_loss:
            log.best_val_loss = val_loss
            log.best_epoch = epoch
            best_state = net.state_dict()
            if checkpoint_path is not None:
                save_checkpoint(net, checkpoint_path, optimizer=adam, scheduler=scheduler, rng=rng,
                                epoch=epoch, config_hash=config_hash)

        scheduler_step(scheduler, adam, val_loss)

    net.load_state_dict(best_state)
    net.eval()
    log.steps = adam.step
    log.finished = arrow.utcnow().isoformat()
    logger.info("Trained %d epochs (%d steps); best val loss %.6f at epoch %d",
                epochs, log.steps, log.best_val_loss, log.best_epoch)

    return log


def write_training_log(path, log: TrainingLog):
    write_csv(path, TRAINING_LOG_HEADER, log.rows())


@dataclass
class GradCamMap:
    heatmap: np.ndarray
    block: int = GRADCAM_BLOCK
    slice_index: int = 0


def contrast(values):
    """g(x) = max(ln(288 x), 1), rescaled so that [0, 1] maps onto [0, 1]."""
    with np.errstate(divide='ignore'):
        mapped = np.maximum(np.log(GRADCAM_CONTRAST * values), 1.0)
    return (mapped - 1.0) / (math.log(GRADCAM_CONTRAST) - 1.0)


def _upsample(image, shape):
    rows = np.linspace(0.0, image.shape[0] - 1, shape[0])
    columns = np.linspace(0.0, image.shape[1] - 1, shape[1])
    grid = np.meshgrid(rows, columns, indexing='ij')
    return ndimage.map_coordinates(image, grid, order=1, mode='nearest')


def gradcam(net: SpineAgeNet, volume) -> GradCamMap:
    """
    Grad-CAM of the fifth block on the mid-depth slice, upsampled to the input's
    H x W plane. ``volume`` is a ``Volume`` or a single [1, 1, D, H, W] batch.
    """
    batch = to_network_input(volume, net.config.dtype) if isinstance(volume, Volume) else np.asarray(volume)
    if batch.ndim != 5 or batch.shape[0] != 1:
        raise ShapeException("gradcam takes a single input, got shape {}".format(batch.shape))

    net.eval()
    net.zero_grad()
    output = net.forward(batch)
    features = net.activations["block{}".format(GRADCAM_BLOCK)]
    output.sum().backward()

    depth, height, width = net.config.input_shape
    grads = features.grad if features.grad is not None else np.zeros_like(features.data)
    weights = grads[0].mean(axis=(1, 2, 3))
    cam = np.maximum(np.tensordot(weights, features.data[0], axes=1), 0.0).astype(np.float64)
    net.zero_grad()

    slice_index = cam.shape[0] // 2
    plane = cam[slice_index]
    low, high = plane.min(), plane.max()
    if not np.isfinite(high) or high - low <= 0:
        logger.warning("Grad-CAM activations are constant; returning a zero map")
        return GradCamMap(np.zeros((height, width)), slice_index=depth // 2)

    normalised = np.clip(_upsample((plane - low) / (high - low), (height, width)), 0.0, 1.0)
    return GradCamMap(np.clip(contrast(normalised), 0.0, 1.0), slice_index=depth // 2)


def write_gradcam(prefix, cam: GradCamMap):
    """``<prefix>.pgm`` image plus ``<prefix>.csv`` raw values (one row per H index)."""
    save_graymap(prefix + ".pgm", cam.heatmap)
    write_csv(prefix + ".csv", ["row"] + ["c{}".format(column) for column in range(cam.heatmap.shape[1])],
              ([row] + list(values) for row, values in enumerate(cam.heatmap)))


@dataclass
class Checkpoint:
    net: SpineAgeNet
    optimizer: Optional[AdamState]
    scheduler: Optional[PlateauScheduler]
    rng_state: Optional[dict]
    epoch: int
    config_hash: str
    version: int = CHECKPOINT_VERSION


def _blocks(net, optimizer):
    blocks = dict(net.state_dict())
    if optimizer is not None:
        for name, value in optimizer.first_moment.items():
            blocks["adam.m/" + name] = value
        for name, value in optimizer.second_moment.items():
            blocks["adam.v/" + name] = value
    return blocks


def save_checkpoint(net: SpineAgeNet, path, optimizer: AdamState = None, scheduler: PlateauScheduler = None,
                    rng=None, epoch=0, config_hash=""):
    directory = {
        "net": asdict(net.config),
        "age_offset": net.age_offset,
        "age_scale": net.age_scale,
        "epoch": int(epoch),
        "config_hash": config_hash,
        "saved": arrow.utcnow().isoformat(),
        "blocks": [],
    }
    if optimizer is not None:
        directory["adam"] = {"lr": optimizer.lr, "beta1": optimizer.beta1, "beta2": optimizer.beta2,
                             "eps": optimizer.eps, "step": optimizer.step}
    if scheduler is not None:
        directory["scheduler"] = asdict(scheduler)
    if rng is not None:
        directory["rng"] = rng.bit_generator.state

    payload = io.BytesIO()
    for name, value in _blocks(net, optimizer).items():
        value = np.ascontiguousarray(value)
        raw = value.astype(value.dtype.newbyteorder('<')).tobytes()
        directory["blocks"].append({"name": name, "dtype": value.dtype.str.lstrip('<>|='),
                                    "shape": list(value.shape), "offset": payload.tell(), "nbytes": len(raw)})
        payload.write(raw)

    encoded = json.dumps(directory, sort_keys=True).encode('utf-8')
    with atomic_write(path) as file_handler:
        file_handler.write(CHECKPOINT_PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(encoded)))
        file_handler.write(encoded)
        file_handler.write(payload.getvalue())


def read_checkpoint(path) -> Checkpoint:
    with open(path, 'rb') as file_handler:
        raw = file_handler.read()

    if len(raw) < CHECKPOINT_PREFIX.size:
        raise CheckpointException("{} is truncated".format(path))
    magic, version, directory_length = CHECKPOINT_PREFIX.unpack(raw[:CHECKPOINT_PREFIX.size])
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointException("{} is not a spine-age checkpoint".format(path))
    if version != CHECKPOINT_VERSION:
        raise CheckpointException("Unsupported checkpoint version {} (expected {})".format(
            version, CHECKPOINT_VERSION))

    start = CHECKPOINT_PREFIX.size + directory_length
    if len(raw) < start:
        raise CheckpointException("{} is truncated inside the directory".format(path))
    try:
        directory = json.loads(raw[CHECKPOINT_PREFIX.size:start].decode('utf-8'))
    except ValueError as exc:
        raise CheckpointException("{} has an unreadable directory: {}".format(path, exc))

    blocks = {}
    for entry in directory["blocks"]:
        end = start + entry["offset"] + entry["nbytes"]
        if end > len(raw):
            raise CheckpointException("{} is truncated in block {}".format(path, entry["name"]))
        dtype = np.dtype(entry["dtype"]).newbyteorder('<')
        block = np.frombuffer(raw, dtype=dtype, count=entry["nbytes"] // dtype.itemsize,
                              offset=start + entry["offset"])
        blocks[entry["name"]] = block.reshape(entry["shape"]).astype(dtype.newbyteorder('='))

    net = SpineAgeNet(NetConfig(**directory["net"]))
    try:
        net.load_state_dict(blocks)
    except KeyError as exc:
        raise CheckpointException("{} is missing block {}".format(path, exc))
    net.age_offset = directory["age_offset"]
    net.age_scale = directory["age_scale"]
    net.eval()

    optimizer = None
    if "adam" in directory:
        optimizer = AdamState(**directory["adam"])
        for name, value in blocks.items():
            if name.startswith("adam.m/"):
                optimizer.first_moment[name[len("adam.m/"):]] = value
            elif name.startswith("adam.v/"):
                optimizer.second_moment[name[len("adam.v/"):]] = value

    scheduler = PlateauScheduler(**directory["scheduler"]) if "scheduler" in directory else None

    return Checkpoint(net=net, optimizer=optimizer, scheduler=scheduler, rng_state=directory.get("rng"),
                      epoch=directory["epoch"], config_hash=directory["config_hash"], version=version)


def load_checkpoint(path) -> SpineAgeNet:
    return read_checkpoint(path).net


def restore_rng(state: Dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng
