"""Pose regression network: architecture assembly, training, checkpoints.

The fixed layer chain maps a 1x64x64 input to a 3-vector of normalized
(pitch, roll, yaw) angles:

    conv 5x5 x30 -> tanh -> pool -> 30x30x30
    conv 3x3 x30 -> tanh -> pool -> 14x14x30
    conv 3x3 x30 -> tanh -> pool -> 6x6x30
    conv 4x4 x30 -> tanh          -> 3x3x30
    conv 3x3 x120 -> tanh         -> 1x1x120
    flatten -> fc 120 -> tanh -> fc 84 -> tanh -> fc 3 [-> tanh]

Checkpoint file layout (little-endian throughout):

    bytes 0..7    magic b"DPOSENET"
    bytes 8..11   uint32 format version
    bytes 12..15  uint32 header length
    header        UTF-8 JSON: layer specs, dtype, epochs trained,
                  normalizer scales, init seed, output-tanh flag
    body          raw parameter bytes per parameterized layer, in order:
                  weights, biases, weight momentum, bias momentum
    last 4 bytes  uint32 CRC-32 of everything before it
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .augment import augment
from .dataset_io import AngleNormalizer
from .depth_prep import NET_INPUT_SIDE, NetInput
from .nn_core import (
    Conv2D,
    Flatten,
    Layer,
    Linear,
    MaxPool2x2,
    SgdConfig,
    Tanh,
    l2_loss,
    sgd_step,
)

INPUT_SHAPE = (1, NET_INPUT_SIDE, NET_INPUT_SIDE)
OUTPUT_DIM = 3

CHECKPOINT_MAGIC = b"DPOSENET"
CHECKPOINT_VERSION = 1

_DTYPE_CODES = {"float64": "<f8", "float32": "<f4"}


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite; carries epoch, batch and learning rate."""

    def __init__(self, epoch: int, batch: int, lr: float):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}, lr {lr}")
        self.epoch = epoch
        self.batch = batch
        self.lr = lr


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint truncated or failed its integrity check."""


def _architecture(seed: int, dtype, tanh_output: bool) -> list[Layer]:
    rng = np.random.default_rng(seed)
    layers: list[Layer] = [
        Conv2D(1, 30, 5, rng, dtype), Tanh(), MaxPool2x2(),
        Conv2D(30, 30, 3, rng, dtype), Tanh(), MaxPool2x2(),
        Conv2D(30, 30, 3, rng, dtype), Tanh(), MaxPool2x2(),
        Conv2D(30, 30, 4, rng, dtype), Tanh(),
        Conv2D(30, 120, 3, rng, dtype), Tanh(),
        Flatten(),
        Linear(120, 120, rng, dtype), Tanh(),
        Linear(120, 84, rng, dtype), Tanh(),
        Linear(84, OUTPUT_DIM, rng, dtype),
    ]
    if tanh_output:
        layers.append(Tanh())
    return layers


class PoseModel:
    """Layer stack plus the angle normalizer needed to emit degrees."""

    def __init__(
        self,
        layers: list[Layer],
        normalizer: AngleNormalizer | None,
        dtype,
        seed: int,
        tanh_output: bool,
        epochs_trained: int = 0,
    ):
        self.layers = layers
        self.normalizer = normalizer
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.tanh_output = tanh_output
        self.epochs_trained = epochs_trained

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def param_layers(self):
        return [layer.params for layer in self.layers if layer.params is not None]

    def parameter_count(self) -> int:
        return sum(p.weights.size + p.biases.size for p in self.param_layers())

    def activation_shapes(self) -> list[tuple]:
        """Static shape of every intermediate activation, input first."""
        shapes = [INPUT_SHAPE]
        for layer in self.layers:
            shapes.append(layer.output_shape(shapes[-1]))
        return shapes

    def input_tensor(self, net_input: NetInput) -> np.ndarray:
        return net_input.data[None, :, :].astype(self.dtype)


def build_model(
    seed: int = 0,
    dtype=np.float64,
    tanh_output: bool = True,
    normalizer: AngleNormalizer | None = None,
) -> PoseModel:
    """Construct the fixed architecture with seeded initialization.

    The static shape chain is validated at construction; any mismatch is a
    build-time failure, not a latent forward error.
    """
    model = PoseModel(
        layers=_architecture(seed, dtype, tanh_output),
        normalizer=normalizer if normalizer is not None else AngleNormalizer(),
        dtype=dtype,
        seed=seed,
        tanh_output=tanh_output,
    )
    shapes = model.activation_shapes()
    flatten_input = shapes[13]
    if flatten_input != (120, 1, 1):
        raise AssertionError(f"conv chain must reach (120, 1, 1), got {flatten_input}")
    if shapes[-1] != (OUTPUT_DIM,):
        raise AssertionError(f"network must emit {OUTPUT_DIM}-vector, got {shapes[-1]}")
    return model


def predict(model: PoseModel, net_input: NetInput) -> np.ndarray:
    """Run inference and return (pitch, roll, yaw) in degrees."""
    if model.normalizer is None:
        raise ValueError("model has no angle normalizer; cannot produce degrees")
    raw = model.forward(model.input_tensor(net_input))
    return model.normalizer.denormalize(raw)


@dataclass
class EpochMetrics:
    """Per-epoch training record: losses are mean per image."""

    epoch: int
    lr: float
    train_loss: float
    val_loss: float | None = None
    val_mae_deg: np.ndarray | None = None


def _variant_seed(seed: int, epoch: int, index: int) -> int:
    return int(np.random.SeedSequence((seed, epoch, index)).generate_state(1)[0])


def train(
    model: PoseModel,
    train_data: Sequence[tuple[NetInput, np.ndarray]],
    val_data: Sequence[tuple[NetInput, np.ndarray]] | None,
    config: SgdConfig,
    epochs: int,
    seed: int = 0,
    batch_size: int = 64,
    augment_online: bool = True,
    log_fn: Callable[[EpochMetrics], None] | None = None,
) -> list[EpochMetrics]:
    """SGD training loop over (net_input, euler_deg) pairs.

    Each epoch reshuffles (seeded), optionally expands every image with its
    ten augmentation variants on the fly, and steps SGD once per batch on
    gradients averaged over the batch.  The (seed, init seed, augmentation
    seeds) triple fixes the whole trajectory.
    """
    if not train_data:
        raise ValueError("training set is empty")
    if batch_size <= 0:
        raise ValueError(f"batch size must be positive, got {batch_size}")

    targets = [model.normalizer.normalize(euler).astype(model.dtype) for _, euler in train_data]
    inputs = [model.input_tensor(net) for net, _ in train_data]
    shuffle_rng = np.random.default_rng(seed)
    param_layers = model.param_layers()
    metrics: list[EpochMetrics] = []

    for _ in range(epochs):
        epoch = model.epochs_trained
        lr = config.lr_at(epoch)
        order = shuffle_rng.permutation(len(train_data))

        def sample_stream():
            for idx in order:
                yield inputs[idx], targets[idx]
                if augment_online:
                    net, _ = train_data[idx]
                    for variant in augment(net, _variant_seed(seed, epoch, int(idx))):
                        yield model.input_tensor(variant), targets[idx]

        loss_sum = 0.0
        n_images = 0
        batch: list[tuple[np.ndarray, np.ndarray]] = []
        batch_index = 0

        def flush(batch_index: int) -> None:
            nonlocal loss_sum, n_images
            batch_loss = 0.0
            for x, t in batch:
                pred = model.forward(x)
                loss, grad = l2_loss(pred, t)
                model.backward(grad)
                batch_loss += loss
            if not np.isfinite(batch_loss):
                raise TrainingDivergedError(epoch, batch_index, lr)
            scale = 1.0 / len(batch)
            for p in param_layers:
                p.weight_grads *= scale
                p.bias_grads *= scale
            sgd_step(param_layers, config, epoch)
            loss_sum += batch_loss
            n_images += len(batch)

        for pair in sample_stream():
            batch.append(pair)
            if len(batch) == batch_size:
                flush(batch_index)
                batch = []
                batch_index += 1
        if batch:
            flush(batch_index)

        record = EpochMetrics(epoch=epoch, lr=lr, train_loss=loss_sum / n_images)
        if val_data:
            val_loss = 0.0
            abs_err = np.zeros(3)
            for net, euler in val_data:
                pred = model.forward(model.input_tensor(net))
                target = model.normalizer.normalize(euler)
                val_loss += float(np.sum((pred - target) ** 2))
                abs_err += np.abs(model.normalizer.denormalize(pred) - np.asarray(euler))
            record.val_loss = val_loss / len(val_data)
            record.val_mae_deg = abs_err / len(val_data)
        metrics.append(record)
        model.epochs_trained += 1
        if log_fn is not None:
            log_fn(record)
    return metrics


# ---------------------------------------------------------------------------
# Checkpoint serialization

def save_checkpoint(model: PoseModel, path: str | Path) -> None:
    """Serialize parameters, optimizer state and metadata; see module docstring."""
    header = {
        "arch": [list(layer.spec) for layer in model.layers],
        "dtype": model.dtype.name,
        "epochs_trained": model.epochs_trained,
        "seed": model.seed,
        "scales": list(model.normalizer.scale_deg) if model.normalizer else None,
        "tanh_output": model.tanh_output,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    code = _DTYPE_CODES[model.dtype.name]
    body = bytearray()
    for p in model.param_layers():
        for arr in (p.weights, p.biases, p.weight_momentum, p.bias_momentum):
            body += np.ascontiguousarray(arr, dtype=code).tobytes()
    payload = (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + struct.pack("<I", len(header_bytes))
        + header_bytes
        + bytes(body)
    )
    payload += struct.pack("<I", zlib.crc32(payload))
    Path(path).write_bytes(payload)


def _rebuild_layers(arch: list[list], dtype) -> list[Layer]:
    rng = np.random.default_rng(0)
    layers: list[Layer] = []
    for spec in arch:
        kind = spec[0]
        if kind == "conv":
            layers.append(Conv2D(spec[1], spec[2], spec[3], rng, dtype))
        elif kind == "linear":
            layers.append(Linear(spec[1], spec[2], rng, dtype))
        elif kind == "pool":
            layers.append(MaxPool2x2())
        elif kind == "tanh":
            layers.append(Tanh())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise CheckpointCorruptError(f"unknown layer kind {kind!r} in checkpoint")
    return layers


def load_checkpoint(path: str | Path) -> PoseModel:
    """Reload a checkpoint; forward outputs are bit-identical to the saved model."""
    blob = Path(path).read_bytes()
    if len(blob) < len(CHECKPOINT_MAGIC) + 12:
        raise CheckpointCorruptError(f"checkpoint {path} is truncated ({len(blob)} bytes)")
    if blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointCorruptError(f"checkpoint {path} has wrong magic bytes")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CheckpointCorruptError(f"checkpoint {path} failed its CRC-32 check")
    offset = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )
    offset += 8
    try:
        header = json.loads(blob[offset : offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"checkpoint header unreadable: {exc}") from None
    offset += header_len

    dtype = np.dtype(header["dtype"])
    code = _DTYPE_CODES[header["dtype"]]
    layers = _rebuild_layers(header["arch"], dtype)
    normalizer = (
        AngleNormalizer(tuple(header["scales"])) if header["scales"] is not None else None
    )
    model = PoseModel(
        layers=layers,
        normalizer=normalizer,
        dtype=dtype,
        seed=header["seed"],
        tanh_output=header["tanh_output"],
        epochs_trained=header["epochs_trained"],
    )
    itemsize = np.dtype(code).itemsize
    for p in model.param_layers():
        for arr in (p.weights, p.biases, p.weight_momentum, p.bias_momentum):
            nbytes = arr.size * itemsize
            if offset + nbytes > len(blob) - 4:
                raise CheckpointCorruptError("checkpoint body shorter than architecture requires")
            arr[...] = np.frombuffer(blob, dtype=code, count=arr.size, offset=offset).reshape(
                arr.shape
            )
            offset += nbytes
    if offset != len(blob) - 4:
        raise CheckpointCorruptError(
            f"checkpoint has {len(blob) - 4 - offset} unexpected trailing bytes"
        )
    return model
