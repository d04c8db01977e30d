"""Parameter counts, FLOP estimates and closed-form communication costs.

FLOP formula sheet (per sample, forward pass):

    conv        2 * Cout * H' * W' * Cin * kh * kw   (+ Cout * H' * W' with bias)
    linear      2 * in * out
    batchnorm   2 per output element
    relu        1 per element
    max-pool    kh * kw per output element
    avg-pool    1 per input element
    residual    1 per element of the sum

Training cost is ``train_factor`` (default 3) times the forward cost.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .models import DeployedModel, EdgeModel, FullModel, ServerModel, model_input_shape
from .nn import (
    BasicBlock,
    BatchNorm2d,
    Bottleneck,
    Conv2d,
    Flatten,
    GlobalAvgPool2d,
    Linear,
    MaxPool2d,
    Module,
    ReLU,
    Sequential,
)

TRAIN_FACTOR = 3
BYTES_PER_FLOAT = 4


def count_params(model: Module) -> int:
    """Trainable parameters, BN affine weights included, running stats excluded."""
    return int(sum(p.data.size for p in model.parameters()))


def _numel(shape) -> int:
    return int(np.prod(shape, dtype=np.int64))


def _conv(m: Conv2d, shape):
    out = m.output_shape(shape)
    kh, kw = m.kernel_size
    flops = 2 * out[0] * out[1] * out[2] * m.in_channels * kh * kw
    if m.bias is not None:
        flops += _numel(out)
    return flops, out


def _block(m, shape):
    total = 0
    x = shape
    convs = [(m.conv1, m.bn1), (m.conv2, m.bn2)]
    if isinstance(m, Bottleneck):
        convs.append((m.conv3, m.bn3))
    for i, (conv, _) in enumerate(convs):
        f, x = _conv(conv, x)
        total += f + 2 * _numel(x)
        if i < len(convs) - 1:
            total += _numel(x)  # relu
    if m.downsample is not None:
        f, s = layer_flops(m.downsample, shape)
        total += f
    # residual add and final relu
    total += 2 * _numel(x)
    return total, x


def layer_flops(m: Module, shape) -> tuple[int, tuple]:
    """Forward FLOPs of ``m`` for one sample of ``shape`` and its output shape."""
    shape = tuple(shape)
    if isinstance(m, Conv2d):
        return _conv(m, shape)
    if isinstance(m, BatchNorm2d):
        return 2 * _numel(shape), shape
    if isinstance(m, ReLU):
        return _numel(shape), shape
    if isinstance(m, MaxPool2d):
        out = m.output_shape(shape)
        return m.kernel_size[0] * m.kernel_size[1] * _numel(out), out
    if isinstance(m, GlobalAvgPool2d):
        return _numel(shape), m.output_shape(shape)
    if isinstance(m, Flatten):
        return 0, m.output_shape(shape)
    if isinstance(m, Linear):
        return 2 * m.in_features * m.out_features, m.output_shape(shape)
    if isinstance(m, (BasicBlock, Bottleneck)):
        return _block(m, shape)
    if isinstance(m, Sequential):
        total = 0
        for layer in m:
            f, shape = layer_flops(layer, shape)
            total += f
        return total, shape
    if isinstance(m, EdgeModel):
        a, s = layer_flops(m.extractor, shape)
        b, s = layer_flops(m.classifier, s)
        return a + b, s
    if isinstance(m, ServerModel):
        return layer_flops(m.graph, shape)
    if isinstance(m, (FullModel, DeployedModel)):
        a, s = layer_flops(m.extractor, shape)
        b, s = layer_flops(m.server, s)
        return a + b, s
    raise TypeError(f"no FLOP rule for {type(m).__name__}")


def count_flops(model: Module, input_shape=None) -> int:
    """Per-sample forward FLOPs; depends only on shapes, never on weights."""
    if input_shape is None:
        input_shape = model_input_shape(model)
    return int(layer_flops(model, input_shape)[0])


def train_flops(model: Module, input_shape=None, train_factor: float = TRAIN_FACTOR) -> int:
    return int(round(train_factor * count_flops(model, input_shape)))


def _nonneg(**kw) -> None:
    for k, v in kw.items():
        if v < 0:
            raise ValueError(f"{k} must be non-negative, got {v}")


def comm_cost_sl(feature_bytes: int, gradient_bytes: int, num_samples: int, epochs: int) -> int:
    """Split learning: (feature map + split-layer gradient) x samples x epochs."""
    _nonneg(feature_bytes=feature_bytes, gradient_bytes=gradient_bytes, num_samples=num_samples, epochs=epochs)
    return int((feature_bytes + gradient_bytes) * num_samples * epochs)


def comm_cost_gkt(feature_bytes: int, soft_label_bytes: int, num_samples: int, rounds: int) -> int:
    """GKT: (feature map + downloaded soft labels) x samples x rounds."""
    _nonneg(feature_bytes=feature_bytes, soft_label_bytes=soft_label_bytes, num_samples=num_samples, rounds=rounds)
    return int((feature_bytes + soft_label_bytes) * num_samples * rounds)


def feature_bytes(feature_shape) -> int:
    return BYTES_PER_FLOAT * _numel(feature_shape)


def soft_label_bytes(num_classes: int) -> int:
    return BYTES_PER_FLOAT * int(num_classes)


@dataclass
class CostReport:
    params: dict = field(default_factory=dict)
    flops_per_sample_fwd: dict = field(default_factory=dict)
    flops_per_sample_train: dict = field(default_factory=dict)
    train_factor: float = TRAIN_FACTOR
    total_petaflops: dict = field(default_factory=dict)
    comm_bytes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def cost_report(models: dict, num_samples: int = 0, epochs: int = 0, train_factor: float = TRAIN_FACTOR,
                feature_shape=None, num_classes: int | None = None, rounds: int = 0) -> CostReport:
    """Cost summary for named models; comm costs need ``feature_shape`` and ``num_classes``."""
    report = CostReport(train_factor=train_factor)
    for name, model in models.items():
        fwd = count_flops(model)
        report.params[name] = count_params(model)
        report.flops_per_sample_fwd[name] = fwd
        report.flops_per_sample_train[name] = int(round(train_factor * fwd))
        report.total_petaflops[name] = train_factor * fwd * num_samples * epochs / 1e15
    if feature_shape is not None and num_classes is not None:
        fb = feature_bytes(feature_shape)
        report.comm_bytes = {
            "feature_bytes_per_sample": fb,
            "soft_label_bytes_per_sample": soft_label_bytes(num_classes),
            "sl": comm_cost_sl(fb, fb, num_samples, epochs),
            "gkt": comm_cost_gkt(fb, soft_label_bytes(num_classes), num_samples, rounds),
        }
    return report
