"""Edge/server split ResNets, the deployed composition, and checkpoint files.

The edge model is a feature extractor (conv, BN, ReLU, max-pool keeping the
spatial size) followed by a small classifier; the server model consumes the
extractor's feature map directly. Builders are deterministic in ``seed``.
"""

from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

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
from .tensor import Tensor

BLOCKS = {"basic": BasicBlock, "bottleneck": Bottleneck}


@dataclass(frozen=True)
class StageSpec:
    block: str
    planes: int
    blocks: int
    stride: int = 1

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ValueError(f"unknown block type {self.block!r}")
        if self.blocks < 1 or self.planes < 1:
            raise ValueError("stage needs at least one block and one plane")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description for one side of the split.

    ``stem_width`` is set for edge specs (the extractor's output channels) and
    ``None`` for server specs, whose input is the extractor output.
    """

    name: str
    input_shape: tuple
    num_classes: int
    stages: tuple = field(default_factory=tuple)
    stem_width: int | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")
        channels = self.stem_width if self.stem_width is not None else self.input_shape[0]
        for stage in self.stages:
            if stage.planes < 1:
                raise ValueError(f"bad stage {stage}")
            channels = stage.planes * BLOCKS[stage.block].expansion
        if channels < 1:
            raise ValueError("stage plan produces no channels")

    @property
    def output_channels(self) -> int:
        channels = self.stem_width if self.stem_width is not None else self.input_shape[0]
        for stage in self.stages:
            channels = stage.planes * BLOCKS[stage.block].expansion
        return channels

    def digest(self) -> bytes:
        return hashlib.sha256(repr(self).encode()).digest()


def _make_stages(stages: Sequence[StageSpec], inplanes: int, rng) -> tuple[list[Module], int]:
    layers = []
    for stage in stages:
        block_cls = BLOCKS[stage.block]
        blocks = []
        for i in range(stage.blocks):
            blocks.append(block_cls(inplanes, stage.planes, stride=stage.stride if i == 0 else 1, rng=rng))
            inplanes = stage.planes * block_cls.expansion
        layers.append(Sequential(*blocks))
    return layers, inplanes


class EdgeModel(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        in_ch = spec.input_shape[0]
        width = spec.stem_width
        self.spec = spec
        self.extractor = Sequential(
            Conv2d(in_ch, width, 3, stride=1, padding=1, rng=rng),
            BatchNorm2d(width),
            ReLU(),
            MaxPool2d(3, stride=1, padding=1),
            names=["conv1", "bn1", "relu", "maxpool"],
        )
        stages, out_ch = _make_stages(spec.stages, width, rng)
        names = [f"layer{i + 1}" for i in range(len(stages))]
        self.classifier = Sequential(
            *stages, GlobalAvgPool2d(), Flatten(), Linear(out_ch, spec.num_classes, rng=rng),
            names=names + ["avgpool", "flatten", "fc"],
        )

    @property
    def feature_shape(self) -> tuple:
        return self.extractor.output_shape(tuple(self.spec.input_shape))

    def forward(self, x):
        return self.classifier(self.extractor(x))

    def output_shape(self, in_shape):
        return self.classifier.output_shape(self.extractor.output_shape(in_shape))


class ServerModel(Module):
    def __init__(self, spec: ModelSpec, seed: int = 0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.spec = spec
        stages, out_ch = _make_stages(spec.stages, spec.input_shape[0], rng)
        names = [f"layer{i + 1}" for i in range(len(stages))]
        self.graph = Sequential(
            *stages, GlobalAvgPool2d(), Flatten(), Linear(out_ch, spec.num_classes, rng=rng),
            names=names + ["avgpool", "flatten", "fc"],
        )

    def forward(self, h):
        return self.graph(h)

    def output_shape(self, in_shape):
        return self.graph.output_shape(in_shape)


class FullModel(Module):
    """Extractor and server stacked into one model trained end to end.

    This is the non-split network used by the FedAvg and centralized
    baselines (e.g. extractor + ResNet-55 is the ResNet-56 equivalent).
    """

    def __init__(self, extractor: Module, server: ServerModel):
        super().__init__()
        self.extractor = extractor
        self.server = server

    def forward(self, x):
        return self.server(self.extractor(x))

    def output_shape(self, in_shape):
        return self.server.output_shape(self.extractor.output_shape(in_shape))


class DeployedModel(Module):
    """A client's extractor composed with the shared server model (eval mode)."""

    def __init__(self, edge: EdgeModel, server: ServerModel):
        super().__init__()
        fshape = edge.feature_shape
        if tuple(server.spec.input_shape) != tuple(fshape):
            raise ValueError(f"server expects input {server.spec.input_shape}, extractor emits {fshape}")
        self.extractor = edge.extractor
        self.server = server

    def forward(self, x):
        self.extractor.eval()
        self.server.eval()
        return self.server(self.extractor(_as_tensor(x)))

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data.argmax(axis=1)

    def output_shape(self, in_shape):
        return self.server.output_shape(self.extractor.output_shape(in_shape))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- specs and builders -------------------------------------------------------

def resnet8_spec(num_classes: int = 10, width: int = 16, image_size: int = 32, in_channels: int = 3) -> ModelSpec:
    # Two bottlenecks: conv1 + 2x3 convs + fc = 8 layers, ~11K parameters.
    return ModelSpec(
        name=f"resnet8-w{width}",
        input_shape=(in_channels, image_size, image_size),
        num_classes=num_classes,
        stages=(StageSpec("bottleneck", width, 2, 1),),
        stem_width=width,
    )


def small_edge_spec(variant: str, num_classes: int = 10, width: int = 16, image_size: int = 32,
                    in_channels: int = 3) -> ModelSpec:
    blocks = {"resnet4": 1, "resnet6": 2}
    if variant not in blocks:
        raise ValueError(f"unknown small edge variant {variant!r}; expected resnet4 or resnet6")
    return ModelSpec(
        name=f"{variant}-w{width}",
        input_shape=(in_channels, image_size, image_size),
        num_classes=num_classes,
        stages=(StageSpec("basic", width, blocks[variant], 1),),
        stem_width=width,
    )


_TOY = re.compile(r"^toy\(?(\d+)\)?$")


def server_blocks_per_stage(depth) -> int:
    """Bottleneck blocks per stage: 55 -> 6, 109 -> 12, ``toy(k)`` -> k."""
    if depth in (55, "55"):
        return 6
    if depth in (109, "109"):
        return 12
    m = _TOY.match(str(depth))
    if m and int(m.group(1)) >= 1:
        return int(m.group(1))
    raise ValueError(f"unsupported server depth {depth!r}; expected 55, 109 or toy(k)")


def server_spec(depth=55, num_classes: int = 10, feature_shape=(16, 32, 32), width: int = 16) -> ModelSpec:
    n = server_blocks_per_stage(depth)
    return ModelSpec(
        name=f"server-{depth}-w{width}",
        input_shape=tuple(feature_shape),
        num_classes=num_classes,
        stages=(
            StageSpec("bottleneck", width, n, 1),
            StageSpec("bottleneck", 2 * width, n, 2),
            StageSpec("bottleneck", 4 * width, n, 2),
        ),
    )


def build_resnet8(num_classes: int = 10, seed: int = 0, **kw) -> EdgeModel:
    return EdgeModel(resnet8_spec(num_classes, **kw), seed=seed)


def build_small_edge(variant: str, num_classes: int = 10, seed: int = 0, **kw) -> EdgeModel:
    return EdgeModel(small_edge_spec(variant, num_classes, **kw), seed=seed)


def build_server_resnet(depth=55, num_classes: int = 10, feature_shape=(16, 32, 32), width: int = 16,
                        seed: int = 0) -> ServerModel:
    return ServerModel(server_spec(depth, num_classes, feature_shape, width), seed=seed)


def build_full_model(edge_spec: ModelSpec, server: ModelSpec, seed: int = 0) -> FullModel:
    edge = EdgeModel(edge_spec, seed=seed)
    return FullModel(edge.extractor, ServerModel(server, seed=seed + 1))


def extract_features(edge: EdgeModel, batch, train: bool = False) -> Tensor:
    """Run the extractor; eval-mode BN unless ``train`` is set."""
    edge.extractor.train(train)
    return edge.extractor(_as_tensor(batch))


def assemble_deployed_model(edge: EdgeModel, server: ServerModel) -> DeployedModel:
    return DeployedModel(edge, server)


# Desk-scale defaults: 8x8 inputs, 8-channel stem, toy(1) server at width 4.
TOY_EDGE_WIDTH = 8
TOY_SERVER_WIDTH = 4


def toy_specs(num_classes: int = 4, image_size: int = 8, in_channels: int = 3,
              edge_width: int = TOY_EDGE_WIDTH, server_width: int = TOY_SERVER_WIDTH, server_depth="toy(1)"):
    """ResNet-8-shaped edge and toy(k) server with reduced widths."""
    edge = ModelSpec(
        name="toy-edge",
        input_shape=(in_channels, image_size, image_size),
        num_classes=num_classes,
        stages=(StageSpec("bottleneck", max(edge_width // 2, 1), 2, 1),),
        stem_width=edge_width,
    )
    server = server_spec(server_depth, num_classes, (edge_width, image_size, image_size), width=server_width)
    return edge, server


def named_model(name: str, num_classes: int = 10, seed: int = 0) -> Module:
    """Model registry used by the CLI and the cost report."""
    feat = (16, 32, 32)
    if name == "resnet8":
        return build_resnet8(num_classes, seed=seed)
    if name in ("resnet4", "resnet6"):
        return build_small_edge(name, num_classes, seed=seed)
    if name in ("resnet55", "resnet109"):
        return build_server_resnet(int(name[6:]), num_classes, feat, seed=seed)
    if name in ("resnet56", "resnet110"):
        depth = 55 if name == "resnet56" else 109
        return build_full_model(resnet8_spec(num_classes), server_spec(depth, num_classes, feat), seed=seed)
    if name in ("toy-edge", "toy-server", "toy-full"):
        edge, server = toy_specs(num_classes)
        if name == "toy-edge":
            return EdgeModel(edge, seed=seed)
        if name == "toy-server":
            return ServerModel(server, seed=seed)
        return build_full_model(edge, server, seed=seed)
    raise ValueError(f"unknown model {name!r}")


def model_input_shape(model: Module) -> tuple:
    """Per-sample input shape of a built model."""
    if isinstance(model, (EdgeModel, ServerModel)):
        return tuple(model.spec.input_shape)
    if isinstance(model, FullModel):
        # The extractor preserves spatial size, so the server input gives it.
        return (model.extractor[0].in_channels, *model.server.spec.input_shape[1:])
    raise ValueError(f"cannot infer input shape of {type(model).__name__}")


# -- checkpoint container ----------------------------------------------------

CHECKPOINT_MAGIC = b"GKTM"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_checkpoint(state: dict, path) -> None:
    """Write ``name -> array`` records as little-endian float32."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        for name, arr in state.items():
            arr = np.asarray(arr, dtype="<f4")
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes(order="C"))


def read_checkpoint(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a GKTM checkpoint (bad magic)")
    if len(buf) < 8:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8
    state = {}
    try:
        while pos < len(buf):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", buf, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            count = int(np.prod(dims)) if rank else 1
            if pos + 4 * count > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            state[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint record: {exc}") from None
    return state


def save_checkpoint(model: Module, path) -> None:
    write_checkpoint(model.state_dict(), path)


def load_checkpoint(model: Module, path) -> None:
    model.load_state_dict(read_checkpoint(path))


def spec_hash(model: Module) -> bytes:
    """Digest of parameter names and shapes; peers compare it in the handshake."""
    h = hashlib.sha256()
    for name, arr in model.state_dict().items():
        h.update(name.encode())
        h.update(repr(arr.shape).encode())
    return h.digest()
