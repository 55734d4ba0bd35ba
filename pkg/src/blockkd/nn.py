"""Block-structured teacher/student networks and channel-aligning connectors.

A net is a list of blocks (one per resolution stage, the stage's first conv
does the downsampling) plus a classifier head. Teacher and student always
share the block count and per-block strides, so their feature maps differ
only in channel width; a connector (1x1 conv + batch norm) maps a student
feature to the matching teacher feature shape.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, StructuralError
from .tensor import Tensor


def _uniform_fanin(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        return iter(())

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        return iter(())


class Conv2d(Layer):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 stride: int, padding: int, rng: np.random.Generator):
        self.stride = stride
        self.padding = padding
        self.w = Tensor(
            _uniform_fanin(rng, (out_channels, in_channels, kernel, kernel),
                           in_channels * kernel * kernel),
            requires_grad=True)

    def forward(self, x, training):
        return T.conv2d(x, self.w, stride=self.stride, padding=self.padding)

    def named_params(self):
        yield "w", self.w


class BatchNorm2d(Layer):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x, training):
        return T.batchnorm2d(x, self.gamma, self.beta, training=training,
                             running_mean=self.running_mean,
                             running_var=self.running_var,
                             momentum=self.momentum, eps=self.eps)

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class ReLU(Layer):
    def forward(self, x, training):
        return T.relu(x)


class GlobalAvgPool(Layer):
    def forward(self, x, training):
        return T.avgpool_global(x)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.w = Tensor(_uniform_fanin(rng, (in_features, out_features), in_features),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_features), requires_grad=True)

    def forward(self, x, training):
        return T.add(T.matmul(x, self.w), self.b)

    def named_params(self):
        yield "w", self.w
        yield "b", self.b


class Block:
    """Ordered layers between two downsampling boundaries.

    ``in_shape``/``out_shape`` are (C, H, W) for feature blocks; the
    classifier head declares ``out_shape=(K,)``. An empty layer list is the
    identity block.
    """

    def __init__(self, layers: list[Layer], in_shape: tuple, out_shape: tuple,
                 label: str = "block"):
        self.layers = layers
        self.in_shape = tuple(in_shape)
        self.out_shape = tuple(out_shape)
        self.label = label

    def forward(self, x: Tensor, training: bool) -> Tensor:
        if x.shape[1:] != self.in_shape:
            raise StructuralError(
                f"{self.label}: expected input of shape {self.in_shape} per sample, "
                f"got {x.shape[1:]}")
        for layer in self.layers:
            x = layer.forward(x, training)
        return x

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name, p in layer.named_params():
                yield f"layers.{i}.{name}", p

    def named_buffers(self):
        for i, layer in enumerate(self.layers):
            for name, b in layer.named_buffers():
                yield f"layers.{i}.{name}", b


class CompositeNet:
    """Blocks plus classifier; frozen nets pass gradients through but never train."""

    def __init__(self, blocks: list[Block], classifier: Block, frozen: bool = False,
                 descriptor: Optional[str] = None):
        self.blocks = blocks
        self.classifier = classifier
        self.descriptor = descriptor
        self.frozen = False
        if frozen:
            self.freeze()

    @property
    def n(self) -> int:
        return len(self.blocks)

    def freeze(self) -> None:
        self.frozen = True
        for _, p in self.named_parameters():
            p.requires_grad = False

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        for block in self.blocks:
            x = block.forward(x, training)
        return self.classifier.forward(x, training)

    def forward_with_features(self, x: Tensor, training: bool = False
                              ) -> tuple[Tensor, list[Tensor]]:
        features = []
        for block in self.blocks:
            x = block.forward(x, training)
            features.append(x)
        return self.classifier.forward(x, training), features

    def forward_tail(self, f: Tensor, start: int, training: bool = False) -> Tensor:
        """Run blocks start+1..n (1-based) and the classifier on a feature."""
        for block in self.blocks[start:]:
            f = block.forward(f, training)
        return self.classifier.forward(f, training)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for i, block in enumerate(self.blocks):
            for name, p in block.named_params():
                yield f"blocks.{i}.{name}", p
        for name, p in self.classifier.named_params():
            yield f"classifier.{name}", p

    def named_buffers(self) -> Iterator[tuple[str, np.ndarray]]:
        for i, block in enumerate(self.blocks):
            for name, b in block.named_buffers():
                yield f"blocks.{i}.{name}", b
        for name, b in self.classifier.named_buffers():
            yield f"classifier.{name}", b

    def named_state(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update({name: b for name, b in self.named_buffers()})
        return state

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.named_state()
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise StructuralError(f"state entries do not match the net: {missing[:4]}")
        for name, p in self.named_parameters():
            if p.data.shape != state[name].shape:
                raise StructuralError(
                    f"state entry '{name}' has shape {state[name].shape}, "
                    f"expected {p.data.shape}")
            p.data[...] = state[name]
        for name, b in self.named_buffers():
            b[...] = state[name]


class Connector:
    """1x1 conv + batch norm adapting a student feature to the teacher width."""

    def __init__(self, in_channels: int, out_channels: int, index: int,
                 rng: np.random.Generator):
        self.index = index
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.conv = Conv2d(in_channels, out_channels, kernel=1, stride=1,
                           padding=0, rng=rng)
        self.bn = BatchNorm2d(out_channels)

    def forward(self, f: Tensor, training: bool = True) -> Tensor:
        if f.ndim != 4 or f.shape[1] != self.in_channels:
            raise StructuralError(
                f"connector {self.index}: expected {self.in_channels} channels, "
                f"got feature shape {f.shape}")
        return self.bn.forward(self.conv.forward(f, training), training)

    def named_parameters(self):
        for name, p in self.conv.named_params():
            yield f"conv.{name}", p
        for name, p in self.bn.named_params():
            yield f"bn.{name}", p

    def set_identity(self) -> None:
        """Make eval-mode forward the exact identity (square connectors only).

        Running variance is set to 1 - eps so the normalizer is exactly 1.
        """
        if self.in_channels != self.out_channels:
            raise ConfigError(
                f"connector {self.index}: identity needs equal channel counts, "
                f"got {self.in_channels} -> {self.out_channels}")
        c = self.in_channels
        self.conv.w.data[...] = np.eye(c).reshape(c, c, 1, 1)
        self.bn.gamma.data[...] = 1.0
        self.bn.beta.data[...] = 0.0
        self.bn.running_mean[...] = 0.0
        self.bn.running_var[...] = 1.0 - self.bn.eps


@dataclass(frozen=True)
class ArchSpec:
    """Per-block widths/strides for a teacher/student pair and the class count."""

    k: int
    in_channels: int
    in_size: int
    teacher_widths: tuple[int, ...]
    student_widths: tuple[int, ...]
    strides: tuple[int, ...]
    teacher_depth: int = 2
    student_depth: int = 1
    kernel: int = 3
    name: str = "custom"

    def __post_init__(self):
        if len(self.teacher_widths) != len(self.student_widths):
            raise ConfigError(
                f"teacher has {len(self.teacher_widths)} blocks but student has "
                f"{len(self.student_widths)}; block counts must be equal")
        if len(self.strides) != len(self.teacher_widths):
            raise ConfigError(
                f"need one stride per block, got {len(self.strides)} for "
                f"{len(self.teacher_widths)} blocks")
        if self.k < 2:
            raise ConfigError(f"need at least 2 classes, got {self.k}")
        if self.kernel not in (1, 3):
            raise ConfigError(f"block kernel must be 1 or 3, got {self.kernel}")

    @property
    def n(self) -> int:
        return len(self.teacher_widths)

    def canonical(self) -> str:
        return (f"k={self.k};in={self.in_channels}x{self.in_size};"
                f"tw={','.join(map(str, self.teacher_widths))};"
                f"sw={','.join(map(str, self.student_widths))};"
                f"st={','.join(map(str, self.strides))};"
                f"td={self.teacher_depth};sd={self.student_depth};"
                f"kr={self.kernel}")

    def hash_u64(self) -> int:
        digest = hashlib.sha256(self.canonical().encode()).digest()
        return int.from_bytes(digest[:8], "little")


PRESETS: dict[str, ArchSpec] = {
    "tiny_uniform": ArchSpec(k=4, in_channels=3, in_size=8,
                             teacher_widths=(16, 32, 64),
                             student_widths=(8, 16, 32),
                             strides=(1, 3, 3), name="tiny_uniform"),
    "tiny_same": ArchSpec(k=4, in_channels=3, in_size=8,
                          teacher_widths=(8, 16, 32),
                          student_widths=(8, 16, 32),
                          strides=(1, 3, 3), teacher_depth=1, name="tiny_same"),
    "mlp_blobs": ArchSpec(k=4, in_channels=8, in_size=1,
                          teacher_widths=(32, 32),
                          student_widths=(16, 16),
                          strides=(1, 1), kernel=1, name="mlp_blobs"),
}


def _downsample_padding(size: int, kernel: int, stride: int) -> int:
    """Smallest padding making the conv output size exactly integral."""
    if stride == 1:
        return kernel // 2
    for pad in range(4):
        span = size + 2 * pad - kernel
        if span >= 0 and span % stride == 0:
            return pad
    raise ConfigError(
        f"no padding in 0..3 gives an integral output for size {size}, "
        f"kernel {kernel}, stride {stride}")


def build_net(k: int, in_channels: int, in_size: int, widths: tuple[int, ...],
              depth: int, strides: tuple[int, ...], kernel: int,
              rng: np.random.Generator) -> CompositeNet:
    """Stack conv/BN/ReLU blocks (first conv per block downsamples) plus a
    global-pool + dense classifier head."""
    blocks = []
    c_in, size = in_channels, in_size
    for i, (c_out, stride) in enumerate(zip(widths, strides)):
        layers: list[Layer] = []
        in_shape = (c_in, size, size)
        pad = _downsample_padding(size, kernel, stride)
        size = (size + 2 * pad - kernel) // stride + 1
        for d in range(depth):
            layers.append(Conv2d(c_in if d == 0 else c_out, c_out, kernel,
                                 stride if d == 0 else 1,
                                 pad if d == 0 else kernel // 2, rng))
            layers.append(BatchNorm2d(c_out))
            layers.append(ReLU())
        blocks.append(Block(layers, in_shape, (c_out, size, size),
                            label=f"block{i + 1}"))
        c_in = c_out
    head = Block([GlobalAvgPool(), Dense(widths[-1], k, rng)],
                 (widths[-1], size, size), (k,), label="classifier")
    descriptor = (f"k={k};in={in_channels}x{in_size};"
                  f"w={','.join(map(str, widths))};d={depth};"
                  f"st={','.join(map(str, strides))};kr={kernel}")
    return CompositeNet(blocks, head, descriptor=descriptor)


def net_from_descriptor(descriptor: str) -> CompositeNet:
    """Rebuild a net from its build descriptor (weights come from a checkpoint)."""
    try:
        fields = dict(part.split("=", 1) for part in descriptor.split(";"))
        in_channels, in_size = (int(v) for v in fields["in"].split("x"))
        return build_net(
            k=int(fields["k"]), in_channels=in_channels, in_size=in_size,
            widths=tuple(int(v) for v in fields["w"].split(",")),
            depth=int(fields["d"]),
            strides=tuple(int(v) for v in fields["st"].split(",")),
            kernel=int(fields["kr"]), rng=np.random.default_rng(0))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"malformed net descriptor '{descriptor}'") from exc


def build_factory_pair(arch: ArchSpec, seed=0
                       ) -> tuple[CompositeNet, CompositeNet, list[Connector]]:
    """Instantiate a frozen teacher, a trainable student, and one connector
    per block index."""
    rng = np.random.default_rng(seed)
    teacher = build_net(arch.k, arch.in_channels, arch.in_size,
                        arch.teacher_widths, arch.teacher_depth, arch.strides,
                        arch.kernel, rng)
    student = build_net(arch.k, arch.in_channels, arch.in_size,
                        arch.student_widths, arch.student_depth, arch.strides,
                        arch.kernel, rng)
    connectors = [Connector(sw, tw, index=i + 1, rng=rng)
                  for i, (sw, tw) in enumerate(zip(arch.student_widths,
                                                   arch.teacher_widths))]
    teacher.freeze()
    return teacher, student, connectors
