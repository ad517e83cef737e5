"""Multitask patch classifier: shared residual trunk, per-task heads.

The network splits into a feature extractor and one affine-plus-softmax head
per task. With spectral-knowledge sharing ON there is a single 1x1 "spectral"
stem convolution used by every task (which then requires all tasks to agree
on the input channel count); with it OFF each task owns its stem. Everything
after the stem (batch norm, residual blocks, pooling, the dense projection to
the feature vector) is one parameter set regardless of task count.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigurationError(ValueError):
    """Raised when a task/architecture combination is inconsistent."""


@dataclass
class TaskSpec:
    """Identity of one classification task.

    ``input_channels`` is the band count after alignment. ``alignment`` is an
    optional data.AlignmentSpec; file paths are only used by the CLI pipeline.
    """
    task_id: str
    num_classes: int
    input_channels: int
    alignment: object | None = None
    cube_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigurationError(
                f"task {self.task_id!r}: num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ConfigurationError(
                f"task {self.task_id!r}: input_channels must be >= 1")


@dataclass
class ArchConfig:
    patch_size: int = 9
    stem_channels: int = 64
    num_residual_blocks: int = 2
    feature_dim: int = 128

    def __post_init__(self):
        if self.patch_size < 3 or self.patch_size % 2 == 0:
            raise ConfigurationError(
                f"patch_size must be odd and >= 3, got {self.patch_size}")
        if min(self.stem_channels, self.num_residual_blocks, self.feature_dim) < 1:
            raise ConfigurationError("architecture extents must be >= 1")

    def to_dict(self) -> dict:
        return {"patch_size": self.patch_size, "stem_channels": self.stem_channels,
                "num_residual_blocks": self.num_residual_blocks,
                "feature_dim": self.feature_dim}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2dLayer:
    def __init__(self, kh, kw, cin, cout, rng, dtype, name):
        std = np.sqrt(2.0 / (kh * kw * cin))
        self.kernel = Tensor(rng.normal(0.0, std, (kh, kw, cin, cout)).astype(dtype),
                             is_param=True, name=f"{name}.kernel")
        self.bias = Tensor(np.zeros(cout, dtype=dtype), is_param=True, name=f"{name}.bias")

    def __call__(self, x):
        return T.conv2d(x, self.kernel, self.bias)

    def parameters(self):
        return [self.kernel, self.bias]


class BatchNormLayer:
    def __init__(self, channels, dtype, name):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), is_param=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels, dtype=dtype), is_param=True, name=f"{name}.beta")
        self.state = T.BatchNormState(channels, dtype=dtype)
        self.name = name

    def __call__(self, x, training):
        return T.batch_norm(x, self.gamma, self.beta, self.state, training)

    def parameters(self):
        return [self.gamma, self.beta]

    def state_arrays(self):
        return [(f"{self.name}.running_mean", self.state.running_mean),
                (f"{self.name}.running_var", self.state.running_var)]


class DenseLayer:
    def __init__(self, din, dout, rng, dtype, name):
        std = np.sqrt(2.0 / din)
        self.w = Tensor(rng.normal(0.0, std, (din, dout)).astype(dtype),
                        is_param=True, name=f"{name}.w")
        self.b = Tensor(np.zeros(dout, dtype=dtype), is_param=True, name=f"{name}.b")

    def __call__(self, v):
        return T.dense(v, self.w, self.b)

    def parameters(self):
        return [self.w, self.b]


class ResidualBlock:
    """y = relu(BN(conv3x3(relu(BN(conv3x3(x))))) + x), identity skip."""

    def __init__(self, channels, rng, dtype, name):
        self.conv1 = Conv2dLayer(3, 3, channels, channels, rng, dtype, f"{name}.conv1")
        self.bn1 = BatchNormLayer(channels, dtype, f"{name}.bn1")
        self.conv2 = Conv2dLayer(3, 3, channels, channels, rng, dtype, f"{name}.conv2")
        self.bn2 = BatchNormLayer(channels, dtype, f"{name}.bn2")

    def __call__(self, x, training):
        h = T.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        return T.relu(T.add(h, x))

    def parameters(self):
        return (self.conv1.parameters() + self.bn1.parameters()
                + self.conv2.parameters() + self.bn2.parameters())

    def state_arrays(self):
        return self.bn1.state_arrays() + self.bn2.state_arrays()


class FeatureExtractor:
    """Interface the trunk must satisfy so other backbones can be plugged in.

    A trunk consumes the stem output (B x P x P x stem_channels) and produces
    the fixed-length feature vector (B x feature_dim).
    """

    output_dim: int

    def __call__(self, x, training):
        raise NotImplementedError

    def parameters(self):
        raise NotImplementedError

    def state_arrays(self):
        raise NotImplementedError


class ResidualTrunk(FeatureExtractor):
    """Default trunk: BN + ReLU over the stem output, residual blocks,
    global average pooling, then a dense projection to the feature vector."""

    def __init__(self, arch: ArchConfig, rng, dtype):
        ch = arch.stem_channels
        self.bn_in = BatchNormLayer(ch, dtype, "trunk.bn_in")
        self.blocks = [ResidualBlock(ch, rng, dtype, f"trunk.block{i}")
                       for i in range(arch.num_residual_blocks)]
        self.proj = DenseLayer(ch, arch.feature_dim, rng, dtype, "trunk.proj")
        self.output_dim = arch.feature_dim

    def __call__(self, x, training):
        h = T.relu(self.bn_in(x, training))
        for block in self.blocks:
            h = block(h, training)
        return T.relu(self.proj(T.global_avg_pool(h)))

    def parameters(self):
        params = self.bn_in.parameters()
        for block in self.blocks:
            params += block.parameters()
        return params + self.proj.parameters()

    def state_arrays(self):
        arrays = self.bn_in.state_arrays()
        for block in self.blocks:
            arrays += block.state_arrays()
        return arrays


class MultitaskNet:
    """Shared trunk, one stem per task (or one shared stem), one head per task.

    Built through :func:`build_network`; the single-task network is the
    degenerate case of one TaskSpec.
    """

    def __init__(self, tasks, arch, share_first_conv, stems, trunk, heads):
        self.tasks = {t.task_id: t for t in tasks}
        self.task_order = [t.task_id for t in tasks]
        self.arch = arch
        self.share_first_conv = share_first_conv
        self.stems = stems      # task_id -> Conv2dLayer; shared => same object
        self.trunk = trunk
        self.heads = heads      # task_id -> DenseLayer

    def _task(self, task_id):
        if task_id not in self.tasks:
            raise KeyError(f"unknown task {task_id!r}; have {self.task_order}")
        return self.tasks[task_id]

    def stem_out(self, batch: Tensor, task_id: str) -> Tensor:
        task = self._task(task_id)
        if batch.shape[3] != task.input_channels:
            raise T.ShapeError(
                f"task {task_id!r} expects {task.input_channels} channels, "
                f"batch has shape {batch.shape}")
        return self.stems[task_id](batch)

    def forward_features(self, batch, task_id: str, training: bool = False) -> Tensor:
        """Batch of patches (B x P x P x C) -> feature vectors (B x feature_dim)."""
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        return self.trunk(self.stem_out(batch, task_id), training)

    def forward_logits(self, features: Tensor, task_id: str) -> Tensor:
        self._task(task_id)
        return self.heads[task_id](features)

    def predict_probs(self, batch, task_id: str) -> np.ndarray:
        """Inference-mode class probabilities for a batch of patches."""
        feats = self.forward_features(batch, task_id, training=False)
        return T.softmax(self.forward_logits(feats, task_id)).data

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[Tensor]:
        """All trainable tensors in declaration order (each exactly once)."""
        params, seen = [], set()
        for tid in self.task_order:
            for p in self.stems[tid].parameters():
                if id(p) not in seen:
                    seen.add(id(p))
                    params.append(p)
        params += self.trunk.parameters()
        for tid in self.task_order:
            params += self.heads[tid].parameters()
        return params

    def parameters_for_task(self, task_id: str) -> list[Tensor]:
        """The stem, trunk and head a step on this task's batch may update."""
        self._task(task_id)
        return (self.stems[task_id].parameters() + self.trunk.parameters()
                + self.heads[task_id].parameters())

    def state_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Non-trainable state (batch-norm running statistics)."""
        return self.trunk.state_arrays()

    def bn_states(self) -> list[T.BatchNormState]:
        states = [self.trunk.bn_in.state]
        for block in self.trunk.blocks:
            states += [block.bn1.state, block.bn2.state]
        return states


def build_network(tasks: list[TaskSpec], arch: ArchConfig,
                  share_first_conv: bool = True, seed: int = 0,
                  dtype=np.float32, trunk_factory=None) -> MultitaskNet:
    """Initialize a multitask network.

    Weights are zero-mean Gaussian with std sqrt(2 / fan_in), biases zero,
    batch-norm gamma 1 / beta 0. ``trunk_factory(arch, rng, dtype)`` may
    supply an alternative FeatureExtractor.
    """
    if not tasks:
        raise ConfigurationError("at least one task is required")
    ids = [t.task_id for t in tasks]
    if len(set(ids)) != len(ids):
        raise ConfigurationError(f"duplicate task ids: {ids}")

    rng = np.random.default_rng(seed)
    stems: dict[str, Conv2dLayer] = {}
    if share_first_conv:
        channels = {t.task_id: t.input_channels for t in tasks}
        if len(set(channels.values())) != 1:
            raise ConfigurationError(
                "shared first convolution requires equal input channels across "
                f"tasks, got {channels}")
        shared = Conv2dLayer(1, 1, tasks[0].input_channels, arch.stem_channels,
                             rng, dtype, "stem.shared")
        for t in tasks:
            stems[t.task_id] = shared
    else:
        for t in tasks:
            stems[t.task_id] = Conv2dLayer(1, 1, t.input_channels, arch.stem_channels,
                                           rng, dtype, f"stem.{t.task_id}")

    factory = trunk_factory or ResidualTrunk
    trunk = factory(arch, rng, dtype)
    heads = {t.task_id: DenseLayer(trunk.output_dim, t.num_classes, rng, dtype,
                                   f"head.{t.task_id}")
             for t in tasks}
    return MultitaskNet(tasks, arch, share_first_conv, stems, trunk, heads)
