"""ResEmoteNet: conv backbone, squeeze-and-excitation gate, residual stack, classifier head."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import functional as F
from .tensor import Parameter, Tensor


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (64, 64)
    input_channels: int = 3
    backbone_channels: list[int] = field(default_factory=lambda: [64, 128, 256])
    se_reduction: int = 16
    residual_channels: list[int] = field(default_factory=lambda: [512, 1024, 2048])
    classifier_hidden: list[int] = field(default_factory=lambda: [1024, 512])
    num_classes: int = 7
    seed: int = 0
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        self.input_size = tuple(int(v) for v in self.input_size)
        self.backbone_channels = [int(c) for c in self.backbone_channels]
        self.residual_channels = [int(c) for c in self.residual_channels]
        self.classifier_hidden = [int(c) for c in self.classifier_hidden]

    def validate(self) -> None:
        if len(self.input_size) != 2 or min(self.input_size) < 1:
            raise ValueError(f"input_size must be two positive ints, got {self.input_size}")
        if not self.backbone_channels:
            raise ValueError("backbone_channels must be nonempty")
        if any(c < 1 for c in self.backbone_channels + self.residual_channels + self.classifier_hidden):
            raise ValueError("all channel and hidden widths must be positive")
        # each backbone max-pool halves exactly; residual stride-2 convs halve with ceil
        div = 2 ** len(self.backbone_channels)
        h, w = self.input_size
        if h % div or w % div:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by 2^{len(self.backbone_channels)}={div} "
                "(one exact halving per backbone max-pool)"
            )
        last = self.backbone_channels[-1]
        if self.se_reduction < 1 or last % self.se_reduction:
            raise ValueError(f"se_reduction {self.se_reduction} must divide the last backbone channel count {last}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")

    def shape_plan(self) -> list[tuple[str, tuple[int, int, int]]]:
        """Per-stage (name, (C, H, W)) the forward pass asserts against."""
        h, w = self.input_size
        plan = [("input", (self.input_channels, h, w))]
        for i, c in enumerate(self.backbone_channels):
            h, w = h // 2, w // 2
            plan.append((f"backbone.{i}", (c, h, w)))
        c = self.backbone_channels[-1]
        plan.append(("se", (c, h, w)))
        for i, c in enumerate(self.residual_channels):
            h, w = (h + 1) // 2, (w + 1) // 2
            plan.append((f"residual.{i}", (c, h, w)))
        plan.append(("pool", (c, 1, 1)))
        return plan

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def tiny(cls, input_size=(8, 8), seed: int = 0) -> "ModelConfig":
        """Smallest useful variant; the end-to-end gradient check runs on it."""
        return cls(
            input_size=input_size,
            backbone_channels=[4, 8, 8],
            se_reduction=4,
            residual_channels=[8, 8, 8],
            classifier_hidden=[8],
            seed=seed,
        )

    @classmethod
    def desk(cls, seed: int = 0) -> "ModelConfig":
        """64x64 input, reduced widths: overfits a few dozen images on a laptop CPU in a minute or two.

        Narrower variants learn too little per plain-SGD step at lr 1e-3, so early
        stopping frequently fires before they fit even a tiny training set.
        """
        return cls(
            backbone_channels=[16, 32, 64],
            se_reduction=4,
            residual_channels=[64, 64, 64],
            classifier_hidden=[64],
            seed=seed,
        )

    @classmethod
    def preset(cls, name: str, seed: int = 0) -> "ModelConfig":
        presets = {"default": lambda: cls(seed=seed), "tiny": lambda: cls.tiny(seed=seed), "desk": lambda: cls.desk(seed)}
        try:
            return presets[name]()
        except KeyError:
            raise ValueError(f"unknown model preset {name!r}; choose from {sorted(presets)}") from None


class _Registry:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Parameter] = {}
        self.stats: dict[str, F.RunningStats] = {}

    def param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, data.astype(np.float32))
        self.params[name] = p
        return p

    def fan_in_uniform(self, name: str, shape: tuple[int, ...], fan_in: int) -> tuple[Parameter, Parameter]:
        bound = math.sqrt(6.0 / fan_in)
        weight = self.param(f"{name}.weight", self.rng.uniform(-bound, bound, shape))
        b = 1.0 / math.sqrt(fan_in)
        bias = self.param(f"{name}.bias", self.rng.uniform(-b, b, shape[0]))
        return weight, bias


class Conv2d:
    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, k: int, stride: int = 1, padding: int = 0):
        self.stride, self.padding = stride, padding
        self.weight, self.bias = reg.fan_in_uniform(name, (cout, cin, k, k), cin * k * k)

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d:
    def __init__(self, reg: _Registry, name: str, channels: int, eps: float, momentum: float):
        self.gamma = reg.param(f"{name}.gamma", np.ones(channels))
        self.beta = reg.param(f"{name}.beta", np.zeros(channels))
        self.running = F.RunningStats.fresh(channels)
        reg.stats[name] = self.running
        self.eps, self.momentum = eps, momentum

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.batch_norm2d(x, self.gamma, self.beta, self.running, training, self.eps, self.momentum)


class Linear:
    def __init__(self, reg: _Registry, name: str, din: int, dout: int):
        self.weight, self.bias = reg.fan_in_uniform(name, (dout, din), din)

    def __call__(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


class BackboneStage:
    """conv3x3 -> BN -> ReLU -> maxpool2."""

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, cfg: ModelConfig):
        self.conv = Conv2d(reg, f"{name}.conv", cin, cout, 3, 1, 1)
        self.bn = BatchNorm2d(reg, f"{name}.bn", cout, cfg.bn_eps, cfg.bn_momentum)

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return F.max_pool2d(F.relu(self.bn(self.conv(x), training)))


class SEBlock:
    """Channel attention: GAP -> linear C->C/r -> ReLU -> linear C/r->C -> sigmoid."""

    def __init__(self, reg: _Registry, name: str, channels: int, reduction: int):
        self.channels = channels
        self.squeeze = Linear(reg, f"{name}.fc1", channels, channels // reduction)
        self.excite = Linear(reg, f"{name}.fc2", channels // reduction, channels)

    def __call__(self, f0: Tensor) -> tuple[Tensor, Tensor]:
        if f0.data.ndim != 4 or f0.shape[1] != self.channels:
            raise ValueError(f"SE block expects {self.channels} channels, got input shape {f0.shape}")
        n, c = f0.shape[:2]
        pooled = F.flatten(F.global_average_pool(f0))
        gate_logits = self.excite(F.relu(self.squeeze(pooled)))
        w_s = F.reshape(F.sigmoid(gate_logits), (n, c, 1, 1))
        return F.channel_scale(f0, w_s), w_s


class ResidualBlock:
    """Y = relu(H(x) + skip(x)) where H is conv-BN-ReLU-conv-BN.

    The skip path is the identity when stride is 1 and widths match, otherwise
    a 1x1 strided conv + BN projection. For the nonnegative inputs the network
    feeds it, a zeroed H path makes the block an exact identity.
    """

    def __init__(self, reg: _Registry, name: str, cin: int, cout: int, stride: int, cfg: ModelConfig):
        self.cin, self.cout, self.stride = cin, cout, stride
        self.conv1 = Conv2d(reg, f"{name}.conv1", cin, cout, 3, stride, 1)
        self.bn1 = BatchNorm2d(reg, f"{name}.bn1", cout, cfg.bn_eps, cfg.bn_momentum)
        self.conv2 = Conv2d(reg, f"{name}.conv2", cout, cout, 3, 1, 1)
        self.bn2 = BatchNorm2d(reg, f"{name}.bn2", cout, cfg.bn_eps, cfg.bn_momentum)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(reg, f"{name}.proj", cin, cout, 1, stride, 0)
            self.proj_bn = BatchNorm2d(reg, f"{name}.proj_bn", cout, cfg.bn_eps, cfg.bn_momentum)
        else:
            self.proj = None

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        if x.data.ndim != 4 or x.shape[1] != self.cin:
            raise ValueError(f"residual block expects {self.cin} input channels, got shape {x.shape}")
        h = F.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = x if self.proj is None else self.proj_bn(self.proj(x), training)
        return F.relu(F.add(h, skip))


class ResEmoteNet:
    def __init__(self, config: ModelConfig):
        config.validate()
        self.config = config
        reg = _Registry(np.random.default_rng(config.seed))
        chans = [config.input_channels] + config.backbone_channels
        self.backbone = [
            BackboneStage(reg, f"backbone.{i}", chans[i], chans[i + 1], config) for i in range(len(config.backbone_channels))
        ]
        self.se = SEBlock(reg, "se", chans[-1], config.se_reduction)
        rchans = [chans[-1]] + config.residual_channels
        self.residual = [
            ResidualBlock(reg, f"residual.{i}", rchans[i], rchans[i + 1], 2, config) for i in range(len(config.residual_channels))
        ]
        widths = [rchans[-1]] + config.classifier_hidden + [config.num_classes]
        self.classifier = [Linear(reg, f"classifier.{i}", widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        self.params = reg.params
        self.stats = reg.stats
        self.training = True
        self._plan = config.shape_plan()

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def train(self) -> "ResEmoteNet":
        self.training = True
        return self

    def eval(self) -> "ResEmoteNet":
        self.training = False
        return self

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def astype(self, dtype) -> "ResEmoteNet":
        """Cast parameters and running statistics in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None
        for s in self.stats.values():
            s.mean = s.mean.astype(dtype)
            s.var = s.var.astype(dtype)
        return self

    def _check(self, stage: int, x: Tensor) -> None:
        name, chw = self._plan[stage]
        if x.shape[1:] != chw:
            raise RuntimeError(f"stage {name!r} produced shape {x.shape[1:]}, expected {chw}")

    def features(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Backbone + SE + residual stack + AAP; returns (pooled features, gate weights)."""
        expected = self._plan[0][1]
        if x.data.ndim != 4 or x.shape[1:] != expected:
            raise ValueError(f"input batch must have shape [N, {expected[0]}, {expected[1]}, {expected[2]}], got {x.shape}")
        stage = 1
        for blk in self.backbone:
            x = blk(x, self.training)
            self._check(stage, x)
            stage += 1
        x, w_s = self.se(x)
        self._check(stage, x)
        stage += 1
        for blk in self.residual:
            x = blk(x, self.training)
            self._check(stage, x)
            stage += 1
        x = F.adaptive_average_pool(x, 1, 1)
        self._check(stage, x)
        return F.flatten(x), w_s

    def forward(self, x: Tensor) -> Tensor:
        """Raw logits [N, num_classes]; softmax belongs to the loss."""
        h, _ = self.features(x)
        for i, layer in enumerate(self.classifier):
            h = layer(h)
            if i < len(self.classifier) - 1:
                h = F.relu(h)
        return h

    __call__ = forward


def build(config: ModelConfig | None = None) -> ResEmoteNet:
    return ResEmoteNet(config or ModelConfig())


def make_se_block(channels: int, reduction: int, seed: int = 0) -> tuple[SEBlock, list[Parameter]]:
    """Standalone SE block with its parameters, for tests and gradient checks."""
    reg = _Registry(np.random.default_rng(seed))
    block = SEBlock(reg, "se", channels, reduction)
    return block, list(reg.params.values())


def make_residual_block(cin: int, cout: int, stride: int, seed: int = 0, config: ModelConfig | None = None):
    """Standalone residual block; returns (block, parameters, running stats by layer name)."""
    reg = _Registry(np.random.default_rng(seed))
    block = ResidualBlock(reg, "block", cin, cout, stride, config or ModelConfig())
    return block, list(reg.params.values()), reg.stats
