"""FC-DenseNet hiding encoder and plain convolutional reveal decoder."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from .tensor_core import (
    DEFAULT_DTYPE,
    Parameter,
    RunningStats,
    Tensor,
    batch_norm,
    concat_channels,
    conv2d,
    conv_transpose2d,
    conv_transpose_output_size,
    dropout,
    max_pool2x2,
    relu,
)

IMAGE_CHANNELS = 3


@dataclass(frozen=True)
class NetworkConfig:
    growth: int = 12
    layers_per_block: int = 4
    num_down: int = 5
    stem_channels: int = 48
    decoder_width: int = 64
    decoder_convs: int = 6
    dropout_p: float = 0.0
    image_size: int = 256
    preset: str = "paper"

    def __post_init__(self):
        for name in ("growth", "layers_per_block", "stem_channels", "decoder_width", "image_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"NetworkConfig.{name} must be positive, got {getattr(self, name)}")
        if self.num_down < 0:
            raise ValueError("NetworkConfig.num_down must be non-negative")
        if self.decoder_convs < 2:
            raise ValueError("NetworkConfig.decoder_convs must be at least 2")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("NetworkConfig.dropout_p must lie in [0, 1)")
        if self.image_size % (2 ** self.num_down):
            raise ValueError(f"image_size {self.image_size} must be divisible by 2**num_down = "
                             f"{2 ** self.num_down}")

    @classmethod
    def paper(cls, **overrides) -> "NetworkConfig":
        return cls(**{**dict(growth=12, layers_per_block=4, num_down=5, stem_channels=48,
                             image_size=256, preset="paper"), **overrides})

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        return cls(**{**dict(growth=8, layers_per_block=4, num_down=2, stem_channels=16,
                             image_size=32, preset="desk"), **overrides})

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "NetworkConfig":
        if name == "paper":
            return cls.paper(**overrides)
        if name == "desk":
            return cls.desk(**overrides)
        raise ValueError(f"unknown preset {name!r}; expected 'paper' or 'desk'")

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def block_new_channels(self) -> int:
        return self.growth * self.layers_per_block


@dataclass
class ChannelLedger:
    stem_out: int
    down_block_out: list = field(default_factory=list)
    bottleneck_new: int = 0
    up_block_in: list = field(default_factory=list)
    head_in: int = 0
    dense_blocks: int = 0
    concatenations: int = 0


def channel_ledger(config: NetworkConfig) -> ChannelLedger:
    """Walk the encoder symbolically and record channel counts at each stage."""
    new = config.block_new_channels
    ledger = ChannelLedger(stem_out=config.stem_channels)
    c = config.stem_channels
    skips = []
    for _ in range(config.num_down):
        c += new
        ledger.down_block_out.append(c)
        ledger.dense_blocks += 1
        ledger.concatenations += 1
        skips.append(c)
    ledger.bottleneck_new = new
    ledger.dense_blocks += 1
    up = new
    for i, skip in enumerate(reversed(skips)):
        c = up + skip
        ledger.concatenations += 1
        ledger.up_block_in.append(c)
        ledger.dense_blocks += 1
        up = new
        if i == len(skips) - 1:
            c += new
    if not skips:
        c = config.stem_channels + new
    ledger.head_in = c
    return ledger


class Module:
    """Tiny container giving named parameters, buffers and train/eval modes."""

    training = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module, RunningStats)):
                yield key, value
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, value in self._children():
            if isinstance(value, RunningStats):
                yield prefix + key + ".mean", value.mean
                yield prefix + key + ".var", value.var
            elif isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _he_normal(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(DEFAULT_DTYPE)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True):
        self.in_channels, self.out_channels = cin, cout
        self.padding = padding
        self.weight = Parameter(_he_normal(rng, (cout, cin, kernel, kernel), cin * kernel * kernel))
        self.bias = Parameter(np.zeros(cout, dtype=DEFAULT_DTYPE)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        self.channels = channels
        self.eps = eps
        self.scale = Parameter(np.ones(channels, dtype=DEFAULT_DTYPE))
        self.shift = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))
        self.running = RunningStats(channels, momentum)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.scale, self.shift, self.running, training=self.training, eps=self.eps)


class CompositeLayer(Module):
    """BN -> ReLU -> 3x3 conv (growth channels) -> dropout."""

    def __init__(self, cin: int, growth: int, rng: np.random.Generator, dropout_p: float = 0.0):
        self.bn = BatchNorm2d(cin)
        self.conv = Conv2d(cin, growth, 3, rng, padding=1)
        self.dropout_p = dropout_p
        self._rng = rng

    def forward(self, x: Tensor) -> Tensor:
        y = self.conv(relu(self.bn(x)))
        return dropout(y, self.dropout_p, training=self.training, rng=self._rng)


class DenseBlock(Module):
    """Each layer sees the concatenation of the block input and all earlier layer outputs."""

    def __init__(self, cin: int, num_layers: int, growth: int, rng: np.random.Generator,
                 dropout_p: float = 0.0):
        self.in_channels = cin
        self.growth = growth
        self.layers = [CompositeLayer(cin + i * growth, growth, rng, dropout_p) for i in range(num_layers)]

    @property
    def new_channels(self) -> int:
        return self.growth * len(self.layers)

    @property
    def out_channels(self) -> int:
        return self.in_channels + self.new_channels

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return ``(x ++ y1 ++ ... ++ yL, y1 ++ ... ++ yL)``."""
        if x.shape[1] != self.in_channels:
            raise ValueError(f"dense block expects {self.in_channels} input channels, got {x.shape[1]}")
        feats = [x]
        new = []
        for layer in self.layers:
            inp = feats[0] if len(feats) == 1 else concat_channels(*feats)
            y = layer(inp)
            feats.append(y)
            new.append(y)
        new_features = new[0] if len(new) == 1 else concat_channels(*new)
        return concat_channels(x, new_features), new_features


class TransitionDown(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.bn = BatchNorm2d(channels)
        self.conv = Conv2d(channels, channels, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return max_pool2x2(self.conv(relu(self.bn(x))))


class TransitionUp(Module):
    kernel, stride, padding, output_padding = 3, 2, 1, 1

    def __init__(self, channels: int, rng: np.random.Generator):
        for size in (1, 2, 7):
            got = conv_transpose_output_size(size, self.kernel, self.stride, self.padding, self.output_padding)
            if got != 2 * size:
                raise ValueError(f"transition-up geometry maps {size} -> {got}, expected exact doubling")
        k = self.kernel
        self.weight = Parameter(_he_normal(rng, (channels, channels, k, k), channels * k * k))
        self.bias = Parameter(np.zeros(channels, dtype=DEFAULT_DTYPE))

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                                output_padding=self.output_padding)


class HidingEncoder(Module):
    """6-channel (carrier ++ secret) input to 3-channel stego output."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        k, L, p = config.growth, config.layers_per_block, config.dropout_p
        new = k * L
        self.stem = Conv2d(2 * IMAGE_CHANNELS, config.stem_channels, 3, rng, padding=1)
        c = config.stem_channels
        self.down_blocks, self.trans_down = [], []
        skips = []
        for _ in range(config.num_down):
            block = DenseBlock(c, L, k, rng, p)
            self.down_blocks.append(block)
            c = block.out_channels
            skips.append(c)
            self.trans_down.append(TransitionDown(c, rng))
        self.bottleneck = DenseBlock(c, L, k, rng, p)
        self.trans_up, self.up_blocks = [], []
        for skip in reversed(skips):
            self.trans_up.append(TransitionUp(new, rng))
            self.up_blocks.append(DenseBlock(new + skip, L, k, rng, p))
        head_in = self.up_blocks[-1].out_channels if self.up_blocks else self.bottleneck.out_channels
        self.head = Conv2d(head_in, IMAGE_CHANNELS, 3, rng, padding=1)

    def dense_blocks(self) -> list[DenseBlock]:
        return [*self.down_blocks, self.bottleneck, *self.up_blocks]

    def forward(self, phi: Tensor) -> Tensor:
        n, c, h, w = phi.shape
        if c != 2 * IMAGE_CHANNELS:
            raise ValueError(f"encoder expects a {2 * IMAGE_CHANNELS}-channel input, got shape {phi.shape}")
        div = 2 ** self.config.num_down
        if h % div or w % div:
            raise ValueError(f"encoder input height/width must be divisible by {div} "
                             f"(2**num_down), got {h}x{w}")
        x = self.stem(phi)
        skips = []
        for block, td in zip(self.down_blocks, self.trans_down):
            x, _ = block(x)
            skips.append(x)
            x = td(x)
        x, new = self.bottleneck(x)
        for tu, block, skip in zip(self.trans_up, self.up_blocks, reversed(skips)):
            x = concat_channels(tu(new), skip)
            x, new = block(x)
        return self.head(x)


class RevealDecoder(Module):
    """conv -> BN -> ReLU repeated, then conv -> ReLU; 3 channels in and out."""

    def __init__(self, config: NetworkConfig, rng: np.random.Generator):
        self.config = config
        w = config.decoder_width
        n = config.decoder_convs
        widths = [IMAGE_CHANNELS] + [w] * (n - 1) + [IMAGE_CHANNELS]
        self.convs = [Conv2d(widths[i], widths[i + 1], 3, rng, padding=1) for i in range(n)]
        self.bns = [BatchNorm2d(widths[i + 1]) for i in range(n - 1)]

    def forward(self, stego: Tensor) -> Tensor:
        if stego.data.ndim != 4 or stego.shape[1] != IMAGE_CHANNELS:
            raise ValueError(f"decoder expects a {IMAGE_CHANNELS}-channel input, got shape {stego.shape}")
        x = stego
        for conv, bn in zip(self.convs[:-1], self.bns):
            x = relu(bn(conv(x)))
        return relu(self.convs[-1](x))


class StegoNet(Module):
    """Encoder and decoder pair sharing one config."""

    def __init__(self, config: NetworkConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.config = config
        self.encoder = HidingEncoder(config, rng)
        self.decoder = RevealDecoder(config, rng)
        for name, param in self.named_parameters():
            param.name = name

    def forward(self, phi: Tensor) -> tuple[Tensor, Tensor]:
        stego = self.encoder(phi)
        return stego, self.decoder(stego)


def init_parameters(config: NetworkConfig, seed: int = 0) -> tuple[HidingEncoder, RevealDecoder]:
    net = StegoNet(config, seed)
    return net.encoder, net.decoder


def count_modules(module: Module, kind: type) -> int:
    return sum(isinstance(m, kind) for m in module.modules())


def skip_concatenations(encoder: HidingEncoder) -> int:
    """Feature concatenations outside dense blocks: one per down block, one per up step."""
    return len(encoder.down_blocks) + len(encoder.up_blocks)


def state_arrays(net: Module) -> dict[str, np.ndarray]:
    """Every parameter and buffer by name, in a stable order."""
    out = {name: p.data for name, p in net.named_parameters()}
    for name, buf in net.named_buffers():
        out[name] = buf
    return out


def load_state_arrays(net: Module, arrays: dict[str, np.ndarray]) -> None:
    expected = state_arrays(net)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise ValueError(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, target in expected.items():
        src = arrays[name]
        if src.shape != target.shape:
            raise ValueError(f"state mismatch for {name}: shape {src.shape} vs {target.shape}")
        target[...] = src


def forward_eval(net: StegoNet, phi: Tensor, stego_only: bool = False) -> tuple[Tensor, Optional[Tensor]]:
    was_training = net.training
    net.eval()
    try:
        stego = net.encoder(phi)
        secret = None if stego_only else net.decoder(Tensor(stego.data))
    finally:
        net.train(was_training)
    return stego, secret
