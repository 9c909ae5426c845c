"""Convolutional height regressors: a plain encoder-decoder, a densely
skip-connected variant, and a channel-attention variant.

All three map (B, C, H, W) feature stacks to (B, 1, H, W) height maps
with no output activation. Spatial extents must be divisible by
2**(levels - 1) so the pooling pyramid closes.
"""

from dataclasses import dataclass, asdict

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DimensionError
from .nn import BatchNorm2d, Conv2d, Module, SqueezeExcite

ARCHITECTURES = ("vanilla", "nested", "se")


@dataclass
class ModelConfig:
    """Architecture hyperparameters, serializable into checkpoints."""

    arch: str = "vanilla"
    in_channels: int = 1
    levels: int = 4
    base_channels: int = 16
    se_reduction: int = 8

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(
                f"unknown architecture {self.arch!r}, expected one of {ARCHITECTURES}"
            )
        if self.levels < 2:
            raise ConfigurationError(f"levels must be >= 2, got {self.levels}")
        if self.base_channels < 4:
            raise ConfigurationError(
                f"base_channels must be >= 4, got {self.base_channels}"
            )
        if self.in_channels < 1:
            raise ConfigurationError(
                f"in_channels must be >= 1, got {self.in_channels}"
            )
        if self.se_reduction < 1:
            raise ConfigurationError(
                f"se_reduction must be >= 1, got {self.se_reduction}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class DoubleConv(Module):
    """Two 3x3 conv -> batch norm -> ReLU stages, optional channel gate."""

    def __init__(self, cin, cout, rng, se_reduction=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, padding=1, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, rng, padding=1, bias=False)
        self.bn2 = BatchNorm2d(cout)
        self.se = (SqueezeExcite(cout, rng, se_reduction)
                   if se_reduction is not None else None)

    def forward(self, x):
        x = ad.relu(self.bn1(self.conv1(x)))
        x = ad.relu(self.bn2(self.conv2(x)))
        if self.se is not None:
            x = self.se(x)
        return x


class UpConv(Module):
    """Nearest-neighbor 2x upsample followed by a 3x3 conv."""

    def __init__(self, cin, cout, rng):
        super().__init__()
        self.conv = Conv2d(cin, cout, 3, rng, padding=1, bias=True)

    def forward(self, x):
        return self.conv(ad.upsample2x(x))


def _check_extent(config, x):
    if x.data.ndim != 4:
        raise DimensionError(f"expected (B,C,H,W) input, got {x.data.shape}")
    if x.data.shape[1] != config.in_channels:
        raise DimensionError(
            f"model built for {config.in_channels} channels, input has {x.data.shape[1]}"
        )
    div = 2 ** (config.levels - 1)
    _, _, h, w = x.data.shape
    if h % div or w % div:
        raise DimensionError(
            f"spatial extent {h}x{w} not divisible by {div} "
            f"(levels={config.levels})"
        )


class VanillaUNet(Module):
    """Encoder-decoder with single skip connections per level."""

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        se = config.se_reduction if config.arch == "se" else None
        ch = [config.base_channels * 2 ** i for i in range(config.levels)]
        self.encoders = [
            DoubleConv(config.in_channels if i == 0 else ch[i - 1], ch[i],
                       rng, se_reduction=se)
            for i in range(config.levels)
        ]
        self.ups = [UpConv(ch[i + 1], ch[i], rng)
                    for i in range(config.levels - 1)]
        self.decoders = [
            DoubleConv(2 * ch[i], ch[i], rng, se_reduction=se)
            for i in range(config.levels - 1)
        ]
        self.head = Conv2d(ch[0], 1, 1, rng, bias=True)

    def forward(self, x):
        _check_extent(self.config, x)
        skips = []
        for i, enc in enumerate(self.encoders):
            x = enc(x)
            if i < len(self.encoders) - 1:
                skips.append(x)
                x = ad.max_pool2d(x, 2)
        for i in range(len(self.decoders) - 1, -1, -1):
            x = self.ups[i](x)
            x = self.decoders[i](ad.concat_channels(skips[i], x))
        return self.head(x)


class NestedUNet(Module):
    """Encoder-decoder with dense nested skips.

    Node (i, j) for i + j <= levels - 1 refines level i using all
    earlier nodes at that level plus an upsampled node from level i + 1;
    the head reads the last node of the top row.
    """

    def __init__(self, config, rng):
        super().__init__()
        self.config = config
        se = config.se_reduction if config.arch == "se" else None
        levels = config.levels
        ch = [config.base_channels * 2 ** i for i in range(levels)]
        self.nodes = []
        self.ups = []
        self._slots = {}
        for j in range(levels):
            for i in range(levels - j):
                if j == 0:
                    cin = config.in_channels if i == 0 else ch[i - 1]
                else:
                    cin = (j + 1) * ch[i]
                self._slots[(i, j)] = len(self.nodes)
                self.nodes.append(DoubleConv(cin, ch[i], rng, se_reduction=se))
                if j > 0:
                    self.ups.append(UpConv(ch[i + 1], ch[i], rng))
        self.head = Conv2d(ch[0], 1, 1, rng, bias=True)

    def forward(self, x):
        _check_extent(self.config, x)
        levels = self.config.levels
        grid = {}
        up_idx = 0
        for j in range(levels):
            for i in range(levels - j):
                node = self.nodes[self._slots[(i, j)]]
                if j == 0:
                    inp = x if i == 0 else ad.max_pool2d(grid[(i - 1, 0)], 2)
                    grid[(i, j)] = node(inp)
                else:
                    lifted = self.ups[up_idx](grid[(i + 1, j - 1)])
                    up_idx += 1
                    parts = [grid[(i, jj)] for jj in range(j)] + [lifted]
                    grid[(i, j)] = node(ad.concat_channels(*parts))
        return self.head(grid[(0, levels - 1)])


def build_model(config, seed=0):
    """Construct the configured architecture with seeded initialization."""
    rng = np.random.default_rng(seed)
    if config.arch == "nested":
        return NestedUNet(config, rng)
    return VanillaUNet(config, rng)
