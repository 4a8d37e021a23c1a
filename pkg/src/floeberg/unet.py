"""Four-block U-Net producing per-pixel class probabilities.

Layout (encoder filters ``f = [16, 32, 64, 64]`` by default):

* encoder blocks 1-3: conv3x3 -> ReLU -> conv3x3 -> ReLU, then 2x2 max-pool;
* encoder block 4 is the bottleneck (two convs, no pooling);
* three decoder blocks, each a 2x2 stride-2 deconvolution back to the
  skip's filter count, channel concatenation with the skip, two convs;
* a final 1x1 convolution to ``num_classes`` logits and a channel softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 7
    num_classes: int = 4
    encoder_filters: tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 3
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        if len(self.encoder_filters) != 4:
            raise ValueError("encoder_filters must list exactly 4 filter counts")
        if min(self.encoder_filters) <= 0 or self.in_channels <= 0 or self.num_classes <= 0:
            raise ValueError("channel and filter counts must be positive")
        if self.kernel % 2 == 0 or self.kernel <= 0:
            raise ValueError("kernel size must be a positive odd integer")

    @property
    def divisor(self) -> int:
        """Required divisor of the input height and width."""
        return 2 ** len(self.encoder_filters)


@dataclass
class UNetParams:
    """Ordered named parameters; names encode the layer they belong to."""

    names: list[str] = field(default_factory=list)
    tensors: list[ad.Parameter] = field(default_factory=list)

    def add(self, name: str, p: ad.Parameter) -> None:
        self.names.append(name)
        self.tensors.append(p)

    def __getitem__(self, name: str) -> ad.Parameter:
        return self.tensors[self.names.index(name)]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return zip(self.names, self.tensors)

    def zero_grad(self) -> None:
        for p in self.tensors:
            p.zero_grad()

    def astype(self, dtype) -> UNetParams:
        out = UNetParams()
        for n, p in self.items():
            out.add(n, ad.Parameter(p.data.astype(dtype)))
        return out


def layer_shapes(cfg: UNetConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Declaration-ordered (name, shape) list of every parameter."""
    k = cfg.kernel
    f = cfg.encoder_filters
    shapes: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, cin, cout, ks=k):
        shapes.append((f"{name}.w", (cout, cin, ks, ks)))
        shapes.append((f"{name}.b", (cout,)))

    cin = cfg.in_channels
    for i, fi in enumerate(f):
        conv(f"enc{i + 1}.conv1", cin, fi)
        conv(f"enc{i + 1}.conv2", fi, fi)
        cin = fi
    for level in (3, 2, 1):
        skip = f[level - 1]
        shapes.append((f"dec{level}.up.w", (cin, skip, 2, 2)))
        shapes.append((f"dec{level}.up.b", (skip,)))
        conv(f"dec{level}.conv1", 2 * skip, skip)
        conv(f"dec{level}.conv2", skip, skip)
        cin = skip
    conv("head", cin, cfg.num_classes, ks=1)
    return shapes


def init_params(cfg: UNetConfig, dtype=np.float64) -> UNetParams:
    """He-normal weights (std sqrt(2 / fan_in)), zero biases, seeded."""
    rng = np.random.default_rng(cfg.seed)
    params = UNetParams()
    for name, shape in layer_shapes(cfg):
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            if ".up." in name:
                fan_in = shape[0] * shape[2] * shape[3]
            else:
                fan_in = shape[1] * shape[2] * shape[3]
            data = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params.add(name, ad.Parameter(data.astype(dtype)))
    return params


def param_count(cfg: UNetConfig) -> int:
    return int(sum(np.prod(s) for _, s in layer_shapes(cfg)))


def _block(p: UNetParams, prefix: str, x: ad.Tensor) -> ad.Tensor:
    x = ad.relu(ad.conv2d(x, p[f"{prefix}.conv1.w"], p[f"{prefix}.conv1.b"]))
    return ad.relu(ad.conv2d(x, p[f"{prefix}.conv2.w"], p[f"{prefix}.conv2.b"]))


def logits(p: UNetParams, x: ad.Tensor, cfg: UNetConfig | None = None) -> ad.Tensor:
    cfg = cfg or UNetConfig(in_channels=x.shape[1])
    if x.ndim != 4:
        raise ValueError(f"expected input of shape (B, C, H, W), got {x.shape}")
    h, w = x.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ValueError(f"input spatial dims {h}x{w} must be divisible by {cfg.divisor}")
    skips = []
    for i in range(1, 4):
        x = _block(p, f"enc{i}", x)
        skips.append(x)
        x = ad.maxpool2x2(x)
    x = _block(p, "enc4", x)
    for level in (3, 2, 1):
        x = ad.conv_transpose2d(x, p[f"dec{level}.up.w"], p[f"dec{level}.up.b"])
        x = ad.concat_channels(x, skips[level - 1])
        x = _block(p, f"dec{level}", x)
    return ad.conv2d(x, p["head.w"], p["head.b"])


def forward(p: UNetParams, x: ad.Tensor, cfg: UNetConfig | None = None) -> ad.Tensor:
    """Class probabilities of shape (B, num_classes, H, W)."""
    return ad.softmax_channels(logits(p, x, cfg))
