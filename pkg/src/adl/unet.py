"""Residual U-Net builders: the denoiser and the U-shaped discriminator.

Both networks share one skeleton. The encoder is three residual blocks
(strides 1, 2, 2), a bridge block keeps the coarsest scale, and the decoder
fuses the bridge with each encoder level on the way up (nearest x2
upsampling, channel concatenation, residual block). The denoiser maps every
decoder level to image space with a transformer head and feeds a
multi-dilation content enhancer into the full-resolution head; the
discriminator puts a 1x1 + sigmoid mapper on the bridge and on every decoder
level. No convolution has a bias.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import Tensor, as_tensor, concat_channels, conv_nd, relu, sigmoid, upsample_nearest

DENOISER_FILTERS = (96, 128, 160, 192)
DISCRIMINATOR_FILTERS = (48, 64, 80, 96)
ROLES = ("denoiser", "discriminator")


@dataclass
class NetworkConfig:
    role: str = "denoiser"
    filters: tuple[int, int, int, int] | None = None  # f1, f2, f3, f_bridge
    channels: int = 1
    rank: int = 2
    heads: int = 3
    ce_dilations: tuple[int, ...] = (1, 2, 4)
    ce_width: int | None = None  # per-branch width of the content enhancer; default f1 // 2
    kernel_size: int = 3

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        if self.filters is None:
            self.filters = DENOISER_FILTERS if self.role == "denoiser" else DISCRIMINATOR_FILTERS
        self.filters = tuple(int(f) for f in self.filters)
        self.ce_dilations = tuple(int(d) for d in self.ce_dilations)
        if len(self.filters) != 4 or min(self.filters) < 1:
            raise ValueError(f"filters must be four positive widths, got {self.filters}")
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.rank not in (1, 2, 3):
            raise ValueError("rank must be 1, 2 or 3")
        if self.heads != 3:
            raise ValueError("the decoder has exactly three scales")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.ce_width is None:
            self.ce_width = max(1, self.filters[0] // 2)
        for n, f in enumerate(self.filters[:3] if self.role == "denoiser" else (), start=1):
            if f >> n < 1:
                raise ValueError(f"transformer T{n} would halve {f} filters below one channel")

    def echo(self) -> dict[str, str]:
        out = {}
        for k, v in asdict(self).items():
            out[k] = ",".join(str(i) for i in v) if isinstance(v, (tuple, list)) else str(v)
        return out

    @classmethod
    def from_echo(cls, d: dict[str, str]) -> NetworkConfig:
        return cls(
            role=d["role"],
            filters=tuple(int(i) for i in d["filters"].split(",")),
            channels=int(d["channels"]),
            rank=int(d["rank"]),
            heads=int(d["heads"]),
            ce_dilations=tuple(int(i) for i in d["ce_dilations"].split(",")),
            ce_width=int(d["ce_width"]),
            kernel_size=int(d["kernel_size"]),
        )


class Conv:
    def __init__(self, cin: int, cout: int, k: int, rank: int, stride: int = 1, dilation: int = 1, gain: float = 2.0):
        self.cin, self.cout, self.k, self.stride, self.dilation = cin, cout, k, stride, dilation
        self.gain = gain
        self.weight = Tensor(np.zeros((cout, cin) + (k,) * rank, dtype=np.float32), requires_grad=True)

    def init(self, rng: np.random.Generator):
        fan_in = self.cin * self.k ** (self.weight.ndim - 2)
        std = np.sqrt(self.gain / fan_in)
        self.weight.data[...] = rng.normal(0.0, std, self.weight.shape).astype(self.weight.dtype)

    def __call__(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.weight, self.stride, self.dilation)

    def named_convs(self, prefix: str) -> Iterator[tuple[str, Conv]]:
        yield prefix, self


class ResidualBlock:
    """conv(k, stride) -> ReLU -> conv(k) plus an identity or strided 1x1 skip, then ReLU."""

    def __init__(self, cin: int, cout: int, rank: int, stride: int = 1, dilation: int = 1, k: int = 3):
        if stride not in (1, 2):
            raise ValueError(f"residual block stride must be 1 or 2, got {stride}")
        if cin < 1 or cout < 1:
            raise ValueError("residual block needs positive channel counts")
        self.conv1 = Conv(cin, cout, k, rank, stride, dilation)
        self.conv2 = Conv(cout, cout, k, rank, 1, dilation, gain=1.0)
        self.skip = None if (cin == cout and stride == 1) else Conv(cin, cout, 1, rank, stride, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(relu(self.conv1(x)))
        s = x if self.skip is None else self.skip(x)
        return relu(h + s)

    def named_convs(self, prefix: str) -> Iterator[tuple[str, Conv]]:
        yield from self.conv1.named_convs(f"{prefix}conv1.")
        yield from self.conv2.named_convs(f"{prefix}conv2.")
        if self.skip is not None:
            yield from self.skip.named_convs(f"{prefix}skip.")


class TransformerHead:
    """``n`` residual blocks at f/2, f/4, ... f/2**n, a 1x1 conv to ``out_channels`` and a sigmoid."""

    def __init__(self, n: int, cin: int, f: int, out_channels: int, rank: int, k: int = 3):
        if n < 1:
            raise ValueError("transformer index starts at 1")
        widths = [f >> i for i in range(1, n + 1)]
        if min(widths) < 1:
            raise ValueError(f"T{n} with {f} filters underflows below one channel")
        self.widths = widths
        self.blocks = []
        prev = cin
        for w in widths:
            self.blocks.append(ResidualBlock(prev, w, rank, k=k))
            prev = w
        self.out = Conv(prev, out_channels, 1, rank, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return sigmoid(self.out(x))

    def named_convs(self, prefix: str) -> Iterator[tuple[str, Conv]]:
        for i, b in enumerate(self.blocks):
            yield from b.named_convs(f"{prefix}block{i}.")
        yield from self.out.named_convs(f"{prefix}out.")


class ContentEnhancer:
    """Parallel dilated convs on the raw input, concatenated and fused by a residual block."""

    def __init__(self, cin: int, width: int, dilations, rank: int, k: int = 3):
        self.branches = [Conv(cin, width, k, rank, 1, d) for d in dilations]
        self.fuse = ResidualBlock(width * len(self.branches), width, rank, k=k)

    def branch_responses(self, y: Tensor) -> Tensor:
        return concat_channels([relu(b(y)) for b in self.branches])

    def __call__(self, y: Tensor) -> Tensor:
        return self.fuse(self.branch_responses(y))

    def named_convs(self, prefix: str) -> Iterator[tuple[str, Conv]]:
        for i, b in enumerate(self.branches):
            yield from b.named_convs(f"{prefix}branch{i}.")
        yield from self.fuse.named_convs(f"{prefix}fuse.")


class Mapper:
    def __init__(self, cin: int, rank: int):
        self.conv = Conv(cin, 1, 1, rank, gain=1.0)

    def __call__(self, x: Tensor) -> Tensor:
        return sigmoid(self.conv(x))

    def named_convs(self, prefix: str) -> Iterator[tuple[str, Conv]]:
        yield from self.conv.named_convs(prefix)


@dataclass
class DenoiserOutput:
    scales: list[Tensor]  # full, half, quarter resolution

    @property
    def image(self) -> Tensor:
        return self.scales[0]


@dataclass
class DiscriminatorOutput:
    bridge: Tensor
    decoder: list[Tensor] = field(default_factory=list)  # full, half, quarter resolution

    def maps(self) -> list[Tensor]:
        return [self.bridge] + list(self.decoder)


class Network:
    """Instantiated residual U-Net with a stable, ordered parameter registry."""

    def __init__(self, config: NetworkConfig, seed: int | np.random.Generator | None = 0):
        self.config = config
        c, r, k = config.channels, config.rank, config.kernel_size
        f1, f2, f3, fb = config.filters
        self.encoder = [
            ResidualBlock(c, f1, r, 1, k=k),
            ResidualBlock(f1, f2, r, 2, k=k),
            ResidualBlock(f2, f3, r, 2, k=k),
        ]
        self.bridge = ResidualBlock(f3, fb, r, 1, k=k)
        # decoder[0] runs at the bridge scale; decoder[1:] follow an x2 upsampling
        self.decoder = [
            ResidualBlock(fb + f3, f3, r, k=k),
            ResidualBlock(f3 + f2, f2, r, k=k),
            ResidualBlock(f2 + f1, f1, r, k=k),
        ]
        self.enhancer = None
        self.heads: list = []
        self.mappers: list = []
        if config.role == "denoiser":
            self.enhancer = ContentEnhancer(c, config.ce_width, config.ce_dilations, r, k)
            self.heads = [
                TransformerHead(1, f1 + config.ce_width, f1, c, r, k),
                TransformerHead(2, f2, f2, c, r, k),
                TransformerHead(3, f3, f3, c, r, k),
            ]
        else:
            self.mappers = [Mapper(fb, r), Mapper(f1, r), Mapper(f2, r), Mapper(f3, r)]
        self._convs = dict(self._walk())
        self._params = {name: conv.weight for name, conv in self._convs.items()}
        if seed is not None:
            self.initialize(seed)

    @property
    def role(self) -> str:
        return self.config.role

    def _modules(self):
        for i, m in enumerate(self.encoder):
            yield f"encoder.{i}.", m
        yield "bridge.", self.bridge
        for i, m in enumerate(self.decoder):
            yield f"decoder.{i}.", m
        if self.enhancer is not None:
            yield "enhancer.", self.enhancer
        for i, m in enumerate(self.heads, start=1):
            yield f"transformer{i}.", m
        for name, m in zip(("bridge", "dec1", "dec2", "dec3"), self.mappers):
            yield f"mapper.{name}.", m

    def _walk(self):
        for prefix, m in self._modules():
            for name, conv in m.named_convs(prefix):
                yield f"{name}weight", conv

    def initialize(self, seed: int | np.random.Generator = 0):
        """He-normal initialisation in registry order (deterministic per seed)."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        for conv in self._convs.values():
            conv.init(rng)

    def parameters(self) -> dict[str, Tensor]:
        return self._params

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self._params.values()))

    def set_trainable(self, flag: bool):
        for p in self._params.values():
            p.requires_grad = flag

    def astype(self, dtype) -> Network:
        for p in self._params.values():
            p.data = p.data.astype(dtype)
        return self

    # ------------------------------------------------------------ forward

    def _check_input(self, x: Tensor):
        cfg = self.config
        if x.ndim != cfg.rank + 2:
            raise ValueError(f"expected rank-{cfg.rank} input [N, C, *S], got shape {x.shape}")
        if x.shape[1] != cfg.channels:
            raise ValueError(f"network expects {cfg.channels} channels, input has {x.shape[1]}")
        if any(s % 4 for s in x.shape[2:]):
            raise ValueError(f"spatial extents {x.shape[2:]} must be divisible by 4; pad the input first")

    def trunk(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Encoder, bridge and decoder; returns the bridge and decoder features (coarse to fine)."""
        e1 = self.encoder[0](x)
        e2 = self.encoder[1](e1)
        e3 = self.encoder[2](e2)
        b = self.bridge(e3)
        d3 = self.decoder[0](concat_channels([b, e3]))
        d2 = self.decoder[1](concat_channels([upsample_nearest(d3, 2), e2]))
        d1 = self.decoder[2](concat_channels([upsample_nearest(d2, 2), e1]))
        return b, [d3, d2, d1]

    def __call__(self, x) -> DenoiserOutput | DiscriminatorOutput:
        return forward(self, x)


def forward(network: Network, x) -> DenoiserOutput | DiscriminatorOutput:
    x = as_tensor(x)
    network._check_input(x)
    b, (d3, d2, d1) = network.trunk(x)
    if network.role == "denoiser":
        ce = network.enhancer(x)
        t1, t2, t3 = network.heads
        return DenoiserOutput([t1(concat_channels([d1, ce])), t2(d2), t3(d3)])
    mb, m1, m2, m3 = network.mappers
    return DiscriminatorOutput(mb(b), [m1(d1), m2(d2), m3(d3)])


def build_denoiser(config: NetworkConfig | None = None, seed=0, **kw) -> Network:
    config = config or NetworkConfig(role="denoiser", **kw)
    if config.role != "denoiser":
        raise ValueError("config role is not denoiser")
    return Network(config, seed)


def build_discriminator(config: NetworkConfig | None = None, seed=0, **kw) -> Network:
    config = config or NetworkConfig(role="discriminator", **kw)
    if config.role != "discriminator":
        raise ValueError("config role is not discriminator")
    return Network(config, seed)


def pad_to_multiple(arr: np.ndarray, multiple: int = 4) -> tuple[np.ndarray, tuple[int, ...]]:
    """Mirror-pad the spatial axes of ``[N, C, *S]`` up to a multiple; returns the padded array and original extents."""
    spatial = arr.shape[2:]
    width = [(0, 0), (0, 0)] + [(0, (-s) % multiple) for s in spatial]
    return np.pad(arr, width, mode="symmetric"), spatial


def crop_to(arr: np.ndarray, spatial: tuple[int, ...]) -> np.ndarray:
    return arr[(slice(None), slice(None)) + tuple(slice(0, s) for s in spatial)]
