"""Residual encoder with a multi-scale context stage and a 4K-channel head."""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, ShapeError, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class MSCConfig:
    dilations: tuple = (1, 2, 3)
    dil_kernel: int = 3
    pool_strides: tuple = (1, 2, 4)
    pool_kernel: int = 3
    fuse_channels: int = 64
    bottleneck_reduction: int = 4

    def validate(self) -> None:
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError(f"dilations must be >= 1: {self.dilations}")
        if not self.pool_strides or min(self.pool_strides) < 1:
            raise ConfigError(f"pool strides must be >= 1: {self.pool_strides}")
        if self.dil_kernel % 2 == 0 or self.pool_kernel % 2 == 0:
            raise ConfigError("MSC kernels must be odd to preserve resolution")
        if self.fuse_channels % self.bottleneck_reduction:
            raise ConfigError("fuse_channels must be divisible by bottleneck_reduction")


@dataclass
class EncoderConfig:
    stem_channels: int = 16
    stage_channels: tuple = (16, 32, 64)
    blocks_per_stage: int = 2
    use_msc: bool = True
    msc: MSCConfig = field(default_factory=MSCConfig)
    num_objects: int = 11
    stem_stride: int = 2
    stage_strides: tuple = (2, 2, 2)
    # width of the plain residual last stage used when use_msc is False
    plain_channels: int = 128
    stride: int = 16

    @property
    def head_channels(self) -> int:
        return 4 * self.num_objects

    def validate(self) -> None:
        if len(self.stage_strides) != len(self.stage_channels):
            raise ConfigError("stage_strides and stage_channels differ in length")
        total = self.stem_stride * math.prod(self.stage_strides)
        if total != self.stride:
            raise ConfigError(f"encoder strides compose to {total}, expected {self.stride}")
        if self.blocks_per_stage < 1:
            raise ConfigError("blocks_per_stage must be >= 1")
        self.msc.validate()


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

_flop_log: Optional[list] = None


@contextlib.contextmanager
def _count_flops():
    global _flop_log
    _flop_log = []
    try:
        yield _flop_log
    finally:
        _flop_log = None


class Module:
    """Parameter container; children are discovered from attributes in definition order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, v in _walk(self, prefix.rstrip(".")):
            if isinstance(v, BatchNormState):
                yield name + ".gamma", v.gamma
                yield name + ".beta", v.beta
            else:
                yield name, v

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, v in _walk(self, prefix.rstrip(".")):
            if isinstance(v, BatchNormState):
                yield name + ".running_mean", v.running_mean
                yield name + ".running_var", v.running_var

    def astype(self, dtype) -> "Module":
        """Cast parameters and running statistics in place (float64 for gradient checks)."""
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for bn in self.batchnorm_states():
            bn.running_mean = bn.running_mean.astype(dtype)
            bn.running_var = bn.running_var.astype(dtype)
        return self

    def batchnorm_states(self) -> Iterator[BatchNormState]:
        for _, v in _walk(self, ""):
            if isinstance(v, BatchNormState):
                yield v


def _walk(v, name):
    if isinstance(v, Tensor):
        if v.requires_grad:
            yield name, v
    elif isinstance(v, BatchNormState):
        yield name, v
    elif isinstance(v, Module):
        for key, child in vars(v).items():
            yield from _walk(child, f"{name}.{key}" if name else key)
    elif isinstance(v, list):
        for i, item in enumerate(v):
            yield from _walk(item, f"{name}.{i}")


class Conv(Module):
    def __init__(self, rng, cin, cout, k, stride=1, dilation=1, bias=False):
        std = math.sqrt(2.0 / (cin * k * k))
        self.weight = Tensor(rng.normal(0.0, std, (cout, cin, k, k)).astype(np.float32), requires_grad=True)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True) if bias else None
        self.stride = stride
        self.dilation = dilation
        self.padding = dilation * (k - 1) // 2

    def __call__(self, x: Tensor) -> Tensor:
        y = T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)
        if _flop_log is not None:
            cout, cin, kh, kw = self.weight.shape
            _, _, ho, wo = y.shape
            _flop_log.append(2 * kh * kw * cin * cout * ho * wo + (ho * wo * cout if self.bias is not None else 0))
        return y


class BN(Module):
    def __init__(self, channels):
        self.state = BatchNormState.create(channels)

    def __call__(self, x, mode):
        return T.batchnorm2d(x, self.state, mode)


class BasicBlock(Module):
    def __init__(self, rng, cin, cout, stride):
        self.conv1 = Conv(rng, cin, cout, 3, stride)
        self.bn1 = BN(cout)
        self.conv2 = Conv(rng, cout, cout, 3)
        self.bn2 = BN(cout)
        if stride != 1 or cin != cout:
            self.down = Conv(rng, cin, cout, 1, stride)
            self.down_bn = BN(cout)
        else:
            self.down = None

    def __call__(self, x, mode):
        y = T.relu(self.bn1(self.conv1(x), mode))
        y = self.bn2(self.conv2(y), mode)
        skip = self.down_bn(self.down(x), mode) if self.down is not None else x
        return T.relu(y + skip)


class Bottleneck(Module):
    """1×1 reduce, 3×3, 1×1 expand, identity skip."""

    def __init__(self, rng, channels, reduction):
        mid = channels // reduction
        self.reduce = Conv(rng, channels, mid, 1)
        self.bn1 = BN(mid)
        self.conv = Conv(rng, mid, mid, 3)
        self.bn2 = BN(mid)
        self.expand = Conv(rng, mid, channels, 1)
        self.bn3 = BN(channels)

    def __call__(self, x, mode):
        y = T.relu(self.bn1(self.reduce(x), mode))
        y = T.relu(self.bn2(self.conv(y), mode))
        y = self.bn3(self.expand(y), mode)
        return T.relu(y + x)


class MSC(Module):
    """Multi-scale context stage.

    Parallel dilated convolutions are summed, then max-pooled at several
    strides (each strided branch brought back to full size by nearest
    upsampling) and concatenated, fused by a 1×1 convolution, and refined
    by a residual bottleneck. Spatial size is preserved.
    """

    def __init__(self, rng, cin, cfg: MSCConfig):
        self.cfg = cfg
        self.dilated = [Conv(rng, cin, cin, cfg.dil_kernel, dilation=d) for d in cfg.dilations]
        self.bn = BN(cin)
        self.fuse = Conv(rng, cin * len(cfg.pool_strides), cfg.fuse_channels, 1, bias=True)
        self.bottleneck = Bottleneck(rng, cfg.fuse_channels, cfg.bottleneck_reduction)

    def __call__(self, x, mode):
        h, w = x.shape[2:]
        for s in self.cfg.pool_strides:
            if h % s or w % s:
                raise ShapeError(f"MSC input {h}x{w} not divisible by pool stride {s}")
        y = self.dilated[0](x)
        for conv in self.dilated[1:]:
            y = y + conv(x)
        y = T.relu(self.bn(y, mode))
        k = self.cfg.pool_kernel
        branches = [
            T.upsample_nearest(T.maxpool2d(y, k, s, k // 2), s) for s in self.cfg.pool_strides
        ]
        y = T.relu(self.fuse(T.concat(branches, axis=1)))
        return self.bottleneck(y, mode)


class PlainStage(Module):
    """Ordinary residual stage at stride 1, the ablation counterpart of MSC."""

    def __init__(self, rng, cin, cout, blocks):
        self.blocks = [BasicBlock(rng, cin if i == 0 else cout, cout, 1) for i in range(blocks)]

    def __call__(self, x, mode):
        for b in self.blocks:
            x = b(x, mode)
        return x


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


@dataclass
class NetworkOutput:
    """Post-activation channel groups, each ``[B, K, H', W']``."""

    coarse: Tensor
    fine_x: Tensor
    fine_y: Tensor
    category: Tensor

    @property
    def raw(self) -> Tensor:
        return T.concat([self.coarse, self.fine_x, self.fine_y, self.category], axis=1)

    def arrays(self):
        return self.coarse.data, self.fine_x.data, self.fine_y.data, self.category.data


class CCFNet(Module):
    def __init__(self, cfg: EncoderConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.stem = Conv(rng, 1, cfg.stem_channels, 3, cfg.stem_stride)
        self.stem_bn = BN(cfg.stem_channels)
        self.stages = []
        cin = cfg.stem_channels
        for cout, s in zip(cfg.stage_channels, cfg.stage_strides):
            blocks = [BasicBlock(rng, cin, cout, s)]
            blocks += [BasicBlock(rng, cout, cout, 1) for _ in range(cfg.blocks_per_stage - 1)]
            self.stages.append(blocks)
            cin = cout
        if cfg.use_msc:
            self.last = MSC(rng, cin, cfg.msc)
            cin = cfg.msc.fuse_channels
        else:
            self.last = PlainStage(rng, cin, cfg.plain_channels, cfg.blocks_per_stage)
            cin = cfg.plain_channels
        self.head = Conv(rng, cin, cfg.head_channels, 1, bias=True)

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def buffers(self) -> dict[str, np.ndarray]:
        return dict(self.named_buffers())

    def num_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    def features(self, x: Tensor, mode: str) -> Tensor:
        y = T.relu(self.stem_bn(self.stem(x), mode))
        for blocks in self.stages:
            for b in blocks:
                y = b(y, mode)
        return self.last(y, mode)

    def __call__(self, images: Tensor, mode: str = "train") -> NetworkOutput:
        return self.forward(images, mode)

    def forward(self, images: Tensor, mode: str = "train") -> NetworkOutput:
        if images.ndim != 4 or images.shape[1] != 1:
            raise ShapeError(f"expected images [B,1,H,W], got {images.shape}")
        H, W = images.shape[2:]
        S = self.cfg.stride
        if H % S or W % S:
            raise ShapeError(f"input {H}x{W} not divisible by stride {S}")
        out = self.head(self.features(images, mode))
        K = self.cfg.num_objects
        return NetworkOutput(
            coarse=T.sigmoid(out[:, :K]),
            fine_x=out[:, K : 2 * K],
            fine_y=out[:, 2 * K : 3 * K],
            category=T.sigmoid(out[:, 3 * K :]),
        )


def build_network(cfg: Optional[EncoderConfig] = None, seed: int = 0) -> CCFNet:
    return CCFNet(cfg or EncoderConfig(), seed)


def count_params_flops(cfg: EncoderConfig, input_hw: tuple[int, int]) -> dict:
    """Exact parameter count and convolution FLOPs for one image.

    FLOPs are ``2·Kh·Kw·Cin·Cout·Hout·Wout`` per convolution plus
    ``Hout·Wout·Cout`` per bias; pooling, activations and normalization
    count as zero.
    """
    net = CCFNet(cfg, seed=0)
    x = Tensor(np.zeros((1, 1, *input_hw), np.float32))
    with T.no_grad(), _count_flops() as log:
        net.forward(x, mode="eval")
    return {"params": net.num_parameters(), "flops": int(sum(log))}
