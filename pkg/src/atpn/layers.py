"""Composite blocks: MobileNet-V3 bottleneck, multiview block, coordinate channels, upsample-fuse."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .conv import conv2d
from .nn import BatchNorm2d, Conv2d, ConvBNAct, ConvTranspose2d, Dense, Module
from .tensor import InvalidShapeError, Parameter, Tensor


@dataclass(frozen=True)
class MobileNetV3BlockSpec:
    kernel: int
    out_channels: int
    expansion: int
    stride: int = 1
    use_se: bool = False
    activation: str = "swish"

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        if self.stride not in (1, 2):
            raise ValueError(f"stride must be 1 or 2, got {self.stride}")


@dataclass(frozen=True)
class MultiviewBlockSpec:
    in_channels: int
    out_channels: int
    branch_kernels: tuple[int, int, int] = (3, 5, 7)
    branch_channels: int | None = None

    def __post_init__(self):
        if len(self.branch_kernels) != 3:
            raise ValueError("a multiview block has exactly three branches")
        if len(set(self.branch_kernels)) != 3:
            raise ValueError(f"branch kernels must be distinct, got {self.branch_kernels}")
        if any(k % 2 != 1 for k in self.branch_kernels):
            raise ValueError(f"branch kernels must be odd, got {self.branch_kernels}")


class SqueezeExcite(Module):
    def __init__(self, channels: int, reduction: int = 4, rng=None):
        super().__init__()
        hidden = max(2, channels // reduction)
        self.reduce = Dense(channels, hidden, rng=rng)
        self.expand = Dense(hidden, channels, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        s = T.flatten(T.global_avg_pool(x))
        s = T.sigmoid(self.expand(T.relu(self.reduce(s))))
        return T.mul(x, T.reshape(s, (n, c, 1, 1)))


class MobileNetV3Block(Module):
    """expand 1x1 -> depthwise kxk -> optional SE -> project 1x1, with residual when shapes allow."""

    def __init__(self, in_channels: int, spec: MobileNetV3BlockSpec, rng=None):
        super().__init__()
        self.spec = spec
        self.in_channels = in_channels
        exp = spec.expansion
        self.expand = ConvBNAct(in_channels, exp, 1, act=spec.activation, rng=rng) if exp != in_channels else None
        self.depthwise = ConvBNAct(exp, exp, spec.kernel, spec.stride, groups=exp, act=spec.activation, rng=rng)
        self.se = SqueezeExcite(exp, rng=rng) if spec.use_se else None
        self.project = Conv2d(exp, spec.out_channels, 1, bias=False, rng=rng)
        self.project_bn = BatchNorm2d(spec.out_channels)

    @property
    def has_residual(self) -> bool:
        return self.spec.stride == 1 and self.in_channels == self.spec.out_channels

    def pipeline(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise InvalidShapeError(f"block expects {self.in_channels} channels, got {x.shape}")
        h = self.expand(x) if self.expand is not None else x
        h = self.depthwise(h)
        if self.se is not None:
            h = self.se(h)
        return self.project_bn(self.project(h))

    def forward(self, x: Tensor) -> Tensor:
        out = self.pipeline(x)
        return T.add(out, x) if self.has_residual else out


class MultiviewBlock(Module):
    """Three parallel same-padded convolutions, channel concat, 1x1 projection, shortcut.

    The branches share their input, so they run as one convolution whose
    kernel stacks each branch kernel zero-embedded at the largest size; with
    stride 1 and same padding this equals running them separately.  Batch
    norm is per channel, so one norm over the concatenation equals one per
    branch.
    """

    def __init__(self, spec: MultiviewBlockSpec, activation: str = "swish", rng=None):
        super().__init__()
        self.spec = spec
        self.activation = activation
        self.branch_channels = bc = spec.branch_channels or max(1, spec.out_channels // 2)
        rng = rng if rng is not None else np.random.default_rng(0)
        for i, k in enumerate(spec.branch_kernels):
            std = np.sqrt(2.0 / (spec.in_channels * k * k))
            setattr(self, f"branch{i}_weight", Parameter(rng.normal(0, std, (bc, spec.in_channels, k, k))))
        self.branch_bn = BatchNorm2d(3 * bc)
        self.project = Conv2d(3 * bc, spec.out_channels, 1, bias=False, rng=rng)
        self.project_bn = BatchNorm2d(spec.out_channels)
        if spec.in_channels != spec.out_channels:
            self.shortcut = Conv2d(spec.in_channels, spec.out_channels, 1, bias=False, rng=rng)
        else:
            self.shortcut = None

    def branch_weights(self) -> list[Parameter]:
        return [getattr(self, f"branch{i}_weight") for i in range(3)]

    def stacked_kernel(self) -> Tensor:
        kmax = max(self.spec.branch_kernels)
        return T.concat(
            [T.pad_spatial(w, (kmax - w.shape[-1]) // 2) if w.shape[-1] < kmax else w for w in self.branch_weights()],
            axis=0,
        )

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise InvalidShapeError(f"multiview expects {self.spec.in_channels} channels, got {x.shape}")
        h = conv2d(x, self.stacked_kernel(), None, 1, "same")
        n, c, hh, ww = x.shape
        kmax = max(self.spec.branch_kernels)
        # budget accounting counts the branches' own kernels, not the zero embedding
        T.record_macs(n * hh * ww * c * self.branch_channels * (sum(k * k for k in self.spec.branch_kernels) - 3 * kmax * kmax))
        h = T.activation(self.activation, self.branch_bn(h))
        h = self.project_bn(self.project(h))
        skip = self.shortcut(x) if self.shortcut is not None else x
        return T.add(h, skip)


_coord_cache: dict[tuple[int, int, str], np.ndarray] = {}


def coord_channels(h: int, w: int, dtype=np.float32) -> np.ndarray:
    """[2, H, W] grids: x linear in [-1, 1] left to right, y top to bottom; a 1-cell axis maps to 0."""
    key = (h, w, np.dtype(dtype).str)
    if key not in _coord_cache:
        xs = np.linspace(-1.0, 1.0, w) if w > 1 else np.zeros(1)
        ys = np.linspace(-1.0, 1.0, h) if h > 1 else np.zeros(1)
        grid = np.stack([np.broadcast_to(xs[None, :], (h, w)), np.broadcast_to(ys[:, None], (h, w))])
        _coord_cache[key] = grid.astype(dtype)
    return _coord_cache[key]


def coordconv(x: Tensor) -> Tensor:
    """Append the two coordinate channels: [N,C,H,W] -> [N,C+2,H,W]."""
    if x.ndim != 4:
        raise InvalidShapeError(f"coordconv expects NCHW, got {x.shape}")
    n, _, h, w = x.shape
    grid = np.broadcast_to(coord_channels(h, w, x.dtype)[None], (n, 2, h, w))
    return T.concat_channels([x, Tensor(np.ascontiguousarray(grid))])


class CoordConvBNAct(Module):
    def __init__(self, cin, cout, kernel, stride=1, act="swish", rng=None):
        super().__init__()
        self.inner = ConvBNAct(cin + 2, cout, kernel, stride, act=act, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.inner(coordconv(x))


class UpsampleFuse(Module):
    """Bring a coarse map to the fine extent (1x1 conv then stride-2 deconv) and concat."""

    def __init__(self, high_channels: int, out_channels: int, rng=None):
        super().__init__()
        self.reduce = Conv2d(high_channels, out_channels, 1, bias=False, rng=rng)
        self.up = ConvTranspose2d(out_channels, out_channels, kernel=2, stride=2, rng=rng)

    def forward(self, low: Tensor, high: Tensor) -> Tensor:
        if low.ndim != 4 or high.ndim != 4 or low.shape[0] != high.shape[0]:
            raise InvalidShapeError(f"upsample_fuse: low {low.shape}, high {high.shape}")
        if high.shape[2] * 2 != low.shape[2] or high.shape[3] * 2 != low.shape[3]:
            raise InvalidShapeError(
                f"upsample_fuse needs high extent x2 == low extent, got {high.shape[2:]} vs {low.shape[2:]}"
            )
        return T.concat_channels([low, self.up(self.reduce(high))])


def receptive_field(layers) -> tuple[int, int]:
    """Fold (kernel, stride) pairs into (receptive field, jump) in input pixels."""
    rf, jump = 1, 1
    for k, s in layers:
        rf += (k - 1) * jump
        jump *= s
    return rf, jump
