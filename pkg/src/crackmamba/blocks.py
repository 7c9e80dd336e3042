"""Composite blocks: attention gate, (Snake)VSS, the three-branch SCVSS block,
decoder block and segmentation heads. All operate on NCHW maps."""
from __future__ import annotations

import functools

import numpy as np

from . import scan
from .errors import InvalidArgument
from .nn import functional as F
from .nn.layers import Conv2d, LayerNorm, Linear, Module
from .nn.tensor import Tensor
from .ssm import SSMParams, selective_scan


def to_tokens(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 2, 3, 1))


def to_map(x: Tensor) -> Tensor:
    return F.transpose(x, (0, 3, 1, 2))


@functools.lru_cache(maxsize=256)
def cached_dirs(family: str, h: int, w: int, seed: int = 0) -> scan.DirectionSet:
    return scan.direction_set(family, h, w, seed)


class SCA(Module):
    """Pooled-vector gate followed by a channel-statistics map gate.

    The two pooled vectors (global max, global mean) share one FC-ReLU-FC
    stack; the map gate convolves the per-pixel channel max and mean.
    """

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4, kernel: int = 7):
        hidden = max(1, channels // ratio)
        self.fc1 = Linear(channels, hidden, rng)
        self.fc2 = Linear(hidden, channels, rng)
        self.conv = Conv2d(2, 1, kernel, rng, padding=kernel // 2)
        self.conv.bias.data[...] = 0.0

    def _mlp(self, v: Tensor) -> Tensor:
        return self.fc2(F.relu(self.fc1(v)))

    def forward(self, x: Tensor) -> Tensor:
        n, c = x.shape[:2]
        vmax = F.global_max_pool(x).reshape(n, c)
        vavg = F.global_avg_pool(x).reshape(n, c)
        gate = F.sigmoid(F.add(self._mlp(vmax), self._mlp(vavg))).reshape(n, c, 1, 1)
        xs = F.mul(x, gate)
        stats = F.concat([F.channel_max(xs), F.channel_mean(xs)], axis=1)
        return F.mul(xs, F.sigmoid(self.conv(stats)))


class VSS(Module):
    """Vision state-space block over four scan directions.

    norm -> in-projection split into (x, z) -> depthwise 3x3 conv + SiLU ->
    expand into 4 sequences -> selective scan (one parameter set per
    direction) -> merge -> norm -> gate by SiLU(z) -> out-projection.
    Which four orders are used is decided by ``family`` at call time, so the
    same weights can run cross, snake or random scans.
    """

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator,
                 expand: int = 2, family: str = "cross", seed: int = 0, euler: bool = False):
        inner = expand * channels
        self.norm = LayerNorm(channels)
        self.in_proj = Linear(channels, 2 * inner, rng, bias=False)
        self.dwconv = Conv2d(inner, inner, 3, rng, padding=1, groups=inner)
        self.ssm = SSMParams(inner, state_dim, rng, groups=4)
        self.out_norm = LayerNorm(inner)
        self.out_proj = Linear(inner, channels, rng, bias=False)
        self.inner, self.family, self.seed, self.euler = inner, family, seed, euler

    def forward(self, x: Tensor, dirs: scan.DirectionSet | None = None) -> Tensor:
        n, c, h, w = x.shape
        if dirs is None:
            dirs = cached_dirs(self.family, h, w, self.seed)
        e = self.inner
        t = self.in_proj(self.norm(to_tokens(x)))
        xi, z = t[..., :e], t[..., e:]
        xi = F.silu(self.dwconv(to_map(xi)))
        seqs = F.transpose(scan.expand(xi, dirs), (0, 1, 3, 2))      # [N,4,L,E]
        ys = selective_scan(seqs, self.ssm, self.euler)
        merged = scan.merge(F.transpose(ys, (0, 1, 3, 2)), dirs)     # [N,E,H,W]
        y = F.mul(self.out_norm(to_tokens(merged)), F.silu(z))
        return to_map(self.out_proj(y))


class ConvBranch(Module):
    def __init__(self, channels: int, rng: np.random.Generator):
        self.norm = LayerNorm(channels, axis=1)
        self.conv1 = Conv2d(channels, channels, 3, rng, padding=1)
        self.conv2 = Conv2d(channels, channels, 3, rng, padding=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.conv2(F.relu(self.conv1(self.norm(x))))


class MLP(Module):
    """Pre-norm residual feed-forward over tokens: x + fc2(silu(fc1(norm(x))))."""

    def __init__(self, channels: int, rng: np.random.Generator, ratio: int = 4):
        self.norm = LayerNorm(channels, axis=1)
        self.fc1 = Linear(channels, ratio * channels, rng)
        self.fc2 = Linear(ratio * channels, channels, rng)

    def forward(self, x: Tensor) -> Tensor:
        t = to_tokens(self.norm(x))
        return F.add(x, to_map(self.fc2(F.silu(self.fc1(t)))))


class SCVSS(Module):
    """Convolution, cross-scan VSS and snake-scan VSS branches, each gated by
    SCA, summed under drop-path, added to the input, then the MLP."""

    def __init__(self, channels: int, state_dim: int, rng: np.random.Generator, *,
                 use_cross: bool = True, use_snake: bool = True, use_conv: bool = True,
                 use_sca: bool = True, drop_path: float = 0.0, expand: int = 2,
                 mlp_ratio: int = 4, sca_ratio: int = 4, sca_kernel: int = 7,
                 snake_family: str = "snake", scan_seed: int = 0, euler: bool = False):
        if not (use_cross or use_snake or use_conv):
            raise InvalidArgument("SCVSS needs at least one branch")
        self.conv_branch = ConvBranch(channels, rng) if use_conv else None
        self.snake_vss = (VSS(channels, state_dim, rng, expand, snake_family, scan_seed, euler)
                          if use_snake else None)
        self.cross_vss = VSS(channels, state_dim, rng, expand, "cross", scan_seed, euler) if use_cross else None
        n_branch = sum(b is not None for b in (self.conv_branch, self.snake_vss, self.cross_vss))
        self.sca = [SCA(channels, rng, sca_ratio, sca_kernel) for _ in range(n_branch)] if use_sca else []
        self.mlp = MLP(channels, rng, mlp_ratio)
        self.drop_path = drop_path

    def branches(self, x: Tensor) -> Tensor:
        outs = [b(x) for b in (self.conv_branch, self.snake_vss, self.cross_vss) if b is not None]
        if self.sca:
            outs = [g(o) for g, o in zip(self.sca, outs)]
        total = outs[0]
        for o in outs[1:]:
            total = F.add(total, o)
        return total

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        b = F.drop_path(self.branches(x), self.drop_path, self.training, rng)
        return self.mlp(F.add(x, b))


class ConvNormAct(Module):
    def __init__(self, cin: int, cout: int, rng: np.random.Generator, kernel: int = 3):
        self.conv = Conv2d(cin, cout, kernel, rng, padding=kernel // 2)
        self.norm = LayerNorm(cout, axis=1)

    def forward(self, x: Tensor) -> Tensor:
        return F.relu(self.norm(self.conv(x)))


class DecoderBlock(Module):
    """Upsample x2, adjust channels with a 1x1 conv, concat the skip, fuse with two 3x3 layers."""

    def __init__(self, cin: int, cskip: int, cout: int, rng: np.random.Generator,
                 upsample: str = "bilinear"):
        self.adjust = Conv2d(cin, cout, 1, rng)
        self.fuse1 = ConvNormAct(cout + cskip, cout, rng)
        self.fuse2 = ConvNormAct(cout, cout, rng)
        self.upsample = upsample

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        if skip.ndim != 4 or skip.shape[0] != x.shape[0] or skip.shape[2:] != (2 * x.shape[2], 2 * x.shape[3]):
            raise InvalidArgument(f"skip {list(skip.shape)} is not 2x the spatial size of {list(x.shape)}")
        up = F.upsample_bilinear(x, 2) if self.upsample == "bilinear" else F.upsample_nearest(x, 2)
        y = F.concat([self.adjust(up), skip], axis=1)
        return self.fuse2(self.fuse1(y))


class SegHead(Module):
    """Two 3x3 conv-norm-relu layers and a 1x1 conv to class logits."""

    def __init__(self, cin: int, hidden: int, rng: np.random.Generator, classes: int = 2):
        self.layer1 = ConvNormAct(cin, hidden, rng)
        self.layer2 = ConvNormAct(hidden, hidden, rng)
        self.classify = Conv2d(hidden, classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(self.layer2(self.layer1(x)))


class AuxHead(Module):
    def __init__(self, cin: int, rng: np.random.Generator, classes: int = 2):
        self.classify = Conv2d(cin, classes, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.classify(x)
