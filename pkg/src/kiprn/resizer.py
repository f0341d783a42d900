"""Kernel-inversed pyramidal resizing network.

The resizer turns one image batch into an image pyramid::

    I_j   = bilinear(x, size_j)                       # plain resize
    f     = pyconv(x)                                 # multi-kernel features at input resolution
    d_j   = branch_j(bilinear(f, size_j))             # per-level compensation
    s_j   = I_j + d_j

Branch ``j`` uses residual blocks whose kernel size depends on the level:
in the default "inversed" mode the largest level gets the smallest kernel.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .nn import Conv2d, GroupNorm, Module, PyConv, ResBlock
from .tensor import ShapeError, Tensor

FULL_LEVEL_SIZES = [(300, 300), (400, 400), (500, 500)]
DESK_LEVEL_SIZES = [(96, 96), (128, 128), (160, 160)]
PLACEMENTS = ("first", "last", "all", "none", "resblock")


class ConfigError(ValueError):
    pass


@dataclass
class KiprnConfig:
    num_levels: int = 3
    level_sizes: list = field(default_factory=lambda: list(FULL_LEVEL_SIZES))
    pyconv_layer1_kernels: list = field(default_factory=lambda: [3, 5, 7])
    pyconv_layer2_kernels: list = field(default_factory=lambda: [1, 3])
    pyconv_channels: tuple = (24, 16)
    kernel_mode: str = "inversed"  # "inversed" | "forward" | "uniform:<k>"
    resblocks_per_branch: int = 2
    branch_channels: int = 16
    zero_init_projection: bool = True
    pyconv_placement: str = "first"

    def __post_init__(self):
        self.level_sizes = [tuple(int(v) for v in s) for s in self.level_sizes]
        self.pyconv_layer1_kernels = [int(k) for k in self.pyconv_layer1_kernels]
        self.pyconv_layer2_kernels = [int(k) for k in self.pyconv_layer2_kernels]
        self.pyconv_channels = tuple(int(c) for c in self.pyconv_channels)
        self.kernel_mode = str(self.kernel_mode).lower()
        self.pyconv_placement = str(self.pyconv_placement).lower()

    @classmethod
    def desk(cls, **overrides) -> "KiprnConfig":
        return cls(**{"level_sizes": list(DESK_LEVEL_SIZES), **overrides})

    def validate(self) -> "KiprnConfig":
        m = self.num_levels
        if m < 1:
            raise ConfigError("num_levels must be positive")
        if len(self.level_sizes) != m:
            raise ConfigError(f"level_sizes has {len(self.level_sizes)} entries, num_levels is {m}")
        areas = [h * w for h, w in self.level_sizes]
        if any(h < 1 or w < 1 for h, w in self.level_sizes):
            raise ConfigError("level sizes must be positive")
        if any(b <= a for a, b in zip(areas, areas[1:])):
            raise ConfigError(f"level_sizes must be strictly increasing by area: {self.level_sizes}")
        l1, l2 = self.pyconv_channels
        if l1 % len(self.pyconv_layer1_kernels) or l2 % len(self.pyconv_layer2_kernels):
            raise ConfigError(f"pyconv_channels {self.pyconv_channels} not divisible by kernel counts "
                              f"{len(self.pyconv_layer1_kernels)}/{len(self.pyconv_layer2_kernels)}")
        for k in self.pyconv_layer1_kernels + self.pyconv_layer2_kernels:
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd and positive, got {k}")
        if self.pyconv_placement not in PLACEMENTS:
            raise ConfigError(f"pyconv_placement must be one of {PLACEMENTS}, got {self.pyconv_placement!r}")
        parse_kernel_mode(self.kernel_mode)
        if self.resblocks_per_branch < 1 or self.branch_channels < 1:
            raise ConfigError("resblocks_per_branch and branch_channels must be positive")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_sizes"] = [list(s) for s in self.level_sizes]
        d["pyconv_channels"] = list(self.pyconv_channels)
        return d


def parse_kernel_mode(mode: str):
    mode = mode.lower()
    if mode in ("inversed", "forward"):
        return mode, None
    if mode.startswith("uniform:"):
        try:
            k = int(mode.split(":", 1)[1])
        except ValueError:
            k = 0
        if k >= 1 and k % 2 == 1:
            return "uniform", k
    raise ConfigError(f"kernel_mode must be 'inversed', 'forward' or 'uniform:<odd k>', got {mode!r}")


def kernel_assignment(level_sizes, mode: str) -> list:
    """Kernel size for each level, levels given in ascending area order.

    >>> kernel_assignment([(300, 300), (400, 400), (500, 500)], "inversed")
    [7, 5, 3]
    """
    kind, k = parse_kernel_mode(mode)
    m = len(level_sizes)
    if kind == "uniform":
        return [k] * m
    base = [3 + 2 * i for i in range(m)]
    return base[::-1] if kind == "inversed" else base


@dataclass
class ImagePyramid:
    """Per-level image batches, ascending by area."""

    levels: list
    sizes: list

    def __post_init__(self):
        for t, (h, w) in zip(self.levels, self.sizes):
            if t.shape[2:] != (h, w):
                raise ShapeError(f"pyramid level {t.shape} does not match tag {(h, w)}")

    def __len__(self) -> int:
        return len(self.levels)


def resize_pyramid(x: Tensor, cfg: KiprnConfig) -> ImagePyramid:
    """Plain bilinear pyramid; no parameters."""
    return ImagePyramid([ops.bilinear_resize(x, h, w) for h, w in cfg.level_sizes], list(cfg.level_sizes))


def assemble_pyramid(deltas: list, base: ImagePyramid) -> ImagePyramid:
    if len(deltas) != len(base.levels):
        raise ShapeError(f"{len(deltas)} deltas for a {len(base.levels)}-level pyramid")
    levels = [ops.add(d, i) for d, i in zip(deltas, base.levels)]
    return ImagePyramid(levels, list(base.sizes))


class _Extractor(Module):
    def __init__(self, cfg: KiprnConfig, rng, dtype):
        super().__init__()
        c1, c2 = cfg.pyconv_channels
        if cfg.pyconv_placement in ("first", "all"):
            self.conv1 = self.child("conv1", PyConv(3, c1, cfg.pyconv_layer1_kernels, rng, dtype=dtype))
            self.conv2 = self.child("conv2", PyConv(c1, c2, cfg.pyconv_layer2_kernels, rng, dtype=dtype))
        else:
            self.conv1 = self.child("conv1", Conv2d(3, c1, 3, rng, dtype=dtype))
            self.conv2 = self.child("conv2", Conv2d(c1, c2, 3, rng, dtype=dtype))
        self.norm1 = self.child("norm1", GroupNorm(c1, dtype=dtype))
        self.norm2 = self.child("norm2", GroupNorm(c2, dtype=dtype))

    def forward(self, x):
        h = ops.relu(self.norm1(self.conv1(x)))
        return ops.relu(self.norm2(self.conv2(h)))


class _Branch(Module):
    def __init__(self, cfg: KiprnConfig, kernel: int, rng, dtype):
        super().__init__()
        cb = cfg.branch_channels
        self.kernel = kernel
        self.lift = self.child("lift", Conv2d(cfg.pyconv_channels[1], cb, 1, rng, dtype=dtype))
        self.blocks = []
        n = cfg.resblocks_per_branch
        for b in range(n):
            pyramidal = cfg.pyconv_placement in ("resblock", "all") or (
                cfg.pyconv_placement == "last" and b == n - 1)
            if pyramidal:
                block = ResBlock(cb, cfg.pyconv_layer1_kernels, rng, cfg.pyconv_layer2_kernels, dtype=dtype)
            else:
                block = ResBlock(cb, kernel, rng, dtype=dtype)
            self.blocks.append(self.child(f"block{b}", block))
        self.proj = self.child("proj", Conv2d(cb, 3, 1, rng, zero_init=cfg.zero_init_projection, dtype=dtype))

    def forward(self, f_hat):
        h = self.lift(f_hat)
        for block in self.blocks:
            h = block(h)
        return self.proj(h)


class Kiprn(Module):
    """Trainable resizer; parameters are the extractor plus one branch per level."""

    def __init__(self, cfg: KiprnConfig, rng: np.random.Generator | int = 0, dtype=np.float32):
        super().__init__()
        self.cfg = cfg.validate()
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        self.extractor = self.child("extract", _Extractor(cfg, rng, dtype))
        self.kernels = kernel_assignment(cfg.level_sizes, cfg.kernel_mode)
        self.branches = [self.child(f"branch{j}", _Branch(cfg, k, rng, dtype))
                         for j, k in enumerate(self.kernels)]

    def pyconv_extract(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected an N x 3 x H x W image batch, got {x.shape}")
        return self.extractor(x)

    def kic_compensate(self, f: Tensor) -> list:
        return [branch(ops.bilinear_resize(f, h, w))
                for branch, (h, w) in zip(self.branches, self.cfg.level_sizes)]

    def forward(self, x: Tensor) -> ImagePyramid:
        deltas = self.kic_compensate(self.pyconv_extract(x))
        return assemble_pyramid(deltas, resize_pyramid(x, self.cfg))


def kiprn_forward(model: Kiprn, x: Tensor) -> ImagePyramid:
    return model(x)
