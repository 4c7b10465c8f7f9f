"""Valid-convolution 3D UNet: config, shape arithmetic, init, forward.

Every convolution is unpadded, so the network output is smaller than its
input by a fixed context margin per spatial axis. The decoder upsamples by
nearest-neighbor replication and immediately applies a channel-halving 3^3
valid convolution (counted as the first of the level's convolutions), which
keeps the margin recurrence of the classic valid-padding UNet:
m(2) = 16, m(L) = 2*m(L-1) + 8 for kernel 3 with two convs per block.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .tensor import Precision, Tensor, ShapeError, concat_channels, conv3d_valid, crop_center, max_pool3d, relu, upsample_nearest3d


class GeometryError(ShapeError):
    """An input extent is incompatible with the architecture."""


@dataclass(frozen=True)
class ArchitectureConfig:
    in_channels: int = 4
    out_channels: int = 1
    levels: int = 2
    convs_per_block: int = 2
    kernel: int = 3
    base_channels: int = 8

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.convs_per_block < 1:
            raise ValueError(f"convs_per_block must be >= 1, got {self.convs_per_block}")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd and >= 3, got {self.kernel}")
        if self.in_channels < 1 or self.out_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be >= 1")
        margin = context_margin(self)
        assert margin % 2 == 0, f"context margin {margin} must be even"

    def level_channels(self, level: int) -> int:
        return self.base_channels * 2**level


def simulate_output_extent(config: ArchitectureConfig, extent: int) -> int:
    """Push one spatial extent through every stage; raises GeometryError naming
    the first stage whose size constraint fails."""
    k, cpb = config.kernel, config.convs_per_block
    e = int(extent)
    skips = []
    for level in range(1, config.levels):
        for j in range(cpb):
            e -= k - 1
            if e < 1:
                raise GeometryError(f"encoder level {level} conv {j + 1}: extent shrinks to {e}")
        skips.append(e)
        if e % 2 != 0:
            raise GeometryError(f"encoder level {level} pooling: extent {e} not divisible by 2")
        e //= 2
    for j in range(cpb):
        e -= k - 1
        if e < 1:
            raise GeometryError(f"bottom conv {j + 1}: extent shrinks to {e}")
    for level in range(config.levels - 1, 0, -1):
        e *= 2
        e -= k - 1
        if e < 1:
            raise GeometryError(f"decoder level {level} post-upsample conv: extent shrinks to {e}")
        for j in range(cpb - 1):
            e -= k - 1
            if e < 1:
                raise GeometryError(f"decoder level {level} conv {j + 2}: extent shrinks to {e}")
        skip = skips[level - 1]
        if skip < e:
            raise GeometryError(f"decoder level {level} skip crop: encoder extent {skip} < decoder extent {e}")
    return e


def context_margin(config: ArchitectureConfig) -> int:
    """Input extent minus output extent, identical for every valid input."""
    for e in range(1, 1 << 14):
        try:
            return e - simulate_output_extent(config, e)
        except GeometryError:
            continue
    raise RuntimeError("no valid input extent below 16384")


class ValidExtents(NamedTuple):
    least: int
    stride: int


def valid_input_extents(config: ArchitectureConfig, min_output: int) -> ValidExtents:
    """Smallest input extent producing at least min_output, plus the stride of
    the full set of valid extents (every pooling needs an even extent)."""
    margin = context_margin(config)
    stride = 2 ** (config.levels - 1)
    e = max(min_output + margin, 1)
    while True:
        try:
            if simulate_output_extent(config, e) >= min_output:
                return ValidExtents(e, stride)
        except GeometryError:
            pass
        e += 1


ARCHITECTURES: dict[str, ArchitectureConfig] = {
    # 36^3 -> 20^3, minutes-scale CPU training
    "desk": ArchitectureConfig(levels=2, base_channels=8),
    # reproduces the 108^3 -> 20^3 / margin-88 patch arithmetic; not CI-runnable
    "paper-geometry": ArchitectureConfig(levels=4, base_channels=8),
}


def architecture_preset(name: str) -> ArchitectureConfig:
    try:
        return ARCHITECTURES[name]
    except KeyError:
        raise KeyError(f"unknown architecture preset {name!r}; known: {sorted(ARCHITECTURES)}") from None


class ModelParameters:
    """Named, ordered learnable tensors with a stable flattened view."""

    def __init__(self, items: Sequence[tuple[str, Tensor]]):
        names = [n for n, _ in items]
        if len(set(names)) != len(names):
            raise ValueError("parameter names must be unique")
        self._items: list[tuple[str, Tensor]] = list(items)
        self._index: dict[str, Tensor] = dict(items)

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def get(self, name: str) -> Tensor:
        return self._index[name]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self._items]

    @property
    def total_size(self) -> int:
        return sum(t.size for _, t in self._items)

    def index_map(self) -> list[tuple[str, int, int]]:
        """(name, start, end) spans into the flattened vector."""
        spans, off = [], 0
        for name, t in self._items:
            spans.append((name, off, off + t.size))
            off += t.size
        return spans

    def flatten(self) -> np.ndarray:
        return np.concatenate([t.data.reshape(-1) for _, t in self._items])

    def set_flat(self, vec: np.ndarray) -> None:
        if vec.size != self.total_size:
            raise ShapeError(f"flat vector length {vec.size} != parameter count {self.total_size}")
        off = 0
        for _, t in self._items:
            t.data = np.ascontiguousarray(vec[off:off + t.size].reshape(t.shape), dtype=t.dtype)
            off += t.size

    def grads_flat(self) -> np.ndarray:
        parts = []
        for _, t in self._items:
            if t.grad is None:
                parts.append(np.zeros(t.size, dtype=t.dtype))
            else:
                parts.append(t.grad.reshape(-1))
        return np.concatenate(parts)

    def zero_grad(self) -> None:
        for _, t in self._items:
            t.grad = None

    def copy(self) -> "ModelParameters":
        return ModelParameters(
            [(n, Tensor(t.data.copy(), requires_grad=t.requires_grad)) for n, t in self._items]
        )


def conv_layer_specs(config: ArchitectureConfig) -> list[tuple[str, int, int, int]]:
    """(name, in_channels, out_channels, kernel) for every convolution, in
    forward order. Shared by build_model and forward so they cannot drift."""
    k, cpb = config.kernel, config.convs_per_block
    specs = []
    cur = config.in_channels
    for level in range(1, config.levels):
        ch = config.level_channels(level - 1)
        for j in range(cpb):
            specs.append((f"enc{level}.conv{j + 1}", cur, ch, k))
            cur = ch
    ch = config.level_channels(config.levels - 1)
    for j in range(cpb):
        specs.append((f"bottom.conv{j + 1}", cur, ch, k))
        cur = ch
    skip_channels = {level: config.level_channels(level - 1) for level in range(1, config.levels)}
    for level in range(config.levels - 1, 0, -1):
        ch = config.level_channels(level - 1)
        specs.append((f"dec{level}.up", cur, ch, k))
        cur = ch + skip_channels[level]
        for j in range(cpb - 1):
            specs.append((f"dec{level}.conv{j + 2}", cur, ch, k))
            cur = ch
    specs.append(("final", cur, config.out_channels, 1))
    return specs


def build_model(config: ArchitectureConfig, seed, precision: Precision = Precision.SINGLE) -> ModelParameters:
    """He-initialized parameters: kernels ~ N(0, 2/fan_in), biases zero.

    Weights are drawn in float64 and cast, so a seed produces the same values
    in both precisions.
    """
    rng = np.random.default_rng(seed)
    dtype = precision.dtype
    items: list[tuple[str, Tensor]] = []
    for name, cin, cout, k in conv_layer_specs(config):
        fan_in = cin * k**3
        w = rng.standard_normal((cout, cin, k, k, k)) * np.sqrt(2.0 / fan_in)
        items.append((f"{name}.weight", Tensor(w.astype(dtype), requires_grad=True)))
        items.append((f"{name}.bias", Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)))
    return ModelParameters(items)


def _conv_relu(params: ModelParameters, name: str, x: Tensor) -> Tensor:
    return relu(conv3d_valid(x, params.get(f"{name}.weight"), params.get(f"{name}.bias")))


def forward(params: ModelParameters, config: ArchitectureConfig, patch: Tensor) -> Tensor:
    """UNet forward pass; output spatial extent = input extent - context_margin."""
    if patch.data.ndim != 4 or patch.shape[0] != config.in_channels:
        raise ShapeError(f"forward expects [{config.in_channels},D,H,W] patch, got {patch.shape}")
    for ext in patch.shape[1:]:
        simulate_output_extent(config, ext)

    cpb = config.convs_per_block
    skips = []
    x = patch
    for level in range(1, config.levels):
        for j in range(cpb):
            x = _conv_relu(params, f"enc{level}.conv{j + 1}", x)
        skips.append(x)
        x = max_pool3d(x, 2)
    for j in range(cpb):
        x = _conv_relu(params, f"bottom.conv{j + 1}", x)
    for level in range(config.levels - 1, 0, -1):
        x = upsample_nearest3d(x, 2)
        x = _conv_relu(params, f"dec{level}.up", x)
        skip = crop_center(skips[level - 1], x.shape[1:])
        x = concat_channels(skip, x)
        for j in range(cpb - 1):
            x = _conv_relu(params, f"dec{level}.conv{j + 2}", x)
    return conv3d_valid(x, params.get("final.weight"), params.get("final.bias"))
