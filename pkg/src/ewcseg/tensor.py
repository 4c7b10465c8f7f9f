"""Dense tensors with reverse-mode differentiation on an explicit tape.

Layout convention for volumetric data is [channels, depth, height, width].
Tensors are float32 (training) or float64 (gradient checks); the two modes
never mix inside one computation. Any NaN/Inf appearing in a forward value
or a gradient aborts with :class:`NumericsError` instead of propagating.
"""

from __future__ import annotations

import enum
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import kernels


class AutodiffError(Exception):
    """Base class for tensor/tape failures."""


class ShapeError(AutodiffError):
    pass


class PrecisionError(AutodiffError):
    pass


class NumericsError(AutodiffError):
    pass


class TapeError(AutodiffError):
    pass


class Precision(enum.Enum):
    SINGLE = "single"
    DOUBLE = "double"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self is Precision.SINGLE else np.float64)


_AXIS_NAMES = ("depth", "height", "width")


def _assert_finite(a: np.ndarray, context: str) -> None:
    if a.size and not (np.isfinite(a.min()) and np.isfinite(a.max())):
        raise NumericsError(f"non-finite value produced in {context}")


class Tensor:
    """Dense value array with an optional gradient of the same shape."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"


class _Record:
    __slots__ = ("out", "name", "fn")

    def __init__(self, out: Tensor, name: str, fn: Callable[[np.ndarray], None]):
        self.out = out
        self.name = name
        self.fn = fn


_TAPE_STACK: list["Tape"] = []


class Tape:
    """Ordered record of executed ops, consumed by exactly one backward pass."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("cannot re-enter a consumed tape")
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPE_STACK.pop()

    def __len__(self) -> int:
        return len(self._records)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _record(out: Tensor, name: str, fn: Callable[[np.ndarray], None]) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(out, name, fn))


def _accumulate(t: Tensor, g: np.ndarray, context: str) -> None:
    if not t.requires_grad:
        return
    _assert_finite(g, f"backward of {context}")
    t.grad = g if t.grad is None else t.grad + g


def _check_dtypes(name: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise PrecisionError(f"{name}: mixed precisions {sorted(map(str, dtypes))} on one tape")


def backward(loss: Tensor, tape: Tape) -> None:
    """Replay the tape in reverse, populating .grad on every requires_grad tensor."""
    if loss.data.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape._consumed:
        raise TapeError("tape already consumed by a previous backward pass")
    if not any(rec.out is loss for rec in tape._records):
        raise TapeError("loss was not produced under this tape")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape._records):
        g = rec.out.grad
        if g is None:
            continue
        rec.fn(g)
    tape._consumed = True
    tape._records.clear()


# ---------------------------------------------------------------------------
# ops


def conv3d_valid(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid (unpadded) cross-correlation: [Cin,D,H,W] * [Cout,Cin,k,k,k] + [Cout]."""
    if x.data.ndim != 4 or w.data.ndim != 5 or b.data.ndim != 1:
        raise ShapeError(
            f"conv3d_valid expects input [Cin,D,H,W], kernel [Cout,Cin,k,k,k], bias [Cout]; "
            f"got {x.shape}, {w.shape}, {b.shape}"
        )
    k = w.shape[2]
    if w.shape[3] != k or w.shape[4] != k:
        raise ShapeError(f"conv3d_valid kernel must be cubic, got {w.shape[2:]}")
    if k % 2 == 0:
        raise ShapeError(f"conv3d_valid kernel extent must be odd, got {k}")
    if w.shape[1] != x.shape[0]:
        raise ShapeError(
            f"conv3d_valid channel mismatch: input has {x.shape[0]} channels, kernel expects {w.shape[1]}"
        )
    if b.shape[0] != w.shape[0]:
        raise ShapeError(f"conv3d_valid bias extent {b.shape[0]} != output channels {w.shape[0]}")
    for axis, ext in enumerate(x.shape[1:]):
        if ext < k:
            raise ShapeError(f"conv3d_valid {_AXIS_NAMES[axis]} extent {ext} smaller than kernel {k}")
    _check_dtypes("conv3d_valid", x, w, b)

    out = Tensor(kernels.conv3d_forward(x.data, w.data, b.data),
                 requires_grad=x.requires_grad or w.requires_grad or b.requires_grad)
    _assert_finite(out.data, "conv3d_valid")

    def bwd(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, kernels.conv3d_grad_input(g, w.data), "conv3d_valid input")
        if w.requires_grad:
            _accumulate(w, kernels.conv3d_grad_weight(x.data, g), "conv3d_valid kernel")
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(1, 2, 3)), "conv3d_valid bias")

    _record(out, "conv3d_valid", bwd)
    return out


def max_pool3d(x: Tensor, factor: int = 2) -> Tensor:
    """Non-overlapping window maximum; ties route the gradient to the first element."""
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool3d expects [C,D,H,W], got {x.shape}")
    c, d, h, w = x.shape
    for axis, ext in enumerate((d, h, w)):
        if ext % factor != 0:
            raise ShapeError(f"max_pool3d {_AXIS_NAMES[axis]} extent {ext} not divisible by {factor}")
    f = factor
    do, ho, wo = d // f, h // f, w // f
    windows = (
        x.data.reshape(c, do, f, ho, f, wo, f)
        .transpose(0, 1, 3, 5, 2, 4, 6)
        .reshape(c, do, ho, wo, f**3)
    )
    idx = windows.argmax(axis=-1)  # np.argmax keeps the first occurrence on ties
    out = Tensor(np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0],
                 requires_grad=x.requires_grad)
    _assert_finite(out.data, "max_pool3d")

    def bwd(g: np.ndarray) -> None:
        dz, rem = np.divmod(idx, f * f)
        dy, dx = np.divmod(rem, f)
        ci, di, hi, wi = np.indices(idx.shape, sparse=True)
        flat = ((ci * d + (di * f + dz)) * h + (hi * f + dy)) * w + (wi * f + dx)
        gi = np.zeros(x.shape, dtype=g.dtype)
        gi.reshape(-1)[flat.reshape(-1)] = g.reshape(-1)
        _accumulate(x, gi, "max_pool3d")

    _record(out, "max_pool3d", bwd)
    return out


def upsample_nearest3d(x: Tensor, factor: int = 2) -> Tensor:
    """Replicate each voxel into a factor^3 block."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest3d expects [C,D,H,W], got {x.shape}")
    f = factor
    out = Tensor(x.data.repeat(f, axis=1).repeat(f, axis=2).repeat(f, axis=3),
                 requires_grad=x.requires_grad)

    def bwd(g: np.ndarray) -> None:
        c, d, h, w = x.shape
        _accumulate(x, g.reshape(c, d, f, h, f, w, f).sum(axis=(2, 4, 6)), "upsample_nearest3d")

    _record(out, "upsample_nearest3d", bwd)
    return out


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * (out.data > 0), "relu")

    _record(out, "relu", bwd)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = Tensor(expit(x.data), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, g * out.data * (1.0 - out.data), "sigmoid")

    _record(out, "sigmoid", bwd)
    return out


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch: {a.shape} vs {b.shape}")
    _check_dtypes("add", a, b)
    out = Tensor(a.data + b.data, requires_grad=a.requires_grad or b.requires_grad)
    _assert_finite(out.data, "add")

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g, "add")
        _accumulate(b, g, "add")

    _record(out, "add", bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    _check_dtypes("mul", a, b)
    out = Tensor(a.data * b.data, requires_grad=a.requires_grad or b.requires_grad)
    _assert_finite(out.data, "mul")

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g * b.data, "mul")
        _accumulate(b, g * a.data, "mul")

    _record(out, "mul", bwd)
    return out


def scalar_mul(c: float, x: Tensor) -> Tensor:
    c = float(c)
    out = Tensor(c * x.data, requires_grad=x.requires_grad)
    _assert_finite(out.data, "scalar_mul")

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, c * g, "scalar_mul")

    _record(out, "scalar_mul", bwd)
    return out


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels expects [C,D,H,W] inputs, got {a.shape}, {b.shape}")
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels spatial mismatch: {a.shape[1:]} vs {b.shape[1:]}")
    _check_dtypes("concat_channels", a, b)
    ca = a.shape[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0),
                 requires_grad=a.requires_grad or b.requires_grad)

    def bwd(g: np.ndarray) -> None:
        _accumulate(a, g[:ca], "concat_channels")
        _accumulate(b, g[ca:], "concat_channels")

    _record(out, "concat_channels", bwd)
    return out


def crop_center(x: Tensor, target: Sequence[int]) -> Tensor:
    """Keep the centered spatial window; odd margins give the extra voxel to the leading side."""
    if x.data.ndim != 4 or len(target) != 3:
        raise ShapeError(f"crop_center expects [C,D,H,W] and 3 target extents, got {x.shape}, {tuple(target)}")
    starts = []
    for axis, (src, tgt) in enumerate(zip(x.shape[1:], target)):
        if tgt > src:
            raise ShapeError(f"crop_center target {tgt} exceeds {_AXIS_NAMES[axis]} extent {src}")
        margin = src - tgt
        starts.append((margin + 1) // 2)
    sl = tuple(slice(s, s + t) for s, t in zip(starts, target))
    out = Tensor(x.data[(slice(None),) + sl].copy(), requires_grad=x.requires_grad)

    def bwd(g: np.ndarray) -> None:
        gi = np.zeros(x.shape, dtype=g.dtype)
        gi[(slice(None),) + sl] = g
        _accumulate(x, gi, "crop_center")

    _record(out, "crop_center", bwd)
    return out


def bce_with_logits_loss(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross-entropy over voxels, in the stable log-sum-exp form."""
    if logits.shape != targets.shape:
        raise ShapeError(f"bce_with_logits_loss shape mismatch: {logits.shape} vs {targets.shape}")
    t = targets.data
    if not np.all((t == 0) | (t == 1)):
        raise ShapeError("bce_with_logits_loss targets must be binary (0 or 1)")
    _check_dtypes("bce_with_logits_loss", logits, targets)
    z = logits.data
    per_voxel = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    out = Tensor(np.asarray(per_voxel.mean(), dtype=z.dtype), requires_grad=logits.requires_grad)
    _assert_finite(out.data, "bce_with_logits_loss")

    def bwd(g: np.ndarray) -> None:
        _accumulate(logits, (g * (expit(z) - t) / n).astype(z.dtype), "bce_with_logits_loss")

    _record(out, "bce_with_logits_loss", bwd)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), requires_grad=x.requires_grad)
    _assert_finite(out.data, "sum_all")

    def bwd(g: np.ndarray) -> None:
        _accumulate(x, np.broadcast_to(g, x.shape).astype(x.dtype), "sum_all")

    _record(out, "sum_all", bwd)
    return out
