"""Central finite-difference verification of tape gradients.

Double precision only: the step h=1e-5 leaves ~1e-10 truncation error for
well-scaled losses, far below the 1e-5 acceptance tolerance.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .tensor import PrecisionError, Tape, Tensor, backward


def _tensor_list(params) -> list[Tensor]:
    if hasattr(params, "__iter__"):
        out = []
        for item in params:
            if isinstance(item, Tensor):
                out.append(item)
            else:  # (name, Tensor) pairs, e.g. ModelParameters
                out.append(item[1])
        return out
    raise TypeError(f"expected tensors or (name, tensor) pairs, got {type(params)}")


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    samples: int = 32,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient and central differences.

    f evaluates the scalar loss from the current parameter values; it is
    called once under a fresh tape for the analytic gradient and then, with
    no tape, twice per sampled coordinate for (f(x+h) - f(x-h)) / 2h.
    """
    if h <= 0:
        raise ValueError(f"finite-difference step must be positive, got {h}")
    tensors = [t for t in _tensor_list(params) if t.requires_grad]
    if not tensors:
        raise ValueError("no requires_grad tensors to check")
    for t in tensors:
        if t.dtype != np.float64:
            raise PrecisionError("finite_diff_check requires double precision tensors")

    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = f()
    backward(loss, tape)
    analytic = [np.zeros(t.size) if t.grad is None else t.grad.reshape(-1).copy() for t in tensors]

    sizes = np.array([t.size for t in tensors])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    rng = np.random.default_rng(seed)
    coords = rng.choice(total, size=min(samples, total), replace=False)

    max_rel = 0.0
    for coord in coords:
        ti = int(np.searchsorted(offsets, coord, side="right")) - 1
        i = int(coord - offsets[ti])
        flat = tensors[ti].data.reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f().item()
        flat[i] = orig - h
        f_minus = f().item()
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2.0 * h)
        a = analytic[ti][i]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        max_rel = max(max_rel, rel)
    return max_rel


# ---------------------------------------------------------------------------
# diagnostic suites (CLI `gradcheck` and CI call these)

GRADCHECK_TOLERANCE = 1e-5


def op_gradchecks(seed: int = 0, samples: int = 32) -> dict[str, float]:
    """Finite-difference error per differentiable op on random double inputs.

    Pooling inputs are continuous random draws, so argmax ties have measure
    zero and the subgradient choice never matters.
    """
    from .tensor import (Tensor, add, bce_with_logits_loss, concat_channels, conv3d_valid,
                         crop_center, max_pool3d, relu, scalar_mul, sigmoid, sum_all,
                         upsample_nearest3d)

    rng = np.random.default_rng(seed)

    def t(*shape, scale=1.0):
        return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)

    results: dict[str, float] = {}
    x, w, b = t(3, 6, 7, 8), t(4, 3, 3, 3, 3, scale=0.3), t(4, scale=0.1)
    results["conv3d_valid"] = finite_diff_check(
        lambda: sum_all(sigmoid(conv3d_valid(x, w, b))), [x, w, b], samples=samples, seed=seed)

    p = t(2, 6, 6, 6)
    results["max_pool3d"] = finite_diff_check(
        lambda: sum_all(sigmoid(max_pool3d(p))), [p], samples=samples, seed=seed)

    u = t(2, 3, 3, 3)
    results["upsample_nearest3d"] = finite_diff_check(
        lambda: sum_all(sigmoid(upsample_nearest3d(u))), [u], samples=samples, seed=seed)

    r = t(2, 4, 4, 4)
    results["relu"] = finite_diff_check(
        lambda: sum_all(sigmoid(relu(r))), [r], samples=samples, seed=seed)

    s = t(2, 4, 4, 4)
    results["sigmoid"] = finite_diff_check(
        lambda: sum_all(sigmoid(s)), [s], samples=samples, seed=seed)

    a1, a2 = t(2, 4, 4, 4), t(2, 4, 4, 4)
    results["add"] = finite_diff_check(
        lambda: sum_all(sigmoid(add(a1, a2))), [a1, a2], samples=samples, seed=seed)

    m = t(2, 4, 4, 4)
    results["scalar_mul"] = finite_diff_check(
        lambda: sum_all(sigmoid(scalar_mul(1.7, m))), [m], samples=samples, seed=seed)

    c1, c2 = t(2, 4, 4, 4), t(3, 4, 4, 4)
    results["concat_channels"] = finite_diff_check(
        lambda: sum_all(sigmoid(concat_channels(c1, c2))), [c1, c2], samples=samples, seed=seed)

    cc = t(2, 7, 7, 7)
    results["crop_center"] = finite_diff_check(
        lambda: sum_all(sigmoid(crop_center(cc, (3, 4, 5)))), [cc], samples=samples, seed=seed)

    z = t(1, 4, 5, 6)
    zt = Tensor((rng.random((1, 4, 5, 6)) < 0.5).astype(np.float64))
    results["bce_with_logits_loss"] = finite_diff_check(
        lambda: bce_with_logits_loss(z, zt), [z], samples=samples, seed=seed)
    return results


def model_gradcheck(config=None, seed: int = 0, samples: int = 32) -> float:
    """End-to-end check: tiny double-precision UNet, forward + BCE loss,
    all parameters."""
    from .model import ArchitectureConfig, build_model, context_margin, forward, valid_input_extents
    from .tensor import Precision, Tensor, bce_with_logits_loss

    config = config or ArchitectureConfig(levels=2, base_channels=2)
    extent = valid_input_extents(config, 2).least
    out_extent = extent - context_margin(config)
    rng = np.random.default_rng(seed)
    params = build_model(config, seed, precision=Precision.DOUBLE)
    patch = Tensor(rng.standard_normal((config.in_channels, extent, extent, extent)))
    target = Tensor((rng.random((config.out_channels,) + (out_extent,) * 3) < 0.5).astype(np.float64))
    return finite_diff_check(
        lambda: bce_with_logits_loss(forward(params, config, patch), target),
        params, samples=samples, seed=seed)
