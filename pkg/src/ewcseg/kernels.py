"""Raw compute kernels for the valid 3D cross-correlation.

torch's oneDNN (mkldnn) CPU kernels do the heavy arithmetic; everything
here is numpy-in / numpy-out and runs under ``no_grad`` (the tape in
:mod:`ewcseg.tensor` owns all gradient bookkeeping). float64 falls back to
the plain layout (oneDNN is float32-only here); both paths were verified
bitwise run-to-run deterministic on CPU, independent of thread count.

Backward contractions:
  grad_input  = conv3d(pad(gout, k-1), flip(w).transpose(0, 1))
  grad_weight = conv3d over the input with gout as the kernel, input
                channels as the batch
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F


def set_num_threads(n: int) -> None:
    torch.set_num_threads(int(n))


def _conv(x: torch.Tensor, w: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if x.dtype == torch.float32:
        out = F.conv3d(x.to_mkldnn(), w.to_mkldnn(), None if b is None else b.to_mkldnn())
        return out.to_dense()
    return F.conv3d(x, w, b)


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """x [Cin,D,H,W], w [Cout,Cin,k,k,k], b [Cout] -> [Cout,D-k+1,H-k+1,W-k+1]."""
    with torch.no_grad():
        out = _conv(torch.from_numpy(x).unsqueeze(0), torch.from_numpy(w), torch.from_numpy(b))
    return out.squeeze(0).numpy()


def conv3d_grad_input(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the conv input: full correlation of gout with w."""
    with torch.no_grad():
        wt = torch.from_numpy(w)
        k = wt.shape[2]
        flipped = wt.flip(2, 3, 4).transpose(0, 1).contiguous()
        padded = F.pad(torch.from_numpy(gout).unsqueeze(0), (k - 1,) * 6)
        gi = _conv(padded, flipped)
    return gi.squeeze(0).numpy()


def conv3d_grad_weight(x: np.ndarray, gout: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the kernel: conv of the input with gout as kernel,
    input channels as the batch."""
    with torch.no_grad():
        gw = _conv(torch.from_numpy(x).unsqueeze(1), torch.from_numpy(gout).unsqueeze(1))
    return gw.transpose(0, 1).contiguous().numpy()
