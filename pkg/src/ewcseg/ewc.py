"""Elastic Weight Consolidation: Fisher-diagonal importance estimated on the
source domain, anchor weights, and the quadratic penalty used while
fine-tuning on the target domain.

penalty(theta) = (lambda/2) * sum_i F_i * (theta_i - anchor_i)^2

The penalty is an exact quadratic in the flattened parameters, so its
gradient is supplied analytically instead of through the tape.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import PatchSpec, VolumeSample, sample_patch
from .model import ArchitectureConfig, ModelParameters, forward
from .tensor import NumericsError, Tape, Tensor, backward, bce_with_logits_loss

FISHER_MODES = ("empirical", "sampled")


@dataclass
class FisherDiagonal:
    """Per-parameter mean squared gradient, aligned with the flattened params."""

    values: np.ndarray
    n_patches: int
    mode: str
    dataset_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if self.values.size and self.values.min() < 0:
            raise ValueError("Fisher entries must be nonnegative")
        if self.mode not in FISHER_MODES:
            raise ValueError(f"unknown Fisher mode {self.mode!r}; known: {FISHER_MODES}")


@dataclass
class ConsolidationState:
    """Anchor weights, Fisher diagonal and penalty weight for one source phase."""

    anchor: np.ndarray
    fisher: FisherDiagonal
    lam: float

    def __post_init__(self):
        self.anchor = np.asarray(self.anchor, dtype=np.float64).reshape(-1)
        if self.anchor.size != self.fisher.values.size:
            raise ValueError(
                f"anchor length {self.anchor.size} != fisher length {self.fisher.values.size}"
            )
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")


def penalty_and_gradient(current: np.ndarray, state: ConsolidationState) -> tuple[float, np.ndarray]:
    """Exact penalty value and its gradient at the given flattened parameters."""
    theta = np.asarray(current, dtype=np.float64).reshape(-1)
    if theta.size != state.anchor.size:
        raise ValueError(f"parameter length {theta.size} != anchor length {state.anchor.size}")
    delta = theta - state.anchor
    weighted = state.fisher.values * delta
    penalty = 0.5 * state.lam * float(delta @ weighted)
    return penalty, state.lam * weighted


def estimate_fisher_diagonal(
    params: ModelParameters,
    config: ArchitectureConfig,
    source_dataset: list[VolumeSample],
    patch_spec: PatchSpec,
    n_patches: int,
    mode: str = "empirical",
    seed=0,
) -> FisherDiagonal:
    """Mean squared per-parameter gradient of the per-patch loss over n_patches
    source training patches, drawn with the training sampler.

    empirical mode differentiates against the ground-truth mask; sampled mode
    against labels drawn from the model's own output probabilities.
    """
    if not source_dataset:
        raise ValueError("Fisher estimation needs a nonempty source dataset")
    if n_patches < 1:
        raise ValueError(f"n_patches must be >= 1, got {n_patches}")
    if mode not in FISHER_MODES:
        raise ValueError(f"unknown Fisher mode {mode!r}; known: {FISHER_MODES}")

    rng = np.random.default_rng(seed)
    acc = np.zeros(params.total_size, dtype=np.float64)
    for i in range(n_patches):
        sample = source_dataset[int(rng.integers(len(source_dataset)))]
        patch, target = sample_patch(sample, patch_spec, rng)
        try:
            params.zero_grad()
            with Tape() as tape:
                logits = forward(params, config, patch)
                if mode == "sampled":
                    from scipy.special import expit

                    probs = expit(logits.data)
                    target = Tensor((rng.random(probs.shape) < probs).astype(logits.dtype))
                loss = bce_with_logits_loss(logits, target)
            backward(loss, tape)
        except NumericsError as err:
            raise NumericsError(f"Fisher estimation aborted on patch {i + 1}/{n_patches} "
                                f"(subject {sample.subject_id}): {err}") from err
        g = params.grads_flat().astype(np.float64)
        acc += g * g
    params.zero_grad()
    return FisherDiagonal(
        values=acc / n_patches,
        n_patches=n_patches,
        mode=mode,
        dataset_id=source_dataset[0].domain,
    )
