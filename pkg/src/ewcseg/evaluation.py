"""Full-volume tiled inference, Dice scoring, and the results table.

A valid-conv network only labels the interior of its input window, so test
volumes are mirror-padded by half the context margin and covered by sliding
the input window with stride equal to the output extent; the final tile on
each axis is clamped to the boundary (last write wins, fixed scan order).
"""

from __future__ import annotations

import dataclasses
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .data import VolumeSample
from .model import ArchitectureConfig, GeometryError, ModelParameters, context_margin, forward, simulate_output_extent
from .tensor import ShapeError, Tensor


class TableError(Exception):
    pass


def dice(pred_mask: np.ndarray, truth_mask: np.ndarray) -> float:
    """100 * 2|P n T| / (|P| + |T|); two empty masks agree perfectly (100)."""
    pred_mask = np.asarray(pred_mask)
    truth_mask = np.asarray(truth_mask)
    if pred_mask.shape != truth_mask.shape:
        raise ShapeError(f"dice shape mismatch: {pred_mask.shape} vs {truth_mask.shape}")
    p = pred_mask > 0.5 if pred_mask.dtype != bool else pred_mask
    t = truth_mask > 0.5 if truth_mask.dtype != bool else truth_mask
    np_, nt = int(p.sum()), int(t.sum())
    if np_ + nt == 0:
        return 100.0
    return 100.0 * 2.0 * int((p & t).sum()) / (np_ + nt)


def _largest_valid_extent(config: ArchitectureConfig, bound: int) -> int:
    margin = context_margin(config)
    for e in range(bound, margin, -1):
        try:
            if simulate_output_extent(config, e) >= 1:
                return e
        except GeometryError:
            continue
    raise GeometryError(f"no valid input extent <= {bound} (margin {margin})")


def tiled_predict(
    params: ModelParameters,
    config: ArchitectureConfig,
    sample: VolumeSample,
    max_input_extent: int | None = None,
) -> Tensor:
    """Sigmoid probabilities covering every voxel of the volume.

    The input window is the largest valid extent that fits the mirror-padded
    volume (one tile when possible); max_input_extent caps it, forcing the
    multi-tile path.
    """
    margin = context_margin(config)
    half = margin // 2
    extents = sample.image.shape[1:]
    bound = min(extents) + margin
    if max_input_extent is not None:
        bound = min(bound, max_input_extent)
    in_extent = _largest_valid_extent(config, bound)
    out_extent = in_extent - margin

    padded = np.pad(sample.image.data, ((0, 0), (half, half), (half, half), (half, half)), mode="reflect")
    probs = np.zeros((config.out_channels,) + extents, dtype=np.float32)
    axis_starts = []
    for ext in extents:
        starts = list(range(0, ext - out_extent + 1, out_extent))
        if starts[-1] + out_extent < ext:
            starts.append(ext - out_extent)
        axis_starts.append(starts)
    for z in axis_starts[0]:
        for y in axis_starts[1]:
            for x in axis_starts[2]:
                window = padded[:, z:z + in_extent, y:y + in_extent, x:x + in_extent]
                logits = forward(params, config, Tensor(np.ascontiguousarray(window)))
                probs[:, z:z + out_extent, y:y + out_extent, x:x + out_extent] = expit(logits.data)
    return Tensor(probs)


@dataclass
class EvalResult:
    per_subject: list[tuple[str, float]]
    mean: float

    @classmethod
    def from_scores(cls, scores: list[tuple[str, float]]) -> "EvalResult":
        return cls(per_subject=scores, mean=float(np.mean([d for _, d in scores])))


def evaluate_model(
    params: ModelParameters,
    config: ArchitectureConfig,
    subjects: list[VolumeSample],
    threshold: float = 0.5,
    max_input_extent: int | None = None,
) -> EvalResult:
    """Per-subject Dice of thresholded predictions (strictly p > threshold)."""
    if not subjects:
        raise ValueError("evaluate_model needs a nonempty test set")
    scores = []
    for sample in subjects:
        probs = tiled_predict(params, config, sample, max_input_extent=max_input_extent)
        pred = probs.data > threshold
        scores.append((sample.subject_id, dice(pred, sample.mask.data > 0.5)))
    return EvalResult.from_scores(scores)


# ---------------------------------------------------------------------------
# reports and tables


def scheme_label(scheme: str, lam: float) -> str:
    if scheme == "target-only":
        return "Target only"
    if scheme == "source-only":
        return "Source only"
    if scheme == "joint":
        return "Source & Target"
    if scheme == "source-then-target":
        return "+ Target" if lam == 0 else f"+ Target EWC {lam:g}"
    raise ValueError(f"unknown scheme {scheme!r}")


def _row_rank(scheme: str, lam: float) -> tuple:
    order = {"target-only": 0, "source-only": 1, "source-then-target": 2, "joint": 3}
    return (order[scheme], lam)


@dataclass
class SchemeReport:
    """Held-out Dice for one (scheme, split) cell plus forgetting/adaptation."""

    scheme: str
    lam: float
    split_id: int
    source_dice_mean: float
    target_dice_mean: float
    per_subject: dict[str, list[tuple[str, float]]]
    pre_finetune_source_dice: float | None = None
    runtime: dict = field(default_factory=dict)

    def __post_init__(self):
        for domain, mean in (("source", self.source_dice_mean), ("target", self.target_dice_mean)):
            scores = [d for _, d in self.per_subject[domain]]
            if not all(0.0 <= d <= 100.0 for d in scores):
                raise ValueError(f"{domain} Dice out of [0, 100]")
            if abs(float(np.mean(scores)) - mean) > 1e-9:
                raise ValueError(f"stored {domain} mean disagrees with per-subject scores")

    @property
    def label(self) -> str:
        return scheme_label(self.scheme, self.lam)

    @property
    def forgetting(self) -> float | None:
        if self.pre_finetune_source_dice is None:
            return None
        return self.pre_finetune_source_dice - self.source_dice_mean

    @property
    def adaptation(self) -> float:
        return self.target_dice_mean

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["label"] = self.label
        d["forgetting"] = self.forgetting
        d["adaptation"] = self.adaptation
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SchemeReport":
        return cls(
            scheme=d["scheme"],
            lam=d["lam"],
            split_id=d["split_id"],
            source_dice_mean=d["source_dice_mean"],
            target_dice_mean=d["target_dice_mean"],
            per_subject={
                dom: [(sid, float(score)) for sid, score in rows]
                for dom, rows in d["per_subject"].items()
            },
            pre_finetune_source_dice=d.get("pre_finetune_source_dice"),
            runtime=d.get("runtime", {}),
        )

    def csv_rows(self) -> list[str]:
        rows = []
        for domain in ("source", "target"):
            for sid, score in self.per_subject[domain]:
                rows.append(f"{self.label},{self.split_id},{domain},{sid},{score!r}")
        return rows


def per_subject_csv(reports: list[SchemeReport]) -> str:
    lines = ["scheme,split,domain,subject_id,dice"]
    for r in sorted(reports, key=lambda r: (_row_rank(r.scheme, r.lam), r.split_id)):
        lines.extend(r.csv_rows())
    return "\n".join(lines) + "\n"


def _grid(reports: list[SchemeReport]):
    rows: dict[tuple, str] = {}
    for r in reports:
        rows.setdefault(_row_rank(r.scheme, r.lam), r.label)
    splits = sorted({r.split_id for r in reports})
    cells = {(r.label, r.split_id): r for r in reports}
    missing = [
        (label, split)
        for rank, label in sorted(rows.items())
        for split in splits
        if (label, split) not in cells
    ]
    if missing:
        raise TableError(f"missing (scheme, split) cells: {missing}")
    labels = [label for _, label in sorted(rows.items())]
    return labels, splits, cells


def emit_results_table(reports: list[SchemeReport], format: str = "markdown") -> str:
    """Scheme x split Dice grid: markdown rounds to integers, CSV keeps full
    precision."""
    if format not in ("markdown", "csv"):
        raise ValueError(f"unknown table format {format!r}")
    labels, splits, cells = _grid(reports)
    if format == "markdown":
        out = io.StringIO()
        header = ["Training"]
        for s in splits:
            header += [f"Split {s} Source", f"Split {s} Target"]
        out.write("| " + " | ".join(header) + " |\n")
        out.write("|" + "---|" * len(header) + "\n")
        for label in labels:
            row = [label]
            for s in splits:
                r = cells[(label, s)]
                row += [str(round(r.source_dice_mean)), str(round(r.target_dice_mean))]
            out.write("| " + " | ".join(row) + " |\n")
        return out.getvalue()
    lines = ["training," + ",".join(f"split{s}_source,split{s}_target" for s in splits)]
    for label in labels:
        vals = []
        for s in splits:
            r = cells[(label, s)]
            vals += [repr(r.source_dice_mean), repr(r.target_dice_mean)]
        lines.append(f"{label}," + ",".join(vals))
    return "\n".join(lines) + "\n"
