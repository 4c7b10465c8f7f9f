"""Optimizers, the epoch loop, and the training-scheme runner.

An epoch draws one patch per training subject in seeded shuffled order.
The EWC penalty gradient is an exact quadratic in the flattened parameters
and is added analytically to the task gradient, outside the tape. Optimizer
state is reset at the source->target phase boundary.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import shutil
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .data import PatchSpec, VolumeSample, draw_patch_center, extract_patch, make_splits
from .ewc import ConsolidationState, estimate_fisher_diagonal, penalty_and_gradient
from .evaluation import EvalResult, SchemeReport, evaluate_model
from .model import ArchitectureConfig, ModelParameters, architecture_preset, build_model, context_margin, forward, valid_input_extents
from .tensor import NumericsError, Tape, backward, bce_with_logits_loss

SCHEMES = ("target-only", "source-only", "source-then-target", "joint")


class TrainingAbort(RuntimeError):
    """Non-finite loss or gradient; carries the epoch/step diagnostics."""


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1
    clip_norm: float | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


class OptimizerState:
    def __init__(self, size: int, dtype):
        self.m = np.zeros(size, dtype=dtype)
        self.v = np.zeros(size, dtype=dtype)
        self.t = 0


def optimizer_step(theta: np.ndarray, grad: np.ndarray, state: OptimizerState,
                   config: OptimizerConfig) -> np.ndarray:
    if theta.size != grad.size:
        raise ValueError(f"parameter/gradient length mismatch: {theta.size} vs {grad.size}")
    if not np.isfinite(grad.min()) or not np.isfinite(grad.max()):
        raise NumericsError("optimizer aborted on non-finite gradient")
    if config.clip_norm is not None:
        norm = float(np.linalg.norm(grad))
        if norm > config.clip_norm:
            grad = grad * (config.clip_norm / norm)
    lr = theta.dtype.type(config.learning_rate)
    if config.kind == "sgd":
        return theta - lr * grad
    state.t += 1
    b1 = theta.dtype.type(config.beta1)
    b2 = theta.dtype.type(config.beta2)
    state.m = b1 * state.m + (1 - b1) * grad
    state.v = b2 * state.v + (1 - b2) * grad * grad
    m_hat = state.m / theta.dtype.type(1 - config.beta1 ** state.t)
    v_hat = state.v / theta.dtype.type(1 - config.beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + theta.dtype.type(config.eps))


@dataclass
class EpochLog:
    epoch: int
    phase: str
    task_loss: float
    ewc_penalty: float
    seconds: float
    patches: int
    patch_digest: str = ""

    def __post_init__(self):
        if not (np.isfinite(self.task_loss) and np.isfinite(self.ewc_penalty)):
            raise TrainingAbort(f"non-finite epoch loss at epoch {self.epoch} ({self.phase})")


def epoch_csv(logs: list[EpochLog]) -> str:
    lines = ["epoch,phase,task_loss,ewc_penalty,seconds,patches"]
    for log in logs:
        lines.append(f"{log.epoch},{log.phase},{log.task_loss!r},{log.ewc_penalty!r},"
                     f"{log.seconds:.3f},{log.patches}")
    return "\n".join(lines) + "\n"


def train_phase(
    params: ModelParameters,
    config: ArchitectureConfig,
    subjects: list[VolumeSample],
    patch_spec: PatchSpec,
    epochs: int,
    opt: OptimizerConfig,
    consolidation: ConsolidationState | None = None,
    seed=0,
    phase: str = "train",
    step_trace: list | None = None,
) -> tuple[ModelParameters, list[EpochLog]]:
    """Run `epochs` epochs in place; one patch per subject per epoch.

    step_trace, when given, collects (task_loss, penalty, theta_before_step)
    per optimizer step for external verification.
    """
    if epochs and not subjects:
        raise ValueError("train_phase needs a nonempty subject list")
    rng = np.random.default_rng(seed)
    theta = params.flatten()
    state = OptimizerState(theta.size, theta.dtype)
    logs: list[EpochLog] = []
    apply_penalty = consolidation is not None and consolidation.lam > 0
    for epoch in range(epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(subjects))
        digest = hashlib.sha256()
        task_sum = 0.0
        pen_sum = 0.0
        steps = 0
        for chunk_start in range(0, len(order), opt.batch_size):
            chunk = order[chunk_start:chunk_start + opt.batch_size]
            params.zero_grad()
            chunk_task = 0.0
            for si in chunk:
                sample = subjects[si]
                center = draw_patch_center(sample, patch_spec, rng)
                digest.update(sample.subject_id.encode())
                digest.update(struct.pack("<3i", *center))
                patch, target = extract_patch(sample, patch_spec, center)
                try:
                    with Tape() as tape:
                        loss = bce_with_logits_loss(forward(params, config, patch), target)
                    backward(loss, tape)
                except NumericsError as err:
                    raise TrainingAbort(
                        f"non-finite value at epoch {epoch} step {steps} "
                        f"subject {sample.subject_id} ({phase}): {err}"
                    ) from err
                chunk_task += loss.item()
            grad = params.grads_flat()
            if len(chunk) > 1:
                grad /= len(chunk)
            task = chunk_task / len(chunk)
            pen = 0.0
            if apply_penalty:
                pen, pen_grad = penalty_and_gradient(theta, consolidation)
                grad = grad + pen_grad.astype(grad.dtype)
            if step_trace is not None:
                step_trace.append((task, pen, theta.copy()))
            try:
                theta = optimizer_step(theta, grad, state, opt)
            except NumericsError as err:
                raise TrainingAbort(f"aborted at epoch {epoch} step {steps} ({phase}): {err}") from err
            params.set_flat(theta)
            task_sum += chunk_task
            pen_sum += pen
            steps += 1
        logs.append(EpochLog(
            epoch=epoch, phase=phase,
            task_loss=task_sum / len(order), ewc_penalty=pen_sum / max(steps, 1),
            seconds=time.perf_counter() - t0, patches=len(order),
            patch_digest=digest.hexdigest(),
        ))
    return params, logs


# ---------------------------------------------------------------------------
# scheme runner


@dataclass(frozen=True)
class SchemeConfig:
    scheme: str
    lam: float = 0.0
    epochs_per_phase: int = 50
    split_id: int = 1
    master_seed: int = 1
    arch_preset: str = "desk"
    out_extent: int = 20
    fg_bias: float = 0.5
    opt: OptimizerConfig = field(default_factory=OptimizerConfig)
    fisher_patches_per_subject: int = 4
    fisher_mode: str = "empirical"

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; valid schemes: {', '.join(SCHEMES)}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.lam > 0 and self.scheme != "source-then-target":
            raise ValueError(f"lambda only applies to source-then-target, got scheme {self.scheme!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _phase_seed(cfg: SchemeConfig, tag: int) -> list[int]:
    return [cfg.master_seed, cfg.split_id, tag]


_INIT, _SOURCE, _TARGET, _JOINT, _TARGET_ONLY, _FISHER = 101, 102, 103, 104, 105, 106


def _eval_to_dict(res: EvalResult) -> dict:
    return {"per_subject": res.per_subject, "mean": res.mean}


def _eval_from_dict(d: dict) -> EvalResult:
    return EvalResult(per_subject=[(sid, float(s)) for sid, s in d["per_subject"]], mean=d["mean"])


class _SourcePhaseCache:
    """Shares the source training trajectory, its evaluations, and the Fisher
    estimate across every scheme of one split (same seed => identical phase)."""

    def __init__(self, cache_dir: Path | None, key: str):
        self.dir = cache_dir
        self.key = key
        if cache_dir is not None:
            cache_dir.mkdir(parents=True, exist_ok=True)

    def _path(self, name: str) -> Path | None:
        return None if self.dir is None else self.dir / f"{self.key}-{name}"

    def model(self, name: str, builder) -> tuple[ModelParameters, list[EpochLog], ArchitectureConfig | None]:
        path = self._path(f"{name}.ewcl")
        logs_path = self._path(f"{name}-logs.json")
        if path is not None and path.exists():
            config, params = checkpoint.load_model(path)
            logs = []
            if logs_path.exists():
                logs = [EpochLog(**d) for d in json.loads(logs_path.read_text())]
            return params, logs, config
        params, logs, config = builder()
        if path is not None:
            checkpoint.save_model(path, config, params)
            logs_path.write_text(json.dumps([dataclasses.asdict(l) for l in logs]))
        return params, logs, config

    def evals(self, name: str, builder) -> dict[str, EvalResult]:
        path = self._path(f"{name}.json")
        if path is not None and path.exists():
            return {k: _eval_from_dict(v) for k, v in json.loads(path.read_text()).items()}
        result = builder()
        if path is not None:
            path.write_text(json.dumps({k: _eval_to_dict(v) for k, v in result.items()}))
        return result

    def consolidation(self, name: str, builder) -> ConsolidationState:
        path = self._path(f"{name}.ewcl")
        if path is not None and path.exists():
            return checkpoint.load_consolidation(path)
        state = builder()
        if path is not None:
            checkpoint.save_consolidation(path, state)
        return state

    def copy_file(self, name: str, dest: Path) -> None:
        path = self._path(name)
        if path is not None and path.exists():
            shutil.copyfile(path, dest)


def cache_key(cfg: SchemeConfig, data_hash: str) -> str:
    shared = {
        "master_seed": cfg.master_seed, "split_id": cfg.split_id,
        "arch": cfg.arch_preset, "epochs": cfg.epochs_per_phase,
        "out_extent": cfg.out_extent, "fg_bias": cfg.fg_bias,
        "opt": dataclasses.asdict(cfg.opt), "data": data_hash,
    }
    return hashlib.sha256(json.dumps(shared, sort_keys=True).encode()).hexdigest()[:12]


def run_scheme(
    cfg: SchemeConfig,
    dataset: dict[str, list[VolumeSample]],
    out_dir,
    cache_dir=None,
    data_hash: str = "",
) -> SchemeReport:
    """Train one (scheme, split) cell, evaluate on both held-out test sets,
    and write checkpoints, epoch CSV, and the report under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    cfg_snapshot = {"scheme_config": cfg.to_dict(), "data_hash": data_hash}
    cfg_path = out_dir / "config.json"
    if report_path.exists() and cfg_path.exists() and json.loads(cfg_path.read_text()) == cfg_snapshot:
        return SchemeReport.from_dict(json.loads(report_path.read_text()))

    config = architecture_preset(cfg.arch_preset)
    margin = context_margin(config)
    in_extent = cfg.out_extent + margin
    if valid_input_extents(config, cfg.out_extent).least != in_extent:
        raise ValueError(f"out_extent {cfg.out_extent} gives invalid input extent {in_extent}")
    patch_spec = PatchSpec(in_extent=in_extent, out_extent=cfg.out_extent, fg_bias=cfg.fg_bias)

    split = make_splits({d: [s.subject_id for s in subs] for d, subs in dataset.items()},
                        cfg.split_id, cfg.master_seed)
    by_id = {s.subject_id: s for subs in dataset.values() for s in subs}
    train_subjects = {d: [by_id[i] for i in split.train[d]] for d in dataset}
    test_subjects = {d: [by_id[i] for i in split.test[d]] for d in dataset}

    cache = _SourcePhaseCache(None if cache_dir is None else Path(cache_dir),
                              cache_key(cfg, data_hash))
    t_start = time.perf_counter()

    def build_init():
        return build_model(config, _phase_seed(cfg, _INIT)), [], config

    def train_source():
        params, _, _ = cache.model("init", build_init)
        params, logs = train_phase(params, config, train_subjects["source"], patch_spec,
                                   cfg.epochs_per_phase, cfg.opt,
                                   seed=_phase_seed(cfg, _SOURCE), phase="source")
        return params, logs, config

    def eval_both(params) -> dict[str, EvalResult]:
        return {d: evaluate_model(params, config, test_subjects[d]) for d in ("source", "target")}

    logs: list[EpochLog] = []
    pre_finetune_source = None
    fisher_seconds = 0.0
    eval_history: dict[str, dict[str, EvalResult]] = {}
    eval_history["init"] = cache.evals(
        "init-evals", lambda: eval_both(cache.model("init", build_init)[0]))

    if cfg.scheme == "target-only":
        params, _, _ = cache.model("init", build_init)
        params, logs = train_phase(params, config, train_subjects["target"], patch_spec,
                                   cfg.epochs_per_phase, cfg.opt,
                                   seed=_phase_seed(cfg, _TARGET_ONLY), phase="target")
    elif cfg.scheme == "joint":
        params, _, _ = cache.model("init", build_init)
        pooled = train_subjects["source"] + train_subjects["target"]
        params, logs = train_phase(params, config, pooled, patch_spec,
                                   2 * cfg.epochs_per_phase, cfg.opt,
                                   seed=_phase_seed(cfg, _JOINT), phase="joint")
    elif cfg.scheme == "source-only":
        params, logs, _ = cache.model("source", train_source)
        cache.copy_file("source.ewcl", out_dir / "checkpoint-final.ewcl")
    else:  # source-then-target
        params, logs, _ = cache.model("source", train_source)
        cache.copy_file("source.ewcl", out_dir / "checkpoint-source.ewcl")
        if not (out_dir / "checkpoint-source.ewcl").exists():
            checkpoint.save_model(out_dir / "checkpoint-source.ewcl", config, params)
        source_evals = cache.evals("source-evals", lambda: eval_both(params))
        eval_history["after_source"] = source_evals
        pre_finetune_source = source_evals["source"].mean
        consolidation = None
        if cfg.lam > 0:
            t_f = time.perf_counter()
            n_patches = cfg.fisher_patches_per_subject * len(train_subjects["source"])

            def build_consolidation():
                fisher = estimate_fisher_diagonal(
                    params, config, train_subjects["source"], patch_spec, n_patches,
                    mode=cfg.fisher_mode, seed=_phase_seed(cfg, _FISHER))
                return ConsolidationState(anchor=params.flatten(), fisher=fisher, lam=0.0)

            base = cache.consolidation(f"fisher-{cfg.fisher_mode}-{n_patches}", build_consolidation)
            consolidation = ConsolidationState(anchor=base.anchor, fisher=base.fisher, lam=cfg.lam)
            checkpoint.save_consolidation(out_dir / "consolidation.ewcl", consolidation)
            fisher_seconds = time.perf_counter() - t_f
        params, target_logs = train_phase(params, config, train_subjects["target"], patch_spec,
                                          cfg.epochs_per_phase, cfg.opt,
                                          consolidation=consolidation,
                                          seed=_phase_seed(cfg, _TARGET), phase="target")
        logs = logs + target_logs

    train_seconds = time.perf_counter() - t_start
    if not (out_dir / "checkpoint-final.ewcl").exists():
        checkpoint.save_model(out_dir / "checkpoint-final.ewcl", config, params)

    t_eval = time.perf_counter()
    final_evals = eval_both(params)
    eval_history["final"] = final_evals
    report = SchemeReport(
        scheme=cfg.scheme,
        lam=cfg.lam,
        split_id=cfg.split_id,
        source_dice_mean=final_evals["source"].mean,
        target_dice_mean=final_evals["target"].mean,
        per_subject={d: final_evals[d].per_subject for d in ("source", "target")},
        pre_finetune_source_dice=pre_finetune_source,
        runtime={
            "train_seconds": round(train_seconds, 3),
            "fisher_seconds": round(fisher_seconds, 3),
            "eval_seconds": round(time.perf_counter() - t_eval, 3),
        },
    )

    (out_dir / "epochs.csv").write_text(epoch_csv(logs))
    report_csv = ["scheme,split,domain,subject_id,dice"] + report.csv_rows()
    (out_dir / "report.csv").write_text("\n".join(report_csv) + "\n")
    (out_dir / "evals.json").write_text(json.dumps(
        {stage: {d: _eval_to_dict(r) for d, r in evals.items()} for stage, evals in eval_history.items()},
        indent=2, sort_keys=True))
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    cfg_path.write_text(json.dumps(cfg_snapshot, indent=2, sort_keys=True))
    return report
