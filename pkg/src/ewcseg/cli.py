"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure (non-finite loss, I/O, corrupt
container), 2 usage or configuration error. Set EWCSEG_THREADS to pin the
kernel thread count; --strict-deterministic forces single-threaded,
fully serial execution.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .binio import ContainerError
from .data import DataError, DomainSpec, desk_specs, load_dataset, dataset_manifest_hash, write_dataset
from .gradcheck import GRADCHECK_TOLERANCE, model_gradcheck, op_gradchecks
from .model import ARCHITECTURES
from .reproduce import DEFAULT_LAMBDAS, reproduce
from .runinfo import utc_now, write_run_manifest
from .tensor import NumericsError
from .training import SCHEMES, SchemeConfig, TrainingAbort, run_scheme

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _err(msg: str) -> None:
    print(f"ewcseg: {msg}", file=sys.stderr)


def domain_specs_from_json(raw: dict, default_seed: int) -> dict[str, DomainSpec]:
    if not isinstance(raw, dict) or set(raw) != {"source", "target"}:
        raise UsageError("spec file must be a JSON object with exactly 'source' and 'target' entries")
    base = desk_specs(seed=default_seed)
    specs = {}
    for domain, entry in raw.items():
        if not isinstance(entry, dict):
            raise UsageError(f"spec for {domain!r} must be a JSON object")
        fields = {"name": domain, "seed": base[domain].seed}
        fields.update(entry)
        if "channel_contrasts" in fields:
            fields["channel_contrasts"] = tuple(fields["channel_contrasts"])
        try:
            specs[domain] = DomainSpec(**fields)
        except (DataError, TypeError) as exc:
            raise UsageError(f"invalid {domain} spec: {exc}") from exc
    return specs


def cmd_gen_data(args) -> int:
    if args.spec is not None:
        spec_path = Path(args.spec)
        if not spec_path.exists():
            raise UsageError(f"spec file {spec_path} does not exist")
        try:
            raw = json.loads(spec_path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"spec file {spec_path} is not valid JSON: {exc}") from exc
        specs = domain_specs_from_json(raw, args.seed)
    else:
        specs = desk_specs(n_source=args.source_subjects, n_target=args.target_subjects,
                           seed=args.seed)
    started = utc_now()
    out = Path(args.out)
    manifest = write_dataset(out, specs, args.seed)
    outputs = [s["file"] for d in manifest["domains"].values() for s in d["subjects"]]
    write_run_manifest(out, "gen-data",
                       {"seed": args.seed, "specs": {d: manifest["domains"][d]["spec"] for d in manifest["domains"]}},
                       args.seed, {}, outputs + ["manifest.json"], started)
    for domain, entry in manifest["domains"].items():
        print(f"{domain}: {len(entry['subjects'])} volumes")
    print(f"dataset written to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    try:
        cfg = SchemeConfig(
            scheme=args.scheme, lam=args.lam, epochs_per_phase=args.epochs,
            split_id=args.split, master_seed=args.seed, arch_preset=args.arch,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    try:
        dataset = load_dataset(args.data)
        data_hash = dataset_manifest_hash(args.data)
    except DataError as exc:
        raise UsageError(str(exc)) from exc
    started = utc_now()
    out = Path(args.out)
    report = run_scheme(cfg, dataset, out, cache_dir=args.cache, data_hash=data_hash)
    write_run_manifest(out, "train", {"scheme_config": cfg.to_dict()}, args.seed,
                       {"dataset_manifest": data_hash},
                       [p.name for p in out.iterdir() if p.is_file() and p.name != "run_manifest.json"],
                       started)
    print(f"{report.label} (split {report.split_id}): "
          f"source {report.source_dice_mean:.1f}, target {report.target_dice_mean:.1f}")
    if report.forgetting is not None:
        print(f"pre-fine-tune source {report.pre_finetune_source_dice:.1f}, "
              f"forgetting {report.forgetting:+.1f}")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    lambdas = tuple(float(x) for x in args.lambdas.split(","))
    data = Path(args.data)
    if args.gen and not (data / "manifest.json").exists():
        print(f"generating dataset in {data} ...")
        write_dataset(data, desk_specs(n_source=args.source_subjects,
                                       n_target=args.target_subjects,
                                       seed=args.gen_seed), args.gen_seed)
    if not (data / "manifest.json").exists():
        raise UsageError(f"no dataset manifest in {data} (use gen-data or --gen)")
    splits = tuple(range(1, args.splits + 1))
    reproduce(data, args.out, splits=splits, lambdas=lambdas, epochs_per_phase=args.epochs,
              master_seed=args.seed, arch_preset=args.arch)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    failed = False
    if args.level == "ops":
        for name, err in op_gradchecks(seed=args.seed, samples=args.samples).items():
            ok = err < GRADCHECK_TOLERANCE
            failed |= not ok
            print(f"{'ok  ' if ok else 'FAIL'} {name:<22} max rel err {err:.3e}")
    else:
        err = model_gradcheck(seed=args.seed, samples=args.samples)
        failed = err >= GRADCHECK_TOLERANCE
        print(f"{'ok  ' if not failed else 'FAIL'} full model            max rel err {err:.3e}")
    if failed:
        _err(f"gradient check exceeded tolerance {GRADCHECK_TOLERANCE:g}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_fisher_stats(args) -> int:
    from .checkpoint import load_consolidation

    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint {path} does not exist")
    state = load_consolidation(path)
    v = state.fisher.values
    print(f"entries       {v.size}")
    print(f"min           {v.min():.6e}")
    print(f"median        {np.median(v):.6e}")
    print(f"max           {v.max():.6e}")
    print(f"zero fraction {float((v == 0).mean()):.4f}")
    print(f"lambda        {state.lam:g}")
    print(f"mode          {state.fisher.mode} ({state.fisher.n_patches} patches, "
          f"dataset {state.fisher.dataset_id})")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ewcseg",
                                     description="Continual-learning benchmark: EWC fine-tuning "
                                                 "of a valid-convolution 3D UNet")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic two-domain dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON file with 'source' and 'target' domain specs")
    p.add_argument("--seed", type=int, default=2024)
    p.add_argument("--source-subjects", type=int, default=40)
    p.add_argument("--target-subjects", type=int, default=16)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one scheme on one split")
    p.add_argument("--scheme", required=True, choices=SCHEMES)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--split", type=int, default=1, choices=(1, 2))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cache", default=None)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--arch", default="desk", choices=sorted(ARCHITECTURES))
    p.add_argument("--strict-deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reproduce", help="run all six schemes and emit the results table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--splits", type=int, default=2)
    p.add_argument("--lambdas", default=",".join(f"{l:g}" for l in DEFAULT_LAMBDAS))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--arch", default="desk", choices=sorted(ARCHITECTURES))
    p.add_argument("--gen", action="store_true", help="generate the dataset if missing")
    p.add_argument("--gen-seed", type=int, default=2024)
    p.add_argument("--source-subjects", type=int, default=40)
    p.add_argument("--target-subjects", type=int, default=16)
    p.add_argument("--strict-deterministic", action="store_true")
    p.set_defaults(func=cmd_reproduce)

    p = sub.add_parser("gradcheck", help="finite-difference diagnostics (double precision)")
    p.add_argument("--level", choices=("ops", "model"), default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--samples", type=int, default=32)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("fisher-stats", help="summarize a stored Fisher diagonal")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_fisher_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "strict_deterministic", False):
        kernels.set_num_threads(1)
    elif os.environ.get("EWCSEG_THREADS"):
        kernels.set_num_threads(int(os.environ["EWCSEG_THREADS"]))
    try:
        return args.func(args)
    except UsageError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except ValueError as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except (TrainingAbort, NumericsError, ContainerError, DataError, OSError) as exc:
        _err(str(exc))
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
