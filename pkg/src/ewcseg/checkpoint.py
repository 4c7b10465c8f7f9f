"""EWCL checkpoint container: model parameters and consolidation state.

Layout: magic "EWCL", u32 version, then tagged records. A model checkpoint
holds one CONFIG record followed by one PARAM record per parameter (name,
shape, raw little-endian payload); a consolidation checkpoint holds ANCHOR,
FISHER, LAMBDA and META records. Round-trips are bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np

from .binio import FormatError, check_header, read_array, read_exact, read_str, write_array, write_header, write_str
from .model import ArchitectureConfig, ModelParameters
from .tensor import Tensor

MAGIC = b"EWCL"
VERSION = 1

_CONFIG, _PARAM, _ANCHOR, _FISHER, _LAMBDA, _META, _END = range(1, 8)


def _write_record(f, kind: int) -> None:
    f.write(struct.pack("<B", kind))


def _read_kind(f) -> int:
    return struct.unpack("<B", read_exact(f, 1, "record kind"))[0]


def save_model(path, config: ArchitectureConfig, params: ModelParameters) -> None:
    path = Path(path)
    with open(path, "wb") as f:
        write_header(f, MAGIC, VERSION)
        _write_record(f, _CONFIG)
        write_str(f, json.dumps(dataclasses.asdict(config), sort_keys=True))
        for name, t in params:
            _write_record(f, _PARAM)
            write_str(f, name)
            write_array(f, t.data)
        _write_record(f, _END)


def load_model(path) -> tuple[ArchitectureConfig, ModelParameters]:
    with open(path, "rb") as f:
        check_header(f, MAGIC, VERSION, "checkpoint")
        config = None
        items: list[tuple[str, Tensor]] = []
        while True:
            kind = _read_kind(f)
            if kind == _END:
                break
            if kind == _CONFIG:
                config = ArchitectureConfig(**json.loads(read_str(f, "config record")))
            elif kind == _PARAM:
                name = read_str(f, "parameter name")
                items.append((name, Tensor(read_array(f, f"parameter {name}"), requires_grad=True)))
            else:
                raise FormatError(f"unexpected record kind {kind} in model checkpoint")
        if config is None:
            raise FormatError("model checkpoint has no config record")
    return config, ModelParameters(items)


def save_consolidation(path, state) -> None:
    """state: ewc.ConsolidationState (kept duck-typed to avoid an import cycle)."""
    path = Path(path)
    with open(path, "wb") as f:
        write_header(f, MAGIC, VERSION)
        _write_record(f, _ANCHOR)
        write_array(f, state.anchor)
        _write_record(f, _FISHER)
        write_array(f, state.fisher.values)
        _write_record(f, _LAMBDA)
        f.write(struct.pack("<d", state.lam))
        _write_record(f, _META)
        write_str(f, json.dumps({
            "n_patches": state.fisher.n_patches,
            "mode": state.fisher.mode,
            "dataset_id": state.fisher.dataset_id,
        }, sort_keys=True))
        _write_record(f, _END)


def load_consolidation(path):
    from .ewc import ConsolidationState, FisherDiagonal

    with open(path, "rb") as f:
        check_header(f, MAGIC, VERSION, "checkpoint")
        anchor = fisher = lam = meta = None
        while True:
            kind = _read_kind(f)
            if kind == _END:
                break
            if kind == _ANCHOR:
                anchor = read_array(f, "anchor")
            elif kind == _FISHER:
                fisher = read_array(f, "fisher diagonal")
            elif kind == _LAMBDA:
                (lam,) = struct.unpack("<d", read_exact(f, 8, "lambda"))
            elif kind == _META:
                meta = json.loads(read_str(f, "metadata record"))
            else:
                raise FormatError(f"unexpected record kind {kind} in consolidation checkpoint")
        if anchor is None or fisher is None or lam is None or meta is None:
            raise FormatError("consolidation checkpoint is missing records")
    return ConsolidationState(
        anchor=anchor,
        fisher=FisherDiagonal(values=fisher, n_patches=meta["n_patches"], mode=meta["mode"],
                              dataset_id=meta["dataset_id"]),
        lam=lam,
    )
