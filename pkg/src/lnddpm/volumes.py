"""Volume containers, HDF5 volume files and case manifests."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import h5py
import numpy as np

from .errors import DataError


def _triple(values, name: str, positive: bool = False) -> tuple[float, float, float]:
    out = tuple(float(v) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} must have 3 components, got {values!r}")
    if positive and any(not v > 0 for v in out):
        raise ValueError(f"{name} components must be > 0, got {values!r}")
    return out


@dataclass
class ScalarVolume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.spacing_mm = _triple(self.spacing_mm, "spacing_mm", positive=True)
        self.origin = _triple(self.origin, "origin")

    @property
    def shape(self):
        return self.data.shape[-3:]


@dataclass
class LabelVolume:
    data: np.ndarray
    spacing_mm: tuple = (1.0, 1.0, 1.0)
    origin: tuple = (0.0, 0.0, 0.0)
    label_table: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if not np.issubdtype(self.data.dtype, np.integer) and self.data.dtype != bool:
            raise ValueError(f"label data must be integer typed, got {self.data.dtype}")
        if self.data.size and self.data.min() < 0:
            raise ValueError("labels must be nonnegative")
        self.spacing_mm = _triple(self.spacing_mm, "spacing_mm", positive=True)
        self.origin = _triple(self.origin, "origin")
        self.label_table = {int(k): str(v) for k, v in self.label_table.items()}

    @property
    def shape(self):
        return self.data.shape

    def label_of(self, name: str) -> int:
        for k, v in self.label_table.items():
            if v == name:
                return k
        raise KeyError(name)


@dataclass
class ConditionStack:
    """One-hot anatomy channels (C, H, W, D) plus the binary lymph-node mask (H, W, D)."""

    anatomy_onehot: np.ndarray
    ln_mask: np.ndarray

    def __post_init__(self):
        self.anatomy_onehot = np.asarray(self.anatomy_onehot, dtype=np.uint8)
        self.ln_mask = np.asarray(self.ln_mask, dtype=np.uint8)
        if self.anatomy_onehot.ndim != 4:
            raise ValueError("anatomy_onehot must be (C, H, W, D)")
        if self.anatomy_onehot.shape[1:] != self.ln_mask.shape:
            raise ValueError(f"anatomy grid {self.anatomy_onehot.shape[1:]} != ln_mask grid {self.ln_mask.shape}")
        if self.ln_mask.size and self.ln_mask.max() > 1:
            raise ValueError("ln_mask must be binary")

    @property
    def channels(self) -> int:
        return self.anatomy_onehot.shape[0]

    @property
    def shape(self):
        return self.ln_mask.shape


def same_geometry(a, b) -> bool:
    return tuple(a.shape) == tuple(b.shape) and np.allclose(a.spacing_mm, b.spacing_mm)


# --- files -------------------------------------------------------------------

def save_volume(path, vol) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with h5py.File(path, "w") as f:
        chunks = tuple(min(32, n) for n in vol.data.shape) if vol.data.ndim else None
        f.create_dataset("data", data=vol.data, chunks=chunks, compression="gzip", compression_opts=4,
                         track_times=False)
        f.attrs["kind"] = "label" if isinstance(vol, LabelVolume) else "scalar"
        f.attrs["spacing_mm"] = np.asarray(vol.spacing_mm)
        f.attrs["origin"] = np.asarray(vol.origin)
        if isinstance(vol, LabelVolume):
            f.attrs["label_table"] = json.dumps({str(k): v for k, v in vol.label_table.items()})


def load_volume(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"volume file not found: {path}")
    try:
        with h5py.File(path, "r") as f:
            data = f["data"][()]
            kind = f.attrs["kind"]
            spacing = tuple(f.attrs["spacing_mm"])
            origin = tuple(f.attrs["origin"])
            table = json.loads(f.attrs.get("label_table", "{}"))
    except (OSError, KeyError) as exc:
        raise DataError(f"cannot read volume {path}: {exc}") from exc
    if kind == "label":
        return LabelVolume(data, spacing, origin, {int(k): v for k, v in table.items()})
    return ScalarVolume(data, spacing, origin)


MANIFEST_NAME = "manifest.json"


def write_manifest(path, cases: list[dict], **meta) -> Path:
    """Write a manifest. Each case is ``{"id": ..., <role>: <path>, ...}``; paths are stored
    relative to the manifest's directory."""
    path = Path(path)
    if path.is_dir() or path.suffix == "":
        path = path / MANIFEST_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    root = path.parent.resolve()
    rows = []
    for case in cases:
        row = {}
        for k, v in case.items():
            if isinstance(v, Path):
                p = v.resolve()
                v = str(p.relative_to(root)) if p.is_relative_to(root) else str(p)
            row[k] = v
        rows.append(row)
    path.write_text(json.dumps({**meta, "cases": rows}, indent=2, sort_keys=True))
    return path


def read_manifest(path) -> tuple[list[dict], dict]:
    """Return (cases, meta) with every path-like value resolved to an absolute Path."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    if "cases" not in doc:
        raise DataError(f"manifest {path} has no 'cases' list")
    cases = []
    for row in doc["cases"]:
        if "id" not in row:
            raise DataError(f"manifest {path}: case without 'id'")
        case = {}
        for k, v in row.items():
            if isinstance(v, str) and v.endswith(".h5"):
                v = (path.parent / v).resolve()
            case[k] = v
        cases.append(case)
    meta = {k: v for k, v in doc.items() if k != "cases"}
    return cases, meta
