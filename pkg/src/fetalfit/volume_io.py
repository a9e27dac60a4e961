"""Data model for acquisitions, volumes, masks and feature tables, plus their
on-disk formats.

A dataset directory holds::

    protocol.json      dims, voxel_size, (b, te) sample table
    signal.f32         4D little-endian float32, x fastest, sample slowest
    mask_<organ>.u8    one byte per voxel, 0/1
    subject.json       SubjectRecord fields
    truth_<organ>.f32  optional phantom ground truth (+ truth_<organ>.json)
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

ORGANS = ("placenta", "liver", "brain", "lungs")
COHORTS = ("control", "fgr")
LABEL_COLUMNS = ("id", "cohort", "ga_at_scan", "ga_at_delivery",
                 "scan_to_delivery", "baby_weight")

DEFAULT_VOXEL_SIZE = (1.9, 1.9, 6.0)
DEFAULT_B_VALUES = (0.0, 50.0, 100.0, 200.0, 400.0, 600.0)
DEFAULT_ECHO_TIMES = (96.0, 120.0, 156.0, 192.0)


class DatasetError(ValueError):
    """Raised when a dataset on disk is missing pieces or is inconsistent."""


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Ordered (b, te) sample table. b in s/mm^2, te in ms."""

    b: np.ndarray
    te: np.ndarray
    field_strength: float = 1.5

    def __post_init__(self):
        b = np.asarray(self.b, dtype=float).ravel()
        te = np.asarray(self.te, dtype=float).ravel()
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "te", te)
        if b.shape != te.shape:
            raise DatasetError("b and te must have the same length")

    @classmethod
    def from_pairs(cls, pairs: Sequence[Sequence[float]], field_strength=1.5,
                   validate=True) -> "AcquisitionProtocol":
        arr = np.asarray(pairs, dtype=float).reshape(-1, 2)
        proto = cls(arr[:, 0], arr[:, 1], field_strength)
        if validate:
            proto.validate()
        return proto

    @classmethod
    def default(cls) -> "AcquisitionProtocol":
        """Full grid b x te, te-major ordering (24 samples)."""
        pairs = [(b, te) for te in DEFAULT_ECHO_TIMES for b in DEFAULT_B_VALUES]
        return cls.from_pairs(pairs)

    def __len__(self):
        return self.b.size

    @property
    def pairs(self) -> list[tuple[float, float]]:
        return [(float(b), float(t)) for b, t in zip(self.b, self.te)]

    def validate(self):
        if len(self) < 4:
            raise DatasetError(f"protocol needs at least 4 samples, got {len(self)}")
        if not (np.all(np.isfinite(self.b)) and np.all(np.isfinite(self.te))):
            raise DatasetError("protocol contains non-finite values")
        if np.unique(self.b).size < 2 or np.unique(self.te).size < 2:
            raise DatasetError("protocol needs at least 2 distinct b and 2 distinct te values")
        if np.any(self.b < 0) or np.any(self.te <= 0):
            raise DatasetError("b must be >= 0 and te > 0")
        if not np.any(self.b == 0):
            raise DatasetError("protocol needs a b=0 sample")

    def lowest_te_b0_index(self) -> int:
        """Index of the b=0 sample with the lowest echo time."""
        idx = np.flatnonzero(self.b == self.b.min())
        return int(idx[np.argmin(self.te[idx])])


@dataclass
class Volume4D:
    data: np.ndarray  # (nx, ny, nz, ns)
    voxel_size: tuple = DEFAULT_VOXEL_SIZE

    @property
    def dims(self) -> tuple:
        return tuple(self.data.shape)

    @property
    def spatial_dims(self) -> tuple:
        return tuple(self.data.shape[:3])

    def validate(self, protocol: AcquisitionProtocol | None = None):
        if self.data.ndim != 4:
            raise DatasetError(f"volume must be 4D, got shape {self.data.shape}")
        if protocol is not None and self.data.shape[3] != len(protocol):
            raise DatasetError(
                f"volume has {self.data.shape[3]} samples, protocol has {len(protocol)}")
        if not np.all(np.isfinite(self.data)):
            raise DatasetError("volume contains non-finite intensities")
        if np.any(self.data < 0):
            raise DatasetError("volume contains negative intensities")


@dataclass
class OrganMask:
    organ: str
    data: np.ndarray  # bool (nx, ny, nz)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=bool)

    @property
    def dims(self):
        return tuple(self.data.shape)

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def validate(self, spatial_dims=None):
        if self.organ not in ORGANS:
            raise DatasetError(f"unknown organ {self.organ!r}")
        if spatial_dims is not None and self.dims != tuple(spatial_dims):
            raise DatasetError(
                f"mask {self.organ} dims {self.dims} do not match volume {tuple(spatial_dims)}")
        if self.count < 1:
            raise DatasetError(f"mask {self.organ} is empty")


@dataclass
class SubjectRecord:
    id: str
    cohort: str
    ga_at_scan: float
    ga_at_delivery: float
    scan_to_delivery: float
    baby_weight: float

    def validate(self):
        if self.cohort not in COHORTS:
            raise DatasetError(f"cohort must be one of {COHORTS}, got {self.cohort!r}")
        if not 20.0 <= self.ga_at_scan <= 42.0:
            raise DatasetError(f"ga_at_scan {self.ga_at_scan} outside [20, 42] weeks")
        if abs(self.scan_to_delivery - (self.ga_at_delivery - self.ga_at_scan)) > 1e-9:
            raise DatasetError("scan_to_delivery != ga_at_delivery - ga_at_scan")


@dataclass
class FeatureTable:
    feature_names: list[str]
    rows: np.ndarray  # (n_subjects, n_features), NaN = absent
    labels: list[SubjectRecord] = field(default_factory=list)

    def __post_init__(self):
        self.feature_names = list(self.feature_names)
        self.rows = np.asarray(self.rows, dtype=float).reshape(-1, len(self.feature_names))
        self.validate()

    def validate(self):
        if self.rows.shape != (len(self.labels), len(self.feature_names)):
            raise DatasetError(
                f"non-rectangular table: rows {self.rows.shape}, "
                f"{len(self.labels)} labels, {len(self.feature_names)} features")
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DatasetError("duplicate feature names")

    @property
    def cohorts(self) -> np.ndarray:
        return np.array([s.cohort for s in self.labels])

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]

    def select(self, names: Sequence[str]) -> "FeatureTable":
        idx = [self.feature_names.index(n) for n in names]
        return FeatureTable(list(names), self.rows[:, idx], list(self.labels))

    def subset(self, row_index) -> "FeatureTable":
        row_index = np.asarray(row_index, dtype=int)
        return FeatureTable(self.feature_names, self.rows[row_index],
                            [self.labels[i] for i in row_index])

    def target(self, name: str) -> np.ndarray:
        return np.array([getattr(s, name) for s in self.labels], dtype=float)


# ---------------------------------------------------------------------------
# raw helpers

def _write_raw(path: Path, array: np.ndarray, dtype: str):
    np.asarray(array).astype(dtype).ravel(order="F").tofile(path)


def _read_raw(path: Path, dims: Sequence[int], dtype: str) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    flat = np.fromfile(path, dtype=dtype)
    expected = int(np.prod(dims))
    if flat.size != expected:
        raise DatasetError(
            f"{path.name}: expected {expected} values for dims {tuple(dims)}, found {flat.size}")
    return flat.reshape(tuple(dims), order="F")


def _read_json(path: Path) -> dict:
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    with open(path) as fh:
        return json.load(fh)


def write_dataset(path, protocol: AcquisitionProtocol, volume: Volume4D,
                  masks: Sequence[OrganMask], subject: SubjectRecord,
                  truths: dict | None = None):
    """Write one subject directory. ``truths`` maps organ -> (model, names, array)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    sidecar = {
        "dims": list(volume.dims),
        "voxel_size": list(volume.voxel_size),
        "field_strength": protocol.field_strength,
        "samples": [{"b": b, "te": te} for b, te in protocol.pairs],
        "organs": [m.organ for m in masks],
    }
    with open(path / "protocol.json", "w") as fh:
        json.dump(sidecar, fh, indent=1)
    _write_raw(path / "signal.f32", volume.data, "<f4")
    for m in masks:
        _write_raw(path / f"mask_{m.organ}.u8", m.data, "u1")
    with open(path / "subject.json", "w") as fh:
        json.dump(asdict(subject), fh, indent=1)
    for organ, (model, names, arr) in (truths or {}).items():
        _write_raw(path / f"truth_{organ}.f32", arr, "<f4")
        with open(path / f"truth_{organ}.json", "w") as fh:
            json.dump({"model": model, "param_names": list(names),
                       "dims": list(arr.shape)}, fh, indent=1)


def read_dataset(path):
    """Load and validate one subject directory.

    Returns ``(protocol, volume, masks, subject)``.
    """
    path = Path(path)
    if not path.is_dir():
        raise DatasetError(f"missing dataset directory {path}")
    sidecar = _read_json(path / "protocol.json")
    protocol = AcquisitionProtocol.from_pairs(
        [(s["b"], s["te"]) for s in sidecar["samples"]],
        field_strength=sidecar.get("field_strength", 1.5))
    dims = [int(d) for d in sidecar["dims"]]
    if len(dims) != 4:
        raise DatasetError(f"sidecar dims must have 4 entries, got {dims}")
    if dims[3] != len(protocol):
        raise DatasetError(
            f"sidecar declares ns={dims[3]} but protocol lists {len(protocol)} samples")
    data = _read_raw(path / "signal.f32", dims, "<f4")
    volume = Volume4D(data, tuple(sidecar.get("voxel_size", DEFAULT_VOXEL_SIZE)))
    volume.validate(protocol)

    organs = sidecar.get("organs") or [o for o in ORGANS if (path / f"mask_{o}.u8").exists()]
    masks = []
    for organ in organs:
        m = OrganMask(organ, _read_raw(path / f"mask_{organ}.u8", dims[:3], "u1"))
        m.validate(dims[:3])
        masks.append(m)
    _check_disjoint(masks)

    subject = SubjectRecord(**_read_json(path / "subject.json"))
    subject.validate()
    return protocol, volume, masks, subject


def read_truth(path, organ: str):
    """Return ``(model, param_names, array)`` for a phantom truth file."""
    path = Path(path)
    meta = _read_json(path / f"truth_{organ}.json")
    arr = _read_raw(path / f"truth_{organ}.f32", meta["dims"], "<f4")
    return meta["model"], meta["param_names"], arr


def _check_disjoint(masks):
    if len(masks) < 2:
        return
    total = np.sum([m.data.astype(np.uint8) for m in masks], axis=0)
    if np.any(total > 1):
        raise DatasetError("organ masks overlap")


def list_subjects(dataset) -> list[Path]:
    """Subject directories under a cohort directory (or the directory itself)."""
    dataset = Path(dataset)
    if (dataset / "protocol.json").exists():
        return [dataset]
    subs = sorted(p for p in dataset.iterdir() if (p / "protocol.json").exists())
    if not subs:
        raise DatasetError(f"no subject directories under {dataset}")
    return subs


# ---------------------------------------------------------------------------
# feature tables

def _fmt(v: float) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return ""
    return repr(float(v))


def write_feature_table(table: FeatureTable, path):
    table.validate()
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(LABEL_COLUMNS) + table.feature_names)
        for rec, row in zip(table.labels, table.rows):
            labels = [rec.id, rec.cohort] + [_fmt(getattr(rec, c)) for c in LABEL_COLUMNS[2:]]
            w.writerow(labels + [_fmt(v) for v in row])
    return path


def read_feature_table(path) -> FeatureTable:
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"missing file {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header[:len(LABEL_COLUMNS)]) != LABEL_COLUMNS:
            raise DatasetError(f"{path}: header must start with {LABEL_COLUMNS}")
        names = header[len(LABEL_COLUMNS):]
        labels, rows = [], []
        for line in reader:
            if len(line) != len(header):
                raise DatasetError(f"{path}: ragged row for subject {line[:1]}")
            labels.append(SubjectRecord(line[0], line[1],
                                        *[float(x) for x in line[2:len(LABEL_COLUMNS)]]))
            rows.append([float(x) if x != "" else np.nan for x in line[len(LABEL_COLUMNS):]])
    return FeatureTable(names, np.array(rows, dtype=float).reshape(len(rows), len(names)),
                        labels)


def threads_from_env(default: int | None = None) -> int:
    """Worker cap from ``FETALFIT_THREADS`` (falls back to CPU count)."""
    raw = os.environ.get("FETALFIT_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return default or os.cpu_count() or 1
