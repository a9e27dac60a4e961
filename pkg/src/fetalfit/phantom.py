"""Synthetic control/FGR cohorts with known per-voxel truth.

Each subject gets four disjoint ellipsoidal organs on a small grid. Organ
parameters are drawn per subject from cohort distributions, spread spatially
by a smoothed random field, forward-simulated with the organ's generating
model and corrupted with Rician noise. Outcome labels are noisy monotone
functions of the true placental perfusion fraction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .fitting import _FIXED_BOUNDS, FRACTIONS
from .models import add_rician_noise, get_model
from .volume_io import (AcquisitionProtocol, OrganMask, SubjectRecord, Volume4D,
                        write_dataset)

# organ -> (generating model, centre, radii) in unit grid coordinates
GEOMETRY = {
    "placenta": ("decide", (0.27, 0.50, 0.50), (0.15, 0.36, 0.40)),
    "brain": ("extivim", (0.72, 0.22, 0.50), (0.14, 0.14, 0.36)),
    "lungs": ("extivim", (0.72, 0.52, 0.50), (0.11, 0.12, 0.32)),
    "liver": ("extivim", (0.72, 0.80, 0.50), (0.11, 0.12, 0.32)),
}

# organ -> parameter -> {cohort: (mean, between-subject sd)}
DEFAULT_DISTRIBUTIONS = {
    "placenta": {
        "S0": {"control": (1000.0, 80.0), "fgr": (1000.0, 80.0)},
        "f": {"control": (0.35, 0.03), "fgr": (0.22, 0.03)},
        "Dstar": {"control": (0.06, 0.008), "fgr": (0.03, 0.005)},
        "T2fb": {"control": (150.0, 12.0), "fgr": (120.0, 10.0)},
        "nu": {"control": (0.40, 0.05), "fgr": (0.40, 0.05)},
        "ADC": {"control": (0.0017, 0.0001), "fgr": (0.0017, 0.0001)},
    },
    "liver": {
        "S0": {"control": (800.0, 60.0), "fgr": (800.0, 60.0)},
        "f": {"control": (0.25, 0.03), "fgr": (0.15, 0.03)},
        "Dstar": {"control": (0.045, 0.006), "fgr": (0.03, 0.005)},
        "T2p": {"control": (140.0, 10.0), "fgr": (112.0, 9.0)},
        "T2t": {"control": (80.0, 6.0), "fgr": (64.0, 5.0)},
        "ADC": {"control": (0.0012, 0.0001), "fgr": (0.0012, 0.0001)},
    },
    "brain": {
        "S0": {"control": (900.0, 60.0), "fgr": (900.0, 60.0)},
        "f": {"control": (0.10, 0.02), "fgr": (0.10, 0.02)},
        "Dstar": {"control": (0.03, 0.004), "fgr": (0.03, 0.004)},
        "T2p": {"control": (200.0, 15.0), "fgr": (200.0, 15.0)},
        "T2t": {"control": (180.0, 12.0), "fgr": (180.0, 12.0)},
        "ADC": {"control": (0.0016, 0.0001), "fgr": (0.0016, 0.0001)},
    },
    "lungs": {
        "S0": {"control": (700.0, 50.0), "fgr": (700.0, 50.0)},
        "f": {"control": (0.15, 0.03), "fgr": (0.15, 0.03)},
        "Dstar": {"control": (0.04, 0.005), "fgr": (0.04, 0.005)},
        "T2p": {"control": (180.0, 12.0), "fgr": (180.0, 12.0)},
        "T2t": {"control": (150.0, 10.0), "fgr": (150.0, 10.0)},
        "ADC": {"control": (0.0020, 0.0001), "fgr": (0.0020, 0.0001)},
    },
}

BOUND_MARGIN = 0.05


class PhantomConfigError(ValueError):
    pass


@dataclass
class CohortConfig:
    n_control: int = 12
    n_fgr: int = 12
    dims: tuple = (32, 32, 8)
    snr: float = 30.0
    seed: int = 0
    voxel_size: tuple = (1.9, 1.9, 6.0)
    protocol: list | None = None  # (b, te) pairs; None -> default grid
    distributions: dict = field(default_factory=lambda: json.loads(json.dumps(DEFAULT_DISTRIBUTIONS)))
    spatial_variation: float = 0.15
    smoothing: float = 1.5  # voxels
    s0_reference: float = 1000.0  # noise sigma = s0_reference / snr
    ga_noise: float = 1.0  # weeks
    weight_noise: float = 0.05  # relative

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        self.validate()

    def validate(self):
        if self.n_control < 0 or self.n_fgr < 0:
            raise PhantomConfigError("cohort sizes must be >= 0")
        if len(self.dims) != 3:
            raise PhantomConfigError("dims must be (nx, ny, nz)")
        if self.snr <= 0:
            raise PhantomConfigError("snr must be > 0 (use inf to disable noise)")
        for organ in ("placenta", "liver"):
            dist = self.distributions[organ]
            for name, cohorts in dist.items():
                if name in ("f", "Dstar") or name.startswith("T2"):
                    if not cohorts["fgr"][0] < cohorts["control"][0]:
                        raise PhantomConfigError(
                            f"{organ} {name}: FGR mean must be below control mean")
        for organ, (model, _, _) in GEOMETRY.items():
            names = set(get_model(model).param_names)
            if set(self.distributions[organ]) != names:
                raise PhantomConfigError(f"{organ} distributions must cover {sorted(names)}")

    def get_protocol(self) -> AcquisitionProtocol:
        if self.protocol is None:
            return AcquisitionProtocol.default()
        return AcquisitionProtocol.from_pairs(self.protocol)

    @property
    def noise_sigma(self) -> float:
        return 0.0 if np.isinf(self.snr) else self.s0_reference / self.snr

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"], d["voxel_size"] = list(self.dims), list(self.voxel_size)
        d["snr"] = None if np.isinf(self.snr) else self.snr
        return d

    @classmethod
    def from_json(cls, d: dict) -> "CohortConfig":
        d = dict(d)
        if d.get("snr", 30.0) is None:
            d["snr"] = np.inf
        return cls(**d)


@dataclass
class PhantomTruth:
    params: dict  # organ -> (model, param_names, array (nx, ny, nz, np) NaN outside)
    placenta_mean_f: float

    def organ_mean(self, organ: str, name: str) -> float:
        model, names, arr = self.params[organ]
        vals = arr[..., list(names).index(name)]
        return float(np.nanmean(vals))


def organ_masks(dims) -> list[OrganMask]:
    """Disjoint ellipsoid masks; earlier organs in GEOMETRY win overlaps."""
    nx, ny, nz = dims
    x, y, z = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(ny) + 0.5) / ny,
                          (np.arange(nz) + 0.5) / nz, indexing="ij")
    taken = np.zeros(dims, dtype=bool)
    masks = []
    for organ, (_, c, r) in GEOMETRY.items():
        inside = ((x - c[0]) / r[0]) ** 2 + ((y - c[1]) / r[1]) ** 2 + ((z - c[2]) / r[2]) ** 2 <= 1
        inside &= ~taken
        taken |= inside
        if inside.sum() < 4:
            raise PhantomConfigError(f"grid {tuple(dims)} too small to place the {organ}")
        masks.append(OrganMask(organ, inside))
    return masks


def truth_limits(name: str, margin: float = BOUND_MARGIN):
    """Fitting bounds shrunk by ``margin`` on the optimiser's scale."""
    lo, hi = _FIXED_BOUNDS[name]
    if name in FRACTIONS:
        w = hi - lo
        return lo + margin * w, hi - margin * w
    llo, lhi = np.log(lo), np.log(hi)
    w = lhi - llo
    return float(np.exp(llo + margin * w)), float(np.exp(lhi - margin * w))


def _clip(name, value):
    if name == "S0":
        return np.maximum(value, 1e-3)
    lo, hi = truth_limits(name)
    return np.clip(value, lo, hi)


def _unit_field(rng, dims, smoothing, mask):
    g = gaussian_filter(rng.standard_normal(dims), smoothing, mode="reflect")
    vals = g[mask]
    sd = vals.std()
    return (g - vals.mean()) / (sd if sd > 0 else 1.0)


def subject_seed(config: CohortConfig, cohort: str, index: int) -> np.random.SeedSequence:
    """Per-subject seed: fixed split of the cohort seed by (cohort, index)."""
    return np.random.SeedSequence(config.seed, spawn_key=(0 if cohort == "control" else 1, index))


def _outcomes(rng, cohort, f_placenta, config):
    ga_del = 26.0 + 14.0 * (f_placenta - 0.15) / 0.25 + config.ga_noise * rng.standard_normal()
    ga_del = float(np.clip(ga_del, 26.0, 36.5 if cohort == "fgr" else 41.0))
    lo, hi = (24.3, 33.9) if cohort == "fgr" else (25.1, 34.0)
    ga_scan = float(min(rng.uniform(lo, hi), ga_del - 0.5))
    growth = 3500.0 / (1.0 + np.exp(-(ga_del - 34.0) / 2.5))
    weight = growth * (0.8 if cohort == "fgr" else 1.0) * (1.0 + config.weight_noise * rng.standard_normal())
    return ga_scan, ga_del, float(max(weight, 200.0))


def generate_subject(cohort: str, config: CohortConfig, seed, subject_id: str | None = None):
    """Returns ``(protocol, volume, masks, truth, record)``; deterministic in ``seed``."""
    if cohort not in ("control", "fgr"):
        raise PhantomConfigError(f"unknown cohort {cohort!r}")
    rng = np.random.default_rng(seed)
    protocol = config.get_protocol()
    masks = organ_masks(config.dims)
    signal = np.zeros(config.dims + (len(protocol),))
    truths = {}
    for mask in masks:
        model_key = GEOMETRY[mask.organ][0]
        spec = get_model(model_key)
        dist = config.distributions[mask.organ]
        theta = np.empty((mask.count, spec.n_params))
        for k, name in enumerate(spec.param_names):
            mean, sd = dist[name][cohort]
            centre = _clip(name, mean + sd * rng.standard_normal())
            fld = _unit_field(rng, config.dims, config.smoothing, mask.data)[mask.data]
            theta[:, k] = _clip(name, centre * (1.0 + config.spatial_variation * fld))
        signal[mask.data] = spec.signal(theta, protocol.b, protocol.te)
        arr = np.full(config.dims + (spec.n_params,), np.nan)
        arr[mask.data] = theta
        truths[mask.organ] = (model_key, spec.param_names, arr)

    sigma = config.noise_sigma
    noisy = add_rician_noise(signal, sigma, seed=rng)
    volume = Volume4D(noisy.astype(np.float32), config.voxel_size)

    pl = truths["placenta"]
    f_pl = float(np.nanmean(pl[2][..., list(pl[1]).index("f")]))
    ga_scan, ga_del, weight = _outcomes(rng, cohort, f_pl, config)
    record = SubjectRecord(subject_id or cohort, cohort, ga_scan, ga_del, ga_del - ga_scan, weight)
    return protocol, volume, masks, PhantomTruth(truths, f_pl), record


def cohort_members(config: CohortConfig) -> list[tuple[str, int, str]]:
    """(cohort, index, subject id) for every subject, controls first."""
    out = [("control", i, f"control_{i:02d}") for i in range(config.n_control)]
    out += [("fgr", i, f"fgr_{i:02d}") for i in range(config.n_fgr)]
    return out


def iter_cohort(config: CohortConfig):
    for cohort, i, sid in cohort_members(config):
        yield generate_subject(cohort, config, subject_seed(config, cohort, i), sid)


def generate_cohort(config: CohortConfig, out_dir) -> list[Path]:
    """Write every subject as a dataset directory under ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for protocol, volume, masks, truth, record in iter_cohort(config):
        path = out_dir / record.id
        write_dataset(path, protocol, volume, masks, record, truths=truth.params)
        paths.append(path)
    with open(out_dir / "cohort.json", "w") as fh:
        json.dump(config.to_json(), fh, indent=1)
    return paths
