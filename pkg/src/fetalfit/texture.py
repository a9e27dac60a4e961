"""Grey-level co-occurrence matrices and the six Haralick descriptors.

Maps are quantized into equal-width bins over one global range per map, then
a GLCM is built per axial slice and per offset. Absent voxels carry label -1
and every pair touching one is skipped.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

ABSENT = -1
# (row, col) displacements for 0, 45, 90 and 135 degrees
DEFAULT_OFFSETS = ((0, 1), (-1, 1), (-1, 0), (-1, -1))
HARALICK_NAMES = ("energy", "entropy", "correlation", "contrast", "variance", "homogeneity")


class TextureError(ValueError):
    pass


@dataclass(frozen=True)
class TextureConfig:
    levels: int = 16
    offsets: tuple = DEFAULT_OFFSETS
    symmetric: bool = True
    # None means the per-map (min, max) of present in-mask values
    value_range: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "offsets", tuple(tuple(int(v) for v in o) for o in self.offsets))
        if self.levels < 2:
            raise ValueError("levels must be >= 2")
        if not self.offsets:
            raise ValueError("at least one offset is required")
        if any(len(o) != 2 or o == (0, 0) for o in self.offsets):
            raise ValueError("offsets must be non-zero (row, col) pairs")
        if self.value_range is not None and not self.value_range[0] <= self.value_range[1]:
            raise ValueError("value_range must satisfy lo <= hi")


def quantize(values, levels: int, value_range=None) -> np.ndarray:
    """Equal-width labels in ``[0, levels-1]``; NaN becomes ``ABSENT``.

    A degenerate range (constant input) labels every present value 0.
    """
    v = np.asarray(values, dtype=float)
    present = np.isfinite(v)
    if not present.any():
        raise TextureError("no present values to quantize")
    lo, hi = value_range if value_range is not None else (v[present].min(), v[present].max())
    labels = np.full(v.shape, ABSENT, dtype=np.int64)
    if hi <= lo:
        labels[present] = 0
        return labels
    q = np.floor(levels * (v[present] - lo) / (hi - lo))
    labels[present] = np.clip(q, 0, levels - 1).astype(np.int64)
    return labels


def _pair_views(labels: np.ndarray, offset):
    """Aligned (source, target) views for every in-image pair at ``offset``."""
    dr, dc = offset
    n_r, n_c = labels.shape
    r0, r1 = max(0, -dr), min(n_r, n_r - dr)
    c0, c1 = max(0, -dc), min(n_c, n_c - dc)
    if r1 <= r0 or c1 <= c0:
        empty = labels[:0, :0]
        return empty, empty
    return labels[r0:r1, c0:c1], labels[r0 + dr:r1 + dr, c0 + dc:c1 + dc]


def glcm_counts(labels, offset, levels: int, symmetric: bool = True) -> np.ndarray:
    """Raw co-occurrence counts (float) for one offset."""
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise TextureError("labels must be a 2D image")
    a, b = _pair_views(labels, offset)
    ok = (a != ABSENT) & (b != ABSENT)
    counts = np.bincount(a[ok] * levels + b[ok], minlength=levels * levels)
    counts = counts.reshape(levels, levels).astype(float)
    if symmetric:
        counts = counts + counts.T
    return counts


@dataclass
class Glcm:
    """Normalized co-occurrence matrix with its marginal moments."""

    p: np.ndarray
    levels: int = field(init=False)
    px: np.ndarray = field(init=False)
    py: np.ndarray = field(init=False)
    mu_x: float = field(init=False)
    mu_y: float = field(init=False)
    sigma_x: float = field(init=False)
    sigma_y: float = field(init=False)
    mu: float = field(init=False)

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 2 or p.shape[0] != p.shape[1]:
            raise TextureError("GLCM must be square")
        if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
            raise TextureError("GLCM must be non-negative and sum to 1")
        self.p = p
        self.levels = p.shape[0]
        idx = np.arange(self.levels, dtype=float)
        self.px = p.sum(axis=1)
        self.py = p.sum(axis=0)
        self.mu_x = float(idx @ self.px)
        self.mu_y = float(idx @ self.py)
        self.sigma_x = float(np.sqrt(((idx - self.mu_x) ** 2) @ self.px))
        self.sigma_y = float(np.sqrt(((idx - self.mu_y) ** 2) @ self.py))
        # scalar mean over the joint distribution, i weighted by p(i, j)
        self.mu = self.mu_x


def build_glcm(labels, offset, symmetric: bool = True, levels: int | None = None) -> Glcm:
    labels = np.asarray(labels)
    if levels is None:
        levels = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 1
    counts = glcm_counts(labels, offset, levels, symmetric)
    total = counts.sum()
    if total == 0:
        raise TextureError(f"no valid pixel pairs at offset {tuple(offset)}")
    return Glcm(counts / total)


class HaralickVector(NamedTuple):
    energy: float
    entropy: float
    correlation: float  # NaN when either marginal has zero spread
    contrast: float
    variance: float
    homogeneity: float


def haralick(glcm: Glcm) -> HaralickVector:
    p = glcm.p
    i, j = np.indices(p.shape, dtype=float)
    nz = p > 0
    energy = float(np.sqrt(np.sum(p * p)))
    entropy = float(-np.sum(p[nz] * np.log(p[nz])))
    denom = glcm.sigma_x * glcm.sigma_y
    if denom > 0:
        corr = float(np.sum((i - glcm.mu_x) * (j - glcm.mu_y) * p) / denom)
        corr = min(1.0, max(-1.0, corr))
    else:
        corr = float("nan")
    contrast = float(np.sum((i - j) ** 2 * p))
    variance = float(np.sum((i - glcm.mu) ** 2 * p))
    homogeneity = float(np.sum(p / (1.0 + (i - j) ** 2)))
    return HaralickVector(energy, entropy, corr, contrast, variance, homogeneity)


def _slices(volume: np.ndarray) -> list[np.ndarray]:
    # axial slices run along the last spatial axis
    return [volume[:, :, k] for k in range(volume.shape[2])]


def texture_vectors(values, mask, config: TextureConfig | None = None) -> np.ndarray:
    """Haralick vectors for every (slice, offset) with at least one valid pair.

    ``values`` is a 3D map; voxels outside ``mask`` or non-finite are absent.
    Returns shape (n_vectors, 6).
    """
    config = config or TextureConfig()
    values = np.asarray(values, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if values.shape != mask.shape or values.ndim != 3:
        raise TextureError("map and mask must be matching 3D arrays")
    masked = np.where(mask, values, np.nan)
    if not np.isfinite(masked).any():
        raise TextureError("no present in-mask values")
    labels = quantize(masked, config.levels, config.value_range)
    out = []
    for sl in _slices(labels):
        if not np.any(sl != ABSENT):
            continue
        for off in config.offsets:
            counts = glcm_counts(sl, off, config.levels, config.symmetric)
            total = counts.sum()
            if total > 0:
                out.append(haralick(Glcm(counts / total)))
    if not out:
        raise TextureError("no slice has a valid pixel pair")
    return np.array(out, dtype=float)


def texture_features(values, mask, config: TextureConfig | None = None) -> dict[str, float]:
    """Mean and max of each Haralick feature over slices and offsets.

    Keys are ``<feature>_mean`` and ``<feature>_max``. Correlation statistics
    ignore undefined entries and are NaN when none is defined.
    """
    vecs = texture_vectors(values, mask, config)
    feats = {}
    for k, name in enumerate(HARALICK_NAMES):
        col = vecs[:, k]
        col = col[np.isfinite(col)]
        feats[f"{name}_mean"] = float(col.mean()) if col.size else float("nan")
        feats[f"{name}_max"] = float(col.max()) if col.size else float("nan")
    return feats


def raw_b0(volume, protocol) -> np.ndarray:
    """The b=0 frame at the lowest echo time, as used for raw-scan texture."""
    return np.asarray(volume.data[..., protocol.lowest_te_b0_index()], dtype=float)


def texture_names(prefix: str, names: Sequence[str] = HARALICK_NAMES) -> list[str]:
    return [f"{prefix}/{n}_{agg}" for n in names for agg in ("mean", "max")]
