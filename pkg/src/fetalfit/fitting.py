"""Bounded nonlinear least-squares fitting of the signal models.

The solver is a batched Levenberg-Marquardt: every row of the batch is an
independent problem (a voxel or a restart) with its own damping, its own
convergence test and its own iteration count. Rows only ever interact through
array bookkeeping, so a voxel's result does not depend on which other voxels
share its batch, which is what makes chunked/threaded fitting reproducible.

Box constraints are removed by a per-parameter transform: fractions use a
logistic map onto [lo, hi]; positive quantities use a logistic map onto
[log lo, log hi] followed by exp.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit, logit

from .models import ModelSpec, get_model
from .volume_io import AcquisitionProtocol, OrganMask, Volume4D, threads_from_env

log = logging.getLogger(__name__)

FRACTIONS = frozenset({"f", "nu"})
JACOBIAN_STEP = 1e-6
MAX_STEP = 0.25
# logistic coordinates are held within +-U_MAX so a parameter pinned at a
# bound stops the iteration instead of drifting outward forever
U_MAX = 12.0

_FIXED_BOUNDS = {
    "f": (0.0, 1.0),
    "nu": (0.0, 1.0),
    "Dstar": (3e-3, 0.5),
    "ADC": (1e-4, 4e-3),
    "T2": (10.0, 400.0),
    "T2p": (10.0, 400.0),
    "T2t": (10.0, 400.0),
    "T2fb": (10.0, 400.0),
}
_HEURISTIC_START = {
    "f": 0.3, "nu": 0.5, "Dstar": 0.05, "ADC": 0.0015,
    "T2": 100.0, "T2p": 100.0, "T2t": 100.0, "T2fb": 100.0,
}
S0_LOWER = 1e-6
S0_UPPER_FACTOR = 10.0


class DegenerateSignalError(ValueError):
    """The signal carries no scale information (all zero or non-finite)."""


def default_bounds(model, signal_max: float | None = None) -> dict:
    """Per-parameter (lo, hi). S0's upper bound is ``10 * signal_max``
    (``None`` when no signal is given; resolved at fit time)."""
    spec = get_model(model)
    out = {}
    for name in spec.param_names:
        if name == "S0":
            out[name] = (S0_LOWER, None if signal_max is None else S0_UPPER_FACTOR * signal_max)
        else:
            out[name] = _FIXED_BOUNDS[name]
    return out


@dataclass(frozen=True)
class FitConfig:
    model: str
    bounds: dict | None = None
    max_iterations: int = 500
    convergence_tol: float = 1e-10
    gradient_tol: float = 1e-10
    multistart_jitter: float = 0.2
    restarts: int = 10
    seed: int = 0
    # "auto": models ignoring one acquisition axis use only the samples at
    # that axis' lowest value; "all": every sample (data known to carry no
    # dependence on the ignored axis, e.g. a phantom built from the model)
    sample_selection: str = "auto"

    def __post_init__(self):
        get_model(self.model)
        if self.convergence_tol <= 0:
            raise ValueError("convergence_tol must be > 0")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.sample_selection not in ("auto", "all"):
            raise ValueError("sample_selection must be 'auto' or 'all'")
        for name, (lo, hi) in self.resolved_bounds(1.0).items():
            if not lo < hi:
                raise ValueError(f"bounds for {name} need lo < hi, got ({lo}, {hi})")

    def resolved_bounds(self, signal_max) -> dict:
        """Bounds with S0's data-dependent upper limit filled in."""
        merged = default_bounds(self.model)
        merged.update(self.bounds or {})
        out = {}
        for name, (lo, hi) in merged.items():
            if hi is None:
                hi = S0_UPPER_FACTOR * signal_max
            out[name] = (float(lo), float(hi))
        return out


@dataclass
class FitResult:
    params: tuple  # a models.* NamedTuple
    sse: float
    iterations: int
    converged: bool
    sse_trace: list = field(default_factory=list, repr=False)


class _Box:
    """Logistic / log-logistic map between unconstrained u and bounded x."""

    def __init__(self, names, lo, hi):
        self.names = tuple(names)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)
        self.is_log = np.array([n not in FRACTIONS for n in self.names])
        with np.errstate(divide="ignore"):
            self.llo = np.where(self.is_log, np.log(np.where(self.is_log, self.lo, 1.0)), 0.0)
            self.lhi = np.where(self.is_log, np.log(np.where(self.is_log, self.hi, 1.0)), 0.0)

    def take(self, rows):
        box = _Box.__new__(_Box)
        box.names, box.is_log = self.names, self.is_log
        box.lo, box.hi = self.lo[rows], self.hi[rows]
        box.llo, box.lhi = self.llo[rows], self.lhi[rows]
        return box

    def to_x(self, u):
        s = expit(u)
        lin = self.lo + (self.hi - self.lo) * s
        lg = np.exp(self.llo + (self.lhi - self.llo) * s)
        return np.clip(np.where(self.is_log, lg, lin), self.lo, self.hi)

    def unit(self, x):
        """Position of x inside its box, on the transformed scale, in [0, 1]."""
        x = np.asarray(x, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            lin = (x - self.lo) / (self.hi - self.lo)
            lg = (np.log(np.where(self.is_log, x, 1.0)) - self.llo) / (self.lhi - self.llo)
        return np.where(self.is_log, lg, lin)

    def from_unit(self, s):
        s = np.asarray(s, dtype=float)
        lin = self.lo + (self.hi - self.lo) * s
        lg = np.exp(self.llo + (self.lhi - self.llo) * s)
        return np.where(self.is_log, lg, lin)

    def to_u(self, x, edge=1e-6):
        return logit(np.clip(self.unit(x), edge, 1.0 - edge))


def s0_upper(spec: ModelSpec, signal_max, te_min: float, t2_lower: float):
    """Upper S0 bound: ten times the largest sample, extrapolated back to
    te = 0 under the fastest admissible decay for te-dependent models."""
    factor = np.exp(te_min / t2_lower) if spec.uses_te else 1.0
    return S0_UPPER_FACTOR * np.asarray(signal_max, dtype=float) * factor


def _make_box(spec: ModelSpec, config: FitConfig, signal_max: np.ndarray,
              te_min: float = 0.0) -> _Box:
    n = signal_max.size
    merged = default_bounds(spec)
    merged.update(config.bounds or {})
    t2_lo = min((merged[k][0] for k in spec.param_names if k.startswith("T2")), default=np.inf)
    lo = np.empty((n, spec.n_params))
    hi = np.empty((n, spec.n_params))
    for k, name in enumerate(spec.param_names):
        l, h = merged[name]
        lo[:, k] = l
        hi[:, k] = s0_upper(spec, signal_max, te_min, t2_lo) if h is None else h
    return _Box(spec.param_names, lo, hi)


def _matvec(a, v):
    # batched a @ v for a (n, m, p), v (n, p)
    return np.matmul(a, v[:, :, None])[:, :, 0]


def _matvec_t(a, v):
    # batched a.T @ v for a (n, m, p), v (n, m)
    return np.matmul(v[:, None, :], a)[:, 0, :]


def levenberg_marquardt(spec: ModelSpec, b, te, y, box: _Box, u0, config: FitConfig,
                        trace: bool = False):
    """Minimise ||model(box.to_x(u)) - y||^2 independently for every row.

    Returns ``(u, sse, iterations, converged, traces)``; ``traces`` holds the
    accepted-step SSE history per row when ``trace`` is set.
    """
    y = np.asarray(y, dtype=float)
    u = np.array(u0, dtype=float)
    n_rows, n_par = u.shape
    energy = np.sum(y * y, axis=1)
    floor = 1e-30 * energy

    def resid(uu, sub, rows):
        return spec.signal(sub.to_x(uu), b, te) - y[rows]

    r = resid(u, box, slice(None))
    sse = np.sum(r * r, axis=1)
    lam = np.full(n_rows, 1e-3)
    # damping growth factor for consecutive rejections (Nielsen's update)
    nu = np.full(n_rows, 2.0)
    # per-row step cap; grows while capped steps keep being accepted so a
    # parameter marching towards its bound is not slowed down indefinitely
    radius = np.full(n_rows, MAX_STEP)
    iters = np.zeros(n_rows, dtype=int)
    converged = sse <= floor
    active = ~converged.copy()
    traces = [[float(s)] for s in sse] if trace else None

    for _ in range(config.max_iterations):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        ur, rr = u[rows], r[rows]
        sub = box.take(rows)
        jac = np.empty((rows.size, rr.shape[1], n_par))
        for k in range(n_par):
            du = ur.copy()
            du[:, k] += JACOBIAN_STEP
            jac[:, :, k] = (resid(du, sub, rows) - rr) / JACOBIAN_STEP
        iters[rows] += 1

        grad = _matvec_t(jac, rr)
        # parameters held at the clamp with descent pointing outward are
        # frozen for this iteration
        pinned = ((ur >= U_MAX) & (grad < 0)) | ((ur <= -U_MAX) & (grad > 0))
        if pinned.any():
            jac = np.where(pinned[:, None, :], 0.0, jac)
            grad = np.where(pinned, 0.0, grad)
        # scaled gradient: cosine between the residual and each Jacobian column
        scale = np.sqrt(np.sum(jac * jac, axis=1))
        scale = np.where(scale > 0, scale, 1.0)
        rnorm = np.sqrt(sse[rows])[:, None]
        flat = np.max(np.abs(grad) / (scale * np.where(rnorm > 0, rnorm, 1.0)),
                      axis=1) <= config.gradient_tol
        if flat.any():
            converged[rows[flat]] = True
            active[rows[flat]] = False

        # eigen-decomposition of the scaled normal matrix; for p <= 6 this
        # is far cheaper than an SVD of the tall Jacobian
        js = jac / scale[:, None, :]
        w, V = np.linalg.eigh(np.matmul(js.transpose(0, 2, 1), js))
        vtg = _matvec_t(V, _matvec_t(js, rr))
        # null directions (frozen columns) get no step at all
        null = w <= 1e-14 * np.max(w, axis=1, keepdims=True)
        w = np.where(null, np.inf, w)

        pending = ~flat
        while pending.any():
            idx = np.flatnonzero(pending)
            g = rows[idx]
            coef = vtg[idx] / (w[idx] + lam[g, None])
            step = -_matvec(V[idx], coef) / scale[idx]
            # components pushing a clamped parameter further out are dropped
            # so they do not eat into the step cap of the others
            uc = ur[idx]
            step = np.where(((uc >= U_MAX) & (step > 0)) | ((uc <= -U_MAX) & (step < 0)),
                            0.0, step)
            # a long jump along a weakly determined direction parks the
            # parameter on its bound, where the logistic map has no gradient
            big = np.max(np.abs(step), axis=1)
            cap = radius[g]
            capped = big > cap
            step = step * np.minimum(1.0, cap / np.maximum(big, 1e-300))[:, None]
            u_new = np.clip(ur[idx] + step, -U_MAX, U_MAX)
            r_new = resid(u_new, sub.take(idx), g)
            sse_new = np.sum(r_new * r_new, axis=1)
            ok = sse_new < sse[g]
            # gain ratio of actual to linearised reduction drives the damping
            lin = rr[idx] + _matvec(jac[idx], u_new - ur[idx])
            pred = sse[g] - np.sum(lin * lin, axis=1)
            rho = (sse[g] - sse_new) / np.where(pred > 0, pred, np.inf)

            acc = g[ok]
            if acc.size:
                rel = (sse[acc] - sse_new[ok]) / sse[acc]
                u[acc], r[acc], sse[acc] = u_new[ok], r_new[ok], sse_new[ok]
                shrink = np.maximum(1.0 / 3.0, 1.0 - (2.0 * rho[ok] - 1.0) ** 3)
                lam[acc] = np.maximum(lam[acc] * shrink, 1e-15)
                nu[acc] = 2.0
                grow = acc[capped[ok]]
                radius[grow] = np.minimum(radius[grow] * 2.0, 4 * MAX_STEP)
                radius[acc[~capped[ok]]] = MAX_STEP
                done = (rel < config.convergence_tol) | (sse[acc] <= floor[acc])
                converged[acc[done]] = True
                active[acc[done]] = False
                if trace:
                    for i in acc:
                        traces[i].append(float(sse[i]))
            rej = g[~ok]
            lam[rej] *= nu[rej]
            nu[rej] *= 2.0
            radius[rej] = MAX_STEP
            # damping beyond this means no descent direction at working precision
            stalled = rej[lam[rej] > 1e16]
            converged[stalled] = True
            active[stalled] = False
            pending[idx[ok]] = False
            pending[idx[~ok][lam[rej] > 1e16]] = False

    return u, sse, iters, converged, traces


def _select(spec, protocol, signal, selection: str = "auto"):
    if selection == "all":
        mask = np.ones(len(protocol), dtype=bool)
    else:
        mask = spec.sample_mask(protocol.b, protocol.te)
    return protocol.b[mask], protocol.te[mask], np.asarray(signal, dtype=float)[..., mask]


def heuristic_start(spec: ModelSpec, signal_max) -> np.ndarray:
    signal_max = np.atleast_1d(np.asarray(signal_max, dtype=float))
    x = np.empty((signal_max.size, spec.n_params))
    for k, name in enumerate(spec.param_names):
        x[:, k] = signal_max if name == "S0" else _HEURISTIC_START[name]
    return x


def fit_signals(model, protocol, signals, config: FitConfig | None = None,
                init=None, restarts: int | None = None, trace: bool = False):
    """Fit many independent signal series, keeping the best of ``restarts``
    starts per series.

    ``signals`` has shape (n, len(protocol)). ``init`` (n, n_params) replaces
    the heuristic start; extra restarts jitter S0 log-normally and spread the
    other parameters over their boxes.
    Returns ``(params, sse, iterations, converged, traces)`` with series that
    cannot be fitted (non-finite or all-zero) reported as NaN.
    """
    spec = get_model(model)
    config = config or FitConfig(spec.key)
    restarts = config.restarts if restarts is None else restarts
    b, te, y = _select(spec, protocol, np.atleast_2d(signals), config.sample_selection)
    n = y.shape[0]
    smax = np.max(y, axis=1)
    good = np.all(np.isfinite(y), axis=1) & (smax > 0)
    params = np.full((n, spec.n_params), np.nan)
    sse = np.full(n, np.nan)
    iters = np.zeros(n, dtype=int)
    conv = np.zeros(n, dtype=bool)
    traces = [[] for _ in range(n)] if trace else None
    if not good.any():
        return params, sse, iters, conv, traces

    gi = np.flatnonzero(good)
    box = _make_box(spec, config, smax[gi], float(te.min()))
    x0 = heuristic_start(spec, smax[gi]) if init is None else np.asarray(init, float).reshape(n, -1)[gi]
    # keep starts strictly inside the box
    x0 = box.from_unit(np.clip(box.unit(x0), 1e-3, 1 - 1e-3))
    starts = [x0]
    if restarts > 1:
        rng = np.random.default_rng(config.seed)
        for _ in range(restarts - 1):
            # S0 is jittered around the data scale, shape parameters are
            # spread over their whole box
            # one draw per restart shared by every series, so a series gets
            # the same starts whether fitted alone or in a batch
            jit = np.exp(config.multistart_jitter * rng.standard_normal((1, spec.n_params)))
            spread = box.from_unit(np.broadcast_to(rng.uniform(0.02, 0.98, (1, spec.n_params)),
                                                   x0.shape))
            xs = np.where(np.array(spec.param_names) == "S0", x0 * jit, spread)
            starts.append(box.from_unit(np.clip(box.unit(xs), 1e-3, 1 - 1e-3)))
    m = len(starts)
    big_box = box.take(np.tile(np.arange(gi.size), m))
    u0 = np.concatenate([box.to_u(s) for s in starts])
    u, s, it, cv, tr = levenberg_marquardt(spec, b, te, np.tile(y[gi], (m, 1)), big_box,
                                           u0, config, trace=trace)
    s = s.reshape(m, gi.size)
    best = np.argmin(np.where(np.isfinite(s), s, np.inf), axis=0)
    pick = best * gi.size + np.arange(gi.size)
    params[gi] = big_box.take(pick).to_x(u[pick])
    sse[gi] = s[best, np.arange(gi.size)]
    iters[gi] = it.reshape(m, gi.size).sum(axis=0)
    conv[gi] = cv[pick]
    if trace:
        for j, i in enumerate(gi):
            traces[i] = tr[pick[j]]
    return params, sse, iters, conv, traces


def fit_roi(model, protocol: AcquisitionProtocol, mean_signal, config: FitConfig | None = None,
            trace: bool = False) -> FitResult:
    """Fit the ROI-mean signal with multistart; best start wins on SSE."""
    spec = get_model(model)
    sig = np.asarray(mean_signal, dtype=float).ravel()
    if sig.size != len(protocol):
        raise ValueError(f"signal has {sig.size} samples, protocol has {len(protocol)}")
    if not np.all(np.isfinite(sig)) or np.any(sig < 0):
        raise ValueError("signal must be finite and non-negative")
    selection = config.sample_selection if config else "auto"
    _, _, used = _select(spec, protocol, sig, selection)
    if not np.any(used > 0):
        raise DegenerateSignalError("signal is all zero")
    p, s, it, cv, tr = fit_signals(spec, protocol, sig[None, :], config, trace=trace)
    return FitResult(spec.params(*map(float, p[0])), float(s[0]), int(it[0]), bool(cv[0]),
                     tr[0] if trace else [])


def fit_rois(model, protocol: AcquisitionProtocol, mean_signals,
             config: FitConfig | None = None) -> list[FitResult]:
    """Batched :func:`fit_roi` over rows of ``mean_signals``; same result per row."""
    spec = get_model(model)
    sig = np.atleast_2d(np.asarray(mean_signals, dtype=float))
    if sig.shape[1] != len(protocol):
        raise ValueError(f"signals have {sig.shape[1]} samples, protocol has {len(protocol)}")
    if not np.all(np.isfinite(sig)) or np.any(sig < 0):
        raise ValueError("signal must be finite and non-negative")
    selection = config.sample_selection if config else "auto"
    _, _, used = _select(spec, protocol, sig, selection)
    if np.any(~np.any(used > 0, axis=1)):
        raise DegenerateSignalError("signal is all zero")
    p, s, it, cv, _ = fit_signals(spec, protocol, sig, config)
    return [FitResult(spec.params(*map(float, p[i])), float(s[i]), int(it[i]), bool(cv[i]), [])
            for i in range(sig.shape[0])]


@dataclass
class ParameterMap:
    model: str
    organ: str
    param_names: tuple
    data: np.ndarray  # (nx, ny, nz, np), NaN outside mask / failed voxels
    residual: np.ndarray  # (nx, ny, nz)
    failures: dict = field(default_factory=dict)  # code -> list of (x, y, z)

    @property
    def dims(self):
        return tuple(self.data.shape)

    def param(self, name) -> np.ndarray:
        return self.data[..., self.param_names.index(name)]

    def present(self) -> np.ndarray:
        return np.all(np.isfinite(self.data), axis=-1)


def fit_voxelwise(model, protocol: AcquisitionProtocol, volume: Volume4D, mask: OrganMask,
                  roi_init: FitResult, config: FitConfig | None = None,
                  threads: int | None = None, chunk_size: int | None = None,
                  allow_unconverged: bool = True) -> ParameterMap:
    """Fit every in-mask voxel once, starting from the ROI estimate."""
    return fit_voxelwise_many(model, protocol, [(volume, mask, roi_init)], config,
                              threads, chunk_size, allow_unconverged)[0]


def fit_voxelwise_many(model, protocol: AcquisitionProtocol, jobs, config: FitConfig | None = None,
                       threads: int | None = None, chunk_size: int | None = None,
                       allow_unconverged: bool = True) -> list[ParameterMap]:
    """Voxelwise fits for several ``(volume, mask, roi_init)`` jobs in one batch.

    Every voxel is an independent problem, so pooling organs (or subjects)
    only amortises the per-iteration overhead; results are identical to
    fitting each job on its own. With ``threads > 1`` the pooled rows are
    split into chunks fitted concurrently.
    """
    spec = get_model(model)
    config = replace(config or FitConfig(spec.key), restarts=1)
    signals, init, coords = [], [], []
    for volume, mask, roi_init in jobs:
        if volume.spatial_dims != mask.dims:
            raise ValueError(f"mask dims {mask.dims} do not match volume {volume.spatial_dims}")
        if volume.data.shape[3] != len(protocol):
            raise ValueError("volume sample count does not match protocol")
        if not roi_init.converged and not allow_unconverged:
            raise ValueError(f"ROI fit for {mask.organ} did not converge")
        c = np.argwhere(mask.data)
        coords.append(c)
        signals.append(volume.data[mask.data].astype(float))
        init.append(np.tile(np.asarray(roi_init.params, dtype=float), (len(c), 1)))
    signals = np.concatenate(signals) if signals else np.empty((0, len(protocol)))
    init = np.concatenate(init) if init else np.empty((0, spec.n_params))
    n = len(signals)

    threads = threads or threads_from_env(1)
    if chunk_size is None:
        chunk_size = max(1, -(-n // threads))
    chunks = [slice(i, i + chunk_size) for i in range(0, n, chunk_size)]

    def work(sl):
        return fit_signals(spec, protocol, signals[sl], config, init=init[sl], restarts=1)

    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            outs = list(pool.map(work, chunks))
    else:
        outs = [work(sl) for sl in chunks]
    params = np.concatenate([o[0] for o in outs]) if outs else init
    sse = np.concatenate([o[1] for o in outs]) if outs else np.empty(0)
    conv = np.concatenate([o[3] for o in outs]) if outs else np.empty(0, dtype=bool)

    maps = []
    start = 0
    for (volume, mask, _), c in zip(jobs, coords):
        sl = slice(start, start + len(c))
        start += len(c)
        data = np.full(mask.dims + (spec.n_params,), np.nan)
        resid = np.full(mask.dims, np.nan)
        ok = np.all(np.isfinite(params[sl]), axis=1)
        data[mask.data] = params[sl]
        resid[mask.data] = sse[sl]
        failures = {}
        if (~ok).any():
            failures["degenerate_signal"] = c[~ok].tolist()
        slow = ok & ~conv[sl]
        if slow.any():
            failures["not_converged"] = c[slow].tolist()
        maps.append(ParameterMap(spec.key, mask.organ, spec.param_names, data, resid, failures))
    return maps


def save_parameter_map(pmap: ParameterMap, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = directory / f"param_{pmap.organ}_{pmap.model}"
    pmap.data.astype("<f4").ravel(order="F").tofile(stem.with_suffix(".f32"))
    pmap.residual.astype("<f4").ravel(order="F").tofile(
        directory / f"residual_{pmap.organ}_{pmap.model}.f32")
    with open(stem.with_suffix(".json"), "w") as fh:
        json.dump({"model": pmap.model, "organ": pmap.organ,
                   "param_names": list(pmap.param_names), "dims": list(pmap.dims),
                   "failures": pmap.failures}, fh, indent=1)
    return stem.with_suffix(".f32")


def load_parameter_map(directory, organ: str, model: str) -> ParameterMap:
    directory = Path(directory)
    stem = directory / f"param_{organ}_{model}"
    with open(stem.with_suffix(".json")) as fh:
        meta = json.load(fh)
    dims = tuple(meta["dims"])
    data = np.fromfile(stem.with_suffix(".f32"), dtype="<f4").astype(float)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{stem}.f32 size does not match dims {dims}")
    rpath = directory / f"residual_{organ}_{model}.f32"
    resid = (np.fromfile(rpath, dtype="<f4").astype(float).reshape(dims[:3], order="F")
             if rpath.exists() else np.full(dims[:3], np.nan))
    return ParameterMap(meta["model"], meta["organ"], tuple(meta["param_names"]),
                        data.reshape(dims, order="F"), resid, meta.get("failures", {}))


def draw_interior(model, n: int, rng, margin: float = 0.05, s0_range=(10.0, 1000.0)):
    """Parameter sets drawn uniformly on the transformed scale, ``margin``
    away from every bound. S0 is drawn log-uniformly from ``s0_range``."""
    spec = get_model(model)
    bounds = default_bounds(spec, signal_max=1.0)
    bounds["S0"] = s0_range
    lo = np.array([bounds[k][0] for k in spec.param_names])
    hi = np.array([bounds[k][1] for k in spec.param_names])
    box = _Box(spec.param_names, np.tile(lo, (n, 1)), np.tile(hi, (n, 1)))
    s = rng.uniform(margin, 1.0 - margin, size=(n, spec.n_params))
    return box.from_unit(s)


def interior_fraction(model, params, bounds: dict) -> np.ndarray:
    """Transformed-scale position of each parameter inside ``bounds``."""
    spec = get_model(model)
    params = np.atleast_2d(params)
    lo = np.array([bounds[k][0] for k in spec.param_names])
    hi = np.array([bounds[k][1] for k in spec.param_names])
    box = _Box(spec.param_names, np.tile(lo, (len(params), 1)), np.tile(hi, (len(params), 1)))
    return box.unit(params)
