"""Elastic-net logistic and linear models, RFECV, cross-validation and the
train/test experiment used for FGR classification and outcome regression.

Labels: control = 1, FGR = 0 for the classifier output. Sensitivity treats
FGR as the positive class.

Objectives (features standardized on the training rows, intercept free):

* logistic: ``C * sum_i CE_i + l1_ratio * |w|_1 + (1 - l1_ratio) / 2 * |w|^2``
* linear:   ``1/(2n) |y - Xw - b|^2 + alpha * (l1_ratio * |w|_1 + (1 - l1_ratio) / 2 * |w|^2)``
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

log = logging.getLogger(__name__)

CONTROL, FGR = 1, 0
TASKS = {"classify": None, "ga": "ga_at_delivery", "interval": "scan_to_delivery",
         "weight": "baby_weight"}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """``strength`` is C for classification and alpha for regression."""

    strength: float = 0.001
    l1_ratio: float = 0.0
    folds: int = 5
    seed: int = 0
    test_fraction: float = 0.2
    tol: float = 1e-8
    max_iter: int = 200_000

    def __post_init__(self):
        if not self.strength > 0:
            raise ValueError("regularization strength must be > 0")
        if not 0.0 <= self.l1_ratio <= 1.0:
            raise ValueError("l1_ratio must lie in [0, 1]")
        if self.folds < 2:
            raise ValueError("folds must be >= 2")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


# hyperparameters reported for the two feature families and the GA regressor
CLASSIFY_SUMMARIES = TrainConfig(strength=0.001, l1_ratio=0.0)
CLASSIFY_HARALICK = TrainConfig(strength=0.25, l1_ratio=0.0)
REGRESS_GA = TrainConfig(strength=33.93, l1_ratio=0.0, tol=1e-10)


def default_config(task: str, features: str = "summaries") -> TrainConfig:
    if task == "classify":
        return CLASSIFY_HARALICK if features == "haralick" else CLASSIFY_SUMMARIES
    return REGRESS_GA


@dataclass
class LinearModel:
    task: str  # "classification" or "regression"
    weights: np.ndarray
    intercept: float
    center: np.ndarray
    scale: np.ndarray
    feature_names: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)
    iterations: int = 0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.center = np.asarray(self.center, dtype=float)
        self.scale = np.asarray(self.scale, dtype=float)
        if not (self.weights.shape == self.center.shape == self.scale.shape):
            raise ModelError("weights and standardization must have equal length")
        if np.any(self.scale <= 0):
            raise ModelError("standardization scales must be > 0")

    def decision(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.weights.size:
            raise ModelError(f"expected {self.weights.size} features, got {X.shape[1]}")
        return ((X - self.center) / self.scale) @ self.weights + self.intercept

    def to_json(self) -> dict:
        return {"task": self.task, "weights": self.weights.tolist(), "intercept": self.intercept,
                "center": self.center.tolist(), "scale": self.scale.tolist(),
                "feature_names": list(self.feature_names), "config": self.config,
                "iterations": self.iterations}

    @classmethod
    def from_json(cls, d: dict) -> "LinearModel":
        return cls(d["task"], d["weights"], float(d["intercept"]), d["center"], d["scale"],
                   list(d.get("feature_names", [])), dict(d.get("config", {})),
                   int(d.get("iterations", 0)))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "LinearModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _check_xy(X, y):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[0] != y.size:
        raise ModelError("X and y have different numbers of rows")
    if not np.all(np.isfinite(X)):
        raise ModelError("features must be finite; impute absent values first")
    if not np.all(np.isfinite(y)):
        raise ModelError("targets must be finite")
    return X, y


def standardize_params(X) -> tuple[np.ndarray, np.ndarray]:
    center = X.mean(axis=0)
    scale = X.std(axis=0)
    # constant columns standardize to zero and keep a unit scale
    scale = np.where(scale > 0, scale, 1.0)
    return center, scale


def _soft(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def train_logistic(X, y, config: TrainConfig = CLASSIFY_SUMMARIES, feature_names=(),
                   warm_start: tuple | None = None) -> LinearModel:
    """Elastic-net logistic regression by FISTA with adaptive restart.

    ``y`` uses control = 1, FGR = 0. Stops when the minimum-norm
    subgradient falls below ``config.tol``.
    """
    X, y = _check_xy(X, y)
    if np.unique(y).size < 2:
        raise ModelError("classification needs both classes")
    if not np.all((y == 0) | (y == 1)):
        raise ModelError("labels must be 0/1")
    center, scale = standardize_params(X)
    Z = (X - center) / scale
    n, p = Z.shape
    C, l1 = config.strength, config.l1_ratio
    l2 = 1.0 - l1
    A = np.hstack([Z, np.ones((n, 1))])
    lip = C * np.linalg.eigvalsh(A.T @ A)[-1] / 4.0 + l2
    step = 1.0 / lip

    def smooth(theta):
        z = A @ theta
        val = C * np.sum(np.logaddexp(0.0, z) - y * z) + 0.5 * l2 * theta[:p] @ theta[:p]
        grad = C * (A.T @ (expit(z) - y))
        grad[:p] += l2 * theta[:p]
        return val, grad

    def objective(theta):
        return smooth(theta)[0] + l1 * np.abs(theta[:p]).sum()

    def prox(v):
        out = v.copy()
        out[:p] = _soft(v[:p], l1 * step)
        return out

    def residual(theta, grad):
        g = grad.copy()
        w = theta[:p]
        gw = g[:p]
        g[:p] = np.where(w != 0, gw + l1 * np.sign(w), np.sign(gw) * np.maximum(np.abs(gw) - l1, 0.0))
        return np.sqrt(g @ g)

    theta = np.zeros(p + 1)
    if warm_start is not None:
        theta[:p] = np.asarray(warm_start[0], dtype=float)
        theta[p] = float(warm_start[1])
    else:
        prior = np.clip(y.mean(), 1e-12, 1 - 1e-12)
        theta[p] = math.log(prior / (1 - prior))
    mom, t, f_old = theta.copy(), 1.0, objective(theta)
    it = 0
    for it in range(1, config.max_iter + 1):
        _, g = smooth(mom)
        new = prox(mom - step * g)
        f_new = objective(new)
        if f_new > f_old:
            # adaptive restart: drop momentum and take a plain proximal step
            mom, t = theta.copy(), 1.0
            _, g = smooth(mom)
            new = prox(mom - step * g)
            f_new = objective(new)
        t_next = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        mom = new + ((t - 1.0) / t_next) * (new - theta)
        theta, t, f_old = new, t_next, f_new
        if residual(theta, smooth(theta)[1]) < config.tol:
            break
    else:
        log.warning("logistic solver stopped at max_iter=%d", config.max_iter)
    return LinearModel("classification", theta[:p], float(theta[p]), center, scale,
                       list(feature_names), asdict(config), it)


def predict_logistic(model: LinearModel, X) -> tuple[np.ndarray, np.ndarray]:
    """Probability of control and class (1 control iff p >= 0.5, else 0 FGR)."""
    p = expit(model.decision(X))
    return p, np.where(p >= 0.5, CONTROL, FGR)


def train_linear(X, y, config: TrainConfig = REGRESS_GA, feature_names=(),
                 warm_start: tuple | None = None) -> LinearModel:
    """Elastic-net least squares on standardized features.

    Cyclic coordinate descent until the largest coefficient change is below
    ``config.tol``. With ``l1_ratio = 0`` the objective is a ridge problem
    and its minimizer is obtained directly from the normal equations.
    """
    X, y = _check_xy(X, y)
    if X.shape[0] < 2:
        raise ModelError("regression needs at least two subjects")
    center, scale = standardize_params(X)
    Z = (X - center) / scale
    n, p = Z.shape
    ybar = y.mean()
    yc = y - ybar
    alpha, l1 = config.strength, config.l1_ratio
    pen1, pen2 = alpha * l1, alpha * (1.0 - l1)
    if l1 == 0.0:
        w = np.linalg.solve(Z.T @ Z / n + pen2 * np.eye(p), Z.T @ yc / n)
        return LinearModel("regression", w, float(ybar), center, scale, list(feature_names),
                           asdict(config), 1)
    col_sq = np.sum(Z * Z, axis=0) / n
    w = np.zeros(p) if warm_start is None else np.asarray(warm_start[0], dtype=float).copy()
    r = yc - Z @ w
    sweeps = 0
    for sweeps in range(1, config.max_iter + 1):
        biggest = 0.0
        for j in range(p):
            denom = col_sq[j] + pen2
            if denom == 0:
                continue
            old = w[j]
            rho = Z[:, j] @ r / n + col_sq[j] * old
            new = _soft(rho, pen1) / denom
            if new != old:
                r -= Z[:, j] * (new - old)
                w[j] = new
                biggest = max(biggest, abs(new - old))
        if biggest < config.tol:
            break
    else:
        log.warning("coordinate descent stopped at max_iter=%d", config.max_iter)
    return LinearModel("regression", w, float(ybar), center, scale, list(feature_names),
                       asdict(config), sweeps)


def predict_linear(model: LinearModel, X) -> np.ndarray:
    return model.decision(X)


def train(task: str, X, y, config: TrainConfig, feature_names=(), warm_start=None) -> LinearModel:
    if task == "classify":
        return train_logistic(X, y, config, feature_names, warm_start)
    return train_linear(X, y, config, feature_names, warm_start)


# ---------------------------------------------------------------------------
# evaluation

@dataclass
class EvalReport:
    task: str
    n: int
    accuracy: float = float("nan")
    sensitivity: float = float("nan")
    specificity: float = float("nan")
    rmse: float = float("nan")
    confusion: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v)
                for k, v in asdict(self).items()}


def classification_report(y_true, y_pred) -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if y_true.size == 0:
        raise ModelError("empty test set")
    tp = int(np.sum((y_true == FGR) & (y_pred == FGR)))
    fn = int(np.sum((y_true == FGR) & (y_pred == CONTROL)))
    tn = int(np.sum((y_true == CONTROL) & (y_pred == CONTROL)))
    fp = int(np.sum((y_true == CONTROL) & (y_pred == FGR)))
    sens = tp / (tp + fn) if tp + fn else float("nan")
    spec = tn / (tn + fp) if tn + fp else float("nan")
    return EvalReport("classification", int(y_true.size), (tp + tn) / y_true.size, sens, spec,
                      confusion={"tp": tp, "fn": fn, "tn": tn, "fp": fp})


def regression_report(y_true, y_pred) -> EvalReport:
    y_true = np.asarray(y_true, dtype=float)
    y_pred = np.asarray(y_pred, dtype=float)
    if y_true.size == 0:
        raise ModelError("empty test set")
    return EvalReport("regression", int(y_true.size),
                      rmse=float(np.sqrt(np.mean((y_true - y_pred) ** 2))))


def evaluate(model: LinearModel, X_test, y_test) -> EvalReport:
    if model.task == "classification":
        return classification_report(y_test, predict_logistic(model, X_test)[1])
    return regression_report(y_test, predict_linear(model, X_test))


def score(model: LinearModel, X, y) -> float:
    """Higher is better: accuracy, or negative rmse for regression."""
    rep = evaluate(model, X, y)
    return rep.accuracy if model.task == "classification" else -rep.rmse


# ---------------------------------------------------------------------------
# splitting and cross-validation

def _allocate(counts: np.ndarray, total: int) -> np.ndarray:
    # largest-remainder apportionment of ``total`` across classes
    share = counts * total / counts.sum()
    base = np.floor(share).astype(int)
    order = np.argsort(-(share - base), kind="stable")
    base[order[: total - base.sum()]] += 1
    return base


def stratified_split(groups, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """(train_idx, test_idx) with each group represented proportionally."""
    groups = np.asarray(groups)
    n = groups.size
    n_test = min(n - 1, max(1, int(round(test_fraction * n))))
    classes = np.unique(groups)
    counts = np.array([np.sum(groups == c) for c in classes])
    per = _allocate(counts, n_test)
    rng = np.random.default_rng(seed)
    test = []
    for c, k in zip(classes, per):
        idx = np.flatnonzero(groups == c)
        test.extend(rng.permutation(idx)[:k].tolist())
    test = np.sort(np.array(test, dtype=int))
    train = np.setdiff1d(np.arange(n), test)
    return train, test


def kfold_indices(n: int, folds: int, seed: int, groups=None) -> list[np.ndarray]:
    """Test-index arrays per fold; stratified when ``groups`` is given."""
    rng = np.random.default_rng(seed)
    if groups is None:
        if n < folds:
            raise ModelError(f"{n} samples cannot fill {folds} folds")
        return [np.sort(f) for f in np.array_split(rng.permutation(n), folds)]
    groups = np.asarray(groups)
    assign = np.empty(n, dtype=int)
    offset = 0
    for c in np.unique(groups):
        idx = np.flatnonzero(groups == c)
        if idx.size < folds:
            raise ModelError(f"class {c!r} has {idx.size} members, fewer than {folds} folds")
        # round-robin continues across classes so fold sizes stay balanced
        assign[rng.permutation(idx)] = (offset + np.arange(idx.size)) % folds
        offset += idx.size
    return [np.flatnonzero(assign == k) for k in range(folds)]


@dataclass
class CvResult:
    scores: list[float]
    mean: float
    std: float


def kfold_cv(X, y, task: str, config: TrainConfig, folds=None) -> CvResult:
    """Per-fold accuracy (classification) or rmse (regression)."""
    X, y = _check_xy(X, y)
    if folds is None:
        folds = kfold_indices(len(y), config.folds, config.seed,
                              groups=y if task == "classify" else None)
    scores = []
    for test in folds:
        train_idx = np.setdiff1d(np.arange(len(y)), test)
        model = train(task, X[train_idx], y[train_idx], config)
        rep = evaluate(model, X[test], y[test])
        scores.append(rep.accuracy if task == "classify" else rep.rmse)
    scores = [float(s) for s in scores]
    return CvResult(scores, float(np.mean(scores)), float(np.std(scores)))


@dataclass
class RfecvResult:
    mask: np.ndarray
    n_selected: int
    counts: list[int]  # feature counts evaluated, descending
    cv_scores: list[float]  # mean cv score per count (accuracy or -rmse)


def rfecv(X, y, task: str, config: TrainConfig, feature_names: Sequence[str] | None = None
          ) -> RfecvResult:
    """Recursive elimination, one feature per round, scored by k-fold CV.

    The weakest feature is the one with the smallest |standardized weight|
    in a fit on all rows; ties drop the feature whose name sorts last. The
    feature count with the best mean CV score wins, ties going to fewer.
    """
    X, y = _check_xy(X, y)
    n, p = X.shape
    if p < 1:
        raise ModelError("rfecv needs at least one feature")
    names = list(feature_names) if feature_names is not None else [f"{j:08d}" for j in range(p)]
    folds = kfold_indices(n, config.folds, config.seed, groups=y if task == "classify" else None)
    active = list(range(p))
    counts, curve, history = [], [], []
    # warm starts per fold (and for the full fit) keyed by feature index
    warm: dict[int, dict[int, float]] = {}
    while True:
        cols = np.array(active)
        fold_scores = []
        for k, test in enumerate(folds):
            tr = np.setdiff1d(np.arange(n), test)
            ws = warm.get(k)
            start = (np.array([ws[0].get(j, 0.0) for j in cols]), ws[1]) if ws else None
            model = train(task, X[np.ix_(tr, cols)], y[tr], config, warm_start=start)
            warm[k] = ({j: w for j, w in zip(cols, model.weights)}, model.intercept)
            fold_scores.append(score(model, X[np.ix_(test, cols)], y[test]))
        counts.append(len(cols))
        curve.append(float(np.mean(fold_scores)))
        history.append(list(active))
        if len(active) == 1:
            break
        ws = warm.get(-1)
        start = (np.array([ws[0].get(j, 0.0) for j in cols]), ws[1]) if ws else None
        full = train(task, X[:, cols], y, config, warm_start=start)
        warm[-1] = ({j: w for j, w in zip(cols, full.weights)}, full.intercept)
        mags = np.abs(full.weights)
        drop = min(range(len(cols)), key=lambda i: (mags[i], _neg_key(names[cols[i]])))
        active.pop(drop)
    best = max(range(len(curve)), key=lambda i: (curve[i], -counts[i]))
    mask = np.zeros(p, dtype=bool)
    mask[history[best]] = True
    return RfecvResult(mask, int(mask.sum()), counts, curve)


def _neg_key(name: str):
    # sort key making later names come first under min()
    return tuple(-ord(c) for c in name) + (1,)


# ---------------------------------------------------------------------------
# full experiment

def impute_median(X_train, X_other=None):
    """Fill NaN with training-column medians; columns empty in training are dropped.

    Returns ``(X_train, X_other, keep)``.
    """
    X_train = np.asarray(X_train, dtype=float)
    med = np.array([np.nanmedian(c) if np.isfinite(c).any() else np.nan for c in X_train.T])
    keep = np.isfinite(med)
    fill = lambda A: np.where(np.isfinite(A[:, keep]), A[:, keep], med[keep])  # noqa: E731
    return fill(X_train), (fill(np.asarray(X_other, dtype=float)) if X_other is not None else None), keep


def subject_hash(ids: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(sorted(ids)).encode()).hexdigest()


@dataclass
class ExperimentResult:
    task: str
    model: LinearModel
    selected: list[str]
    candidates: list[str]
    cv: CvResult
    test: EvalReport
    rfecv: RfecvResult
    train_ids: list[str]
    test_ids: list[str]
    train_hash: str
    test_predictions: np.ndarray
    test_truth: np.ndarray

    def summary(self) -> dict:
        return {"task": self.task, "n_candidates": len(self.candidates),
                "selected": self.selected, "cv_scores": self.cv.scores, "cv_mean": self.cv.mean,
                "cv_std": self.cv.std, "test": self.test.to_json(), "train_ids": self.train_ids,
                "test_ids": self.test_ids, "train_hash": self.train_hash}


def task_target(table, task: str) -> np.ndarray:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    if task == "classify":
        return np.where(table.cohorts == "control", CONTROL, FGR).astype(float)
    return table.target(TASKS[task])


def run_experiment(table, task: str, config: TrainConfig, feature_names: Sequence[str] | None = None,
                   significance: float = 0.05) -> ExperimentResult:
    """Split, filter, impute, select, cross-validate and test.

    Everything before the final test evaluation only sees training rows:
    the control-vs-FGR significance filter, the imputation medians, the
    standardization, RFECV and the CV estimate.
    """
    from .stats import rank_features  # local import keeps ml usable standalone

    if feature_names is not None:
        table = table.select(feature_names)
    y_all = task_target(table, task)
    ids = [s.id for s in table.labels]
    train_idx, test_idx = stratified_split(table.cohorts, config.test_fraction, config.seed)
    train_tab = table.subset(train_idx)

    ranked, significant = rank_features(train_tab, alpha=significance)
    candidates = [r.feature for r in significant]
    if not candidates:
        log.warning("no feature significant on the training set; using all testable features")
        candidates = [r.feature for r in ranked if math.isfinite(r.p)]
    cols = [table.feature_names.index(c) for c in candidates]
    X_tr, X_te, keep = impute_median(table.rows[np.ix_(train_idx, cols)],
                                     table.rows[np.ix_(test_idx, cols)])
    candidates = [c for c, k in zip(candidates, keep) if k]
    y_tr, y_te = y_all[train_idx], y_all[test_idx]

    sel = rfecv(X_tr, y_tr, task, config, candidates)
    chosen = [c for c, m in zip(candidates, sel.mask) if m]
    X_tr_s, X_te_s = X_tr[:, sel.mask], X_te[:, sel.mask]
    cv = kfold_cv(X_tr_s, y_tr, task, config)
    model = train(task, X_tr_s, y_tr, config, chosen)
    report = evaluate(model, X_te_s, y_te)
    preds = (predict_logistic(model, X_te_s)[1] if task == "classify"
             else predict_linear(model, X_te_s))
    train_ids = [ids[i] for i in train_idx]
    return ExperimentResult(task, model, chosen, candidates, cv, report, sel, train_ids,
                            [ids[i] for i in test_idx], subject_hash(train_ids),
                            np.asarray(preds, dtype=float), y_te)
