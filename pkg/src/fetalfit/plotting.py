"""SVG figures for reports. Uses the non-interactive Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    # stable element ids so identical inputs give identical files
    "svg.hashsalt": "fetalfit",
}
COHORT_COLORS = {"control": "#4c72b0", "fgr": "#dd8452"}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def predicted_vs_true(truth, pred, path, label: str = "", units: str = "") -> Path:
    """Scatter of test-set predictions against targets with the identity line."""
    truth = np.asarray(truth, dtype=float)
    pred = np.asarray(pred, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 3.2))
        lo = float(min(truth.min(), pred.min()))
        hi = float(max(truth.max(), pred.max()))
        pad = 0.05 * (hi - lo or 1.0)
        ax.plot([lo - pad, hi + pad], [lo - pad, hi + pad], color="0.6", lw=0.8, ls="--")
        ax.scatter(truth, pred, s=18, color="#4c72b0", zorder=3)
        unit = f" ({units})" if units else ""
        ax.set_xlabel(f"true {label}{unit}")
        ax.set_ylabel(f"predicted {label}{unit}")
        rmse = float(np.sqrt(np.mean((truth - pred) ** 2)))
        ax.set_title(f"test rmse {rmse:.2f}")
        ax.set_aspect("equal", adjustable="datalim")
        fig.tight_layout()
        return _save(fig, path)


def cohort_boxplots(values: dict[str, tuple[np.ndarray, np.ndarray]], path,
                    ncols: int = 3) -> Path:
    """Notched box plots per feature; ``values`` maps title -> (control, fgr)."""
    n = max(1, len(values))
    nrows = -(-n // ncols)
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(nrows, ncols, figsize=(2.6 * ncols, 2.4 * nrows), squeeze=False)
        for ax, (title, (ctrl, fgr)) in zip(axes.flat, values.items()):
            data = [np.asarray(ctrl)[np.isfinite(ctrl)], np.asarray(fgr)[np.isfinite(fgr)]]
            box = ax.boxplot(data, notch=True, patch_artist=True, widths=0.6,
                             tick_labels=["control", "FGR"])
            for patch, key in zip(box["boxes"], ("control", "fgr")):
                patch.set_facecolor(COHORT_COLORS[key])
                patch.set_alpha(0.7)
            ax.set_title(title, fontsize=7)
        for ax in list(axes.flat)[n:]:
            ax.set_visible(False)
        fig.tight_layout()
        return _save(fig, path)


def rfecv_curve(counts: Sequence[int], scores: Sequence[float], n_selected: int, path,
                ylabel: str = "mean cv score") -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.6))
        ax.plot(counts, scores, marker="o", ms=2.5, lw=1.0)
        ax.axvline(n_selected, color="0.5", ls=":", lw=0.8)
        ax.set_xlabel("number of features")
        ax.set_ylabel(ylabel)
        fig.tight_layout()
        return _save(fig, path)


def confusion_bars(confusion: dict, path) -> Path:
    keys = ("tp", "fn", "tn", "fp")
    labels = ("FGR correct", "FGR missed", "control correct", "control missed")
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.6, 2.4))
        ax.bar(labels, [confusion.get(k, 0) for k in keys],
               color=["#55a868", "#c44e52", "#55a868", "#c44e52"])
        ax.set_ylabel("subjects")
        ax.tick_params(axis="x", rotation=20)
        fig.tight_layout()
        return _save(fig, path)


def parameter_slice(values: np.ndarray, path, title: str = "", slice_index: int | None = None) -> Path:
    """One axial slice of a parameter map; absent voxels left blank."""
    values = np.asarray(values, dtype=float)
    k = values.shape[2] // 2 if slice_index is None else slice_index
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.2, 3.0))
        im = ax.imshow(np.ma.masked_invalid(values[:, :, k]).T, origin="lower", cmap="viridis")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(title)
        ax.set_axis_off()
        fig.tight_layout()
        return _save(fig, path)
