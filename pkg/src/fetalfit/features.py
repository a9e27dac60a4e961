"""From volumes to a FeatureTable: ROI and voxelwise fits, map summaries,
organ ratios and texture columns.

Feature names follow ``organ/model/param/statistic``. Ratio features put the
organ pair in the first slot (``placenta:lungs``); texture features use
``<feature>_<mean|max>`` as the statistic; the raw b=0 frame appears as model
``raw``, parameter ``b0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .fitting import FitConfig, FitResult, ParameterMap, fit_rois, fit_voxelwise_many
from .models import MODELS, get_model
from .stats import SUMMARY_STATS, organ_ratio, summarize_map
from .texture import TextureConfig, TextureError, raw_b0, texture_features
from .volume_io import ORGANS, AcquisitionProtocol, FeatureTable, OrganMask, SubjectRecord, Volume4D

log = logging.getLogger(__name__)

# S0 carries the arbitrary scanner scale, so it never becomes a feature
SUMMARY_EXCLUDE = ("S0",)
RATIO_PAIRS = (("placenta", "lungs"), ("liver", "lungs"), ("placenta", "brain"), ("liver", "brain"))
RATIO_PARAMS = ("f",)
RATIO_STATS = ("mean", "median")
TEXTURE_PARAMS = ("f", "Dstar")


class PlanError(ValueError):
    pass


def fit_plan(models: Iterable[str] = tuple(MODELS), organs: Iterable[str] = ORGANS,
             decide_any_organ: bool = False) -> list[tuple[str, str]]:
    """(organ, model) pairs to fit. DECIDE is placenta-only unless flagged."""
    plan = []
    for organ in organs:
        if organ not in ORGANS:
            raise PlanError(f"unknown organ {organ!r}")
        for model in models:
            get_model(model)
            if model == "decide" and organ != "placenta":
                if not decide_any_organ:
                    continue
                log.warning("DECIDE applied to %s; the model describes placental tissue", organ)
            plan.append((organ, model))
    return plan


@dataclass
class SubjectFits:
    record: SubjectRecord
    masks: dict[str, OrganMask]
    maps: dict[tuple[str, str], ParameterMap] = field(default_factory=dict)
    roi: dict[tuple[str, str], FitResult] = field(default_factory=dict)
    b0: np.ndarray | None = None


def fit_subjects(protocol: AcquisitionProtocol, subjects: Sequence[tuple], plan,
                 config_for=None, threads: int | None = None) -> list[SubjectFits]:
    """ROI then voxelwise fits for every subject and (organ, model) in ``plan``.

    ``subjects`` holds ``(volume, masks, record)`` tuples sharing ``protocol``.
    All ROI fits of one model run as one batch, and so do all voxelwise fits;
    each problem is independent, so batching does not change any result.
    ``config_for(model)`` may override the default FitConfig.
    """
    out = []
    for volume, masks, record in subjects:
        volume.validate(protocol)
        mdict = {m.organ: m for m in masks}
        out.append(SubjectFits(record, mdict, b0=raw_b0(volume, protocol)))
    models = list(dict.fromkeys(m for _, m in plan))
    for model in models:
        config = config_for(model) if config_for else FitConfig(model)
        jobs, keys, means = [], [], []
        for si, (volume, masks, _) in enumerate(subjects):
            for organ, m in plan:
                if m != model or organ not in out[si].masks:
                    continue
                mask = out[si].masks[organ]
                if mask.count == 0:
                    log.warning("%s: empty %s mask skipped", out[si].record.id, organ)
                    continue
                means.append(volume.data[mask.data].astype(float).mean(axis=0))
                keys.append((si, organ))
                jobs.append([volume, mask, None])
        if not jobs:
            continue
        rois = fit_rois(model, protocol, np.array(means), config)
        for job, roi, (si, organ) in zip(jobs, rois, keys):
            job[2] = roi
            out[si].roi[(organ, model)] = roi
            if not roi.converged:
                log.warning("%s %s %s: ROI fit did not converge", out[si].record.id, organ, model)
        maps = fit_voxelwise_many(model, protocol, [tuple(j) for j in jobs], config, threads)
        for pmap, (si, organ) in zip(maps, keys):
            out[si].maps[(organ, model)] = pmap
            n_slow = len(pmap.failures.get("not_converged", []))
            if n_slow:
                log.info("%s %s %s: %d voxels not converged", out[si].record.id, organ, model, n_slow)
    return out


def summary_features(maps: dict[tuple[str, str], ParameterMap]) -> dict[str, float]:
    feats = {}
    for (organ, model), pmap in maps.items():
        for param in pmap.param_names:
            if param in SUMMARY_EXCLUDE:
                continue
            try:
                summ = summarize_map(pmap, param)
            except ValueError:
                log.warning("%s/%s/%s has no present voxels", organ, model, param)
                summ = (np.nan,) * len(SUMMARY_STATS)
            for stat, value in zip(SUMMARY_STATS, summ):
                feats[f"{organ}/{model}/{param}/{stat}"] = float(value)
    return feats


def ratio_features(summaries: dict[str, float], pairs=RATIO_PAIRS, params=RATIO_PARAMS,
                   stats=RATIO_STATS) -> dict[str, float]:
    feats = {}
    models = dict.fromkeys(name.split("/")[1] for name in summaries)
    for num, den in pairs:
        for model in models:
            for param in params:
                for stat in stats:
                    a = summaries.get(f"{num}/{model}/{param}/{stat}")
                    b = summaries.get(f"{den}/{model}/{param}/{stat}")
                    if a is None or b is None:
                        continue
                    feats[f"{num}:{den}/{model}/{param}/{stat}"] = organ_ratio(a, b)
    return feats


def texture_columns(fits: SubjectFits, params=TEXTURE_PARAMS, include_raw: bool = True,
                    config: TextureConfig | None = None) -> dict[str, float]:
    """Haralick mean/max features for the selected parameter maps and raw b=0."""
    feats = {}
    sources = []
    for (organ, model), pmap in fits.maps.items():
        for param in params:
            if param in pmap.param_names:
                sources.append((f"{organ}/{model}/{param}", pmap.param(param), fits.masks[organ].data))
    if include_raw and fits.b0 is not None:
        for organ, mask in fits.masks.items():
            sources.append((f"{organ}/raw/b0", fits.b0, mask.data))
    for prefix, values, mask in sources:
        try:
            tex = texture_features(values, mask, config)
        except TextureError as exc:
            log.warning("%s: texture skipped (%s)", prefix, exc)
            continue
        for key, value in tex.items():
            feats[f"{prefix}/{key}"] = value
    return feats


def subject_features(fits: SubjectFits, kind: str = "combined", texture_params=TEXTURE_PARAMS,
                     texture_config: TextureConfig | None = None) -> dict[str, float]:
    """Feature dict for one subject; ``kind`` is summaries, haralick or combined."""
    if kind not in ("summaries", "haralick", "combined"):
        raise ValueError(f"unknown feature kind {kind!r}")
    feats = {}
    if kind in ("summaries", "combined"):
        summ = summary_features(fits.maps)
        feats.update(summ)
        feats.update(ratio_features(summ))
    if kind in ("haralick", "combined"):
        feats.update(texture_columns(fits, texture_params, config=texture_config))
    return feats


def assemble_table(records: Sequence[SubjectRecord], feature_dicts: Sequence[dict]) -> FeatureTable:
    """Rows in subject order; columns in first-seen order, NaN where missing."""
    names = list(dict.fromkeys(n for d in feature_dicts for n in d))
    rows = np.array([[d.get(n, np.nan) for n in names] for d in feature_dicts], dtype=float)
    return FeatureTable(names, rows.reshape(len(records), len(names)), list(records))


def is_texture_feature(name: str) -> bool:
    return name.rsplit("/", 1)[-1].endswith(("_mean", "_max"))


def split_feature_kinds(names: Sequence[str]) -> tuple[list[str], list[str]]:
    """(model-fitting feature names, Haralick feature names)."""
    tex = [n for n in names if is_texture_feature(n)]
    return [n for n in names if not is_texture_feature(n)], tex
