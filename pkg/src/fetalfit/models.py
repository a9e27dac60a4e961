"""Closed-form diffusion-relaxation signal models and Rician noise.

Units everywhere: b in s/mm^2, diffusivities in mm^2/s, T2 and te in ms.
Every evaluator broadcasts, so parameters may be scalars or arrays.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

# fixed maternal-blood and trophoblast relaxation times at 1.5 T
T2_MATERNAL_BLOOD = 240.0
T2_TROPHOBLAST = 46.0


def _rate(t2):
    # T2 = inf is the no-relaxation limit, handled as rate 0
    with np.errstate(divide="ignore"):
        return 1.0 / np.asarray(t2, dtype=float)


class T2Decay(NamedTuple):
    S0: float
    T2: float


class AdcDecay(NamedTuple):
    S0: float
    ADC: float


class StandardIvim(NamedTuple):
    S0: float
    f: float
    Dstar: float
    ADC: float


class T2Ivim(NamedTuple):
    S0: float
    T2: float
    f: float
    Dstar: float
    ADC: float


class ExtIvim(NamedTuple):
    S0: float
    f: float
    Dstar: float
    T2p: float
    T2t: float
    ADC: float


class Decide(NamedTuple):
    S0: float
    f: float
    Dstar: float
    T2fb: float
    nu: float
    ADC: float


def eval_t2(p: T2Decay, te):
    return p.S0 * np.exp(-np.asarray(te, dtype=float) * _rate(p.T2))


def eval_adc(p: AdcDecay, b):
    return p.S0 * np.exp(-np.asarray(b, dtype=float) * p.ADC)


def _ivim(f, dstar, adc, b):
    b = np.asarray(b, dtype=float)
    return f * np.exp(-b * dstar) + (1.0 - f) * np.exp(-b * adc)


def eval_standard_ivim(p: StandardIvim, b):
    return p.S0 * _ivim(p.f, p.Dstar, p.ADC, b)


def eval_t2_ivim(p: T2Ivim, b, te):
    te = np.asarray(te, dtype=float)
    return p.S0 * np.exp(-te * _rate(p.T2)) * _ivim(p.f, p.Dstar, p.ADC, b)


def eval_ext_ivim(p: ExtIvim, b, te):
    b = np.asarray(b, dtype=float)
    te = np.asarray(te, dtype=float)
    blood = p.f * np.exp(-b * p.Dstar - te * _rate(p.T2p))
    tissue = (1.0 - p.f) * np.exp(-b * p.ADC - te * _rate(p.T2t))
    return p.S0 * (blood + tissue)


def eval_decide(p: Decide, b, te):
    b = np.asarray(b, dtype=float)
    te = np.asarray(te, dtype=float)
    fetal = p.f * np.exp(-b * p.Dstar - te * _rate(p.T2fb))
    maternal = p.nu * np.exp(-te / T2_MATERNAL_BLOOD)
    trophoblast = (1.0 - p.nu) * np.exp(-te / T2_TROPHOBLAST)
    return p.S0 * (fetal + (1.0 - p.f) * np.exp(-b * p.ADC) * (maternal + trophoblast))


@dataclass(frozen=True)
class ModelSpec:
    """Registry entry tying a model identifier to its parameters and evaluator."""

    key: str
    label: str
    params: type
    evaluate: Callable
    # which acquisition axes the model explains; the other axis is held at
    # its lowest value when selecting samples to fit
    uses_b: bool
    uses_te: bool

    @property
    def param_names(self) -> tuple[str, ...]:
        return self.params._fields

    @property
    def n_params(self) -> int:
        return len(self.params._fields)

    def signal(self, theta, b, te):
        """Evaluate with parameters stacked on the last axis of ``theta``.

        ``theta`` has shape (..., n_params); ``b`` and ``te`` shape (m,).
        Returns shape (..., m).
        """
        theta = np.asarray(theta, dtype=float)
        cols = [theta[..., k, None] for k in range(self.n_params)]
        p = self.params(*cols)
        if self.uses_b and self.uses_te:
            return self.evaluate(p, b, te)
        if self.uses_b:
            return self.evaluate(p, b)
        return self.evaluate(p, te)

    def sample_mask(self, b, te) -> np.ndarray:
        """Samples this model is fitted to.

        T2 decay uses the b=min samples, ADC and standard IVIM the te=min
        samples; joint models use everything. Falls back to all samples if
        the subset would leave fewer than two distinct values on the used axis.
        """
        b = np.asarray(b, dtype=float)
        te = np.asarray(te, dtype=float)
        if self.uses_b and self.uses_te:
            return np.ones(b.size, dtype=bool)
        if self.uses_te:
            m = b == b.min()
            axis = te
        else:
            m = te == te.min()
            axis = b
        if np.unique(axis[m]).size < 2:
            return np.ones(b.size, dtype=bool)
        return m


MODELS: dict[str, ModelSpec] = {
    "t2": ModelSpec("t2", "T2 Decay", T2Decay, eval_t2, False, True),
    "adc": ModelSpec("adc", "ADC", AdcDecay, eval_adc, True, False),
    "ivim": ModelSpec("ivim", "Standard IVIM", StandardIvim, eval_standard_ivim, True, False),
    "t2ivim": ModelSpec("t2ivim", "T2 IVIM", T2Ivim, eval_t2_ivim, True, True),
    "extivim": ModelSpec("extivim", "Extended 2xT2 IVIM", ExtIvim, eval_ext_ivim, True, True),
    "decide": ModelSpec("decide", "DECIDE", Decide, eval_decide, True, True),
}


def get_model(key) -> ModelSpec:
    if isinstance(key, ModelSpec):
        return key
    try:
        return MODELS[key]
    except KeyError:
        raise ValueError(f"unknown model {key!r}; choose from {sorted(MODELS)}") from None


def add_rician_noise(clean, sigma: float, seed=None):
    """Magnitude of the clean signal plus complex Gaussian noise of std ``sigma``."""
    clean = np.asarray(clean, dtype=float)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return clean.copy()
    rng = np.random.default_rng(seed)
    n1 = rng.normal(0.0, sigma, clean.shape)
    n2 = rng.normal(0.0, sigma, clean.shape)
    return np.sqrt((clean + n1) ** 2 + n2 ** 2)
