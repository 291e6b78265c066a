"""Fit camera noise parameters to measured patch statistics.

Input is a table of (mean, std, gain, channel, count) rows, one per uniform
patch. The model std of a patch with mean ``mu`` at gain ``g`` is::

    sqrt(mu * g * k_c + sigma_read**2 * g**2 * k_c**2 + sigma_adc**2 * k_c**2)

The three colour coefficients and the two shared static noise parameters
are fitted by Nelder-Mead on the squared log-std error, working in log
parameters so that everything stays positive.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import minimize

from .noise import CameraNoiseParams, Channel

log = logging.getLogger(__name__)

__all__ = [
    "CalibrationError",
    "FitResult",
    "NoiseSample",
    "exclude_low_snr",
    "fit_noise_params",
    "format_samples_csv",
    "initial_guess",
    "model_std",
    "predict_relative_std",
    "read_samples_csv",
]

MIN_SAMPLES = 5
_CHANNELS = (Channel.R, Channel.G, Channel.B)


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSample:
    """Mean and standard deviation of one uniform patch (black-level-subtracted counts)."""

    mean: float
    std: float
    gain: float
    channel: Channel
    count: int = 2

    def __post_init__(self):
        for name in ("mean", "std", "gain"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "count", int(self.count))
        object.__setattr__(self, "channel", Channel.parse(self.channel))
        if self.std < 0:
            raise ValueError("std must be non-negative")
        if self.count < 2:
            raise ValueError("a patch needs at least two pixels")
        if not self.gain > 0:
            raise ValueError("gain must be positive")


@dataclass
class FitResult:
    params: CameraNoiseParams
    residual: float  # RMS relative error of the predicted std
    n_used: int
    n_excluded: int
    converged: bool
    message: str = ""
    initial_residual: float = math.nan


def exclude_low_snr(samples: Iterable[NoiseSample]) -> list[NoiseSample]:
    """Keep samples with ``mean / std >= 1``, preserving order."""
    kept = []
    for s in samples:
        if s.std == 0:
            if s.mean > 0:
                kept.append(s)
        elif s.mean / s.std >= 1.0:
            kept.append(s)
    return kept


def model_std(mean, gain, k, sigma_read, sigma_adc):
    mean = np.asarray(mean, dtype=np.float64)
    var = mean * gain * k + sigma_read**2 * gain**2 * k**2 + sigma_adc**2 * k**2
    return np.sqrt(np.maximum(var, 0.0))


def predict_relative_std(mean, gain: float, params: CameraNoiseParams, ch: Channel | str):
    """Model std divided by the mean digital value."""
    mean = np.asarray(mean, dtype=np.float64)
    if np.any(mean <= 0):
        raise ValueError("mean must be positive")
    rel = model_std(mean, gain, params.k(ch), params.sigma_read_eff, params.sigma_adc_eff) / mean
    return float(rel) if rel.ndim == 0 else rel


def initial_guess(samples: Sequence[NoiseSample]) -> dict[Channel, float]:
    """Colour coefficients from ``std**2 / (mean * gain)`` over each channel's brightest decade."""
    out = {}
    for ch in _CHANNELS:
        rows = [s for s in samples if s.channel is ch and s.mean > 0]
        if not rows:
            continue
        top = max(s.mean for s in rows)
        bright = [s for s in rows if s.mean >= top / 10.0]
        slopes = [s.std**2 / (s.mean * s.gain) for s in bright]
        out[ch] = float(np.median(slopes)) if slopes else 1.0
    return out


def _arrays(samples: Sequence[NoiseSample], channels: list[Channel]):
    mean = np.array([s.mean for s in samples])
    std = np.array([s.std for s in samples])
    gain = np.array([s.gain for s in samples])
    idx = np.array([channels.index(s.channel) for s in samples])
    return mean, std, gain, idx


def fit_noise_params(samples: Sequence[NoiseSample], init: CameraNoiseParams | None = None, *,
                     name: str = "calibrated", saturation: float = 2.0**14 - 1,
                     bit_depth: int = 14, max_iter: int = 20_000) -> FitResult:
    """Fit k_c per channel plus shared sigma_read and sigma_adc.

    Samples with SNR below one are dropped first. Raises
    :class:`CalibrationError` if fewer than five samples remain. A fit that
    hits the iteration cap, or whose samples cover a single gain (which
    leaves read and ADC noise confounded), is returned with
    ``converged=False``.
    """
    samples = list(samples)
    used = exclude_low_snr(samples)
    n_excluded = len(samples) - len(used)
    if len(used) < MIN_SAMPLES:
        raise CalibrationError(f"need at least {MIN_SAMPLES} samples with SNR >= 1, got {len(used)}")
    if any(s.std <= 0 for s in used):
        raise CalibrationError("samples with zero standard deviation cannot be fitted in log space")

    channels = [ch for ch in _CHANNELS if any(s.channel is ch for s in used)]
    mean, std, gain, idx = _arrays(used, channels)
    log_std = np.log(std)

    if init is not None:
        k0 = {ch: init.k(ch) for ch in channels}
        sr0, sa0 = max(init.sigma_read, 1e-3), max(init.sigma_adc, 1e-3)
    else:
        k0 = initial_guess(used)
        sr0 = sa0 = 1.0
    theta0 = np.log([k0[ch] for ch in channels] + [sr0, sa0])
    nk = len(channels)

    def predict(theta):
        p = np.exp(theta)
        return model_std(mean, gain, p[:nk][idx], p[nk], p[nk + 1])

    def loss(theta):
        pred = predict(theta)
        with np.errstate(divide="ignore"):
            return float(np.sum((np.log(pred) - log_std) ** 2))

    def residual(theta):
        return float(np.sqrt(np.mean((predict(theta) / std - 1.0) ** 2)))

    opts = {"maxiter": max_iter, "maxfev": 4 * max_iter, "xatol": 1e-10, "fatol": 1e-16, "adaptive": True}
    res = minimize(loss, theta0, method="Nelder-Mead", options=opts)
    theta = res.x
    # restarting from the best vertex shakes off a collapsed simplex
    for _ in range(3):
        again = minimize(loss, theta, method="Nelder-Mead", options=opts)
        if not again.fun < loss(theta):
            break
        theta = again.x
        res = again
    if loss(theta) > loss(theta0):
        theta = theta0

    p = np.exp(theta)
    ks = dict(zip(channels, p[:nk]))
    fitted = CameraNoiseParams(
        name=init.name if init is not None else name,
        k_r=float(ks.get(Channel.R, init.k_r if init is not None else 1.0)),
        k_g=float(ks.get(Channel.G, init.k_g if init is not None else 1.0)),
        k_b=float(ks.get(Channel.B, init.k_b if init is not None else 1.0)),
        sigma_read=float(p[nk]),
        sigma_adc=float(p[nk + 1]),
        black_level=init.black_level if init is not None else 0.0,
        saturation=init.saturation if init is not None else saturation,
        bit_depth=init.bit_depth if init is not None else bit_depth,
    )

    converged = bool(res.success)
    message = str(res.message)
    if len(set(gain.tolist())) < 2:
        converged = False
        message = "samples cover a single gain: read and ADC noise cannot be separated"
        log.warning(message)
    return FitResult(params=fitted, residual=residual(theta), n_used=len(used), n_excluded=n_excluded,
                     converged=converged, message=message, initial_residual=residual(theta0))


# ---------------------------------------------------------------------------
# Sample tables
# ---------------------------------------------------------------------------

SAMPLE_COLUMNS = ("mean", "std", "gain", "channel", "count")


def read_samples_csv(path_or_text: str | Path) -> list[NoiseSample]:
    """Read a ``mean,std,gain,channel,count`` table (a path, or CSV text containing newlines)."""
    if isinstance(path_or_text, Path) or "\n" not in str(path_or_text):
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = str(path_or_text)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != list(SAMPLE_COLUMNS):
        raise CalibrationError(f"sample table header must be {','.join(SAMPLE_COLUMNS)}")
    out = []
    for lineno, row in enumerate(reader, 2):
        try:
            out.append(NoiseSample(mean=float(row["mean"]), std=float(row["std"]),
                                   gain=float(row["gain"]), channel=row["channel"],
                                   count=int(row["count"])))
        except (TypeError, ValueError) as exc:
            raise CalibrationError(f"line {lineno}: {exc}") from None
    return out


def format_samples_csv(samples: Iterable[NoiseSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_COLUMNS)
    for s in samples:
        w.writerow([repr(s.mean), repr(s.std), repr(s.gain), s.channel.value, s.count])
    return buf.getvalue()

