"""Radiance estimators for merging exposure stacks.

Every estimator works on relative radiance samples ``x_i = y_i / (t_i g_i k_c)``.
The array kernels (``uniform``, ``hat``, ``variance_weighted``, ``em``,
``full_mle``, ``npne``, ``ppne``) take exposures along axis 0 and any pixel
layout along the remaining axes. Each pixel's result depends only on that
pixel's samples, so the kernels can be applied to arbitrary pixel partitions
with bit-identical results. Samples with ``valid == False`` (saturated) are
ignored; pixels with no valid sample come back as NaN.

``estimate_*`` are the single-pixel counterparts operating on a list of
:class:`Observation` and raise :class:`SaturatedPixelError` when nothing is
left to estimate from.
"""

from __future__ import annotations

import enum
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .noise import CameraNoiseParams, static_scaled_variance
from .stackio import ExposureStack, RadianceMap

log = logging.getLogger(__name__)

__all__ = [
    "ConvergenceWarning",
    "EstimatorKind",
    "HatParams",
    "MissingProfileError",
    "Observation",
    "SaturatedPixelError",
    "apply_estimator",
    "em",
    "estimate",
    "estimate_em",
    "estimate_full_mle",
    "estimate_hat",
    "estimate_npne",
    "estimate_ppne",
    "estimate_uniform",
    "estimate_variance_weighted",
    "full_mle",
    "hat",
    "merge_stack",
    "npne",
    "ppne",
    "uniform",
    "variance_weighted",
]

#: Replacement for non-positive plug-in variances (as a weight, not a variance).
WEIGHT_EPS = 1e-10
EM_TOL = 1e-6
EM_MAX_ITER = 100
MLE_RTOL = 1e-6
_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0
_VAR_FLOOR = 1e-300


class EstimatorKind(str, enum.Enum):
    UNIFORM = "uniform"
    HAT = "hat"
    VARIANCE_WEIGHTED = "var"
    EM = "em"
    FULL_MLE = "mle"
    NPNE = "npne"
    PPNE = "ppne"

    @property
    def requires_params(self) -> bool:
        return self in (EstimatorKind.VARIANCE_WEIGHTED, EstimatorKind.EM, EstimatorKind.FULL_MLE)

    @classmethod
    def parse(cls, value) -> EstimatorKind:
        if isinstance(value, EstimatorKind):
            return value
        text = str(value).strip().lower()
        aliases = {"variance_weighted": "var", "iterative_em": "em", "full_mle": "mle"}
        try:
            return cls(aliases.get(text, text))
        except ValueError:
            choices = ", ".join(k.value for k in cls)
            raise ValueError(f"unknown estimator {value!r}; choose from {choices}") from None


@dataclass(frozen=True)
class HatParams:
    """Gamma-domain hat weighting. ``y_min``/``y_max`` are in raw counts."""

    gamma: float = 2.2
    y_min: float = 0.0
    y_max: float = 2.0**14 - 1
    epsilon: float = 1e-10

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError("gamma must be positive")
        if not self.y_min < self.y_max:
            raise ValueError("y_min must be below y_max")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


@dataclass(frozen=True)
class Observation:
    """One relative-radiance sample ``x`` taken at exposure ``t`` and gain ``g``."""

    x: float
    t: float
    g: float = 1.0
    saturated: bool = False

    def __post_init__(self):
        if not (self.t > 0 and self.g > 0):
            raise ValueError("exposure time and gain must be positive")


class SaturatedPixelError(ValueError):
    """All observations of a pixel are saturated; clamp it to the largest representable radiance."""


class MissingProfileError(ValueError):
    pass


class ConvergenceWarning(RuntimeWarning):
    pass


# ---------------------------------------------------------------------------
# Array kernels
# ---------------------------------------------------------------------------

def _along_axis0(a, ndim):
    a = np.asarray(a, dtype=np.float64)
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


def _prepare(x, t, valid):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0:
        raise ValueError("samples need an exposure axis")
    t = _along_axis0(t, x.ndim)
    if valid is None:
        valid = np.ones(x.shape, dtype=bool)
    else:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), x.shape)
    xv = np.where(valid, x, 0.0)
    return xv, t, valid


def _weighted_mean(x, w):
    with np.errstate(invalid="ignore", divide="ignore"):
        # normalising first keeps a lone sample exact
        return np.sum(w / np.sum(w, axis=0) * x, axis=0)


def uniform(x, valid=None):
    """Arithmetic mean of the valid samples."""
    xv, _, valid = _prepare(x, np.ones(np.shape(x)[0]), valid)
    return _weighted_mean(xv, valid.astype(np.float64))


def hat_weights(y, hp: HatParams):
    """Debevec-Malik hat weights computed on ``y ** (1 / gamma)``.

    Raw values outside ``[y_min, y_max]`` (negative values after black-level
    subtraction, in particular) are clamped to the range first.
    """
    inv = 1.0 / hp.gamma
    r = np.clip(np.asarray(y, dtype=np.float64), hp.y_min, hp.y_max) ** inv
    lo = hp.y_min**inv
    hi = hp.y_max**inv
    mid = 0.5 * (lo + hi)
    return np.where(r <= mid, r - lo + hp.epsilon, hi - r + hp.epsilon)


def hat(x, y, valid=None, hp: HatParams | None = None):
    """Hat-weighted mean of ``x`` with weights from the raw values ``y``."""
    hp = hp or HatParams()
    xv, _, valid = _prepare(x, np.ones(np.shape(x)[0]), valid)
    w = np.where(valid, hat_weights(y, hp), 0.0)
    return _weighted_mean(xv, w)


def variance_weighted(x, t, g, params: CameraNoiseParams, valid=None):
    """Inverse-variance weighted mean with single-sample plug-in variances.

    The variance of each sample is evaluated at its own value; where that is
    zero or negative the weight becomes ``WEIGHT_EPS``.
    """
    xv, t, valid = _prepare(x, t, valid)
    g = _along_axis0(g, xv.ndim)
    var = xv / t + static_scaled_variance(t, g, params)
    with np.errstate(divide="ignore"):
        w = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), WEIGHT_EPS)
    return _weighted_mean(xv, np.where(valid, w, 0.0))


def em(x, t, g, params: CameraNoiseParams, valid=None, tol=EM_TOL, max_iter=EM_MAX_ITER):
    """Alternate model variances and the weighted mean until the estimate settles.

    Starts from the mean of ``x``. A pixel stops updating once
    ``|new - old| <= tol * max(|old|, 1)``. Negative estimates are clamped to
    zero before evaluating variances.

    Returns
    -------
    estimate : numpy.ndarray
    converged : numpy.ndarray of bool
        False where ``max_iter`` was reached first (NaN pixels count as converged).
    """
    xv, t, valid = _prepare(x, t, valid)
    g = _along_axis0(g, xv.ndim)
    static = static_scaled_variance(t, g, params)
    phi = _weighted_mean(xv, valid.astype(np.float64))
    active = np.isfinite(phi)
    converged = ~active
    for _ in range(max_iter):
        if not active.any():
            break
        var = np.maximum(phi, 0.0) / t + static
        with np.errstate(divide="ignore"):
            w = np.where(var > 0, 1.0 / np.where(var > 0, var, 1.0), WEIGHT_EPS)
        new = _weighted_mean(xv, np.where(valid, w, 0.0))
        done = np.abs(new - phi) <= tol * np.maximum(np.abs(phi), 1.0)
        phi = np.where(active, new, phi)
        converged |= active & done
        active &= ~done
    return phi, converged


def normal_loglik(phi, x, t, g, params: CameraNoiseParams, valid=None):
    """Normal-approximation log-likelihood of ``phi`` with phi-dependent variances.

    ``phi`` broadcasts against the pixel axes of ``x``.
    """
    xv, t, valid = _prepare(x, t, valid)
    g = _along_axis0(g, xv.ndim)
    var = np.maximum(np.maximum(phi, 0.0) / t + static_scaled_variance(t, g, params), _VAR_FLOOR)
    terms = -0.5 * np.log(2.0 * np.pi * var) - (xv - phi) ** 2 / (2.0 * var)
    return np.sum(np.where(valid, terms, 0.0), axis=0)


def poisson_loglik(phi, x, t):
    """Poisson log-likelihood of ``x * t ~ Pois(phi * t)`` for a single pixel.

    ``x * t`` may be non-integer; the factorial is extended by ``lgamma``.
    ``phi`` may be an array of candidate values.
    """
    from scipy.special import gammaln

    phi = np.asarray(phi, dtype=np.float64)[..., None]
    counts = np.asarray(x, dtype=np.float64) * np.asarray(t, dtype=np.float64)
    rate = phi * np.asarray(t, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_rate = np.where(counts > 0, counts * np.log(rate), 0.0)
    return np.sum(log_rate - rate - gammaln(counts + 1.0), axis=-1)


def full_mle(x, t, g, params: CameraNoiseParams, valid=None, rtol=MLE_RTOL, max_iter=200):
    """Maximise the normal log-likelihood over ``phi >= 0`` by golden-section search.

    The bracket is ``[0, 4 max(x) + 10 sqrt(max static variance)]``; a pixel
    stops once its bracket is narrower than ``rtol * phi`` (or a negligible
    fraction of the initial bracket when the optimum sits at zero).
    """
    xv, t, valid = _prepare(x, t, valid)
    g = _along_axis0(g, xv.ndim)
    static = np.broadcast_to(static_scaled_variance(t, g, params), xv.shape)
    xmax = np.max(np.where(valid, xv, -np.inf), axis=0)
    smax = np.max(np.where(valid, static, 0.0), axis=0)
    empty = ~np.any(valid, axis=0)
    upper = 4.0 * np.maximum(np.where(empty, 0.0, xmax), 0.0) + 10.0 * np.sqrt(smax)

    def f(phi):
        return normal_loglik(phi, xv, t, g, params, valid)

    a = np.zeros_like(upper)
    b = upper.copy()
    floor = 1e-12 * upper
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    active = ~empty & ((b - a) > np.maximum(rtol * 0.5 * (a + b), floor))
    for _ in range(max_iter):
        if not active.any():
            break
        left = fc >= fd  # maximum lies in [a, d]
        na = np.where(left, a, c)
        nb = np.where(left, d, b)
        nc = np.where(left, nb - _GOLDEN * (nb - na), d)
        nd = np.where(left, c, na + _GOLDEN * (nb - na))
        probe = np.where(left, nc, nd)
        fp = f(probe)
        nfc = np.where(left, fp, fd)
        nfd = np.where(left, fc, fp)
        a, b, c, d = (np.where(active, new, old) for new, old in ((na, a), (nb, b), (nc, c), (nd, d)))
        fc, fd = np.where(active, nfc, fc), np.where(active, nfd, fd)
        active &= (b - a) > np.maximum(rtol * 0.5 * (a + b), floor)
    phi = 0.5 * (a + b)
    at_zero = f(np.zeros_like(phi)) >= f(phi)
    phi = np.where(at_zero, 0.0, phi)
    return np.where(empty, np.nan, phi)


def npne(x, t, valid=None):
    """Closed-form normal-likelihood estimate assuming photon noise only."""
    xv, t, valid = _prepare(x, t, valid)
    tv = np.where(valid, t, 0.0)
    n = np.sum(valid, axis=0)
    st = np.sum(tv, axis=0)
    sxx = np.sum(xv**2 * tv, axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (np.sqrt(sxx * st + n**2) - n) / st


def ppne(x, t, valid=None):
    """Exposure-time weighted mean: the Poisson maximum-likelihood estimate."""
    xv, t, valid = _prepare(x, t, valid)
    return _weighted_mean(xv, np.where(valid, t, 0.0))


def apply_estimator(kind, x, t, g, valid=None, *, y=None, params=None, hp=None,
                    em_tol=EM_TOL, em_max_iter=EM_MAX_ITER):
    """Dispatch to the array kernel for ``kind``."""
    kind = EstimatorKind.parse(kind)
    if kind.requires_params and params is None:
        raise MissingProfileError(f"estimator {kind.value!r} requires camera noise parameters")
    if kind is EstimatorKind.UNIFORM:
        return uniform(x, valid)
    if kind is EstimatorKind.HAT:
        if y is None:
            raise ValueError("hat estimator needs the raw values y")
        return hat(x, y, valid, hp)
    if kind is EstimatorKind.VARIANCE_WEIGHTED:
        return variance_weighted(x, t, g, params, valid)
    if kind is EstimatorKind.EM:
        phi, ok = em(x, t, g, params, valid, tol=em_tol, max_iter=em_max_iter)
        if not np.all(ok):
            warnings.warn(f"EM did not converge in {em_max_iter} iterations for {int(np.size(ok) - np.sum(ok))} "
                          "pixel(s); returning the last iterate", ConvergenceWarning, stacklevel=2)
        return phi
    if kind is EstimatorKind.FULL_MLE:
        return full_mle(x, t, g, params, valid)
    if kind is EstimatorKind.NPNE:
        return npne(x, t, valid)
    return ppne(x, t, valid)


# ---------------------------------------------------------------------------
# Single-pixel API
# ---------------------------------------------------------------------------

def _unpack(obs: Sequence[Observation]):
    if not obs:
        raise ValueError("no observations")
    x = np.array([o.x for o in obs], dtype=np.float64)
    t = np.array([o.t for o in obs], dtype=np.float64)
    g = np.array([o.g for o in obs], dtype=np.float64)
    valid = np.array([not o.saturated for o in obs])
    if not valid.any():
        raise SaturatedPixelError("all observations are saturated")
    return x, t, g, valid


def estimate_uniform(obs: Sequence[Observation]) -> float:
    x, _, _, valid = _unpack(obs)
    return float(uniform(x, valid))


def estimate_hat(obs: Sequence[Observation], raw: Sequence[float], hp: HatParams | None = None) -> float:
    x, _, _, valid = _unpack(obs)
    if len(raw) != len(obs):
        raise ValueError("raw values and observations differ in length")
    return float(hat(x, np.asarray(raw, dtype=np.float64), valid, hp))


def estimate_variance_weighted(obs: Sequence[Observation], params: CameraNoiseParams) -> float:
    x, t, g, valid = _unpack(obs)
    return float(variance_weighted(x, t, g, params, valid))


def estimate_em(obs: Sequence[Observation], params: CameraNoiseParams,
                tol: float = EM_TOL, max_iter: int = EM_MAX_ITER) -> float:
    """Iterative EM estimate; warns with :class:`ConvergenceWarning` if ``max_iter`` is hit."""
    x, t, g, valid = _unpack(obs)
    phi, ok = em(x, t, g, params, valid, tol=tol, max_iter=max_iter)
    if not ok:
        warnings.warn(f"EM did not converge in {max_iter} iterations", ConvergenceWarning, stacklevel=2)
    return float(phi)


def estimate_full_mle(obs: Sequence[Observation], params: CameraNoiseParams) -> float:
    x, t, g, valid = _unpack(obs)
    return float(full_mle(x, t, g, params, valid))


def estimate_npne(obs: Sequence[Observation]) -> float:
    x, t, _, valid = _unpack(obs)
    return float(npne(x, t, valid))


def estimate_ppne(obs: Sequence[Observation]) -> float:
    x, t, _, valid = _unpack(obs)
    return float(ppne(x, t, valid))


def estimate(kind, obs: Sequence[Observation], *, raw=None, params=None, hp=None) -> float:
    """Single-pixel estimate with any estimator."""
    x, t, g, valid = _unpack(obs)
    y = None if raw is None else np.asarray(raw, dtype=np.float64)
    return float(apply_estimator(kind, x, t, g, valid, y=y, params=params, hp=hp))


# ---------------------------------------------------------------------------
# Whole stacks
# ---------------------------------------------------------------------------

def _row_chunks(height: int, threads: int):
    n = max(1, min(threads, height))
    bounds = np.linspace(0, height, n + 1).astype(int)
    return [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:]) if hi > lo]


def merge_stack(stack: ExposureStack, kind, params: CameraNoiseParams | None = None,
                hp: HatParams | None = None, *, threads: int = 1,
                em_tol: float = EM_TOL, em_max_iter: int = EM_MAX_ITER) -> RadianceMap:
    """Merge an exposure stack into a relative radiance map.

    Samples at or above their frame's saturation value are excluded. Pixels
    saturated in every frame get the largest radiance the shortest effective
    exposure can represent and are marked invalid. Without ``params`` the
    colour coefficients are taken as 1, which only rescales each channel.
    """
    kind = EstimatorKind.parse(kind)
    params = params if params is not None else stack.camera
    if kind.requires_params and params is None:
        raise MissingProfileError(f"estimator {kind.value!r} requires a camera profile")

    y = np.stack([fr.data for fr in stack.frames])  # (N, H, W, C)
    t = np.array([fr.meta.t for fr in stack.frames])
    g = np.array([fr.meta.g for fr in stack.frames])
    sat = np.array([fr.saturation for fr in stack.frames])
    valid = y < sat[:, None, None, None]
    if hp is None:
        finite = sat[np.isfinite(sat)]
        y_max = float(finite.min()) if finite.size else (params.saturation if params else float(y.max()))
        hp = HatParams(y_max=y_max)

    ks = np.array([params.k(ch) if params is not None else 1.0 for ch in stack.channels])
    x = y / (t * g)[:, None, None, None] / ks

    def work(rows: slice):
        return apply_estimator(kind, x[:, rows], t, g, valid[:, rows], y=y[:, rows], params=params,
                               hp=hp, em_tol=em_tol, em_max_iter=em_max_iter)

    chunks = _row_chunks(y.shape[1], threads)
    if len(chunks) == 1:
        parts = [work(chunks[0])]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    out = np.concatenate(parts, axis=0)

    pixel_valid = np.any(valid, axis=0)
    if not pixel_valid.all():
        shortest = int(np.argmin(t * g))
        ceiling = sat[shortest] / (t[shortest] * g[shortest] * ks)
        out = np.where(pixel_valid, out, np.broadcast_to(ceiling, out.shape))
        log.info("%d pixel samples saturated in every frame", int((~pixel_valid).sum()))
    return RadianceMap(data=out, channels=list(stack.channels), valid=pixel_valid)
