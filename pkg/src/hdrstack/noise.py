"""Camera noise model: parameters, forward sampling and variance formulas.

A RAW value recorded at radiance ``phi`` with exposure time ``t`` and gain
``g`` is modelled as::

    Y = Pois(phi * t) * g * k_c + N(0, sigma_read) * g * k_c + N(0, sigma_adc) * k_c

All in-memory values are black-level-subtracted. ``black_level`` is only
carried around for file conversion.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

__all__ = [
    "BUNDLED_PROFILES",
    "CameraNoiseParams",
    "Channel",
    "ExposureMeta",
    "bundled_profile",
    "load_profile",
    "parse_keyvalue",
    "pixel_mean",
    "pixel_variance",
    "random_stream",
    "sample_raw",
    "save_profile",
    "scaled_variance",
]


class Channel(str, enum.Enum):
    R = "R"
    G = "G"
    B = "B"

    @classmethod
    def parse(cls, value: str | Channel) -> Channel:
        if isinstance(value, Channel):
            return value
        try:
            return cls(str(value).strip().upper())
        except ValueError:
            raise ValueError(f"unknown channel {value!r}, expected one of R, G, B") from None


@dataclass(frozen=True)
class ExposureMeta:
    """Exposure time (seconds) and gain of a single capture."""

    t: float
    g: float = 1.0

    def __post_init__(self):
        if not (self.t > 0 and math.isfinite(self.t)):
            raise ValueError(f"exposure time must be positive, got {self.t}")
        if not (self.g > 0 and math.isfinite(self.g)):
            raise ValueError(f"gain must be positive, got {self.g}")

    @classmethod
    def from_iso(cls, t: float, iso: float) -> ExposureMeta:
        # ISO 100 is gain 1; linear beyond that.
        return cls(t=t, g=iso / 100.0)


@dataclass(frozen=True)
class CameraNoiseParams:
    """Fitted noise parameters of one camera.

    ``saturation`` is the largest recordable value after black-level
    subtraction. ``static_noise_multiplier`` scales both static noise
    standard deviations (1 reproduces the calibrated camera).
    """

    name: str
    k_r: float
    k_g: float
    k_b: float
    sigma_read: float
    sigma_adc: float
    black_level: float = 0.0
    saturation: float = 2.0**14 - 1
    bit_depth: int = 14
    static_noise_multiplier: float = 1.0
    notes: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for key in ("k_r", "k_g", "k_b"):
            if not getattr(self, key) > 0:
                raise ValueError(f"{key} must be positive")
        if self.sigma_read < 0 or self.sigma_adc < 0:
            raise ValueError("noise standard deviations must be non-negative")
        if not self.saturation > 0:
            raise ValueError("saturation must be positive")
        if self.static_noise_multiplier < 0:
            raise ValueError("static_noise_multiplier must be non-negative")

    def k(self, ch: Channel | str) -> float:
        return {Channel.R: self.k_r, Channel.G: self.k_g, Channel.B: self.k_b}[Channel.parse(ch)]

    def with_multiplier(self, m: float) -> CameraNoiseParams:
        return replace(self, static_noise_multiplier=float(m))

    def scaled_k(self, factor: float) -> CameraNoiseParams:
        return replace(self, k_r=self.k_r * factor, k_g=self.k_g * factor, k_b=self.k_b * factor)

    @property
    def sigma_read_eff(self) -> float:
        return self.static_noise_multiplier * self.sigma_read

    @property
    def sigma_adc_eff(self) -> float:
        return self.static_noise_multiplier * self.sigma_adc


def _check_phi(phi):
    phi = np.asarray(phi, dtype=np.float64)
    if np.any(phi < 0) or np.any(np.isnan(phi)):
        raise ValueError("radiance must be non-negative")
    return phi


def _unwrap(value):
    return float(value) if np.ndim(value) == 0 else value


def pixel_mean(phi, meta: ExposureMeta, params: CameraNoiseParams, ch: Channel | str):
    """Expected digital value ``phi * t * g * k_c``."""
    phi = _check_phi(phi)
    return _unwrap(phi * meta.t * meta.g * params.k(ch))


def pixel_variance(phi, meta: ExposureMeta, params: CameraNoiseParams, ch: Channel | str):
    """Variance of the digital value: photon term plus static term.

    The static term is multiplied by ``m**2`` where ``m`` is the camera's
    ``static_noise_multiplier``.
    """
    phi = _check_phi(phi)
    k = params.k(ch)
    g = meta.g
    photon = phi * meta.t * g**2 * k**2
    static = params.sigma_read_eff**2 * g**2 * k**2 + params.sigma_adc_eff**2 * k**2
    return _unwrap(photon + static)


def static_scaled_variance(t, g, params: CameraNoiseParams):
    """Signal-independent part of the variance of a relative radiance sample."""
    t = np.asarray(t, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    return params.sigma_read_eff**2 / t**2 + params.sigma_adc_eff**2 / (t**2 * g**2)


def scaled_variance(phi, meta: ExposureMeta, params: CameraNoiseParams):
    """Variance of the relative radiance ``x = y / (t g k_c)``.

    Equals ``pixel_variance / (t g k_c)**2``; ``k_c`` cancels out.
    """
    phi = _check_phi(phi)
    return _unwrap(phi / meta.t + static_scaled_variance(meta.t, meta.g, params))


def random_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent, reproducible generator for the cell identified by ``keys``.

    Streams come from a Philox generator keyed through ``SeedSequence``
    spawn keys, so any (seed, keys) tuple maps to the same draws regardless
    of which other streams were created or in which order.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def sample_raw(
    phi,
    meta: ExposureMeta,
    params: CameraNoiseParams,
    ch: Channel | str,
    rng: np.random.Generator | Iterable[np.random.Generator],
    *,
    clip: bool = True,
    photon_noise: bool = True,
):
    """Draw black-level-free RAW values for radiance ``phi``.

    Parameters
    ----------
    phi : float or array_like
        Scene radiance, one draw per element.
    meta, params, ch
        Capture settings, camera and colour channel.
    rng : Generator or sequence of three Generators
        With a single generator all three noise sources are drawn from it in
        turn. Passing three generators (photon, read, adc) keeps each source
        on its own stream, so the first ``n`` draws do not depend on the
        array size.
    clip : bool
        Clip at ``params.saturation``. Negative values are always kept.
    photon_noise : bool
        If False the Poisson draw is replaced by its mean (testing aid).

    Returns
    -------
    float or numpy.ndarray
        Same shape as ``phi``.
    """
    phi = _check_phi(phi)
    if isinstance(rng, np.random.Generator):
        rng_photon = rng_read = rng_adc = rng
    else:
        rng_photon, rng_read, rng_adc = rng
    k = params.k(ch)
    lam = phi * meta.t
    if photon_noise:
        electrons = np.asarray(rng_photon.poisson(lam), dtype=np.float64)
    else:
        electrons = np.array(lam, dtype=np.float64)
    y = electrons * meta.g * k
    if params.sigma_read_eff > 0:
        y = y + rng_read.normal(0.0, params.sigma_read_eff, size=phi.shape) * meta.g * k
    if params.sigma_adc_eff > 0:
        y = y + rng_adc.normal(0.0, params.sigma_adc_eff, size=phi.shape) * k
    if clip:
        y = np.minimum(y, params.saturation)
    return _unwrap(y)


# ---------------------------------------------------------------------------
# Profile files
# ---------------------------------------------------------------------------

BUNDLED_PROFILES = ("sony_a7r1", "sony_a7r3", "canon_t1i", "sony_imx345")

_FLOAT_KEYS = ("k_r", "k_g", "k_b", "sigma_read", "sigma_adc", "black_level", "saturation",
               "static_noise_multiplier")
_REQUIRED_KEYS = ("name", "k_r", "k_g", "k_b", "sigma_read", "sigma_adc")


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _profile_from_text(text: str) -> CameraNoiseParams:
    kv = parse_keyvalue(text)
    missing = [k for k in _REQUIRED_KEYS if k not in kv]
    if missing:
        raise ValueError(f"camera profile is missing keys: {', '.join(missing)}")
    kwargs = {"name": kv["name"]}
    for key in _FLOAT_KEYS:
        if key in kv:
            try:
                kwargs[key] = float(kv[key])
            except ValueError:
                raise ValueError(f"camera profile: {key} is not a number: {kv[key]!r}") from None
    if "bit_depth" in kv:
        kwargs["bit_depth"] = int(kv["bit_depth"])
        kwargs.setdefault("saturation", 2.0 ** kwargs["bit_depth"] - 1)
    notes = tuple(line[1:].strip() for line in text.splitlines() if line.startswith("#"))
    return CameraNoiseParams(notes=notes, **kwargs)


def load_profile(path_or_name: str | Path) -> CameraNoiseParams:
    """Load a camera profile from a file, or a bundled one by name."""
    path = Path(path_or_name)
    if path.is_file():
        return _profile_from_text(path.read_text(encoding="utf-8"))
    if str(path_or_name) in BUNDLED_PROFILES:
        return bundled_profile(str(path_or_name))
    raise FileNotFoundError(f"no camera profile at {path_or_name!s}")


def bundled_profile(name: str) -> CameraNoiseParams:
    if name not in BUNDLED_PROFILES:
        raise KeyError(f"unknown bundled profile {name!r}; choose from {BUNDLED_PROFILES}")
    text = resources.files("hdrstack.profiles").joinpath(f"{name}.profile").read_text("utf-8")
    return _profile_from_text(text)


def format_profile(params: CameraNoiseParams, comments: Iterable[str] = ()) -> str:
    lines = [f"# {c}" for c in comments]
    lines += [
        f"name={params.name}",
        f"k_r={params.k_r!r}",
        f"k_g={params.k_g!r}",
        f"k_b={params.k_b!r}",
        f"sigma_read={params.sigma_read!r}",
        f"sigma_adc={params.sigma_adc!r}",
        f"black_level={params.black_level!r}",
        f"saturation={params.saturation!r}",
        f"bit_depth={params.bit_depth}",
    ]
    if params.static_noise_multiplier != 1.0:
        lines.append(f"static_noise_multiplier={params.static_noise_multiplier!r}")
    return "\n".join(lines) + "\n"


def save_profile(params: CameraNoiseParams, path: str | Path, comments: Iterable[str] = ()) -> None:
    Path(path).write_text(format_profile(params, comments), encoding="utf-8")
