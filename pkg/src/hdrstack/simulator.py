"""Monte Carlo comparison of radiance estimators on simulated exposure stacks.

For every radiance on a log-spaced grid and every trial, one stack is drawn
from the noise model, saturated samples are dropped and each selected
estimator is applied. The report holds relative bias and relative standard
deviation per (estimator, radiance).

Random draws for grid cell ``j``, ladder entry ``i`` and noise source ``s``
come from ``random_stream(seed, j, i, s)``; trials are consecutive positions
in those streams. Draws therefore do not depend on the estimator selection,
the worker count, or (for the first ``n`` trials) on ``n_trials``.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimators import EM_MAX_ITER, EM_TOL, EstimatorKind, HatParams, apply_estimator
from .noise import CameraNoiseParams, Channel, ExposureMeta, random_stream, sample_raw
from .stackio import ExposureStack, RadianceMap, RawFrame

__all__ = [
    "DEFAULT_ESTIMATORS",
    "McConfig",
    "McReport",
    "amplify_static_noise",
    "default_ladder",
    "gain_modulation_config",
    "phi_grid",
    "run_mc",
    "simulate_cell",
    "synth_stack",
]

DEFAULT_ESTIMATORS = (
    EstimatorKind.UNIFORM,
    EstimatorKind.HAT,
    EstimatorKind.VARIANCE_WEIGHTED,
    EstimatorKind.EM,
    EstimatorKind.NPNE,
    EstimatorKind.PPNE,
)
# Anchor: the shortest effective exposure reaches this fraction of saturation at the top of the grid.
TOP_FILL = 0.9


def default_ladder(n: int = 3, stops: float = 5.0, gain: float = 8.0) -> list[ExposureMeta]:
    """``n`` exposures ``stops`` apart starting from t = 1 s, all at ``gain``."""
    return [ExposureMeta(t=2.0 ** (-stops * i), g=gain) for i in range(n)]


@dataclass(frozen=True)
class McConfig:
    camera: CameraNoiseParams
    channel: Channel = Channel.G
    n_trials: int = 10_000
    n_phi: int = 100
    phi_range_stops: float = 24.0
    ladder: tuple[ExposureMeta, ...] = field(default_factory=lambda: tuple(default_ladder()))
    estimators: tuple[EstimatorKind, ...] = DEFAULT_ESTIMATORS
    static_multiplier: float = 1.0
    seed: int = 0
    mle_trials: int = 1000
    hat_gamma: float = 2.2
    photon_noise: bool = True
    phi_max: float | None = None

    def __post_init__(self):
        if self.n_trials < 1:
            raise ValueError("n_trials must be at least 1")
        if self.n_phi < 2:
            raise ValueError("n_phi must be at least 2")
        if not self.ladder:
            raise ValueError("ladder must not be empty")
        if not self.phi_range_stops > 0:
            raise ValueError("phi_range_stops must be positive")
        if self.static_multiplier < 0:
            raise ValueError("static_multiplier must be non-negative")
        if self.mle_trials < 1:
            raise ValueError("mle_trials must be at least 1")
        object.__setattr__(self, "channel", Channel.parse(self.channel))
        object.__setattr__(self, "ladder", tuple(self.ladder))
        object.__setattr__(self, "estimators", tuple(EstimatorKind.parse(e) for e in self.estimators))

    @property
    def noisy_camera(self) -> CameraNoiseParams:
        return self.camera.with_multiplier(self.static_multiplier)

    def trials_for(self, kind: EstimatorKind) -> int:
        if kind is EstimatorKind.FULL_MLE:
            return min(self.n_trials, self.mle_trials)
        return self.n_trials

    def echo(self) -> dict[str, str]:
        """Flat key/value description written next to a report."""
        return {
            "camera": self.camera.name,
            "channel": self.channel.value,
            "k_c": repr(self.camera.k(self.channel)),
            "sigma_read": repr(self.camera.sigma_read),
            "sigma_adc": repr(self.camera.sigma_adc),
            "saturation": repr(self.camera.saturation),
            "n_trials": str(self.n_trials),
            "mle_trials": str(self.mle_trials),
            "n_phi": str(self.n_phi),
            "phi_range_stops": repr(self.phi_range_stops),
            "phi_min": repr(float(phi_grid(self)[0])),
            "phi_max": repr(float(phi_grid(self)[-1])),
            "ladder": ",".join(f"{m.t!r}:{m.g!r}" for m in self.ladder),
            "estimators": ",".join(e.value for e in self.estimators),
            "static_multiplier": repr(self.static_multiplier),
            "hat_gamma": repr(self.hat_gamma),
            "photon_noise": str(self.photon_noise).lower(),
            "seed": str(self.seed),
        }


def phi_grid(cfg: McConfig) -> np.ndarray:
    """Log-spaced radiance grid spanning ``phi_range_stops`` below ``phi_max``.

    By default ``phi_max`` puts the shortest effective exposure (smallest
    ``t * g``) at 90 % of saturation.
    """
    if cfg.phi_max is not None:
        top = float(cfg.phi_max)
    else:
        tg = min(m.t * m.g for m in cfg.ladder)
        top = TOP_FILL * cfg.camera.saturation / (tg * cfg.camera.k(cfg.channel))
    return top * 2.0 ** np.linspace(-cfg.phi_range_stops, 0.0, cfg.n_phi)


def saturation_knees(cfg: McConfig) -> np.ndarray:
    """Radiance at which each ladder entry's expected value reaches saturation."""
    k = cfg.camera.k(cfg.channel)
    return np.array([cfg.camera.saturation / (m.t * m.g * k) for m in cfg.ladder])


def gain_modulation_config(base: McConfig) -> McConfig:
    """Hold exposure time at the longest value and move the stop ratios into gain.

    Each entry keeps its expected digital value: ``g' = g * t / t_max``.
    """
    t_max = max(m.t for m in base.ladder)
    ladder = tuple(ExposureMeta(t=t_max, g=m.g * m.t / t_max) for m in base.ladder)
    return replace(base, ladder=ladder)


def amplify_static_noise(cfg: McConfig, m: float) -> McConfig:
    if not m > 0:
        raise ValueError("static noise multiplier must be positive")
    return replace(cfg, static_multiplier=float(m))


def simulate_cell(cfg: McConfig, j: int, phi: float, n: int | None = None):
    """Draw ``n`` stacks at radiance ``phi`` for grid cell ``j``.

    Returns raw values ``y`` shaped (ladder, n), relative radiance ``x`` and
    the validity (unsaturated) mask.
    """
    n = cfg.n_trials if n is None else n
    cam = cfg.noisy_camera
    k = cam.k(cfg.channel)
    phis = np.full(n, phi)
    y = np.empty((len(cfg.ladder), n))
    for i, meta in enumerate(cfg.ladder):
        rngs = [random_stream(cfg.seed, j, i, s) for s in range(3)]
        y[i] = sample_raw(phis, meta, cam, cfg.channel, rngs, photon_noise=cfg.photon_noise)
    t = np.array([m.t for m in cfg.ladder])
    g = np.array([m.g for m in cfg.ladder])
    x = y / (t * g * k)[:, None]
    valid = y < cam.saturation
    return y, x, valid


def _estimate_cell(cfg: McConfig, j: int, phi: float) -> dict[EstimatorKind, np.ndarray]:
    cam = cfg.noisy_camera
    y, x, valid = simulate_cell(cfg, j, phi)
    t = np.array([m.t for m in cfg.ladder])
    g = np.array([m.g for m in cfg.ladder])
    hp = HatParams(gamma=cfg.hat_gamma, y_max=cam.saturation)
    # all-saturated trials are clamped like merge_stack does
    shortest = int(np.argmin(t * g))
    ceiling = cam.saturation / (t[shortest] * g[shortest] * cam.k(cfg.channel))
    any_valid = valid.any(axis=0)
    out = {}
    for kind in cfg.estimators:
        n = cfg.trials_for(kind)
        est = apply_estimator(kind, x[:, :n], t, g, valid[:, :n], y=y[:, :n], params=cam, hp=hp,
                              em_tol=EM_TOL, em_max_iter=EM_MAX_ITER)
        out[kind] = np.where(any_valid[:n], est, ceiling)
    return out


@dataclass
class McReport:
    """Relative bias and standard deviation per estimator and radiance.

    Arrays are indexed like ``phi``.
    """

    phi: np.ndarray
    relative_bias: dict[EstimatorKind, np.ndarray]
    relative_std: dict[EstimatorKind, np.ndarray]
    n_trials: dict[EstimatorKind, int]
    config: McConfig

    def bias_se(self, kind) -> np.ndarray:
        """Standard error of ``relative_bias``."""
        kind = EstimatorKind.parse(kind)
        return self.relative_std[kind] / np.sqrt(self.n_trials[kind])

    def std_se(self, kind) -> np.ndarray:
        """Approximate standard error of ``relative_std`` (normal theory)."""
        kind = EstimatorKind.parse(kind)
        return self.relative_std[kind] / np.sqrt(2.0 * max(self.n_trials[kind] - 1, 1))

    def rms_error(self, kind) -> np.ndarray:
        kind = EstimatorKind.parse(kind)
        return np.hypot(self.relative_bias[kind], self.relative_std[kind])

    def rows(self):
        for kind in self.config.estimators:
            for j, phi in enumerate(self.phi):
                yield (kind.value, float(phi), float(self.relative_bias[kind][j]),
                       float(self.relative_std[kind][j]), self.n_trials[kind])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["estimator", "phi", "relative_bias", "relative_std", "n_trials"])
        for kind, phi, bias, std, n in self.rows():
            w.writerow([kind, repr(phi), repr(bias), repr(std), n])
        return buf.getvalue()

    def write(self, path: str | Path) -> Path:
        """Write the CSV and a ``.config`` key/value echo next to it."""
        path = Path(path)
        path.write_text(self.to_csv(), encoding="utf-8")
        echo = path.with_suffix(".config")
        echo.write_text("".join(f"{k}={v}\n" for k, v in self.config.echo().items()), encoding="utf-8")
        return echo


def run_mc(cfg: McConfig, threads: int = 1) -> McReport:
    """Run the Monte Carlo comparison; output is identical for any ``threads``."""
    grid = phi_grid(cfg)

    def cell(j):
        phi = float(grid[j])
        ests = _estimate_cell(cfg, j, phi)
        return {k: ((e.mean() - phi) / phi, e.std(ddof=1) / phi if e.size > 1 else 0.0)
                for k, e in ests.items()}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            cells = list(pool.map(cell, range(len(grid))))
    else:
        cells = [cell(j) for j in range(len(grid))]

    bias = {k: np.array([c[k][0] for c in cells]) for k in cfg.estimators}
    std = {k: np.array([c[k][1] for c in cells]) for k in cfg.estimators}
    counts = {k: cfg.trials_for(k) for k in cfg.estimators}
    return McReport(phi=grid, relative_bias=bias, relative_std=std, n_trials=counts, config=cfg)


def synth_stack(phi_image, ladder: Sequence[ExposureMeta], params: CameraNoiseParams,
                ch: Channel | Sequence[Channel] = Channel.G, seed: int = 0) -> ExposureStack:
    """Simulate one frame per ladder entry for a radiance image.

    ``phi_image`` is a :class:`RadianceMap` or an array shaped (H, W) or
    (H, W, C). With a 2-D array, ``ch`` names the single channel.
    """
    if isinstance(phi_image, RadianceMap):
        phi = np.asarray(phi_image.data, dtype=np.float64)
        channels = list(phi_image.channels)
    else:
        phi = np.asarray(phi_image, dtype=np.float64)
        channels = [Channel.parse(c) for c in ([ch] if isinstance(ch, (str, Channel)) else ch)]
        if phi.ndim == 2:
            phi = phi[:, :, None]
    if phi.shape[2] != len(channels):
        raise ValueError("phi image channels do not match the channel list")
    if np.any(phi < 0):
        raise ValueError("radiance must be non-negative")
    frames = []
    for i, meta in enumerate(ladder):
        data = np.empty_like(phi)
        for c, chan in enumerate(channels):
            rngs = [random_stream(seed, i, c, s) for s in range(3)]
            data[:, :, c] = sample_raw(phi[:, :, c], meta, params, chan, rngs)
        frames.append(RawFrame(data=data, meta=meta, channels=channels, saturation=params.saturation))
    return ExposureStack(frames=frames, camera=params)
