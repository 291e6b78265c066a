"""Command-line interface: ``hdrstack {merge,simulate,mc-bench,calibrate,noise-curve}``.

Exit codes: 0 success, 2 invalid input, 3 estimator needs a camera profile
that was not given, 4 calibration did not converge (profile still written).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import calibration, estimators, simulator, stackio
from .estimators import EstimatorKind
from .noise import BUNDLED_PROFILES, Channel, ExposureMeta, load_profile, parse_keyvalue, save_profile

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NO_PROFILE = 3
EXIT_NOT_CONVERGED = 4

log = logging.getLogger("hdrstack")


class InputError(ValueError):
    pass


def _fail(code: int, message: str) -> int:
    print(f"hdrstack: error: {message}", file=sys.stderr)
    return code


def _profile(value):
    if value is None:
        return None
    try:
        return load_profile(value)
    except (OSError, ValueError, KeyError) as exc:
        raise InputError(f"cannot load camera profile {value!r}: {exc}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"expected a comma-separated list of numbers, got {text!r}") from None


def parse_ladder_spec(text: str) -> list[ExposureMeta]:
    """Parse ``"t:g,t:g,..."`` into exposure settings."""
    ladder = []
    for item in text.split(","):
        item = item.strip()
        if not item:
            continue
        try:
            t, g = item.split(":")
            ladder.append(ExposureMeta(t=float(t), g=float(g)))
        except ValueError:
            raise InputError(f"bad ladder entry {item!r}, expected t:g") from None
    if not ladder:
        raise InputError("ladder is empty")
    return ladder


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------

def cmd_merge(args) -> int:
    kind = EstimatorKind.parse(args.estimator)
    params = _profile(args.profile)
    if kind.requires_params and params is None:
        return _fail(EXIT_NO_PROFILE,
                     f"estimator '{kind.value}' requires accurate camera parameters; pass --profile")
    try:
        stack = stackio.read_stack(args.stack, camera=params, black_level=args.black_level)
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from None
    hp = None
    if args.gamma is not None:
        sat = min(fr.saturation for fr in stack.frames)
        if not np.isfinite(sat):
            sat = params.saturation if params else float(max(fr.data.max() for fr in stack.frames))
        hp = estimators.HatParams(gamma=args.gamma, y_max=sat)
    rmap = estimators.merge_stack(stack, kind, params, hp, threads=args.threads)
    stackio.write_map(rmap, args.out, clamp_negative=args.clamp_negative)
    for c, ch in enumerate(rmap.channels):
        plane = rmap.data[:, :, c]
        saturated = 100.0 * (1.0 - rmap.valid[:, :, c].mean())
        print(f"{ch.value}: min={plane.min():.6g} max={plane.max():.6g} mean={plane.mean():.6g} "
              f"saturated={saturated:.2f}%")
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise InputError(f"bad --size {text!r}, expected WxH") from None
    if w <= 0 or h <= 0:
        raise InputError("--size must be positive")
    return w, h


def cmd_simulate(args) -> int:
    params = _profile(args.profile)
    ladder = parse_ladder_spec(args.ladder_spec)
    if args.phi_map is not None:
        try:
            phi = stackio.read_map(args.phi_map)
        except (OSError, ValueError) as exc:
            raise InputError(str(exc)) from None
        if np.any(phi.data < 0):
            raise InputError("radiance map has negative values")
    else:
        if args.phi < 0:
            raise InputError("--phi must be non-negative")
        w, h = _parse_size(args.size)
        phi = np.full((h, w), args.phi)
    stack = simulator.synth_stack(phi, ladder, params, Channel.parse(args.channel), seed=args.seed)
    prefix = Path(args.out_prefix)
    for i, frame in enumerate(stack.frames):
        path = prefix.parent / f"{prefix.name}_{i}.pfm"
        stackio.write_frame(frame, path, black_level=params.black_level)
        print(path)
    return EXIT_OK


# ---------------------------------------------------------------------------
# mc-bench
# ---------------------------------------------------------------------------

_MC_DEFAULTS = {
    "profile": "sony_a7r3",
    "trials": 10_000,
    "phi_steps": 100,
    "stops": 24.0,
    "ladder": "exposure",
    "static_mult": 1.0,
    "estimators": ",".join(k.value for k in simulator.DEFAULT_ESTIMATORS),
    "seed": 0,
    "channel": "G",
    "mle_trials": 1000,
}


def _mc_settings(args) -> dict:
    settings = dict(_MC_DEFAULTS)
    if args.config is not None:
        try:
            kv = parse_keyvalue(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read config: {exc}") from None
        unknown = set(kv) - set(settings)
        if unknown:
            raise InputError(f"unknown config keys: {', '.join(sorted(unknown))}")
        settings.update(kv)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def build_mc_config(args) -> simulator.McConfig:
    s = _mc_settings(args)
    try:
        kinds = tuple(EstimatorKind.parse(e) for e in str(s["estimators"]).split(",") if e.strip())
        if not kinds:
            raise InputError("no estimators selected")
        cfg = simulator.McConfig(
            camera=_profile(s["profile"]),
            channel=Channel.parse(s["channel"]),
            n_trials=int(s["trials"]),
            n_phi=int(s["phi_steps"]),
            phi_range_stops=float(s["stops"]),
            estimators=kinds,
            seed=int(s["seed"]),
            mle_trials=int(s["mle_trials"]),
        )
        if s["ladder"] == "gain":
            cfg = simulator.gain_modulation_config(cfg)
        elif s["ladder"] != "exposure":
            raise InputError(f"--ladder must be exposure or gain, got {s['ladder']!r}")
        mult = float(s["static_mult"])
        if mult != 1.0:
            cfg = simulator.amplify_static_noise(cfg, mult)
    except ValueError as exc:
        raise InputError(str(exc)) from None
    return cfg


def cmd_mc_bench(args) -> int:
    cfg = build_mc_config(args)
    report = simulator.run_mc(cfg, threads=args.threads)
    echo = report.write(args.out)
    print(f"wrote {args.out} and {echo}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# calibrate
# ---------------------------------------------------------------------------

def cmd_calibrate(args) -> int:
    try:
        samples = calibration.read_samples_csv(Path(args.samples))
    except OSError as exc:
        raise InputError(str(exc)) from None
    if not samples:
        raise InputError(f"{args.samples}: no samples")
    result = calibration.fit_noise_params(samples, name=args.name, saturation=args.saturation)
    p = result.params
    comments = [f"residual={result.residual!r}",
                f"converged={str(result.converged).lower()} used={result.n_used} excluded={result.n_excluded}"]
    if result.message:
        comments.append(result.message)
    save_profile(p, args.out, comments=comments)
    print(f"k_r={p.k_r:.6g} k_g={p.k_g:.6g} k_b={p.k_b:.6g} sigma_read={p.sigma_read:.6g} "
          f"sigma_adc={p.sigma_adc:.6g}")
    print(f"residual={result.residual:.4g} used={result.n_used} excluded={result.n_excluded} "
          f"converged={result.converged}")
    if not result.converged:
        return _fail(EXIT_NOT_CONVERGED, f"fit did not converge: {result.message}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# noise-curve
# ---------------------------------------------------------------------------

def cmd_noise_curve(args) -> int:
    params = _profile(args.profile)
    gains = _float_list(args.gains)
    if not gains or any(g <= 0 for g in gains):
        raise InputError("--gains must list positive values")
    if args.points < 2:
        raise InputError("--points must be at least 2")
    channels = [Channel.parse(c) for c in args.channels.split(",")]
    means = np.geomspace(1.0, params.saturation, args.points)
    with open(args.out, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["channel", "gain", "mean", "relative_std"])
        for ch in channels:
            for g in gains:
                rel = calibration.predict_relative_std(means, g, params, ch)
                for m, r in zip(means, rel):
                    w.writerow([ch.value, repr(g), repr(float(m)), repr(float(r))])
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdrstack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    profiles_help = f"camera profile file or bundled name ({', '.join(BUNDLED_PROFILES)})"

    p = sub.add_parser("merge", help="merge an exposure stack into a radiance map")
    p.add_argument("stack", nargs="+", help="PFM frames, each with a .meta sidecar")
    p.add_argument("--estimator", default="ppne", choices=[k.value for k in EstimatorKind])
    p.add_argument("--profile", help=profiles_help)
    p.add_argument("--out", required=True, help="output PFM path")
    p.add_argument("--clamp-negative", action="store_true", help="write negative radiance as 0")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--gamma", type=float, default=None, help="hat estimator gamma (default 2.2)")
    p.add_argument("--black-level", type=float, default=None, help="override sidecar black level")
    p.add_argument("--seed", type=int, default=0, help="accepted for symmetry; merging is deterministic")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("simulate", help="write a synthetic exposure stack")
    p.add_argument("--profile", default="sony_a7r3", help=profiles_help)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--phi", type=float, help="constant radiance")
    src.add_argument("--phi-map", help="radiance map (PFM)")
    p.add_argument("--ladder-spec", default="1:8,0.03125:8,0.0009765625:8",
                   help='exposures as "t:g,t:g,..."')
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--size", default="64x64", help="WxH for --phi")
    p.add_argument("--channel", default="G", help="channel for --phi")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("mc-bench", help="Monte Carlo comparison of estimators")
    p.add_argument("--config", help="key=value file with any of the settings below")
    p.add_argument("--profile", help=f"{profiles_help} (default sony_a7r3)")
    p.add_argument("--trials", type=int, help="stacks per radiance (default 10000)")
    p.add_argument("--phi-steps", dest="phi_steps", type=int, help="radiance grid size (default 100)")
    p.add_argument("--stops", type=float, help="grid range in stops (default 24)")
    p.add_argument("--ladder", choices=["exposure", "gain"], help="default exposure")
    p.add_argument("--static-mult", dest="static_mult", type=float, help="static noise multiplier")
    p.add_argument("--estimators", help="comma-separated list (add 'mle' for full MLE)")
    p.add_argument("--mle-trials", dest="mle_trials", type=int, help="trials used for mle (default 1000)")
    p.add_argument("--channel", help="R, G or B (default G)")
    p.add_argument("--out", required=True, help="report CSV")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_mc_bench)

    p = sub.add_parser("calibrate", help="fit noise parameters to patch statistics")
    p.add_argument("--samples", required=True, help="CSV with mean,std,gain,channel,count")
    p.add_argument("--out", required=True, help="camera profile to write")
    p.add_argument("--name", default="calibrated")
    p.add_argument("--saturation", type=float, default=2.0**14 - 1)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("noise-curve", help="model relative std against mean value")
    p.add_argument("--profile", required=True, help=profiles_help)
    p.add_argument("--gains", default="1", help="comma-separated gains")
    p.add_argument("--channels", default="R,G,B")
    p.add_argument("--points", type=int, default=64, help="means per curve")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_noise_curve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "threads", 1) < 1:
        return _fail(EXIT_INPUT, "--threads must be at least 1")
    try:
        return args.func(args)
    except estimators.MissingProfileError as exc:
        return _fail(EXIT_NO_PROFILE, str(exc))
    except (InputError, calibration.CalibrationError, ValueError, OSError) as exc:
        return _fail(EXIT_INPUT, str(exc))


if __name__ == "__main__":
    sys.exit(main())
