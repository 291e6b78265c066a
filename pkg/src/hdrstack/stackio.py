"""Exposure stacks and radiance maps on disk.

Images are stored as portable float maps (PFM): a ``PF`` (3 channels) or
``Pf`` (1 channel) line, a ``width height`` line, a scale line whose sign
gives the byte order (negative means little-endian), then raw float32 samples
with the bottom row first.

Each image has a ``<stem>.meta`` sidecar of ``key=value`` lines. Frames carry
``exposure_time_s``, ``gain``, ``iso`` (optional), ``black_level``,
``saturation`` and ``channels``; radiance maps carry ``channels``. The
validity mask of a radiance map is a binary 8-bit PGM next to it
(``<stem>.valid.pgm``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .noise import CameraNoiseParams, Channel, ExposureMeta, parse_keyvalue

__all__ = [
    "ExposureStack",
    "PFMError",
    "RadianceMap",
    "RawFrame",
    "mask_path",
    "meta_path",
    "read_frame",
    "read_map",
    "read_pfm",
    "read_stack",
    "write_frame",
    "write_map",
    "write_pfm",
]

# 2**31 samples is far beyond any stack this tool handles in memory.
MAX_SAMPLES = 2**31


class PFMError(ValueError):
    pass


def _parse_channels(text: str) -> list[Channel]:
    return [Channel.parse(c) for c in re.split(r"[,\s]+", text.strip()) if c]


def _format_channels(channels: Sequence[Channel]) -> str:
    return ",".join(Channel.parse(c).value for c in channels)


@dataclass
class RawFrame:
    """One black-level-subtracted capture, ``data`` shaped (height, width, channels)."""

    data: np.ndarray
    meta: ExposureMeta
    channels: list[Channel]
    saturation: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        self.channels = [Channel.parse(c) for c in self.channels]
        if self.data.ndim != 3 or self.data.shape[2] != len(self.channels):
            raise ValueError(
                f"frame data shape {self.data.shape} does not match channels {self.channels}"
            )
        if not self.saturation > 0:
            raise ValueError("saturation must be positive")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass
class ExposureStack:
    frames: list[RawFrame]
    camera: CameraNoiseParams | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("exposure stack is empty")
        first = self.frames[0]
        for i, fr in enumerate(self.frames[1:], 1):
            if fr.data.shape != first.data.shape:
                raise ValueError(
                    f"frame {i} has shape {fr.data.shape}, expected {first.data.shape}"
                )
            if fr.channels != first.channels:
                raise ValueError(f"frame {i} has channels {fr.channels}, expected {first.channels}")

    @property
    def channels(self) -> list[Channel]:
        return self.frames[0].channels

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.frames[0].data.shape

    def __len__(self):
        return len(self.frames)


@dataclass
class RadianceMap:
    """Merged relative radiance, ``data`` shaped (height, width, channels).

    ``valid`` is False where every exposure of a pixel was saturated.
    """

    data: np.ndarray
    channels: list[Channel]
    valid: np.ndarray = field(default=None)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        self.channels = [Channel.parse(c) for c in self.channels]
        if self.data.shape[2] != len(self.channels):
            raise ValueError("radiance map channels do not match data")
        if self.valid is None:
            self.valid = np.ones(self.data.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.valid.shape != self.data.shape:
            raise ValueError(f"validity mask shape {self.valid.shape} != {self.data.shape}")


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def _read_token_line(f) -> bytes:
    line = f.readline()
    if not line.endswith(b"\n"):
        raise PFMError("truncated PFM header")
    return line.strip()


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a PFM file into a float32 array shaped (height, width, channels), top row first."""
    with open(path, "rb") as f:
        magic = _read_token_line(f)
        if magic == b"PF":
            nch = 3
        elif magic == b"Pf":
            nch = 1
        else:
            raise PFMError(f"{path}: not a PFM file (magic {magic[:8]!r})")
        dims = _read_token_line(f).split()
        if len(dims) != 2:
            raise PFMError(f"{path}: malformed dimension line")
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(_read_token_line(f))
        except ValueError:
            raise PFMError(f"{path}: malformed PFM header") from None
        if width <= 0 or height <= 0 or scale == 0:
            raise PFMError(f"{path}: invalid dimensions or scale")
        count = width * height * nch
        if count > MAX_SAMPLES:
            raise PFMError(f"{path}: image dimensions {width}x{height} are too large")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        buf = f.read(count * 4)
    if len(buf) != count * 4:
        raise PFMError(f"{path}: expected {count * 4} bytes of pixel data, got {len(buf)}")
    data = np.frombuffer(buf, dtype=dtype).astype(np.float32)
    return data.reshape(height, width, nch)[::-1].copy()


def write_pfm(path: str | Path, data: np.ndarray) -> None:
    """Write a (height, width[, 1|3]) array as little-endian PFM."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3 or data.shape[2] not in (1, 3):
        raise PFMError(f"PFM stores 1 or 3 channels, got shape {data.shape}")
    height, width, nch = data.shape
    header = f"{'PF' if nch == 3 else 'Pf'}\n{width} {height}\n-1.0\n".encode("ascii")
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data[::-1], dtype="<f4").tobytes())


def meta_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".meta")


def mask_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".valid.pgm")


def _write_meta(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k}={v}\n" for k, v in items.items()), encoding="utf-8")


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------

def read_frame(path: str | Path, black_level: float | None = None) -> RawFrame:
    """Read a frame and subtract its black level.

    ``black_level`` overrides the sidecar value. Results may be negative.
    """
    path = Path(path)
    side = meta_path(path)
    if not side.is_file():
        raise FileNotFoundError(f"missing metadata sidecar {side}")
    kv = parse_keyvalue(side.read_text(encoding="utf-8"))
    if "exposure_time_s" not in kv:
        raise ValueError(f"{side}: exposure_time_s is required")
    if "gain" in kv:
        gain = float(kv["gain"])
    elif "iso" in kv:
        gain = float(kv["iso"]) / 100.0
    else:
        raise ValueError(f"{side}: gain (or iso) is required")
    meta = ExposureMeta(t=float(kv["exposure_time_s"]), g=gain)
    if black_level is None:
        black_level = float(kv.get("black_level", 0.0))
    raw = read_pfm(path)
    channels = _parse_channels(kv.get("channels", "R,G,B" if raw.shape[2] == 3 else "G"))
    saturation = float(kv["saturation"]) if "saturation" in kv else np.inf
    data = raw.astype(np.float64)
    if black_level:
        # skipping a zero offset keeps -0.0 intact
        data = data - black_level
    return RawFrame(data=data, meta=meta, channels=channels, saturation=saturation)


def write_frame(frame: RawFrame, path: str | Path, black_level: float = 0.0) -> None:
    """Write a frame with ``black_level`` added back; the sidecar records it."""
    path = Path(path)
    write_pfm(path, frame.data + black_level if black_level else frame.data)
    _write_meta(meta_path(path), {
        "exposure_time_s": repr(frame.meta.t),
        "gain": repr(frame.meta.g),
        "iso": repr(frame.meta.g * 100.0),
        "black_level": repr(float(black_level)),
        "saturation": repr(float(frame.saturation)),
        "channels": _format_channels(frame.channels),
    })


def read_stack(paths: Sequence[str | Path], camera: CameraNoiseParams | None = None,
               black_level: float | None = None) -> ExposureStack:
    frames = [read_frame(p, black_level) for p in paths]
    return ExposureStack(frames=frames, camera=camera)


# ---------------------------------------------------------------------------
# Radiance maps
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, mask: np.ndarray) -> None:
    height, width = mask.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        f.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


def _read_pgm(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        if _read_token_line(f) != b"P5":
            raise PFMError(f"{path}: not a binary PGM")
        width, height = (int(v) for v in _read_token_line(f).split())
        if int(_read_token_line(f)) != 255:
            raise PFMError(f"{path}: only 8-bit PGM is supported")
        buf = f.read(width * height)
    if len(buf) != width * height:
        raise PFMError(f"{path}: truncated PGM")
    return np.frombuffer(buf, dtype=np.uint8).reshape(height, width) > 0


def write_map(rmap: RadianceMap, path: str | Path, clamp_negative: bool = False) -> None:
    """Write a radiance map as PFM plus channel sidecar and validity mask.

    A pixel is written as valid only if all its channels are valid.
    Radiance maps with two channels cannot be stored in PFM.
    """
    path = Path(path)
    data = np.asarray(rmap.data, dtype=np.float32)
    if not np.all(np.isfinite(data)):
        raise ValueError("radiance map contains non-finite values")
    if clamp_negative:
        data = np.maximum(data, np.float32(0))
    write_pfm(path, data)
    _write_meta(meta_path(path), {"channels": _format_channels(rmap.channels)})
    _write_pgm(mask_path(path), np.all(rmap.valid, axis=2))


def read_map(path: str | Path) -> RadianceMap:
    path = Path(path)
    data = read_pfm(path)
    side = meta_path(path)
    kv = parse_keyvalue(side.read_text(encoding="utf-8")) if side.is_file() else {}
    channels = _parse_channels(kv.get("channels", "R,G,B" if data.shape[2] == 3 else "G"))
    mpath = mask_path(path)
    if mpath.is_file():
        valid = np.repeat(_read_pgm(mpath)[:, :, None], data.shape[2], axis=2)
    else:
        valid = None
    return RadianceMap(data=data, channels=channels, valid=valid)
