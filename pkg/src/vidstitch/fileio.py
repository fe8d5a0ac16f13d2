"""File formats and frame-sequence plumbing.

Images travel as PNG or binary PPM (P6, maxval 255); both round-trip 8-bit
RGB exactly. Correspondences interchange as plain text ("x1 y1 x2 y2" per
line), and configuration as flat key=value text. All writers go through a
temp file and an atomic rename so failures never leave partial artifacts.

Error split: filesystem problems surface as OSError and decode problems
as FrameIOError / MatchFileError (CLI exit 2); unparseable user-authored
text (config, scene files) raises ConfigError naming the offending line
(CLI exit 1).
"""

from __future__ import annotations

import dataclasses
import os
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, FrameIOError, MatchFileError
from .geometry import WeightProfile
from .matching import MatchSet, SelectionParams
from .pipeline import StitchConfig

IMAGE_SUFFIXES = (".png", ".ppm")


# ---------------------------------------------------------------------------
# image rasters

def _to_uint8(image: np.ndarray) -> np.ndarray:
    if image.dtype == np.uint8:
        return image
    return np.clip(np.rint(image), 0, 255).astype(np.uint8)


def _atomic_write(path: Path, writer) -> None:
    tmp = path.with_name(path.name + ".part")
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def read_image(path) -> np.ndarray:
    """Load a PNG or binary PPM as an (H, W, 3) uint8 raster."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        return _read_ppm(path)
    if suffix == ".png":
        try:
            with Image.open(path) as im:
                return np.asarray(im.convert("RGB"))
        except FileNotFoundError:
            raise
        except Exception as exc:
            raise FrameIOError(f"{path}: not a decodable PNG ({exc})") from exc
    raise FrameIOError(f"{path}: unsupported image format {suffix!r}")


def write_image(path, image: np.ndarray) -> None:
    path = Path(path)
    raster = _to_uint8(np.atleast_3d(image))
    if raster.shape[2] == 1:
        raster = np.repeat(raster, 3, axis=2)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        h, w = raster.shape[:2]
        header = f"P6\n{w} {h}\n255\n".encode("ascii")
        _atomic_write(path, lambda tmp: tmp.write_bytes(header + raster.tobytes()))
    elif suffix == ".png":
        def emit(tmp):
            Image.fromarray(raster).save(tmp, format="PNG")
        _atomic_write(path, emit)
    else:
        raise FrameIOError(f"{path}: unsupported image format {suffix!r}")


def _read_ppm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    pos = 0

    def token():
        nonlocal pos
        while pos < len(data):
            ch = data[pos:pos + 1]
            if ch == b"#":
                while pos < len(data) and data[pos:pos + 1] != b"\n":
                    pos += 1
            elif ch.isspace():
                pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FrameIOError(f"{path}: truncated header at byte {start}")
        return data[start:pos], start

    magic, off = token()
    if magic != b"P6":
        raise FrameIOError(f"{path}: bad magic {magic!r} at byte {off}")
    dims = []
    for name in ("width", "height", "maxval"):
        tok, off = token()
        try:
            dims.append(int(tok))
        except ValueError:
            raise FrameIOError(
                f"{path}: bad {name} {tok!r} at byte {off}"
            ) from None
    w, h, maxval = dims
    if w < 1 or h < 1:
        raise FrameIOError(f"{path}: bad dimensions {w}x{h} at byte {off}")
    if maxval != 255:
        raise FrameIOError(f"{path}: unsupported maxval {maxval} at byte {off}")
    pos += 1               # single whitespace byte terminates the header
    need = w * h * 3
    raw = data[pos:pos + need]
    if len(raw) < need:
        raise FrameIOError(
            f"{path}: expected {need} pixel bytes at byte {pos}, "
            f"found {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


# ---------------------------------------------------------------------------
# match files

def write_matches(path, src: np.ndarray, dst: np.ndarray) -> None:
    lines = ["# x1 y1 x2 y2"]
    for (x1, y1), (x2, y2) in zip(np.asarray(src), np.asarray(dst)):
        lines.append(f"{x1:.6f} {y1:.6f} {x2:.6f} {y2:.6f}")
    text = "\n".join(lines) + "\n"
    _atomic_write(Path(path), lambda tmp: tmp.write_bytes(text.encode("ascii")))


def read_matches(path, extent_a=None, extent_b=None) -> MatchSet:
    """Parse "x1 y1 x2 y2" lines; '#' starts a comment. Optional extents
    (w, h) reject out-of-frame coordinates."""
    path = Path(path)
    src, dst = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            parts = body.split()
            if len(parts) != 4:
                raise MatchFileError(
                    f"{path}:{lineno}: expected 4 coordinates, got {len(parts)}"
                )
            try:
                x1, y1, x2, y2 = (float(p) for p in parts)
            except ValueError:
                raise MatchFileError(f"{path}:{lineno}: non-numeric coordinate") from None
            for pt, extent, side in (((x1, y1), extent_a, "source"),
                                     ((x2, y2), extent_b, "target")):
                if extent is not None and not (
                    0 <= pt[0] < extent[0] and 0 <= pt[1] < extent[1]
                ):
                    raise MatchFileError(
                        f"{path}:{lineno}: {side} point {pt} outside "
                        f"{extent[0]}x{extent[1]}"
                    )
            src.append((x1, y1))
            dst.append((x2, y2))
    n = len(src)
    return MatchSet(
        src=np.asarray(src, dtype=np.float64).reshape(n, 2),
        dst=np.asarray(dst, dtype=np.float64).reshape(n, 2),
        scores=np.zeros(n),
    )


# ---------------------------------------------------------------------------
# key=value configuration

def parse_keyvalues(text: str, source: str = "config") -> dict:
    """Flat key=value lines; '#' comments; later keys override earlier."""
    out: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {body!r}")
        key, _, value = body.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: empty key or value")
        out[key] = (value, lineno)
    return out


def coerce_values(kv: dict, source: str, types: dict) -> dict:
    vals = {}
    for key, (raw, lineno) in kv.items():
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            vals[key] = types[key](raw)
        except ValueError:
            raise ConfigError(
                f"{source}:{lineno}: bad value {raw!r} for {key}"
            ) from None
    return vals


_CONFIG_TYPES = {
    "s": int, "eps_o": float, "eps_r": float, "M0": int, "M": int,
    "sigma": float, "gamma": float,
    "cell_size": int, "lam": float, "pyramid_levels": int,
    "realign_interval": int, "seed": int,
}


def config_from_text(text: str, source: str = "config") -> StitchConfig:
    """Build a StitchConfig from key=value text; absent keys keep module
    defaults. Selection keys: s, eps_o, eps_r, M0, M. Weight keys: sigma,
    gamma (gamma alone keeps the size-derived sigma default)."""
    vals = coerce_values(parse_keyvalues(text, source), source, _CONFIG_TYPES)
    sel_kw = {k: vals.pop(k) for k in ("s", "eps_o", "eps_r", "M0", "M")
              if k in vals}
    sigma = vals.pop("sigma", None)
    gamma = vals.pop("gamma", None)
    if sigma is None and gamma is not None:
        raise ConfigError(f"{source}: gamma override requires sigma")
    profile = None
    if sigma is not None:
        profile = WeightProfile(sigma=sigma, gamma=0.01 if gamma is None else gamma)
    try:
        return StitchConfig(
            selection=SelectionParams(**sel_kw),
            weight_profile=profile,
            **vals,
        )
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> StitchConfig:
    path = Path(path)
    return config_from_text(path.read_text(encoding="ascii"), source=str(path))


def with_input_size(config: StitchConfig, size: tuple) -> StitchConfig:
    return dataclasses.replace(config, input_size=size)


# ---------------------------------------------------------------------------
# frame sequences

class FrameSource:
    """Ordered frame sequence from a directory of images or a single image.

    Directory entries are taken in lexicographic filename order. All frames
    must share the first frame's dimensions; iteration yields float32
    (H, W, 3) rasters in [0, 255].
    """

    def __init__(self, path):
        path = Path(path)
        if path.is_file():
            self.paths = [path]
        elif path.is_dir():
            self.paths = sorted(
                (p for p in path.iterdir()
                 if p.suffix.lower() in IMAGE_SUFFIXES),
                key=lambda p: p.name,
            )
        else:
            raise FrameIOError(f"{path}: no such file or directory")
        if not self.paths:
            raise FrameIOError(f"{path}: no frames found")
        first = read_image(self.paths[0])
        self.height, self.width = first.shape[:2]
        self._first = first

    @property
    def size(self) -> tuple:
        return (self.width, self.height)

    def __len__(self) -> int:
        return len(self.paths)

    def __iter__(self):
        for i, p in enumerate(self.paths):
            frame = self._first if i == 0 else read_image(p)
            if frame.shape[:2] != (self.height, self.width):
                raise FrameIOError(
                    f"{p}: frame is {frame.shape[1]}x{frame.shape[0]}, "
                    f"sequence is {self.width}x{self.height}"
                )
            yield frame.astype(np.float32)


def write_text(path, text: str) -> None:
    _atomic_write(Path(path), lambda tmp: tmp.write_bytes(text.encode("ascii")))


def write_stats(path, stats) -> None:
    # report files must be reproducible byte for byte; wall-clock timing
    # fields go to the console instead
    write_text(path, stats.to_text(include_timing=False))
