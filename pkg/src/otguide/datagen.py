"""Synthetic datasets, PPM image I/O and sRGB -> CIELAB conversion."""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DiscreteMeasure, OTGuideError, PointAttrs, StructuralError, dump_measure


class PPMError(OTGuideError, ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB raster; ``pixels`` has shape (height, width, 3), row-major."""

    width: int
    height: int
    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width, 3):
            raise StructuralError(f"pixels shape {px.shape} does not match {self.height}x{self.width}x3")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise StructuralError("channel values outside [0, 255]")
            px = px.astype(np.uint8)
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def filled(cls, width: int, height: int, rgb=(255, 255, 255)) -> "Image":
        px = np.empty((height, width, 3), dtype=np.uint8)
        px[...] = rgb
        return cls(width, height, px)

    def checksum(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()


# --- PPM ---------------------------------------------------------------------

def write_ppm(image: Image, path) -> None:
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + image.pixels.tobytes())


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*(\S+)")


def parse_ppm(data: bytes) -> Image:
    if data[:2] != b"P6":
        raise PPMError(f"unsupported format {data[:2]!r}: only binary P6 is read")
    pos = 2
    fields = []
    for _ in range(3):
        mt = _TOKEN.match(data, pos)
        if mt is None:
            raise PPMError("malformed header: missing width, height or maxval")
        tok = mt.group(1)
        if not tok.isdigit():
            raise PPMError(f"malformed header token {tok!r}")
        fields.append(int(tok))
        pos = mt.end()
    width, height, maxval = fields
    if maxval != 255:
        raise PPMError(f"unsupported maxval {maxval}: only 255 is read")
    if width < 1 or height < 1:
        raise PPMError(f"malformed header: size {width}x{height}")
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise PPMError("malformed header: no whitespace before pixel data")
    pos += 1
    need = width * height * 3
    payload = data[pos:pos + need]
    if len(payload) < need:
        raise PPMError(
            f"truncated pixel data: file ends at byte offset {len(data)}, "
            f"expected {pos + need} bytes"
        )
    px = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3)
    return Image(width, height, px)


def load_ppm(path) -> Image:
    return parse_ppm(Path(path).read_bytes())


# --- colorimetry -------------------------------------------------------------

# linear sRGB -> XYZ for the D65 white point; rows sum to the white point
_RGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = _RGB_TO_XYZ.sum(axis=1)
_DELTA = 6.0 / 29.0


def srgb_to_linear(c: np.ndarray) -> np.ndarray:
    c = np.asarray(c, dtype=float) / 255.0
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def rgb_to_lab(rgb) -> np.ndarray:
    """CIELAB (D65) of 8-bit sRGB values; accepts a triple or an (..., 3) array."""
    rgb = np.asarray(rgb, dtype=float)
    if np.any(rgb < 0) or np.any(rgb > 255):
        raise ValueError("sRGB channels must lie in [0, 255]")
    xyz = srgb_to_linear(rgb) @ _RGB_TO_XYZ.T
    t = xyz / D65_WHITE
    f = np.where(t > _DELTA ** 3, np.cbrt(t), t / (3 * _DELTA ** 2) + 4.0 / 29.0)
    L = 116.0 * f[..., 1] - 16.0
    a = 500.0 * (f[..., 0] - f[..., 1])
    b = 200.0 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


# --- generators --------------------------------------------------------------

def gen_vertical_lines(n: int, size: int, style: str = "A") -> tuple[list[Image], DiscreteMeasure]:
    """``n`` white ``size`` x ``size`` images, image k holding a black vertical
    line at column ``floor(k * size / n)``.  Style ``A`` draws 1-pixel lines,
    style ``B`` 2-pixel lines.  Features are the line column."""
    if style not in ("A", "B"):
        raise ValueError(f"style must be 'A' or 'B', got {style!r}")
    if not 1 <= n <= size:
        raise ValueError(f"need 1 <= n <= size, got n={n}, size={size}")
    width = 1 if style == "A" else 2
    images, cols, attrs = [], [], []
    for k in range(n):
        col = (k * size) // n
        px = np.full((size, size, 3), 255, dtype=np.uint8)
        px[:, col:col + width] = 0
        images.append(Image(size, size, px))
        cols.append([float(col)])
        attrs.append(PointAttrs(id=f"{style}{k:03d}", color=(0, 0, 0)))
    return images, DiscreteMeasure.uniform(np.array(cols), attrs)


def gen_interval(lo: float, hi: float, n: int, prefix: str = "x") -> DiscreteMeasure:
    if n < 1:
        raise ValueError("n must be at least 1")
    if lo > hi:
        raise ValueError(f"lo={lo} exceeds hi={hi}")
    pts = np.linspace(lo, hi, n) if n > 1 else np.array([float(lo)])
    attrs = [PointAttrs(id=f"{prefix}{k:03d}") for k in range(n)]
    return DiscreteMeasure.uniform(pts[:, None], attrs)


def _draw(law: str, n: int, rng: np.random.Generator, name: str) -> np.ndarray:
    """Fractions in [0, 1) for ``uniform`` / ``grid:K``, [0, 1] for ``palette:K``."""
    kind, _, arg = law.partition(":")
    if kind == "uniform":
        return rng.random(n)
    if kind in ("grid", "palette"):
        k = int(arg)
        if k < 1:
            raise ValueError(f"{name}: need at least one level")
        idx = rng.integers(0, k, size=n)
        if kind == "grid":
            return idx / k
        return idx / max(k - 1, 1)
    raise ValueError(f"unknown {name} {law!r}")


def color_ramp(s: float) -> tuple[int, int, int]:
    """Map a colour scalar in [0, 1] onto a blue-to-red RGB ramp."""
    return (int(round(255 * s)), 96, int(round(255 * (1 - s))))


def gen_attributed_clusters(
    n: int,
    d: int,
    angle_law: str = "uniform",
    color_law: str = "uniform",
    seed: int = 0,
    *,
    noise: float = 0.05,
    offset: float = 0.0,
    prefix: str = "p",
) -> DiscreteMeasure:
    """Points whose features are ``[angle / 360, colour scalar, noise...]``.

    ``angle_law`` is ``uniform`` or ``grid:K`` (K evenly spaced azimuths);
    ``color_law`` is ``uniform`` or ``palette:K``.  The remaining ``d - 2``
    coordinates are Gaussian with std ``noise`` around ``offset`` and act as
    a domain-specific style component.
    """
    if n < 2 or d < 2:
        raise ValueError(f"need n >= 2 and d >= 2, got n={n}, d={d}")
    rng = np.random.default_rng(seed)
    frac = _draw(angle_law, n, rng, "angle_law")
    shade = _draw(color_law, n, rng, "color_law")
    style = offset + noise * rng.standard_normal((n, d - 2))
    feats = np.column_stack([frac, shade, style])
    attrs = []
    for k in range(n):
        angle = feats[k, 0] * 360.0
        if angle >= 360.0:
            angle = 0.0
        attrs.append(PointAttrs(id=f"{prefix}{k:04d}", angle=angle, color=color_ramp(feats[k, 1])))
    return DiscreteMeasure.uniform(feats, attrs)


def write_dataset(out_dir, measure: DiscreteMeasure, images: list[Image] | None = None,
                  header: dict | None = None) -> list[Path]:
    """Write ``dataset.jsonl`` (plus one ``<id>.ppm`` per image) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if images is not None:
        if len(images) != measure.n:
            raise StructuralError(f"{len(images)} images for {measure.n} points")
        for img, pid in zip(images, measure.ids):
            p = out / f"{pid}.ppm"
            write_ppm(img, p)
            written.append(p)
    p = out / "dataset.jsonl"
    dump_measure(measure, p, header=header)
    written.append(p)
    return written


def load_images(dataset_path, measure: DiscreteMeasure) -> dict[str, Image]:
    """Images stored next to a dataset file as ``<id>.ppm``."""
    root = Path(dataset_path).parent
    return {pid: load_ppm(root / f"{pid}.ppm") for pid in measure.ids if (root / f"{pid}.ppm").exists()}
