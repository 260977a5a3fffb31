"""Slide rasters: on-disk format, synthetic slides, tiling and background filtering.

A slide directory holds ``meta.json`` plus one binary PPM (P6) per pyramid
level and a 512x512 thumbnail::

    {"slide_id": "...",
     "levels": [{"width": W, "height": H, "magnification": 10.0, "file": "level_0.ppm"}],
     "thumbnail": "thumbnail.ppm"}

Pixels are held as ``uint8`` arrays of shape ``(height, width, 3)``.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InsufficientForegroundError, SlideFormatError

log = logging.getLogger(__name__)

THUMBNAIL_SIZE = 512
PATCH_SIZE = 512
SATURATION_THRESHOLD = 15.0
MIN_PATCHES = 150
MAX_DRAWS = 10_000

# Close calls against the threshold are re-checked on the exact pixels.
_SAT_GUARD = 1e-6


@dataclass(eq=False)
class LevelRaster:
    pixels: np.ndarray
    _sat_table: Optional[np.ndarray] = field(default=None, init=False, repr=False)

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise SlideFormatError(f"expected (height, width, 3) RGB pixels, got shape {px.shape}")
        if px.dtype != np.uint8:
            raise SlideFormatError(f"expected uint8 pixels, got {px.dtype}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise SlideFormatError("level must be at least 1x1")
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def saturation_table(self) -> np.ndarray:
        """Summed-area table of per-pixel saturation, shape ``(height+1, width+1)``."""
        if self._sat_table is None:
            table = np.zeros((self.height + 1, self.width + 1), dtype=np.float64)
            np.cumsum(np.cumsum(pixel_saturation(self.pixels), axis=0), axis=1, out=table[1:, 1:])
            self._sat_table = table
        return self._sat_table

    def drop_cache(self):
        self._sat_table = None

    def __eq__(self, other):
        if not isinstance(other, LevelRaster):
            return NotImplemented
        return np.array_equal(self.pixels, other.pixels)


@dataclass(eq=False)
class SlideRaster:
    slide_id: str
    levels: list
    magnification_per_level: list
    thumbnail: Optional[LevelRaster] = None

    def __post_init__(self):
        if not self.levels:
            raise SlideFormatError("slide has no levels")
        if len(self.levels) != len(self.magnification_per_level):
            raise SlideFormatError("one magnification per level is required")
        if any(m <= 0 for m in self.magnification_per_level):
            raise SlideFormatError("magnifications must be positive")
        base = self.levels[0]
        for lvl in self.levels[1:]:
            if lvl.width > base.width or lvl.height > base.height:
                raise SlideFormatError("levels must be ordered from highest to lowest resolution")
            # Aspect ratio within one pixel of rounding.
            if abs(lvl.height - base.height * lvl.width / base.width) > 1.0 + 1e-9:
                raise SlideFormatError("levels disagree on aspect ratio")
        if self.thumbnail is None:
            self.thumbnail = LevelRaster(resample(base.pixels, THUMBNAIL_SIZE, THUMBNAIL_SIZE))
        elif (self.thumbnail.width, self.thumbnail.height) != (THUMBNAIL_SIZE, THUMBNAIL_SIZE):
            raise SlideFormatError(
                f"thumbnail must be {THUMBNAIL_SIZE}x{THUMBNAIL_SIZE}, "
                f"got {self.thumbnail.width}x{self.thumbnail.height}"
            )

    def level_at(self, magnification: float) -> int:
        for i, mag in enumerate(self.magnification_per_level):
            if math.isclose(mag, magnification, rel_tol=1e-9):
                return i
        raise SlideFormatError(f"slide {self.slide_id!r} has no {magnification:g}x level")

    def __eq__(self, other):
        if not isinstance(other, SlideRaster):
            return NotImplemented
        return (
            self.slide_id == other.slide_id
            and list(self.magnification_per_level) == list(other.magnification_per_level)
            and self.levels == other.levels
            and self.thumbnail == other.thumbnail
        )


@dataclass(frozen=True, order=True)
class PatchCoord:
    level_index: int
    x: int
    y: int
    size: int

    def to_dict(self) -> dict:
        return {"level_index": self.level_index, "x": self.x, "y": self.y, "size": self.size}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchCoord":
        return cls(int(d["level_index"]), int(d["x"]), int(d["y"]), int(d["size"]))


@dataclass(eq=False)
class PatchPixels:
    coord: PatchCoord
    pixels: np.ndarray


@dataclass(frozen=True)
class LesionRect:
    x: int
    y: int
    width: int
    height: int
    label: str

    def intersects(self, coord: PatchCoord) -> bool:
        return (
            coord.x < self.x + self.width
            and self.x < coord.x + coord.size
            and coord.y < self.y + self.height
            and self.y < coord.y + coord.size
        )


# ---------------------------------------------------------------------------
# PPM / PGM


def _read_netpbm(path: Path, magic: bytes, channels: int) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:2] != magic:
        kind = "RGB" if channels == 3 else "grayscale"
        raise SlideFormatError(f"{path}: not a binary {kind} ({magic.decode()}) image")
    # Header: magic, width, height, maxval, each whitespace separated; '#' starts a comment.
    pos = 2
    tokens = []
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    for _ in range(3):
        m = token_re.match(data, pos)
        if m is None:
            raise SlideFormatError(f"{path}: truncated header")
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise SlideFormatError(f"{path}: malformed header")
    pos += 1
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError:
        raise SlideFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise SlideFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    expected = width * height * channels
    payload = data[pos:]
    if len(payload) != expected:
        raise SlideFormatError(
            f"{path}: payload has {len(payload)} bytes, {width}x{height} needs {expected}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8)
    shape = (height, width, channels) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6", 3)


def write_ppm(path, pixels: np.ndarray):
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (w, h))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5", 1)


def write_pgm(path, values: np.ndarray):
    values = np.ascontiguousarray(values, dtype=np.uint8)
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(values.tobytes())


# ---------------------------------------------------------------------------
# Slide directories


def load_slide(path) -> SlideRaster:
    root = Path(path)
    meta_path = root / "meta.json"
    if not meta_path.is_file():
        raise SlideFormatError(f"{root}: missing meta.json")
    try:
        meta = json.loads(meta_path.read_text())
        slide_id = str(meta["slide_id"])
        level_specs = list(meta["levels"])
        thumb_file = meta["thumbnail"]
    except (ValueError, KeyError, TypeError) as exc:
        raise SlideFormatError(f"{meta_path}: invalid metadata ({exc})") from None

    missing = [spec.get("file") for spec in level_specs if not (root / spec.get("file", "")).is_file()]
    if missing:
        raise SlideFormatError(
            f"{root}: level count mismatch: metadata declares {len(level_specs)} levels, "
            f"missing payloads {missing}"
        )
    levels, mags = [], []
    for spec in level_specs:
        pixels = read_ppm(root / spec["file"])
        if (pixels.shape[1], pixels.shape[0]) != (int(spec["width"]), int(spec["height"])):
            raise SlideFormatError(
                f"{root / spec['file']}: level dimension mismatch, metadata says "
                f"{spec['width']}x{spec['height']}, payload is {pixels.shape[1]}x{pixels.shape[0]}"
            )
        levels.append(LevelRaster(pixels))
        mags.append(float(spec["magnification"]))
    if not (root / thumb_file).is_file():
        raise SlideFormatError(f"{root}: missing thumbnail {thumb_file}")
    thumbnail = LevelRaster(read_ppm(root / thumb_file))
    return SlideRaster(slide_id, levels, mags, thumbnail)


def write_slide(slide: SlideRaster, path) -> Path:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    specs = []
    for i, (lvl, mag) in enumerate(zip(slide.levels, slide.magnification_per_level)):
        name = f"level_{i}.ppm"
        write_ppm(root / name, lvl.pixels)
        specs.append({"width": lvl.width, "height": lvl.height, "magnification": mag, "file": name})
    write_ppm(root / "thumbnail.ppm", slide.thumbnail.pixels)
    meta = {"slide_id": slide.slide_id, "levels": specs, "thumbnail": "thumbnail.ppm"}
    (root / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return root


# ---------------------------------------------------------------------------
# Synthetic slides

# Background: pale, low saturation.  Per-pixel S stays below 12 with the noise below.
_BACKGROUND = np.array([238, 232, 236])

# Stain-like lesion colours per class label.  Class I is a pale nevus (S around 68);
# classes II-IV are strongly stained (S above 110) with well separated hues.
LESION_COLORS = {
    "I": (205, 175, 150),
    "II": (150, 70, 175),
    "III": (205, 60, 125),
    "IV": (65, 70, 180),
}


def resample(pixels: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Area-average when the size divides evenly, nearest neighbour otherwise."""
    h, w = pixels.shape[:2]
    if (w, h) == (out_w, out_h):
        return np.array(pixels, dtype=np.uint8)
    if w % out_w == 0 and h % out_h == 0:
        fy, fx = h // out_h, w // out_w
        blocks = pixels.reshape(out_h, fy, out_w, fx, -1).astype(np.float64)
        return np.floor(blocks.mean(axis=(1, 3)) + 0.5).astype(np.uint8).reshape(out_h, out_w, -1)
    ys = ((np.arange(out_h) + 0.5) * h / out_h).astype(np.int64).clip(0, h - 1)
    xs = ((np.arange(out_w) + 0.5) * w / out_w).astype(np.int64).clip(0, w - 1)
    return np.array(pixels[ys][:, xs], dtype=np.uint8)


def synth_slide(width, height, lesion_rects: Sequence[LesionRect] = (), seed=0,
                slide_id=None, magnification=10.0) -> SlideRaster:
    if width < 64 or height < 64:
        raise ValueError("synthetic slides must be at least 64x64")
    for r in lesion_rects:
        if r.label not in LESION_COLORS:
            raise ValueError(f"unknown lesion label {r.label!r}")
        if r.width < 1 or r.height < 1 or r.x < 0 or r.y < 0 \
                or r.x + r.width > width or r.y + r.height > height:
            raise ValueError(f"lesion rectangle {r} is out of bounds for {width}x{height}")

    rng = np.random.default_rng(seed)
    lum = rng.integers(-6, 7, size=(height, width, 1))
    chroma = rng.integers(-2, 3, size=(height, width, 3))
    img = _BACKGROUND + lum + chroma

    for r in lesion_rects:
        sl = (slice(r.y, r.y + r.height), slice(r.x, r.x + r.width))
        base = np.array(LESION_COLORS[r.label])
        lum = rng.integers(-20, 21, size=(r.height, r.width, 1))
        chroma = rng.integers(-5, 6, size=(r.height, r.width, 3))
        patch = (base + lum + chroma).astype(np.float64)
        # Darker nuclei-like speckles; uniform scaling keeps saturation.
        nuclei = rng.random((r.height, r.width, 1)) < 0.08
        patch = np.where(nuclei, patch * 0.6, patch)
        img[sl] = np.floor(patch + 0.5).astype(np.int64)

    pixels = np.clip(img, 0, 255).astype(np.uint8)
    slide_id = slide_id if slide_id is not None else f"synth-{seed}"
    return SlideRaster(slide_id, [LevelRaster(pixels)], [float(magnification)])


# ---------------------------------------------------------------------------
# Tiling and filtering


def tile_slide(slide: SlideRaster, level_index: int, patch_size: int = PATCH_SIZE) -> list:
    """Non-overlapping row-major grid; partial edge tiles are dropped."""
    lvl = slide.levels[level_index]
    if patch_size < 1:
        raise ValueError("patch_size must be positive")
    if patch_size > lvl.width or patch_size > lvl.height:
        raise ValueError(f"patch size {patch_size} exceeds level {lvl.width}x{lvl.height}")
    return [
        PatchCoord(level_index, x, y, patch_size)
        for y in range(0, lvl.height - patch_size + 1, patch_size)
        for x in range(0, lvl.width - patch_size + 1, patch_size)
    ]


def pixel_saturation(pixels: np.ndarray) -> np.ndarray:
    """HSV saturation per pixel on a 0-255 scale (0 for black pixels)."""
    px = np.asarray(pixels)
    r, g, b = px[..., 0], px[..., 1], px[..., 2]
    mx = np.maximum(np.maximum(r, g), b)
    mn = np.minimum(np.minimum(r, g), b)
    # max == 0 implies max - min == 0, so clamping the divisor leaves S = 0 there.
    return (mx - mn) * 255.0 / np.maximum(mx, 1)


def saturation(patch) -> float:
    """Mean HSV saturation (0-255) of a patch; accepts PatchPixels or an RGB array."""
    pixels = patch.pixels if isinstance(patch, PatchPixels) else patch
    if pixels.size == 0:
        raise ValueError("empty patch")
    return float(pixel_saturation(pixels).mean())


def _check_coord(slide: SlideRaster, coord: PatchCoord):
    if not 0 <= coord.level_index < len(slide.levels):
        raise ValueError(f"level {coord.level_index} does not exist")
    lvl = slide.levels[coord.level_index]
    if coord.size < 1 or coord.x < 0 or coord.y < 0 \
            or coord.x + coord.size > lvl.width or coord.y + coord.size > lvl.height:
        raise ValueError(f"{coord} is out of bounds for level {lvl.width}x{lvl.height}")


def extract_patch(slide: SlideRaster, coord: PatchCoord) -> PatchPixels:
    _check_coord(slide, coord)
    px = slide.levels[coord.level_index].pixels
    return PatchPixels(coord, px[coord.y:coord.y + coord.size, coord.x:coord.x + coord.size].copy())


def patch_saturation(slide: SlideRaster, coord: PatchCoord) -> float:
    """Same value as ``saturation(extract_patch(slide, coord))`` via the summed-area table."""
    _check_coord(slide, coord)
    t = slide.levels[coord.level_index].saturation_table()
    x0, y0, x1, y1 = coord.x, coord.y, coord.x + coord.size, coord.y + coord.size
    total = t[y1, x1] - t[y0, x1] - t[y1, x0] + t[y0, x0]
    return float(total / (coord.size * coord.size))


def _passes(slide, coord, threshold) -> bool:
    s = patch_saturation(slide, coord)
    if abs(s - threshold) <= _SAT_GUARD * max(1.0, threshold):
        s = saturation(extract_patch(slide, coord))
    return s >= threshold


def filter_background(slide: SlideRaster, coords, threshold=SATURATION_THRESHOLD) -> list:
    """Keep patches whose mean saturation is at least ``threshold``, order preserved."""
    coords = list(coords)
    if threshold <= 0:
        return coords
    return [c for c in coords if _passes(slide, c, threshold)]


def ensure_min_patches(slide: SlideRaster, kept, minimum=MIN_PATCHES, rng=None, *,
                       level_index=None, patch_size=None, threshold=SATURATION_THRESHOLD,
                       max_draws=MAX_DRAWS) -> list:
    """Top up ``kept`` with random foreground patches until it has ``minimum`` entries.

    Extra patches are drawn uniformly over the level (they may overlap existing
    ones) and must pass the saturation filter.  Level and size default to those
    of ``kept[0]``.
    """
    result = list(kept)
    if len(result) >= minimum:
        return result
    if level_index is None:
        level_index = result[0].level_index if result else 0
    if patch_size is None:
        patch_size = result[0].size if result else PATCH_SIZE
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    lvl = slide.levels[level_index]
    if patch_size > lvl.width or patch_size > lvl.height:
        raise ValueError(f"patch size {patch_size} exceeds level {lvl.width}x{lvl.height}")

    draws = 0
    while len(result) < minimum:
        if draws >= max_draws:
            raise InsufficientForegroundError(
                f"insufficient foreground in slide {slide.slide_id!r}: "
                f"{len(result)} of {minimum} patches after {draws} random draws"
            )
        draws += 1
        x = int(rng.integers(0, lvl.width - patch_size + 1))
        y = int(rng.integers(0, lvl.height - patch_size + 1))
        coord = PatchCoord(level_index, x, y, patch_size)
        if _passes(slide, coord, threshold):
            result.append(coord)
    log.debug("slide %s: topped up to %d patches in %d draws", slide.slide_id, len(result), draws)
    return result


def sort_spatial(coords) -> list:
    return sorted(coords, key=lambda c: (c.y, c.x))


def synth_case(label: str, seed: int, width=1024, height=1024, slide_id=None) -> tuple:
    """A synthetic slide with one planted lesion of class ``label``.

    Class I lesions are large pale nevi; classes II-IV are small, strongly
    stained foci covering a few percent of the slide.  Returns the slide and
    its lesion rectangles.
    """
    if label not in LESION_COLORS:
        raise ValueError(f"unknown class label {label!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, 7])
    lo, hi = (0.30, 0.40) if label == "I" else (0.15, 0.19)
    side = min(width, height)
    lw = max(1, int(side * rng.uniform(lo, hi)))
    lh = max(1, int(side * rng.uniform(lo, hi)))
    x = int(rng.integers(0, width - lw + 1))
    y = int(rng.integers(0, height - lh + 1))
    rects = [LesionRect(x, y, lw, lh, label)]
    slide = synth_slide(width, height, rects, seed=seed, slide_id=slide_id)
    return slide, rects
