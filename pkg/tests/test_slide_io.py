import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pathfinder import slide_io
from pathfinder.errors import InsufficientForegroundError, SlideFormatError
from pathfinder.slide_io import LesionRect, PatchCoord, PatchPixels

from conftest import solid_slide


def brute_saturation(pixels):
    # Independent per-pixel loop, straight from the HSV definition.
    total = 0.0
    flat = pixels.reshape(-1, 3).tolist()
    for r, g, b in flat:
        mx, mn = max(r, g, b), min(r, g, b)
        total += 0.0 if mx == 0 else 255.0 * (mx - mn) / mx
    return total / len(flat)


# --- saturation ------------------------------------------------------------

def test_saturation_gray_is_zero():
    assert slide_io.saturation(np.full((8, 8, 3), 128, np.uint8)) == 0.0


def test_saturation_pure_red():
    px = np.zeros((8, 8, 3), np.uint8)
    px[..., 0] = 255
    assert slide_io.saturation(px) == 255.0


def test_saturation_half_red_half_gray():
    px = np.full((8, 8, 3), 90, np.uint8)
    px[:4] = (255, 0, 0)
    assert slide_io.saturation(px) == pytest.approx(127.5, abs=1e-12)


def test_saturation_black_pixels_count_as_zero():
    assert slide_io.saturation(np.zeros((4, 4, 3), np.uint8)) == 0.0


def test_saturation_accepts_patch_pixels():
    px = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    patch = PatchPixels(PatchCoord(0, 0, 0, 16), px)
    assert slide_io.saturation(patch) == pytest.approx(brute_saturation(px), abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_saturation_matches_brute_force_and_ignores_pixel_order(seed):
    rng = np.random.default_rng(seed)
    px = rng.integers(0, 256, (12, 12, 3), dtype=np.uint8)
    s = slide_io.saturation(px)
    assert s == pytest.approx(brute_saturation(px), abs=1e-9)
    perm = rng.permutation(px.reshape(-1, 3)).reshape(px.shape)
    assert slide_io.saturation(perm) == pytest.approx(s, abs=1e-9)
    assert 0.0 <= s <= 255.0


def test_patch_saturation_table_agrees_with_direct_mean():
    slide = slide_io.synth_slide(300, 200, [LesionRect(50, 40, 90, 70, "III")], seed=4)
    for coord in slide_io.tile_slide(slide, 0, 37):
        direct = slide_io.saturation(slide_io.extract_patch(slide, coord))
        assert slide_io.patch_saturation(slide, coord) == pytest.approx(direct, abs=1e-9)


# --- tiling ----------------------------------------------------------------

def test_tile_exact_division():
    coords = slide_io.tile_slide(solid_slide((200, 200, 200), 1024, 1024), 0, 512)
    assert [(c.x, c.y) for c in coords] == [(0, 0), (512, 0), (0, 512), (512, 512)]


def test_tile_drops_partial_edges():
    assert len(slide_io.tile_slide(solid_slide((1, 2, 3), 1100, 1024), 0, 512)) == 4


def test_tile_single():
    assert len(slide_io.tile_slide(solid_slide((1, 2, 3), 512, 512), 0, 512)) == 1


def test_tile_too_large():
    with pytest.raises(ValueError):
        slide_io.tile_slide(solid_slide((1, 2, 3), 64, 64), 0, 128)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 300), st.integers(1, 300), st.integers(1, 300))
def test_tiles_disjoint_and_in_bounds(w, h, size):
    size = min(size, w, h)
    slide = slide_io.SlideRaster("t", [slide_io.LevelRaster(np.zeros((h, w, 3), np.uint8))], [10.0])
    coords = slide_io.tile_slide(slide, 0, size)
    cover = np.zeros((h, w), np.int64)
    for c in coords:
        assert c.x + c.size <= w and c.y + c.size <= h
        cover[c.y:c.y + c.size, c.x:c.x + c.size] += 1
    assert cover.max() <= 1
    assert len(coords) == (w // size) * (h // size)


# --- filtering -------------------------------------------------------------

def test_filter_white_slide_empty(white_slide):
    assert slide_io.filter_background(white_slide, slide_io.tile_slide(white_slide, 0, 512)) == []


def test_filter_threshold_zero_is_identity(white_slide):
    coords = slide_io.tile_slide(white_slide, 0, 256)[::-1]
    assert slide_io.filter_background(white_slide, coords, threshold=0) == coords


def test_filter_keeps_lesion_patches(lesion_slide):
    slide, rects = lesion_slide
    coords = slide_io.tile_slide(slide, 0, 64)
    kept = set(slide_io.filter_background(slide, coords))
    touching = {c for c in coords if any(r.intersects(c) for r in rects)}
    # A sliver of lesion may not lift the mean past 15; fully covered tiles must.
    inside = {c for c in touching
              if any(r.x <= c.x and r.y <= c.y and c.x + c.size <= r.x + r.width
                     and c.y + c.size <= r.y + r.height for r in rects)}
    assert inside and inside <= kept
    assert kept <= touching


def test_filter_boundary_is_inclusive():
    # Saturation exactly at the threshold is kept.
    px = np.full((4, 4, 3), 255, np.uint8)
    px[..., 2] = 240   # S = 255 * 15 / 255 = 15
    slide = slide_io.SlideRaster("b", [slide_io.LevelRaster(px)], [10.0])
    coord = PatchCoord(0, 0, 0, 4)
    assert slide_io.saturation(slide_io.extract_patch(slide, coord)) == 15.0
    assert slide_io.filter_background(slide, [coord]) == [coord]


# --- synthetic slides ------------------------------------------------------

def test_synth_background_below_threshold():
    slide = slide_io.synth_slide(1024, 1024, seed=5)
    for c in slide_io.tile_slide(slide, 0, 512):
        assert slide_io.saturation(slide_io.extract_patch(slide, c)) < 15


def test_synth_deterministic():
    rects = [LesionRect(10, 10, 40, 30, "II")]
    a = slide_io.synth_slide(128, 96, rects, seed=9)
    b = slide_io.synth_slide(128, 96, rects, seed=9)
    assert a == b
    assert slide_io.synth_slide(128, 96, rects, seed=10) != a


def test_synth_quarter_lesion_fraction():
    slide = slide_io.synth_slide(512, 512, [LesionRect(128, 128, 256, 256, "III")], seed=3)
    coords = slide_io.tile_slide(slide, 0, 64)
    frac = len(slide_io.filter_background(slide, coords)) / len(coords)
    assert abs(frac - 0.25) <= 8 / 64   # one patch row of an 8x8 tiling


def test_synth_rejects_out_of_bounds_rect():
    with pytest.raises(ValueError):
        slide_io.synth_slide(100, 100, [LesionRect(90, 0, 20, 20, "II")])


def test_synth_thumbnail_is_512():
    slide = slide_io.synth_slide(256, 128, seed=1)
    assert slide.thumbnail.pixels.shape == (512, 512, 3)


@pytest.mark.parametrize("label", ["I", "II", "III", "IV"])
def test_synth_case_has_foreground(label):
    slide, rects = slide_io.synth_case(label, 3)
    assert rects and all(r.label == label for r in rects)
    r = rects[0]
    crop = slide_io.extract_patch(slide, PatchCoord(0, r.x, r.y, min(r.width, r.height)))
    assert slide_io.saturation(crop) > 15


# --- top up and sort -------------------------------------------------------

def test_ensure_min_unchanged_when_enough(lesion_slide):
    slide, _ = lesion_slide
    kept = slide_io.tile_slide(slide, 0, 64)[:200]
    assert slide_io.ensure_min_patches(slide, kept, 150, np.random.default_rng(0)) == kept


def test_ensure_min_white_slide_raises(white_slide):
    with pytest.raises(InsufficientForegroundError, match="insufficient foreground"):
        slide_io.ensure_min_patches(white_slide, [], 150, np.random.default_rng(0),
                                    level_index=0, patch_size=512)


def test_ensure_min_tops_up_with_passing_patches():
    slide = slide_io.synth_slide(1024, 1024, [LesionRect(40, 40, 940, 940, "IV")], seed=2)
    kept = slide_io.filter_background(slide, slide_io.tile_slide(slide, 0, 64))
    assert len(kept) >= 140
    kept = kept[:140]
    out = slide_io.ensure_min_patches(slide, kept, 150, np.random.default_rng(1))
    assert len(out) == 150 and out[:140] == kept
    for c in out[140:]:
        assert slide_io.saturation(slide_io.extract_patch(slide, c)) >= 15


def test_ensure_min_is_seeded(lesion_slide):
    slide, _ = lesion_slide
    a = slide_io.ensure_min_patches(slide, [], 20, np.random.default_rng(4), level_index=0, patch_size=64)
    b = slide_io.ensure_min_patches(slide, [], 20, np.random.default_rng(4), level_index=0, patch_size=64)
    assert a == b and len(a) == 20


def test_sort_spatial_examples():
    a, b = PatchCoord(0, 512, 0, 512), PatchCoord(0, 0, 0, 512)
    assert slide_io.sort_spatial([a, b]) == [b, a]
    assert slide_io.sort_spatial([b, a]) == [b, a]


def test_sort_spatial_permuted_grid():
    grid = [PatchCoord(0, x, y, 10) for y in (0, 10, 20) for x in (0, 10, 20)]
    shuffled = list(np.random.default_rng(0).permutation(grid))
    expected = sorted(grid, key=lambda c: c.y * 1000 + c.x)
    assert slide_io.sort_spatial(shuffled) == expected == grid


# --- extraction ------------------------------------------------------------

def test_extract_whole_level():
    slide = slide_io.synth_slide(64, 64, seed=0)
    patch = slide_io.extract_patch(slide, PatchCoord(0, 0, 0, 64))
    assert np.array_equal(patch.pixels, slide.levels[0].pixels)
    assert patch.pixels.size == 64 * 64 * 3


def test_extract_disjoint_differ():
    slide = slide_io.synth_slide(128, 64, seed=0)
    a = slide_io.extract_patch(slide, PatchCoord(0, 0, 0, 64))
    b = slide_io.extract_patch(slide, PatchCoord(0, 64, 0, 64))
    assert not np.array_equal(a.pixels, b.pixels)


def test_extract_out_of_bounds():
    with pytest.raises(ValueError):
        slide_io.extract_patch(solid_slide((1, 1, 1)), PatchCoord(0, 10, 0, 64))


def test_extract_lesion_is_saturated(lesion_slide):
    slide, (r, *_) = lesion_slide
    patch = slide_io.extract_patch(slide, PatchCoord(0, r.x, r.y, 128))
    assert slide_io.saturation(patch) > 15


# --- disk format -----------------------------------------------------------

def test_load_white_single_level(tmp_path):
    slide_io.write_slide(solid_slide((255, 255, 255), 64, 64, "w"), tmp_path / "w")
    loaded = slide_io.load_slide(tmp_path / "w")
    assert len(loaded.levels) == 1
    assert loaded.levels[0].width == loaded.levels[0].height == 64
    assert loaded.slide_id == "w"


def test_round_trip_two_levels(tmp_path):
    base = slide_io.synth_slide(256, 192, [LesionRect(20, 30, 60, 50, "IV")], seed=8)
    small = slide_io.LevelRaster(slide_io.resample(base.levels[0].pixels, 128, 96))
    slide = slide_io.SlideRaster("two", [base.levels[0], small], [10.0, 5.0])
    slide_io.write_slide(slide, tmp_path / "s")
    loaded = slide_io.load_slide(tmp_path / "s")
    assert loaded == slide
    for a, b in zip(loaded.levels, slide.levels):
        assert a.pixels.tobytes() == b.pixels.tobytes()
    assert loaded.thumbnail.pixels.tobytes() == slide.thumbnail.pixels.tobytes()


def test_level_count_mismatch(tmp_path):
    path = slide_io.write_slide(solid_slide((9, 9, 9)), tmp_path / "s")
    meta = json.loads((path / "meta.json").read_text())
    meta["levels"].append(dict(meta["levels"][0], file="missing.ppm"))
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SlideFormatError, match="level count mismatch"):
        slide_io.load_slide(path)


def test_missing_metadata(tmp_path):
    with pytest.raises(SlideFormatError):
        slide_io.load_slide(tmp_path)


def test_dimension_mismatch(tmp_path):
    path = slide_io.write_slide(solid_slide((9, 9, 9)), tmp_path / "s")
    meta = json.loads((path / "meta.json").read_text())
    meta["levels"][0]["width"] = 32
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(SlideFormatError):
        slide_io.load_slide(path)


def test_non_rgb_payload(tmp_path):
    path = slide_io.write_slide(solid_slide((9, 9, 9)), tmp_path / "s")
    meta = json.loads((path / "meta.json").read_text())
    slide_io.write_pgm(path / meta["levels"][0]["file"], np.zeros((64, 64), np.uint8))
    with pytest.raises(SlideFormatError):
        slide_io.load_slide(path)


def test_ppm_round_trip(tmp_path):
    px = np.random.default_rng(2).integers(0, 256, (7, 5, 3), dtype=np.uint8)
    slide_io.write_ppm(tmp_path / "a.ppm", px)
    assert np.array_equal(slide_io.read_ppm(tmp_path / "a.ppm"), px)
    assert (tmp_path / "a.ppm").read_bytes().startswith(b"P6")
