# -*- coding: utf-8 -*-
"""キューブ入出力・波長整列・パッチ・RGB 抽出・劣化処理のテスト"""

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_cube
from hsi_data import (
    DEFAULT_WAVELENGTHS,
    HSC_MAGIC,
    CubeFormatError,
    DegradationSpec,
    HsiCube,
    RgbImage,
    align_to_default_grid,
    align_wavelengths,
    crop_patches,
    degrade,
    extract_rgb,
    list_cube_files,
    nearest_band,
    patch_grid,
    read_cube,
    reassemble_patches,
    write_cube,
)


class TestHsiCube:
    def test_rejects_non_increasing_wavelengths(self):
        with pytest.raises(ValueError):
            HsiCube(np.zeros((3, 2, 2)), [500.0, 500.0, 600.0])

    def test_rejects_band_count_mismatch(self):
        with pytest.raises(ValueError):
            HsiCube(np.zeros((3, 2, 2)), [500.0, 600.0])

    def test_rejects_nan(self):
        values = np.zeros((2, 2, 2))
        values[1, 0, 0] = np.nan
        with pytest.raises(ValueError):
            HsiCube(values, [500.0, 600.0])

    def test_integer_input_normalized(self):
        cube = HsiCube.from_array(np.array([[[0, 50], [100, 200]]], dtype=np.uint16), [550.0])
        assert cube.values.max() == 1.0
        assert cube.values[0, 0, 1] == 0.25

    def test_pixels_rows(self):
        cube = random_cube(bands=4, height=3, width=2)
        pixels = cube.pixels()
        assert pixels.shape == (6, 4)
        assert np.array_equal(pixels[3], cube.values[:, 1, 1])


class TestCubeIo:
    def test_hsc_round_trip(self, tmp_path, cube):
        cube = cube.with_values(cube.values, meta={"origin": [0, 16]})
        path = write_cube(cube, tmp_path / "a.hsc")
        loaded = read_cube(path)
        np.testing.assert_array_equal(loaded.values, cube.values.astype(np.float32))
        np.testing.assert_array_equal(loaded.wavelengths, cube.wavelengths)
        assert loaded.meta == {"origin": [0, 16]}

    def test_hsc_is_byte_reproducible(self, tmp_path, cube):
        a = write_cube(cube, tmp_path / "a.hsc").read_bytes()
        b = write_cube(cube, tmp_path / "b.hsc").read_bytes()
        assert a == b
        assert a.startswith(HSC_MAGIC)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.hsc"
        path.write_bytes(b"NOTACUBE" + b"\x00" * 16)
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def test_truncated_payload(self, tmp_path, small_cube):
        path = write_cube(small_cube, tmp_path / "t.hsc")
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def test_wavelength_count_mismatch(self, tmp_path):
        header = json.dumps({
            "height": 1, "width": 1, "bands": 2, "wavelengths_nm": [500.0],
            "dtype": "f32le", "layout": "bsq",
        }).encode()
        path = tmp_path / "w.hsc"
        path.write_bytes(HSC_MAGIC + struct.pack("<I", len(header)) + header + b"\x00" * 8)
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def _write_envi(self, tmp_path, values, wavelengths, extra=""):
        bands, lines, samples = values.shape
        header = (
            "ENVI\n"
            f"samples = {samples}\nlines = {lines}\nbands = {bands}\n"
            "header offset = 0\nfile type = ENVI Standard\ndata type = 4\n"
            "interleave = bsq\nbyte order = 0\n"
            f"wavelength = {{{', '.join(str(w) for w in wavelengths)}}}\n{extra}"
        )
        (tmp_path / "scene.hdr").write_text(header)
        values.astype("<f4").tofile(tmp_path / "scene.img")
        return tmp_path / "scene.hdr"

    def test_envi_bsq(self, tmp_path):
        values = np.random.default_rng(0).uniform(size=(5, 3, 4)).astype(np.float32)
        path = self._write_envi(tmp_path, values, [400, 500, 600, 700, 800])
        cube = read_cube(path)
        np.testing.assert_allclose(cube.values, values)
        np.testing.assert_array_equal(cube.wavelengths, [400, 500, 600, 700, 800])

    def test_envi_micrometers(self, tmp_path):
        values = np.ones((2, 2, 2), dtype=np.float32)
        path = self._write_envi(tmp_path, values, [0.45, 0.65], "wavelength units = Micrometers\n")
        np.testing.assert_allclose(read_cube(path).wavelengths, [450.0, 650.0])

    def test_envi_unsupported_interleave(self, tmp_path):
        values = np.ones((2, 2, 2), dtype=np.float32)
        path = self._write_envi(tmp_path, values, [450, 650])
        path.write_text(path.read_text().replace("interleave = bsq", "interleave = bil"))
        with pytest.raises(CubeFormatError):
            read_cube(path)

    def test_list_cube_files_sorted(self, tmp_path, small_cube):
        for name in ("b.hsc", "a.hsc"):
            write_cube(small_cube, tmp_path / name)
        (tmp_path / "notes.txt").write_text("x")
        assert [p.name for p in list_cube_files(tmp_path)] == ["a.hsc", "b.hsc"]
        with pytest.raises(FileNotFoundError):
            list_cube_files(tmp_path / "missing")


class TestAlignment:
    def test_affine_spectra_are_exact(self):
        rng = np.random.default_rng(1)
        source = np.linspace(380.0, 1020.0, 65)
        a = rng.uniform(0.1, 0.3, size=(6, 5))
        b = rng.uniform(0.1, 0.5, size=(6, 5))
        t = (source - 400.0) / 600.0
        cube = HsiCube(a[None] + b[None] * t[:, None, None], source)

        aligned = align_wavelengths(cube)
        expected = a[None] + b[None] * ((DEFAULT_WAVELENGTHS - 400.0) / 600.0)[:, None, None]
        assert aligned.bands == 48
        np.testing.assert_allclose(aligned.values, expected, atol=1e-7, rtol=0)

    def test_grid_point_returns_source_band(self, cube):
        aligned = align_wavelengths(cube, cube.wavelengths[[3, 10]])
        np.testing.assert_array_equal(aligned.values, cube.values[[3, 10]])

    def test_out_of_range_rejected(self):
        cube = random_cube(bands=10, wavelengths=np.linspace(450.0, 900.0, 10))
        with pytest.raises(ValueError):
            align_wavelengths(cube)

    def test_partial_coverage_flag(self):
        cube = random_cube(bands=10, wavelengths=np.linspace(450.0, 900.0, 10))
        aligned = align_to_default_grid(cube)
        assert aligned.meta["partial_coverage"] is True
        assert aligned.wavelengths[0] >= 450.0 and aligned.wavelengths[-1] <= 900.0

    def test_full_coverage_has_no_flag(self, cube):
        assert "partial_coverage" not in align_to_default_grid(cube).meta


class TestPatches:
    def test_table_sized_scene_patch_count(self):
        grid = patch_grid(2517, 2335, 256, 128)
        assert len(grid) == 306

    def test_crop_patches_on_large_fixture(self):
        cube = HsiCube(np.zeros((1, 2517, 2335), dtype=np.float32), [550.0])
        grid, patches = crop_patches(cube, 256, 128)
        assert len(patches) == 306
        assert patches[-1].meta["origin"] == [17 * 128, 16 * 128]

    def test_patch_too_large(self, small_cube):
        with pytest.raises(ValueError):
            crop_patches(small_cube, 16, 8)

    @settings(max_examples=20, deadline=None)
    @given(size=st.integers(2, 8), stride=st.integers(1, 8))
    def test_reassemble_covers_cropped_region(self, size, stride):
        cube = random_cube(bands=2, height=12, width=10, seed=size * 10 + stride)
        grid, patches = crop_patches(cube, size, stride)
        rebuilt = reassemble_patches(grid, patches)
        h, w = rebuilt.shape[1:]
        np.testing.assert_array_equal(rebuilt, cube.values[:, :h, :w])


class TestRgb:
    def test_default_grid_bands(self, cube):
        rgb = extract_rgb(cube)
        assert rgb.band_indices == (20, 12, 4)
        np.testing.assert_array_equal(rgb.values[0], cube.values[20])

    def test_tie_prefers_lower_index(self):
        assert nearest_band(np.array([540.0, 560.0]), 550.0) == 0

    def test_coverage_gap(self):
        cube = random_cube(bands=10, wavelengths=np.linspace(500.0, 1000.0, 10))
        with pytest.raises(ValueError):
            extract_rgb(cube)

    def test_cube_round_trip_keeps_order(self, cube):
        rgb = extract_rgb(cube)
        as_cube = rgb.to_cube()
        assert list(as_cube.wavelengths) == sorted(as_cube.wavelengths)
        back = RgbImage.from_cube(as_cube)
        np.testing.assert_array_equal(back.values, rgb.values)
        assert back.band_indices == rgb.band_indices


class TestDegradation:
    def test_zero_sigma_is_identity(self, cube):
        assert degrade(cube, DegradationSpec("gaussian_noise", sigma=0.0)) is cube

    def test_noise_statistics(self):
        flat = HsiCube(np.full((4, 64, 64), 0.5), np.linspace(400.0, 1000.0, 4))
        noisy = degrade(flat, DegradationSpec("gaussian_noise", sigma=0.2, seed=3, clip=False))
        residual = noisy.values - 0.5
        n = residual.size
        assert abs(residual.mean()) < 4 * 0.2 / np.sqrt(n)
        assert residual.std() == pytest.approx(0.2, rel=0.03)

    def test_noise_is_seeded_and_clipped(self, cube):
        spec = DegradationSpec("gaussian_noise", sigma=0.5, seed=9)
        a, b = degrade(cube, spec), degrade(cube, spec)
        assert np.array_equal(a.values, b.values)
        assert a.values.min() >= 0.0 and a.values.max() <= 1.0

    def test_downsample_area_mean(self):
        values = np.arange(16, dtype=np.float64).reshape(1, 4, 4)
        out = degrade(HsiCube(values, [550.0]), DegradationSpec("downsample", factor=2))
        np.testing.assert_array_equal(out.values, [[[2.5, 4.5], [10.5, 12.5]]])

    def test_downsample_requires_divisible_extent(self):
        cube = random_cube(bands=2, height=6, width=8)
        with pytest.raises(ValueError):
            degrade(cube, DegradationSpec("downsample", factor=4))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            DegradationSpec("blur")
        with pytest.raises(ValueError):
            DegradationSpec("downsample", factor=3)
