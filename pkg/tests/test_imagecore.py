"""Image container, phantom rendering, noise model, bicubic resize, file I/O."""

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from bsonet.imagecore import (BarGroup, Crack, Disk, FileFormatError, Image,
                              NoiseConfig, Rectangle, SceneSpec,
                              ValidationError, apply_noise, generate_phantom,
                              random_scene, read_image, read_png16,
                              read_raw16, resize_bicubic, resize_bicubic_t,
                              write_image, write_png16, write_raw16)
from conftest import random_image


class TestImage:
    def test_rejects_non_2d(self):
        with pytest.raises(ValidationError):
            Image(np.zeros((2, 2, 2)))
        with pytest.raises(ValidationError):
            Image(np.zeros(4))

    def test_rejects_empty_and_nan(self):
        with pytest.raises(ValidationError):
            Image(np.zeros((0, 3)))
        with pytest.raises(ValidationError):
            Image(np.array([[1.0, np.nan]]))
        with pytest.raises(ValidationError):
            Image(np.array([[np.inf, 1.0]]))

    def test_coerces_to_float64(self):
        img = Image(np.array([[1, 2], [3, 4]], dtype=np.uint16))
        assert img.pixels.dtype == np.float64
        assert img.height == 2 and img.width == 2

    def test_filled(self):
        img = Image.filled(3, 5, 1000.0)
        assert img.pixels.shape == (3, 5)
        assert np.all(img.pixels == 1000.0)

    def test_to_u16_clamps_and_rounds(self):
        img = Image(np.array([[-5.0, 70000.0, 99.5, 100.5]]))
        out = img.to_u16()
        assert out.dtype == np.uint16
        # rint rounds halves to even
        assert out.tolist() == [[0, 65535, 100, 100]]


class TestPrimitives:
    def test_disk_radius_zero_is_one_pixel(self):
        img = generate_phantom(SceneSpec(64, 64, 0.0, (
            Disk(center=(32.0, 32.0), radius=0.0, intensity=100.0),)))
        assert np.count_nonzero(img.pixels) == 1
        assert img.pixels[32, 32] == 100.0

    def test_disk_radius_inclusive(self):
        img = generate_phantom(SceneSpec(9, 9, 0.0, (
            Disk(center=(4.0, 4.0), radius=1.0, intensity=1.0),)))
        # center plus the four axis neighbors at distance exactly 1
        assert np.count_nonzero(img.pixels) == 5

    def test_rectangle_extent(self):
        img = generate_phantom(SceneSpec(10, 10, 0.0, (
            Rectangle(corner=(2, 3), size=(4, 5), intensity=7.0),)))
        assert np.count_nonzero(img.pixels) == 20
        assert np.all(img.pixels[2:6, 3:8] == 7.0)

    def test_bar_group_layout(self):
        img = generate_phantom(SceneSpec(64, 64, 1000.0, (
            BarGroup(origin=(10, 10), bar_width_px=2, gap_px=2, count=3,
                     intensity=30000.0),)))
        # default bar height is 5x the bar width
        for cols in ((10, 12), (14, 16), (18, 20)):
            assert np.all(img.pixels[10:20, cols[0]:cols[1]] == 30000.0)
        for cols in ((12, 14), (16, 18)):
            assert np.all(img.pixels[10:20, cols[0]:cols[1]] == 1000.0)
        assert np.all(img.pixels[:10, :] == 1000.0)
        assert np.all(img.pixels[20:, :] == 1000.0)

    def test_crack_covers_polyline(self):
        img = generate_phantom(SceneSpec(32, 32, 0.0, (
            Crack(polyline=((5.0, 5.0), (5.0, 20.0)), thickness_px=1.0,
                  intensity=9.0),)))
        assert np.all(img.pixels[5, 5:21] == 9.0)
        assert np.count_nonzero(img.pixels) >= 16


class TestSceneSpec:
    def test_empty_scene_is_background(self):
        img = generate_phantom(SceneSpec(64, 64, 1000.0))
        assert np.all(img.pixels == 1000.0)

    def test_paint_order_later_wins(self):
        img = generate_phantom(SceneSpec(16, 16, 0.0, (
            Rectangle(corner=(0, 0), size=(16, 16), intensity=10.0),
            Rectangle(corner=(4, 4), size=(4, 4), intensity=20.0))))
        assert img.pixels[5, 5] == 20.0
        assert img.pixels[0, 0] == 10.0

    def test_values_are_exact_intensities(self):
        img = generate_phantom(SceneSpec(32, 32, 1000.0, (
            Disk(center=(10.0, 10.0), radius=4.0, intensity=30000.0),)))
        assert set(np.unique(img.pixels)) == {1000.0, 30000.0}

    def test_out_of_canvas_names_primitive_index(self):
        spec = SceneSpec(16, 16, 0.0, (
            Disk(center=(8.0, 8.0), radius=2.0, intensity=1.0),
            Rectangle(corner=(14, 14), size=(5, 5), intensity=1.0)))
        with pytest.raises(ValidationError, match="primitive 1"):
            generate_phantom(spec)

    def test_intensity_range_checked(self):
        spec = SceneSpec(16, 16, 0.0, (
            Disk(center=(8.0, 8.0), radius=2.0, intensity=70000.0),))
        with pytest.raises(ValidationError):
            generate_phantom(spec)

    def test_dict_round_trip(self):
        spec = SceneSpec(32, 48, 500.0, (
            Disk(center=(10.0, 12.0), radius=3.0, intensity=2000.0),
            BarGroup(origin=(4, 4), bar_width_px=1, gap_px=2, count=3,
                     intensity=4000.0),
            Crack(polyline=((1.0, 1.0), (8.0, 20.0)), thickness_px=1.5,
                  intensity=100.0)))
        assert SceneSpec.from_dict(spec.to_dict()) == spec

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValidationError, match="unknown primitive kind"):
            SceneSpec.from_dict({"height": 8, "width": 8, "background": 0.0,
                                 "primitives": [{"kind": "triangle"}]})

    def test_random_scene_always_valid(self):
        for seed in range(40):
            scene = random_scene(np.random.default_rng(seed), 64, 64)
            scene.validate()
            assert 2 <= len(scene.primitives) <= 5
            img = generate_phantom(scene)
            assert img.height == 64 and img.width == 64


class TestApplyNoise:
    def test_all_zero_is_identity(self, rng):
        img = random_image(rng, 20, 30)
        out = apply_noise(img, NoiseConfig())
        assert np.array_equal(out.pixels, img.pixels)

    def test_gaussian_statistics(self):
        img = Image.filled(512, 512, 32768.0)
        out = apply_noise(img, NoiseConfig(gaussian_sigma=400.0, seed=5))
        delta = out.pixels - img.pixels
        assert abs(delta.mean()) < 2.0
        assert abs(delta.std() - 400.0) < 0.04 * 400.0

    def test_impulse_count_and_values(self):
        img = Image.filled(1024, 1024, 32768.0)
        out = apply_noise(img, NoiseConfig(impulse_fraction=0.05, seed=9))
        changed = out.pixels != img.pixels
        n = img.pixels.size
        std = np.sqrt(n * 0.05 * 0.95)
        assert abs(changed.sum() - 0.05 * n) <= 3 * std
        assert set(np.unique(out.pixels[changed])) <= {0.0, 65535.0}
        salt = np.count_nonzero(out.pixels[changed] == 65535.0)
        assert abs(salt - changed.sum() / 2) <= 3 * np.sqrt(changed.sum() * 0.25)

    def test_poisson_scaling(self):
        img = Image.filled(256, 256, 10000.0)
        out = apply_noise(img, NoiseConfig(poisson_scale=100.0, seed=3))
        assert abs(out.pixels.mean() - 10000.0) < 30.0
        assert abs(out.pixels.std() - 1000.0) < 50.0
        assert np.all(out.pixels % 100.0 == 0.0)

    def test_clamped_to_range(self):
        img = Image.filled(64, 64, 65000.0)
        out = apply_noise(img, NoiseConfig(gaussian_sigma=5000.0, seed=1))
        assert out.pixels.max() <= 65535.0 and out.pixels.min() >= 0.0

    def test_seed_determinism(self, rng):
        img = random_image(rng, 32, 32)
        cfg = NoiseConfig(gaussian_sigma=300.0, impulse_fraction=0.02,
                          poisson_scale=50.0, seed=77)
        a = apply_noise(img, cfg)
        b = apply_noise(img, cfg)
        assert np.array_equal(a.pixels, b.pixels)
        c = apply_noise(img, NoiseConfig(gaussian_sigma=300.0, seed=78))
        assert not np.array_equal(a.pixels, c.pixels)

    def test_config_validation(self):
        with pytest.raises(ValidationError):
            NoiseConfig(gaussian_sigma=-1.0)
        with pytest.raises(ValidationError):
            NoiseConfig(impulse_fraction=1.5)
        with pytest.raises(ValidationError):
            NoiseConfig(poisson_scale=-0.1)


def _cubic(t: float) -> float:
    t = abs(t)
    if t <= 1.0:
        return (1.5 * t - 2.5) * t * t + 1.0
    if t < 2.0:
        return ((-0.5 * t + 2.5) * t - 4.0) * t + 2.0
    return 0.0


def _naive_bicubic(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct kernel-formula evaluation, one output pixel at a time."""
    in_h, in_w = pixels.shape
    out = np.zeros((out_h, out_w))
    for oy in range(out_h):
        sy = (oy + 0.5) * in_h / out_h - 0.5
        by = int(np.floor(sy))
        for ox in range(out_w):
            sx = (ox + 0.5) * in_w / out_w - 0.5
            bx = int(np.floor(sx))
            acc = 0.0
            for m in range(-1, 3):
                wy = _cubic(sy - (by + m))
                yy = min(max(by + m, 0), in_h - 1)
                for n in range(-1, 3):
                    wx = _cubic(sx - (bx + n))
                    xx = min(max(bx + n, 0), in_w - 1)
                    acc += wy * wx * pixels[yy, xx]
            out[oy, ox] = acc
    return out


class TestResizeBicubic:
    @given(st.integers(1, 12), st.integers(1, 12))
    def test_same_size_is_pixel_identical(self, h, w):
        rng = np.random.default_rng(h * 100 + w)
        img = Image(rng.uniform(0, 65535, size=(h, w)))
        out = resize_bicubic(img, h, w)
        assert np.array_equal(out.pixels, img.pixels)

    def test_constant_preserved(self):
        img = Image.filled(13, 7, 1234.5)
        for th, tw in ((26, 14), (5, 3), (13, 7), (40, 2)):
            out = resize_bicubic(img, th, tw)
            assert out.pixels.shape == (th, tw)
            assert np.allclose(out.pixels, 1234.5, rtol=0, atol=1e-9)

    def test_matches_naive_kernel_evaluation(self, rng):
        for in_h, in_w, out_h, out_w in ((4, 4, 8, 8), (6, 5, 3, 9), (7, 9, 11, 4)):
            img = random_image(rng, in_h, in_w)
            ours = resize_bicubic(img, out_h, out_w)
            oracle = _naive_bicubic(img.pixels, out_h, out_w)
            np.testing.assert_allclose(ours.pixels, oracle, rtol=0, atol=1e-9)

    def test_ramp_upsample_probe_pixels(self):
        ramp = Image(np.arange(16, dtype=np.float64).reshape(4, 4))
        out = resize_bicubic(ramp, 8, 8)
        oracle = _naive_bicubic(ramp.pixels, 8, 8)
        for (r, c) in ((0, 0), (3, 5), (7, 7)):
            assert out.pixels[r, c] == pytest.approx(oracle[r, c], abs=1e-12)

    def test_rejects_bad_target(self):
        img = Image.filled(4, 4, 0.0)
        with pytest.raises(ValidationError):
            resize_bicubic(img, 0, 4)

    def test_tensor_path_is_linear_and_differentiable(self):
        x = torch.arange(16, dtype=torch.float64).reshape(4, 4)
        x.requires_grad_(True)
        y = resize_bicubic_t(x, 7, 5)
        y.sum().backward()
        assert x.grad is not None
        a = resize_bicubic_t(x.detach() * 2.0, 7, 5)
        assert torch.allclose(a, y.detach() * 2.0, rtol=0, atol=1e-12)


class TestFileIO:
    def test_raw16_golden_bytes(self, tmp_path):
        path = tmp_path / "one.bsr"
        write_raw16(Image(np.array([[0x1234]], dtype=np.float64)), path)
        assert path.read_bytes() == bytes.fromhex("42535231" + "00000001" * 2 + "3412")

    def test_raw16_round_trip(self, tmp_path, rng):
        img = Image(rng.integers(0, 65536, size=(17, 23)).astype(np.float64))
        write_raw16(img, tmp_path / "a.bsr")
        back = read_raw16(tmp_path / "a.bsr")
        assert np.array_equal(back.pixels, img.pixels)

    def test_raw16_truncated(self, tmp_path):
        path = tmp_path / "t.bsr"
        write_raw16(Image.filled(4, 4, 5.0), path)
        data = path.read_bytes()
        path.write_bytes(data[:-3])
        with pytest.raises(FileFormatError, match="truncated"):
            read_raw16(path)
        path.write_bytes(data + b"\x00\x00")
        with pytest.raises(FileFormatError, match="truncated"):
            read_raw16(path)

    def test_raw16_bad_magic(self, tmp_path):
        path = tmp_path / "m.bsr"
        write_raw16(Image.filled(2, 2, 5.0), path)
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FileFormatError, match="magic"):
            read_raw16(path)

    def test_png16_round_trip(self, tmp_path, rng):
        img = Image(rng.integers(0, 65536, size=(9, 14)).astype(np.float64))
        write_png16(img, tmp_path / "a.png")
        back = read_png16(tmp_path / "a.png")
        assert np.array_equal(back.pixels, img.pixels)

    def test_png16_rejects_8bit(self, tmp_path):
        from PIL import Image as PILImage
        PILImage.fromarray(np.zeros((4, 4), dtype=np.uint8)).save(tmp_path / "x.png")
        with pytest.raises(FileFormatError):
            read_png16(tmp_path / "x.png")

    def test_dispatch_and_unknown_suffix(self, tmp_path, rng):
        img = Image(rng.integers(0, 65536, size=(6, 6)).astype(np.float64))
        for name in ("a.png", "a.bsr"):
            write_image(img, tmp_path / name)
            assert np.array_equal(read_image(tmp_path / name).pixels, img.pixels)
        with pytest.raises(FileFormatError):
            write_image(img, tmp_path / "a.tiff")
        with pytest.raises(FileFormatError):
            read_image(tmp_path / "a.tiff")

    @given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2 ** 32 - 1))
    def test_round_trip_property(self, h, w, seed):
        import tempfile
        rng = np.random.default_rng(seed)
        img = Image(rng.integers(0, 65536, size=(h, w)).astype(np.float64))
        with tempfile.TemporaryDirectory() as folder:
            write_raw16(img, f"{folder}/x.bsr")
            assert np.array_equal(read_raw16(f"{folder}/x.bsr").pixels, img.pixels)
