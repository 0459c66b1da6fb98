"""Image construction, I/O, patches, and the PSNR/SSIM metrics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image as PILImage

from m2sdf import imagecore
from m2sdf.imagecore import PatchSpec


def write_pgm(path, data, maxval=255):
    data = np.asarray(data)
    header = f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode()
    body = data.astype(">u2" if maxval > 255 else "u1").tobytes()
    path.write_bytes(header + body)


class TestImageConstruction:
    def test_rejects_out_of_range_without_clamp(self):
        with pytest.raises(ValueError, match="clamp"):
            imagecore.image([[0.0, 1.5]])

    def test_clamp_opt_in(self):
        img = imagecore.image([[-0.5, 1.5]], clamp=True)
        assert img.tolist() == [[0.0, 1.0]]

    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="finite"):
            imagecore.image([[0.0, float("nan")]], clamp=True)

    def test_rejects_non_2d(self):
        with pytest.raises(ValueError):
            imagecore.image(np.zeros((2, 2, 3)))


class TestLoadImage:
    def test_pgm_all_255_is_all_ones(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.full((4, 5), 255, np.uint8))
        img = imagecore.load_image(tmp_path / "a.pgm")
        assert img.shape == (4, 5)
        assert np.all(img == 1.0)

    def test_pgm_all_zero_is_all_zeros(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((3, 3), np.uint8))
        assert np.all(imagecore.load_image(tmp_path / "a.pgm") == 0.0)

    def test_pgm_with_comment_and_custom_maxval(self, tmp_path):
        p = tmp_path / "c.pgm"
        p.write_bytes(b"P5\n# a comment\n2 1\n1000\n" + np.array([[500, 1000]], ">u2").tobytes())
        img = imagecore.load_image(p)
        np.testing.assert_allclose(img, [[0.5, 1.0]], atol=1e-6)

    def test_16bit_png_scaling(self, tmp_path):
        data = np.array([[32768, 0], [65535, 1]], dtype=np.uint16)
        PILImage.fromarray(data, mode="I;16").save(tmp_path / "a.png")
        img = imagecore.load_image(tmp_path / "a.png")
        np.testing.assert_allclose(img[0, 0], 32768 / 65535, atol=1e-7)
        assert img[0, 1] == 0.0
        assert img[1, 0] == 1.0

    def test_rgb_png_luma_conversion(self, tmp_path):
        rgb = np.zeros((2, 2, 3), np.uint8)
        rgb[..., 0] = 100  # pure red
        PILImage.fromarray(rgb, mode="RGB").save(tmp_path / "rgb.png")
        img = imagecore.load_image(tmp_path / "rgb.png")
        np.testing.assert_allclose(img, 0.299 * 100 / 255, atol=1e-6)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            imagecore.load_image(tmp_path / "nope.png")

    def test_unsupported_format_names_it(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"this is not an image")
        with pytest.raises(imagecore.FormatError):
            imagecore.load_image(p)

    def test_truncated_pgm(self, tmp_path):
        p = tmp_path / "trunc.pgm"
        p.write_bytes(b"P5\n4 4\n255\n\x00\x01")
        with pytest.raises(imagecore.FormatError, match="truncated"):
            imagecore.load_image(p)


class TestSaveImage:
    def test_all_zero_round_trip(self, tmp_path):
        img = imagecore.image(np.zeros((5, 5)))
        imagecore.save_image(img, tmp_path / "z.png")
        assert np.all(imagecore.load_image(tmp_path / "z.png") == 0.0)

    def test_half_intensity_rounds_up_to_128(self, tmp_path):
        imagecore.save_image(imagecore.image(np.full((2, 2), 0.5)), tmp_path / "h.png")
        with PILImage.open(tmp_path / "h.png") as im:
            assert np.asarray(im)[0, 0] == 128  # round(127.5) half-up

    def test_round_trip_quantization_bound(self, tmp_path, rng):
        img = imagecore.image(rng.uniform(0, 1, (16, 16)))
        imagecore.save_image(img, tmp_path / "r.png")
        back = imagecore.load_image(tmp_path / "r.png")
        assert np.max(np.abs(back.astype(np.float64) - img.astype(np.float64))) <= 0.5 / 255 + 1e-9

    def test_missing_parent_dir(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            imagecore.save_image(imagecore.image(np.zeros((2, 2))), tmp_path / "no" / "x.png")

    def test_rewrite_is_byte_identical(self, tmp_path, rng):
        img = imagecore.image(rng.uniform(0, 1, (16, 16)))
        imagecore.save_image(img, tmp_path / "a.png")
        imagecore.save_image(img, tmp_path / "b.png")
        assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


class TestPatches:
    def test_128_grid_gives_4(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (128, 128)))
        patches = imagecore.to_patches(img, PatchSpec(size=64, stride=64))
        assert len(patches) == 4
        assert all(p.shape == (64, 64) for p in patches)

    def test_full_size_single_patch(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (33, 47)))
        patches = imagecore.to_patches(img, PatchSpec(size=33, stride=1))
        assert len(patches) == 15  # 1 x (47-33+1)
        np.testing.assert_array_equal(patches[0], img[:, :33])

    def test_trailing_pixels_dropped(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (65, 65)))
        patches = imagecore.to_patches(img, PatchSpec(size=64, stride=64))
        assert len(patches) == 1

    def test_oversize_patch_rejected(self):
        with pytest.raises(ValueError, match="exceeds"):
            imagecore.to_patches(imagecore.image(np.zeros((8, 8))), PatchSpec(size=9, stride=1))

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PatchSpec(size=4, stride=5)
        with pytest.raises(ValueError):
            PatchSpec(size=0, stride=1)

    def test_reassembly_reproduces_covered_region(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (96, 64)))
        patches = imagecore.to_patches(img, PatchSpec(size=32, stride=32))
        tiled = imagecore.tile_patches(patches, rows=3, cols=2)
        np.testing.assert_array_equal(tiled, img)


class TestPsnr:
    def test_self_comparison_hits_cap(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (16, 16)))
        assert imagecore.psnr(img, img) == 100.0

    def test_constant_offset_closed_form(self):
        a = imagecore.image(np.zeros((32, 32)))
        b = imagecore.image(np.full((32, 32), 10 / 255))
        # closed form on the stored (float32) intensity
        d = float(b[0, 0])
        expected = 10 * math.log10(1.0 / d**2)
        assert abs(imagecore.psnr(a, b) - expected) < 1e-9
        assert abs(expected - 10 * math.log10(255**2 / 100)) < 1e-5

    def test_gaussian_pair_analytic_expectation(self):
        # clamp-free synthetic pair, sigma = 25/255, >= 1e6 pixels
        rng = np.random.default_rng(42)
        clean = np.full((1000, 1000), 0.5, dtype=np.float64)
        noisy = clean + rng.normal(0, 25 / 255, clean.shape)
        expected = 10 * math.log10(255**2 / 625)
        got = 10 * math.log10(1.0 / np.mean((noisy - clean) ** 2))
        assert abs(got - expected) < 0.1
        # and the library metric agrees on the clipped-to-range version
        a = imagecore.image(clean)
        b = imagecore.image(noisy, clamp=True)
        assert abs(imagecore.psnr(a, b) - expected) < 0.1

    def test_symmetry_exact(self, rng):
        a = imagecore.image(rng.uniform(0, 1, (16, 16)))
        b = imagecore.image(rng.uniform(0, 1, (16, 16)))
        assert imagecore.psnr(a, b) == imagecore.psnr(b, a)

    def test_strictly_decreasing_in_mse(self):
        base = imagecore.image(np.zeros((16, 16)))
        values = [imagecore.psnr(base, imagecore.image(np.full((16, 16), c))) for c in (0.1, 0.2, 0.3, 0.4)]
        assert all(x > y for x, y in zip(values, values[1:]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            imagecore.psnr(imagecore.image(np.zeros((4, 4))), imagecore.image(np.zeros((4, 5))))


class TestSsim:
    def test_self_comparison_is_one(self, rng):
        img = imagecore.image(rng.uniform(0, 1, (32, 32)))
        assert abs(imagecore.ssim(img, img) - 1.0) < 1e-9

    def test_constant_images_closed_form(self):
        c1, c2 = 0.3, 0.6
        a = imagecore.image(np.full((16, 16), c1))
        b = imagecore.image(np.full((16, 16), c2))
        C1 = 0.01**2
        expected = (2 * c1 * c2 + C1) / (c1**2 + c2**2 + C1)  # variance terms vanish
        assert abs(imagecore.ssim(a, b) - expected) < 1e-6

    def test_independent_noise_scores_near_zero(self):
        for s in range(20):
            rng = np.random.default_rng(1000 + s)
            a = imagecore.image(rng.uniform(0, 1, (64, 64)))
            b = imagecore.image(rng.uniform(0, 1, (64, 64)))
            assert abs(imagecore.ssim(a, b)) < 0.1

    def test_symmetry(self, rng):
        a = imagecore.image(rng.uniform(0, 1, (24, 24)))
        b = imagecore.image(rng.uniform(0, 1, (24, 24)))
        assert abs(imagecore.ssim(a, b) - imagecore.ssim(b, a)) < 1e-9

    def test_too_small_rejected(self):
        small = imagecore.image(np.zeros((7, 12)))
        with pytest.raises(ValueError, match="at least"):
            imagecore.ssim(small, small)


@settings(max_examples=25, deadline=None)
@given(
    st.integers(1, 30).filter(lambda h: True),
    st.integers(1, 30),
    st.floats(0.0, 1.0),
    st.floats(0.0, 1.0),
)
def test_psnr_constant_pair_property(h, w, c1, c2):
    """psnr matches the closed form for any constant pair, symmetric both ways."""
    a = imagecore.image(np.full((h, w), np.float32(c1), dtype=np.float32))
    b = imagecore.image(np.full((h, w), np.float32(c2), dtype=np.float32))
    mse = float((a[0, 0].astype(np.float64) - b[0, 0].astype(np.float64)) ** 2)
    expected = 100.0 if mse == 0 else min(10 * math.log10(1 / mse), 100.0)
    assert abs(imagecore.psnr(a, b) - expected) < 1e-9
    assert imagecore.psnr(a, b) == imagecore.psnr(b, a)
