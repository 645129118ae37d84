import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from a2fsr import data as D
from a2fsr.errors import DatasetError, EvaluationError, ImageIOError


def natural_image(size=96):
    from skimage import data as skdata

    img = skdata.astronaut()
    return np.ascontiguousarray(img[100:100 + size, 180:180 + size])


def ssim_windows_oracle(a, b):
    """Per-window double loop over every valid 11x11 position."""
    size, sigma = 11, 1.5
    xs = np.arange(size) - 5
    g1 = np.exp(-(xs ** 2) / (2 * sigma ** 2))
    win = np.outer(g1, g1)
    win /= win.sum()
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    vals = []
    for y in range(a.shape[0] - size + 1):
        for x in range(a.shape[1] - size + 1):
            pa = a[y:y + size, x:x + size]
            pb = b[y:y + size, x:x + size]
            ma, mb = (win * pa).sum(), (win * pb).sum()
            va = (win * (pa - ma) ** 2).sum()
            vb = (win * (pb - mb) ** 2).sum()
            cov = (win * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma ** 2 + mb ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


class TestPng:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        for shape in [(7, 9, 3), (5, 4)]:
            arr = rng.integers(0, 256, shape, dtype=np.uint8)
            path = tmp_path / f"img{len(shape)}.png"
            D.save_png(D.ImagePlane(arr), path)
            back = D.load_png(path)
            np.testing.assert_array_equal(back.data, arr)
            assert (back.height, back.width) == shape[:2]

    def test_16bit_rejected(self, tmp_path):
        path = tmp_path / "deep.png"
        Image.fromarray(np.full((4, 4), 40000, np.uint16)).save(path)
        with pytest.raises(ImageIOError, match="bit depth"):
            D.load_png(path)

    def test_corrupt(self, tmp_path):
        path = tmp_path / "bad.png"
        path.write_bytes(b"\x89PNG\r\n\x1a\nnope")
        with pytest.raises(ImageIOError):
            D.load_png(path)

    def test_not_png(self, tmp_path):
        path = tmp_path / "x.jpg"
        Image.fromarray(np.zeros((4, 4, 3), np.uint8)).save(path, format="JPEG")
        with pytest.raises(ImageIOError, match="not a PNG"):
            D.load_png(path)


class TestColor:
    def rgb(self, v):
        return D.ImagePlane(np.full((1, 1, 3), v), "RGB", 1.0)

    def test_constants(self):
        assert D.rgb_to_y(self.rgb(0.0)).data.item() == pytest.approx(16.0, abs=1e-12)
        assert D.rgb_to_y(self.rgb(1.0)).data.item() == pytest.approx(235.0, abs=1e-9)
        assert D.rgb_to_y(self.rgb(0.5)).data.item() == pytest.approx(125.5, abs=1e-9)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(0, 1), st.tuples(*[st.floats(0, 1)] * 3))
    def test_affine(self, alpha, rgb):
        x = D.ImagePlane(np.array(rgb).reshape(1, 1, 3), "RGB", 1.0)
        ax = D.ImagePlane(alpha * np.array(rgb).reshape(1, 1, 3), "RGB", 1.0)
        lhs = D.rgb_to_y(ax).data.item() - 16
        assert lhs == pytest.approx(alpha * (D.rgb_to_y(x).data.item() - 16), abs=1e-6)

    def test_quantize_half_away(self):
        np.testing.assert_array_equal(D.quantize([0.5, 1.5, 2.49, -3, 300]), [1, 2, 2, 0, 255])


class TestBicubic:
    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 1, exclude_max=True))
    def test_partition_of_unity(self, phase):
        taps = np.arange(-2, 3) + phase
        assert D.cubic(taps).sum() == pytest.approx(1.0, abs=1e-9)

    def test_identity(self):
        img = np.random.default_rng(1).random((9, 7, 3))
        np.testing.assert_allclose(D.bicubic_resize(img, (9, 7)), img, atol=1e-6)

    @pytest.mark.parametrize("size", [(4, 5), (20, 30), (7, 3)])
    def test_constant(self, size):
        img = np.full((10, 12), 3.25)
        np.testing.assert_allclose(D.bicubic_resize(img, size), 3.25, atol=1e-9)

    def test_downscale_ramp_matches_kernel_sum(self):
        # direct weighted sum from the kernel definition, antialiased /2
        ramp = np.arange(16, dtype=np.float64) ** 1.5
        out = D.bicubic_resize(ramp[None, :], (1, 8))[0]
        for j in range(8):
            centre = (j + 1) * 2 + 0.5 * (1 - 2) - 1  # 0-based source coordinate
            acc, norm = 0.0, 0.0
            for i in range(-8, 24):
                d = centre - i
                wgt = 0.5 * D.cubic(0.5 * d)
                acc += wgt * ramp[min(max(i, 0), 15)]
                norm += wgt
            assert out[j] == pytest.approx(acc / norm, abs=1e-9)

    def test_plain_upscale_kernel_sum(self):
        sig = np.random.default_rng(2).random(6)
        out = D.bicubic_resize(sig[None, :], (1, 12), antialias=False)[0]
        for j in range(12):
            centre = (j + 1) / 2 + 0.5 * (1 - 0.5) - 1
            acc = sum(D.cubic(centre - i) * sig[min(max(i, 0), 5)] for i in range(-3, 10))
            assert out[j] == pytest.approx(acc, abs=1e-9)

    def test_uint8_plane(self):
        plane = D.ImagePlane(natural_image(32))
        small = D.bicubic_resize(plane, (16, 16))
        assert small.is_8bit and small.data.shape == (16, 16, 3)

    def test_rejects_bad_size(self):
        with pytest.raises(ValueError):
            D.bicubic_resize(np.zeros((4, 4)), (0, 2))


class TestPsnr:
    def test_identical_cap(self):
        img = natural_image(32)
        assert D.psnr_y(img, img, 2) == D.PSNR_CAP

    def test_full_range_zero_db(self):
        a = D.ImagePlane(np.zeros((8, 8), np.uint8), "Y")
        b = D.ImagePlane(np.full((8, 8), 255, np.uint8), "Y")
        assert abs(D.psnr_y(a, b)) < 1e-6

    def test_one_level(self):
        a = D.ImagePlane(np.full((8, 8), 100, np.uint8), "Y")
        b = D.ImagePlane(np.full((8, 8), 101, np.uint8), "Y")
        assert abs(D.psnr_y(a, b) - 20 * math.log10(255)) < 1e-6
        assert D.psnr_y(a, b) == pytest.approx(48.13, abs=5e-3)

    def test_symmetric(self):
        rng = np.random.default_rng(3)
        a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        b = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
        assert D.psnr_y(a, b, 1) == D.psnr_y(b, a, 1)

    def test_decreases_with_noise(self):
        img = natural_image(64).astype(np.float64)
        rng = np.random.default_rng(4)
        noise = rng.uniform(-1, 1, img.shape)
        vals = [D.psnr_y(img.astype(np.uint8), D.quantize(img + amp * noise), 2) for amp in (1, 2, 4, 8)]
        assert all(x > y for x, y in zip(vals, vals[1:]))

    def test_shave_and_mismatch(self):
        a = np.zeros((10, 10), np.uint8)
        b = a.copy()
        b[0, :] = 255  # only in the border
        assert D.psnr_y(D.ImagePlane(a, "Y"), D.ImagePlane(b, "Y"), shave=1) == D.PSNR_CAP
        with pytest.raises(EvaluationError):
            D.psnr_y(a, np.zeros((10, 11), np.uint8))

    def test_float_rgb_is_quantized_first(self):
        img = natural_image(16)
        jitter = img / 255.0 + 0.4 / 255.0  # rounds back to the same 8-bit values
        assert D.psnr_y(D.ImagePlane(jitter, "RGB", 1.0), img) == D.PSNR_CAP


class TestSsim:
    def test_identical(self):
        img = natural_image(48)
        assert abs(D.ssim_y(img, img) - 1.0) < 1e-9

    def test_negative_pattern(self):
        yy, xx = np.mgrid[:48, :48]
        board = (((yy // 4) + (xx // 4)) % 2 * 255).astype(np.uint8)
        neg = (255 - board).astype(np.uint8)
        assert D.ssim_y(D.ImagePlane(board, "Y"), D.ImagePlane(neg, "Y")) < 0.1

    @pytest.mark.parametrize("seed", [0, 1])
    def test_matches_window_oracle(self, seed):
        rng = np.random.default_rng(seed)
        a = rng.integers(0, 256, (20, 23), dtype=np.uint8)
        b = np.clip(a.astype(int) + rng.integers(-30, 31, a.shape), 0, 255).astype(np.uint8)
        got = D.ssim_y(D.ImagePlane(a, "Y"), D.ImagePlane(b, "Y"))
        assert abs(got - ssim_windows_oracle(a.astype(float), b.astype(float))) < 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        a = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
        b = rng.integers(0, 256, (24, 24, 3), dtype=np.uint8)
        assert abs(D.ssim_y(a, b, 2) - D.ssim_y(b, a, 2)) < 1e-9

    def test_too_small(self):
        with pytest.raises(EvaluationError):
            D.ssim_y(np.zeros((12, 12), np.uint8), np.zeros((12, 12), np.uint8), shave=1)


class TestReport:
    def test_means(self):
        r = D.MetricsReport(2, 2, [D.ImageMetrics("a", 30.0, 0.9, 1.0), D.ImageMetrics("b", 31.0, 0.8, 3.0)])
        assert abs(r.mean_psnr - 30.5) < 1e-9
        assert abs(r.mean_ssim - 0.85) < 1e-9
        assert r.to_dict()["mean"]["ms"] == 2.0
        assert r.to_csv().splitlines()[0] == "name,psnr,ssim,ms"
        assert len(r.to_csv().splitlines()) == 4


class TestDataset:
    def write(self, path, arr):
        Image.fromarray(arr).save(path)

    def test_prepare(self, tmp_path):
        src = tmp_path / "src"
        src.mkdir()
        self.write(src / "a.png", np.zeros((99, 100, 3), np.uint8))
        self.write(src / "b.png", natural_image(64))
        (src / "broken.png").write_bytes(b"garbage")
        m = D.prepare_dataset(src, 2, tmp_path / "out")
        assert len(m.pairs) == 2 and len(m.skipped) == 1
        hr = D.load_png(tmp_path / "out/HR/a.png")
        lr = D.load_png(tmp_path / "out/X2/a.png")
        assert (hr.height, hr.width) == (98, 100)
        assert (lr.height, lr.width) == (49, 50)
        lines = m.path.read_text().splitlines()
        assert sum(not l.startswith("#") for l in lines) == 2
        assert any(l.startswith("# skipped") for l in lines)
        pairs = D.load_pairs(tmp_path / "out", 2)
        assert [p.name for p in pairs] == ["a", "b"]
        assert [p.name for p in D.load_pairs(m.path, 2)] == ["a", "b"]

    def test_bicubic_baseline_sane(self, tmp_path):
        pair = D.make_pair("astro", natural_image(96), 2)
        up = D.bicubic_resize(D.ImagePlane(pair.lr), pair.hr.shape[:2], antialias=False)
        val = D.psnr_y(up, pair.hr, 2)
        assert 20 < val < D.PSNR_CAP

    def test_empty_dir(self, tmp_path):
        with pytest.raises(DatasetError):
            D.prepare_dataset(tmp_path, 2, tmp_path / "out")

    def test_orphans(self, tmp_path):
        (tmp_path / "HR").mkdir()
        (tmp_path / "X2").mkdir()
        self.write(tmp_path / "HR/a.png", np.zeros((4, 4, 3), np.uint8))
        self.write(tmp_path / "X2/b.png", np.zeros((2, 2, 3), np.uint8))
        with pytest.raises(DatasetError) as exc:
            D.find_pairs(tmp_path, 2)
        assert len(exc.value.orphans) == 2


def test_tensor_image_roundtrip():
    img = natural_image(8)
    t = D.image_to_tensor(D.ImagePlane(img))
    assert t.shape == (1, 3, 8, 8)
    np.testing.assert_array_equal(D.tensor_to_image(t).data, img)
