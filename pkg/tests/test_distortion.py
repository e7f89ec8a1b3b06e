import numpy as np
import pytest

from siamrank.corpus import build_corpus, load_corpus, synthetic_references, write_corpus
from siamrank.distortion import (
    DEFAULT_LEVELS,
    KINDS,
    DistortionSpec,
    gaussian_blur,
    gaussian_noise,
    jpeg_proxy,
    jpeg_quant_table,
    psnr,
    synthesize_ranked_group,
    synthetic_reference,
    to_luminance,
)
from siamrank.pgm import PGMError, quantize8, read_pgm, write_pgm


@pytest.fixture(scope="module")
def photos():
    """Fixture scenes standing in for test photographs."""
    return [synthetic_reference(seed, size=96) for seed in (0, 1, 2)]


def nonincreasing(values):
    return all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


class TestBlur:
    def test_zero_sigma_identity(self, photos):
        out = gaussian_blur(photos[0], 0.0)
        assert out.tobytes() == photos[0].tobytes()

    @pytest.mark.parametrize("sigma", [0.5, 2.0, 7.0])
    def test_constant_unchanged(self, sigma):
        im = np.full((20, 31), 0.37)
        np.testing.assert_allclose(gaussian_blur(im, sigma), im, atol=1e-6)

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_blur(np.zeros((4, 4)), -1.0)

    def test_psnr_monotone(self, photos):
        for im in photos:
            assert nonincreasing([psnr(im, gaussian_blur(im, s)) for s in (0.5, 1, 2, 3, 4, 5, 8)])

    def test_matches_direct_convolution(self):
        # oracle: explicit 2-D reflected correlation at one interior pixel
        rng = np.random.default_rng(0)
        im = rng.random((25, 25))
        sigma = 1.3
        r = 4
        x = np.arange(-r, r + 1)
        k2 = np.exp(-(x[:, None] ** 2 + x[None, :] ** 2) / (2 * sigma**2))
        k2 /= k2.sum()
        assert gaussian_blur(im, sigma)[12, 12] == pytest.approx(np.sum(im[8:17, 8:17] * k2), abs=1e-12)


class TestNoise:
    def test_zero_sigma(self, photos):
        np.testing.assert_array_equal(gaussian_noise(photos[0], 0.0, seed=4), photos[0])

    def test_deterministic(self, photos):
        a = gaussian_noise(photos[1], 0.1, seed=11)
        b = gaussian_noise(photos[1], 0.1, seed=11)
        assert a.tobytes() == b.tobytes()
        assert a.tobytes() != gaussian_noise(photos[1], 0.1, seed=12).tobytes()

    @pytest.mark.parametrize("sigma", [0.02, 0.1, 0.2])
    def test_variance(self, sigma):
        im = np.full((256, 256), 0.5)
        diff = gaussian_noise(im, sigma, seed=3, clip=False) - im
        assert abs(diff.var() / sigma**2 - 1.0) < 0.05

    def test_clamped(self, photos):
        out = gaussian_noise(photos[0], 0.4, seed=0)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_negative_sigma(self):
        with pytest.raises(ValueError):
            gaussian_noise(np.zeros((4, 4)), -0.1)


class TestJpeg:
    @pytest.mark.parametrize("quality", [1, 10, 30, 50, 75, 100])
    @pytest.mark.parametrize("value", [0.0, 0.21, 0.5, 0.93, 1.0])
    def test_constant_unchanged(self, quality, value):
        im = np.full((20, 27), value)
        np.testing.assert_allclose(jpeg_proxy(im, quality), im, atol=1 / 255)

    def test_quality_100_near_lossless(self, photos):
        for im in photos:
            assert psnr(im, jpeg_proxy(im, 100)) > 45.0

    def test_psnr_monotone(self, photos):
        for im in photos:
            assert nonincreasing([psnr(im, jpeg_proxy(im, q)) for q in (90, 70, 50, 30, 10)])

    @pytest.mark.parametrize("quality", [0, 101])
    def test_quality_range(self, quality):
        with pytest.raises(ValueError):
            jpeg_proxy(np.zeros((8, 8)), quality)

    def test_table_scaling(self):
        np.testing.assert_array_equal(jpeg_quant_table(100), np.ones((8, 8)))
        assert jpeg_quant_table(50)[7, 7] == 99
        assert jpeg_quant_table(10)[7, 7] == 255

    def test_shape_preserved(self):
        im = np.random.default_rng(0).random((13, 21))
        assert jpeg_proxy(im, 40).shape == (13, 21)


class TestRankedGroup:
    @pytest.mark.parametrize("kind", KINDS)
    def test_default_grid_monotone(self, photos, kind):
        for i, im in enumerate(photos):
            g = synthesize_ranked_group(im, DistortionSpec(kind, seed=i), f"p{i}")
            assert g.n == 5 and g.kind == kind
            assert all(d.shape == im.shape for d in g.distorted)
            assert nonincreasing([psnr(im, d) for d in g.distorted])

    def test_two_levels_one_pair(self, photos):
        g = synthesize_ranked_group(photos[0], DistortionSpec("gaussian_blur", (1.0, 2.0)))
        assert g.ordered_pairs() == [(0, 1)]

    def test_six_levels_fifteen_pairs(self, photos):
        g = synthesize_ranked_group(photos[0], DistortionSpec("gaussian_blur", (1, 2, 3, 4, 5, 6)))
        assert len(g.ordered_pairs()) == 15
        assert 2 * len(g.ordered_pairs()) == 6**2 - 6

    def test_deterministic(self, photos):
        spec = DistortionSpec("gaussian_noise", seed=5)
        a = synthesize_ranked_group(photos[2], spec)
        b = synthesize_ranked_group(photos[2], spec)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.distorted, b.distorted))

    @pytest.mark.parametrize(
        "kind, levels",
        [("gaussian_blur", (1.0,)), ("gaussian_blur", (2.0, 1.0)), ("jpeg_proxy", (10, 50)), ("jp2k", (1, 2))],
    )
    def test_invalid_spec(self, kind, levels):
        with pytest.raises(ValueError):
            DistortionSpec(kind, levels)

    def test_default_levels_filled(self):
        assert DistortionSpec("jpeg_proxy").levels == DEFAULT_LEVELS["jpeg_proxy"]


class TestImages:
    def test_luminance_weights(self):
        rgb = np.zeros((1, 3, 3))
        rgb[0, 0, 0] = rgb[0, 1, 1] = rgb[0, 2, 2] = 1.0
        np.testing.assert_allclose(to_luminance(rgb)[0], [0.299, 0.587, 0.114])

    def test_reference_in_range(self):
        im = synthetic_reference(3, size=40)
        assert im.shape == (40, 40) and np.isfinite(im).all()
        assert 0.0 <= im.min() and im.max() <= 1.0

    def test_pgm_roundtrip(self, tmp_path):
        im = quantize8(np.random.default_rng(0).random((7, 9)))
        write_pgm(tmp_path / "a.pgm", im)
        np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), im)

    def test_pgm_header_comment_and_16bit(self, tmp_path):
        data = np.array([[0, 65535], [1000, 30000]], dtype=">u2")
        (tmp_path / "b.pgm").write_bytes(b"P5\n# note\n2 2\n65535\n" + data.tobytes())
        np.testing.assert_allclose(read_pgm(tmp_path / "b.pgm"), data / 65535.0)

    def test_pgm_truncated(self, tmp_path):
        (tmp_path / "c.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(10))
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "c.pgm")

    def test_pgm_wrong_magic(self, tmp_path):
        (tmp_path / "d.pgm").write_bytes(b"P2\n1 1\n255\n0")
        with pytest.raises(PGMError):
            read_pgm(tmp_path / "d.pgm")


class TestCorpus:
    def test_write_load_roundtrip(self, tmp_path):
        refs = synthetic_references(2, size=32, seed=1)
        corpus = build_corpus(refs, kinds=("gaussian_blur", "jpeg_proxy"), seed=4)
        write_corpus(corpus, tmp_path / "c")
        back = load_corpus(tmp_path / "c")
        assert len(back.groups) == 4 and back.reference_ids == sorted(refs)
        for g, h in zip(corpus.groups, back.groups):
            assert (g.kind, g.reference_id) == (h.kind, h.reference_id)
            for a, b in zip(g.distorted, h.distorted):
                np.testing.assert_array_equal(a, b)
        assert (tmp_path / "c" / "jpeg_proxy" / "ref001" / "level_4.pgm").is_file()

    def test_parallel_build_matches_serial(self):
        refs = synthetic_references(3, size=24)
        a = build_corpus(refs, kinds=KINDS, seed=2)
        b = build_corpus(refs, kinds=KINDS, seed=2, workers=3)
        for g, h in zip(a.groups, b.groups):
            assert all(x.tobytes() == y.tobytes() for x, y in zip(g.distorted, h.distorted))
