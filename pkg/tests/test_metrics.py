import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from siamrank.corpus import build_corpus, synthetic_references
from siamrank.dataset import LabeledSample
from siamrank.metrics import (
    LevelHistograms,
    UndefinedCorrelationError,
    evaluate_model,
    lcc,
    score_histograms,
    srocc,
)
from siamrank.tensor_core import default_spec, init_params

distinct_vectors = st.lists(st.integers(-10**6, 10**6), min_size=3, max_size=40, unique=True).map(
    lambda v: np.asarray(v, dtype=np.float64)
)


class TestLCC:
    def test_affine(self):
        y = np.array([0.3, 1.0, 2.5, 4.0, 7.0])
        assert lcc(y, 2 * y + 3) == pytest.approx(1.0, abs=1e-12)
        assert lcc(y, -y) == pytest.approx(-1.0, abs=1e-12)

    def test_three_point_example(self):
        # centred: y=(-1,0,1), y_hat=(-1,1,0) -> 1/(sqrt2*sqrt2)
        assert lcc([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5, abs=1e-12)

    def test_constant_raises(self):
        with pytest.raises(UndefinedCorrelationError):
            lcc([1, 2, 3], [4, 4, 4])
        with pytest.raises(UndefinedCorrelationError):
            lcc([2, 2], [1, 3])

    def test_length_checks(self):
        with pytest.raises(ValueError):
            lcc([1.0], [1.0])
        with pytest.raises(ValueError):
            lcc([1, 2, 3], [1, 2])

    @settings(max_examples=100, deadline=None)
    @given(distinct_vectors, st.integers(0, 2**31))
    def test_matches_scipy(self, y, seed):
        y_hat = np.random.default_rng(seed).normal(size=y.size)
        assert lcc(y, y_hat) == pytest.approx(stats.pearsonr(y, y_hat)[0], abs=1e-12)


class TestSROCC:
    def test_orderings(self):
        y = [0.1, 5.0, 2.0, 9.0]
        assert srocc(y, y) == pytest.approx(1.0, abs=1e-12)
        assert srocc(y, [-v for v in y]) == pytest.approx(-1.0, abs=1e-12)

    def test_four_point_example(self):
        # rank differences (0,0,1,1): 1 - 6*2/(4*15)
        assert srocc([1, 2, 3, 4], [10, 20, 40, 30]) == pytest.approx(0.8, abs=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError):
            srocc([1.0], [2.0])

    def test_ties_match_pearson_of_average_ranks(self):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            n = int(rng.integers(3, 30))
            y = rng.integers(0, 5, size=n).astype(float)
            y_hat = rng.integers(0, 5, size=n).astype(float)
            ry, rp = stats.rankdata(y), stats.rankdata(y_hat)
            if ry.std() == 0 or rp.std() == 0:
                continue
            expected = np.corrcoef(ry, rp)[0, 1]
            assert srocc(y, y_hat) == pytest.approx(expected, abs=1e-12)

    def test_constant_predictor(self):
        assert srocc([1, 2, 3, 4], [5, 5, 5, 5]) == 0.0

    @settings(max_examples=100, deadline=None)
    @given(distinct_vectors, st.integers(0, 2**31))
    def test_monotone_invariance(self, y, seed):
        y_hat = np.random.default_rng(seed).normal(size=y.size)
        base = srocc(y, y_hat)
        assert srocc(y, np.exp(y_hat)) == pytest.approx(base, abs=1e-12)
        assert srocc(y, 3 * y_hat - 7) == pytest.approx(base, abs=1e-12)
        assert base == pytest.approx(stats.spearmanr(y, y_hat)[0], abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(distinct_vectors)
    def test_self_and_reverse(self, y):
        assert srocc(y, y) == pytest.approx(1.0, abs=1e-12)
        assert srocc(y, -y) == pytest.approx(-1.0, abs=1e-12)


@pytest.fixture(scope="module")
def small_model():
    spec = default_spec(16)
    return spec, init_params(spec, 3)


def samples(n=6, size=16):
    rng = np.random.default_rng(1)
    return [LabeledSample(rng.random((size, size)), float(i), f"s{i}", f"r{i}") for i in range(n)]


class TestEvaluate:
    def test_whole_image_crop_deterministic(self, small_model):
        spec, params = small_model
        a = evaluate_model(spec, params, samples(), crops_per_image=1, seed=0)
        b = evaluate_model(spec, params, samples(), crops_per_image=1, seed=99)
        assert [r[2] for r in a.per_image_scores] == [r[2] for r in b.per_image_scores]
        assert a.N == 6 and -1 <= a.srocc <= 1 and -1 <= a.lcc <= 1

    def test_crop_average(self, small_model):
        spec, params = small_model
        big = samples(size=24)
        res = evaluate_model(spec, params, big, crops_per_image=30, seed=0)
        again = evaluate_model(spec, params, big, crops_per_image=30, seed=0)
        assert res.per_image_scores == again.per_image_scores

    def test_constant_network(self, small_model, tmp_path):
        spec, params = small_model
        flat = params.copy()
        flat["11.weight"][:] = 0.0
        flat["11.bias"][:] = 0.25
        res = evaluate_model(spec, flat, samples(), crops_per_image=2)
        assert res.lcc is None and "constant" in res.lcc_error
        assert res.srocc == 0.0
        assert "undefined" in res.summary()
        res.write_csv(tmp_path / "e.csv")
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "id,y,y_hat" and lines[-1].startswith("# N=6")

    def test_empty(self, small_model):
        with pytest.raises(ValueError):
            evaluate_model(*small_model, [])


class TestHistograms:
    def test_csv_and_counts(self, small_model, tmp_path):
        spec, params = small_model
        corpus = build_corpus(synthetic_references(3, size=16), kinds=("gaussian_blur", "jpeg_proxy"))
        hist = score_histograms(spec, params, corpus, bins=30)
        assert sorted(hist.scores) == [(k, lv) for k in ("gaussian_blur", "jpeg_proxy") for lv in range(5)]
        assert hist.counts("gaussian_blur", 2).sum() == 3
        hist.write_csv(tmp_path / "h.csv")
        rows = list(csv.DictReader((tmp_path / "h.csv").open()))
        assert len(rows) == 2 * 5 * 30
        assert set(rows[0]) == {"kind", "level", "bin_lo", "bin_hi", "count"}

    def test_single_level(self):
        hist = LevelHistograms({("gaussian_blur", 0): np.array([1.0, 2.0, 3.0])})
        assert hist.ordered_steps("gaussian_blur") == (0, 0)
        assert hist.counts("gaussian_blur", 0).sum() == 3

    def test_ordered_levels(self):
        hist = LevelHistograms({("k", lv): np.array([10.0 - lv, 9.5 - lv]) for lv in range(5)})
        assert hist.ordered_steps("k") == (4, 4)
        assert hist.level_srocc("k") > 0.9
