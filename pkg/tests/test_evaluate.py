import numpy as np
import numpy.testing as npt
import pytest

from tsekit import evaluate, model
from tsekit.errors import DataError


def rand(seed, n=600):
    return np.random.default_rng(seed).normal(size=n) * 0.1


class TestOracleSelect:
    def test_exact_match_picks_index_one(self):
        target = rand(0)
        res = evaluate.oracle_select(target.copy(), rand(1), target)
        assert res.chosen_index == 1 and res.method == "oracle"
        assert res.score_gap > 0

    def test_scaled_target_beats_noise_regardless_of_gain(self):
        target = rand(2)
        res = evaluate.oracle_select(rand(3), 0.7 * target, target)
        assert res.chosen_index == 2

    def test_tie_breaks_toward_index_one(self):
        target = rand(4)
        cand = rand(5)
        res = evaluate.oracle_select(cand, cand.copy(), target)
        assert res.chosen_index == 1
        assert res.score_gap == 0.0

    def test_swap_stability(self):
        target, a, b = rand(6), rand(7), rand(8)
        r_ab = evaluate.oracle_select(a, b, target)
        r_ba = evaluate.oracle_select(b, a, target)
        assert r_ab.chosen_index == 3 - r_ba.chosen_index


@pytest.fixture(scope="module")
def aux():
    cfg = model.miniature_config()
    return model.ExtractorNet(cfg, np.random.default_rng(3))


class TestCosineSelect:

    def test_self_among_candidates_selects_itself(self, aux):
        a = rand(9)
        res = evaluate.cosine_select(a.copy(), rand(10), a, aux)
        assert res.chosen_index == 1

    def test_zero_norm_embedding_scores_minus_one(self):
        assert evaluate._cosine(np.zeros(4), np.ones(4)) == -1.0

    def test_cosine_scale_invariance(self):
        rng = np.random.default_rng(11)
        a, b = rng.normal(size=6), rng.normal(size=6)
        base = evaluate._cosine(a, b)
        npt.assert_allclose(evaluate._cosine(7.0 * a, b), base, rtol=1e-12)
        npt.assert_allclose(evaluate._cosine(a, 0.002 * b), base, rtol=1e-12)

    def test_method_label(self, aux):
        res = evaluate.cosine_select(rand(12), rand(13), rand(14), aux)
        assert res.method == "cosine"
        assert res.chosen_index in (1, 2)


class TestHistogram:
    def rows(self, values, pt="AA"):
        return [(f"m{i}", pt, v) for i, v in enumerate(values)]

    def test_single_value_occupies_one_bin(self):
        hist = evaluate.histogram_report(self.rows([3.2, 3.2, 3.2]), 1.0)
        assert sum(c > 0 for c in hist.counts["AA"]) == 1
        assert sum(hist.counts["AA"]) == 3

    def test_counts_partition_records_per_type(self):
        rows = self.rows([1.0, 2.5, -0.5], "AA") + self.rows([4.0, 0.0], "BB")
        hist = evaluate.histogram_report(rows, 1.0)
        assert sum(hist.counts["AA"]) == 3
        assert sum(hist.counts["BB"]) == 2

    def test_failure_rate_counts_zero_or_less(self):
        rows = self.rows([1.0, 0.0, -2.0, 5.0])
        hist = evaluate.histogram_report(rows, 1.0)
        assert hist.failure_rate["AA"] == 0.5
        assert hist.overall_failure_rate == 0.5

    def test_perfect_oracle_has_zero_failures(self):
        hist = evaluate.histogram_report(self.rows([10.0, 20.0, 30.0]), 2.0)
        assert hist.overall_failure_rate == 0.0

    def test_bin_edges_align_to_width(self):
        hist = evaluate.histogram_report(self.rows([-1.4, 2.3]), 0.5)
        npt.assert_allclose(hist.bin_lows[0], -1.5)
        assert all(abs(b / 0.5 - round(b / 0.5)) < 1e-9 for b in hist.bin_lows)

    def test_tsv_schema(self):
        rows = self.rows([1.0], "AA") + self.rows([2.0], "AB") + self.rows([3.0], "BB")
        text = evaluate.histogram_report(rows, 1.0).to_tsv()
        header = text.splitlines()[0]
        assert header == "#bin_low\tcount_AA\tcount_AB\tcount_BB"

    def test_empty_input_error(self):
        with pytest.raises(DataError, match="no records"):
            evaluate.histogram_report([], 1.0)

    def test_bad_bin_width(self):
        with pytest.raises(DataError, match="positive"):
            evaluate.histogram_report(self.rows([1.0]), 0.0)
