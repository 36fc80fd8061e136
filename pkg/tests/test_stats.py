import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

from phonetrack.stats import PairedSample, compare_schemes, holm_bonferroni, wilcoxon_signed_rank


def enumerate_p(d):
    """Brute-force two-sided p over all 2^n sign patterns of the mid-ranks."""
    d = np.asarray(d, float)
    d = d[d != 0]
    absd = np.abs(d)
    ranks = np.array([np.sum(absd < a) + (np.sum(absd == a) + 1) / 2 for a in absd])
    observed = ranks[d > 0].sum()
    ws = [sum(r for r, s in zip(ranks, signs) if s) for signs in itertools.product((0, 1), repeat=len(d))]
    ws = np.array(ws)
    lower = np.mean(ws <= observed + 1e-9)
    upper = np.mean(ws >= observed - 1e-9)
    return min(1.0, 2 * min(lower, upper))


class TestWilcoxon:
    def test_three_positive(self):
        assert wilcoxon_signed_rank([1, 2, 3]) == pytest.approx(0.25, abs=1e-15)

    def test_median_statistic_gives_one(self):
        assert wilcoxon_signed_rank([1, -1, 2, -2]) == 1.0

    @pytest.mark.parametrize("seed", range(5))
    def test_n12_matches_enumeration(self, seed):
        d = np.random.default_rng(seed).normal(0.3, 1, 12)
        assert abs(wilcoxon_signed_rank(d) - enumerate_p(d)) <= 1e-12

    def test_n12_with_ties_and_zeros(self):
        d = np.array([1, -1, 2, 2, -3, 3, 4, 0, 5, -5, 6, 6, 0, 7])
        assert abs(wilcoxon_signed_rank(d) - enumerate_p(d)) <= 1e-12

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(-6, 6), min_size=1, max_size=10))
    def test_random_small_samples(self, d):
        if not any(d):
            with pytest.raises(ValueError):
                wilcoxon_signed_rank(d)
            return
        assert abs(wilcoxon_signed_rank(d) - enumerate_p(d)) <= 1e-12

    def test_exact_matches_scipy_without_ties(self):
        d = np.random.default_rng(1).normal(0.2, 1, 20)
        ref = sps.wilcoxon(d, method="exact").pvalue
        assert wilcoxon_signed_rank(d) == pytest.approx(ref, abs=1e-12)

    def test_normal_approximation_matches_scipy(self):
        d = np.round(np.random.default_rng(2).normal(0.3, 1, 40), 1)  # ties present
        ref = sps.wilcoxon(d, method="approx", correction=True, zero_method="wilcox").pvalue
        assert wilcoxon_signed_rank(d) == pytest.approx(ref, rel=1e-10)

    def test_all_zero(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([0.0, 0.0])

    def test_strict_dominance(self):
        for n in (5, 10, 20):
            assert wilcoxon_signed_rank(np.arange(1.0, n + 1)) == pytest.approx(2 * 2.0 ** -n, rel=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_monotone_transform_invariance(self, seed):
        d = np.random.default_rng(seed).normal(size=15)
        transformed = np.sign(d) * np.log1p(np.abs(d) * 10) ** 3
        assert wilcoxon_signed_rank(transformed) == pytest.approx(wilcoxon_signed_rank(d), abs=1e-15)

    def test_paired_sample_input(self):
        s = PairedSample(np.array([2.0, 3.0, 5.0]), np.array([1.0, 1.0, 2.0]))
        assert wilcoxon_signed_rank(s) == pytest.approx(0.25)

    def test_paired_sample_lengths(self):
        with pytest.raises(ValueError):
            PairedSample(np.zeros(3), np.zeros(4))


class TestHolm:
    def test_examples(self):
        np.testing.assert_allclose(holm_bonferroni([0.01, 0.04]), [0.02, 0.04])
        np.testing.assert_allclose(holm_bonferroni([0.01, 0.02, 0.30]), [0.03, 0.04, 0.30])
        assert holm_bonferroni([0.37]) == [0.37]

    def test_original_order_restored(self):
        np.testing.assert_allclose(holm_bonferroni([0.30, 0.01, 0.02]), [0.30, 0.03, 0.04])

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            holm_bonferroni([0.5, 1.2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
    def test_properties(self, p):
        adj = np.array(holm_bonferroni(p))
        raw = np.array(p)
        assert np.all(adj >= raw - 1e-15) and np.all(adj <= 1)
        order = np.argsort(raw, kind="stable")
        assert np.all(np.diff(adj[order]) >= -1e-15)
        # naive oracle straight from the step-down formula
        m = len(p)
        sorted_p = raw[order]
        naive = [min(1.0, max((m - j) * sorted_p[j] for j in range(i + 1))) for i in range(m)]
        np.testing.assert_allclose(adj[order], naive, atol=1e-15)


class TestCompareSchemes:
    def metrics(self, n=20, seed=0):
        rng = np.random.default_rng(seed)
        subjects = [f"sub-{i:03d}" for i in range(n)]
        base = rng.uniform(0.02, 0.1, n)
        return {
            "VC": dict(zip(subjects, base + rng.uniform(0.001, 0.01, n))),
            "PHONE": dict(zip(subjects, base)),
            "NPC": dict(zip(subjects, base + rng.normal(0, 0.005, n))),
        }

    def test_identical_columns(self):
        m = self.metrics()
        row = compare_schemes({"A": m["VC"], "B": dict(m["VC"])}, [("A", "B")]).rows[0]
        assert row.median_diff == 0 and row.raw_p == 1.0 and row.adjusted_p == 1.0

    def test_strict_dominance_significant(self):
        table = compare_schemes(self.metrics(), [("VC", "PHONE"), ("NPC", "PHONE"), ("VC", "NPC")])
        row = table["VC vs PHONE"]
        assert row.raw_p == pytest.approx(2 * 2.0 ** -20)
        assert row.adjusted_p < 0.01 and row.n == 20
        assert all(r.adjusted_p >= r.raw_p for r in table.rows)

    def test_single_pair_adjusted_equals_raw(self):
        row = compare_schemes(self.metrics(), [("NPC", "PHONE")]).rows[0]
        assert row.adjusted_p == row.raw_p

    def test_swapping_negates_median(self):
        m = self.metrics()
        ab = compare_schemes(m, [("NPC", "PHONE")]).rows[0]
        ba = compare_schemes(m, [("PHONE", "NPC")]).rows[0]
        assert ab.median_diff == pytest.approx(-ba.median_diff) and ab.raw_p == pytest.approx(ba.raw_p)

    def test_subject_mismatch(self):
        m = self.metrics()
        del m["VC"]["sub-000"]
        with pytest.raises(ValueError):
            compare_schemes(m, [("VC", "PHONE")])

    def test_csv(self, tmp_path):
        compare_schemes(self.metrics(), [("VC", "PHONE")]).write_csv(tmp_path / "t.csv")
        lines = (tmp_path / "t.csv").read_text().splitlines()
        assert lines[0] == "pair,raw_p,adjusted_p,median_diff,n" and lines[1].startswith("VC vs PHONE,")
