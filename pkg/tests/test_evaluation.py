import numpy as np
import pytest

from stainfuse.aggregate import BootstrapConfig
from stainfuse.evaluation import (
    CohortEntry,
    CohortPredictions,
    RocResult,
    auroc,
    auroc_ci,
    evaluate_cohort,
    format_cell,
    read_cohort_csv,
    roc_curve,
    select_threshold,
    significance_vs_random,
    write_cohort_csv,
)
from stainfuse.fusion import calibrate_score


def cohort(pos_scores, neg_scores, cohort_id="c"):
    entries = [CohortEntry(f"p{i}", float(s), "melanoma") for i, s in enumerate(pos_scores)]
    entries += [CohortEntry(f"n{i}", float(s), "nevus") for i, s in enumerate(neg_scores)]
    return CohortPredictions(cohort_id=cohort_id, entries=entries)


def brute_force_auroc(pos_scores, neg_scores):
    """Pairwise Mann-Whitney oracle: wins + half-credit ties over all pairs."""
    total = 0.0
    for p in pos_scores:
        for n in neg_scores:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos_scores) * len(neg_scores))


def random_cohort(rng, n_max=40):
    n_pos = int(rng.integers(1, n_max // 2))
    n_neg = int(rng.integers(1, n_max // 2))
    pos = rng.uniform(0, 1, n_pos)
    neg = rng.uniform(0, 1, n_neg)
    # inject ties within and across classes
    if n_pos > 2 and n_neg > 2:
        pos[: n_pos // 2] = np.round(pos[: n_pos // 2], 1)
        neg[: n_neg // 2] = np.round(neg[: n_neg // 2], 1)
    return pos, neg


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc(cohort([0.9], [0.1])) == 1.0

    def test_all_ties(self):
        assert auroc(cohort([0.5, 0.5], [0.5, 0.5, 0.5])) == 0.5

    def test_hand_pair_count(self):
        # pairs: (.8,.6)=1 (.8,.2)=1 (.4,.6)=0 (.4,.2)=1 -> 3/4
        assert auroc(cohort([0.8, 0.4], [0.6, 0.2])) == 0.75

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pos, neg = random_cohort(rng)
            fast = auroc(cohort(pos, neg))
            slow = brute_force_auroc(pos, neg)
            assert abs(fast - slow) < 1e-12

    def test_single_class_rejected(self):
        with pytest.raises(ValueError, match="AUROC undefined"):
            auroc(cohort([0.9, 0.8], []))

    def test_label_flip_symmetry(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            pos, neg = random_cohort(rng)
            a = auroc(cohort(pos, neg))
            flipped = auroc(cohort(1 - neg, 1 - pos))
            assert a == pytest.approx(flipped, abs=1e-12)


class TestRocCurve:
    def test_perfect_step(self):
        pts = roc_curve(cohort([0.9], [0.1]))
        assert pts == [(0.0, 0.0), (0.0, 1.0), (1.0, 1.0)]

    def test_all_ties_diagonal(self):
        pts = roc_curve(cohort([0.5, 0.5], [0.5]))
        assert pts == [(0.0, 0.0), (1.0, 1.0)]

    def test_trapezoid_matches_auroc(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            pos, neg = random_cohort(rng)
            c = cohort(pos, neg)
            pts = roc_curve(c)
            area = np.trapezoid([p[1] for p in pts], [p[0] for p in pts])
            assert abs(area - auroc(c)) < 1e-12

    def test_starts_and_ends_fixed_and_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            pos, neg = random_cohort(rng)
            pts = roc_curve(cohort(pos, neg))
            assert pts[0] == (0.0, 0.0) and pts[-1] == (1.0, 1.0)
            fpr = [p[0] for p in pts]
            tpr = [p[1] for p in pts]
            assert all(b >= a for a, b in zip(fpr, fpr[1:]))
            assert all(b >= a for a, b in zip(tpr, tpr[1:]))


class TestAurocCi:
    def test_perfectly_separated(self):
        c = cohort([0.9] * 20, [0.1] * 20)
        lo, hi, dropped = auroc_ci(c, BootstrapConfig(n_boot=2000, seed=1))
        assert lo == 1.0 and hi == 1.0
        assert dropped == 0

    def test_single_replicate(self):
        c = cohort([0.9, 0.8], [0.1, 0.2])
        lo, hi, _ = auroc_ci(c, BootstrapConfig(n_boot=1, seed=2))
        assert lo == hi

    def test_deterministic_and_worker_invariant(self):
        rng = np.random.default_rng(4)
        c = cohort(rng.uniform(0.3, 1, 25), rng.uniform(0, 0.7, 25))
        cfg = BootstrapConfig(n_boot=5000, seed=5)
        base = auroc_ci(c, cfg, workers=1)
        assert auroc_ci(c, cfg, workers=4) == base
        assert auroc_ci(c, cfg, workers=16) == base

    def test_entry_order_invariant(self):
        rng = np.random.default_rng(5)
        pos, neg = rng.uniform(0.4, 1, 15), rng.uniform(0, 0.6, 15)
        entries = cohort(pos, neg).entries
        shuffled = [entries[i] for i in rng.permutation(len(entries))]
        c1 = CohortPredictions("c", entries)
        c2 = CohortPredictions("c", shuffled)
        cfg = BootstrapConfig(n_boot=2000, seed=6)
        assert auroc_ci(c1, cfg) == auroc_ci(c2, cfg)

    def test_width_against_monte_carlo_oracle(self):
        # binormal scores with true AUROC ~0.8 at the scale of the paper's cohorts
        def make(seed):
            r = np.random.default_rng(seed)
            gap = 1.19 * 0.15
            pos = np.clip(r.normal(0.55 + gap / 2, 0.15, 60), 0, 1)
            neg = np.clip(r.normal(0.55 - gap / 2, 0.15, 66), 0, 1)
            return cohort(pos, neg)

        c = make(7)
        a = auroc(c)
        lo, hi, _ = auroc_ci(c, BootstrapConfig(n_boot=10_000, seed=8))
        mc = np.array([auroc(make(1000 + i)) for i in range(300)])
        half = 1.96 * mc.std()
        assert 0.4 * half <= a - lo <= 1.8 * half
        assert 0.4 * half <= hi - a <= 1.8 * half

    def test_width_at_high_auroc_matches_reported_scale(self):
        # a ~0.96-AUROC cohort of 126 slides has CI sides of a couple hundredths
        r = np.random.default_rng(9)
        pos = np.clip(r.normal(0.75, 0.12, 60), 0, 1)
        neg = np.clip(r.normal(0.35, 0.12, 66), 0, 1)
        c = cohort(pos, neg)
        a = auroc(c)
        assert a >= 0.93
        lo, hi, _ = auroc_ci(c, BootstrapConfig(n_boot=10_000, seed=10))
        assert 0.005 <= a - lo <= 0.06
        assert 0.001 <= hi - a <= 0.06

    def test_too_small_cohort_rejected(self):
        c = cohort([0.9], [0.1])
        with pytest.raises(ValueError, match="bootstrap"):
            auroc_ci(c, BootstrapConfig(n_boot=1000, seed=11))


class TestSelectThreshold:
    def test_separable_midpoint(self):
        t = select_threshold(cohort([0.9], [0.1]))
        assert t.value == 0.5
        assert t.method == "youden"

    def test_all_ties_returns_smallest_candidate(self):
        t = select_threshold(cohort([0.7, 0.7], [0.7]))
        assert t.value == pytest.approx(0.35)  # low sentinel = s_min / 2

    def test_hand_candidates(self):
        t = select_threshold(cohort([0.8, 0.4], [0.6, 0.2]))
        # J ties across {0.3, 0.5, 0.7}; smallest argmax wins
        assert t.value == pytest.approx(0.3)

    def test_maximizes_j_exhaustively(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            pos, neg = random_cohort(rng)
            c = cohort(pos, neg)
            t = select_threshold(c)
            scores = c.scores
            labels = c.labels
            n_pos, n_neg = labels.sum(), len(labels) - labels.sum()

            def j(threshold):
                hits = scores >= threshold
                return (hits & (labels == 1)).sum() / n_pos - (hits & (labels == 0)).sum() / n_neg

            best = j(t.value)
            for candidate in np.concatenate([scores - 1e-9, scores + 1e-9, [0.001, 0.999]]):
                assert best >= j(float(candidate)) - 1e-12

    def test_threshold_between_score_levels(self):
        c = cohort([0.8, 0.6], [0.4, 0.3])
        t = select_threshold(c)
        distinct = np.unique(c.scores)
        assert not np.any(distinct == t.value)


class TestSignificance:
    def result(self, lo, hi):
        return RocResult(auroc=0.75, curve=[], ci_low=lo, ci_high=hi, n_boot=10, seed=0, n_dropped_replicates=0, n=4)

    def test_excluding_half_is_significant(self):
        assert significance_vs_random(self.result(0.64, 0.86)) is True

    def test_containing_half_is_not(self):
        assert significance_vs_random(self.result(0.45, 0.55)) is False

    def test_boundary_inclusive(self):
        assert significance_vs_random(self.result(0.5, 0.7)) is False


class TestReporting:
    def test_table3_cell_format(self):
        assert format_cell(0.956, 0.944, 0.988) == "0.96 [0.94;0.99]"

    def test_exact_half(self):
        assert format_cell(0.5, 0.4, 0.6) == "0.50 [0.40;0.60]"

    def test_report_table_missing_cell(self):
        from stainfuse.evaluation import ReportTable

        res = RocResult(0.75, [(0.0, 0.0), (1.0, 1.0)], 0.64, 0.86, 100, 1, 0, 40)
        table = ReportTable(
            model_rows=[("m1", "Model One"), ("m2", "Model Two")],
            cohort_ids=["c1", "c2"],
            results={("m1", "c1"): res},
        )
        assert table.cell("m1", "c1") == "0.75 [0.64;0.86]"
        assert table.cell("m2", "c2") == "—"
        text = table.to_text()
        assert "Model One" in text and "—" in text

    def test_report_csv(self, tmp_path):
        from stainfuse.evaluation import ReportTable

        res = RocResult(0.75, [(0.0, 0.0), (0.5, 1.0), (1.0, 1.0)], 0.64, 0.86, 100, 7, 2, 40)
        table = ReportTable([("m1", "M1")], ["c1"], {("m1", "c1"): res})
        table.write_csv(tmp_path / "report.csv")
        lines = (tmp_path / "report.csv").read_text().splitlines()
        assert lines[0] == "model_id,cohort_id,auroc,ci_low,ci_high,n,n_boot,seed,significant"
        assert lines[1] == "m1,c1,0.75,0.64,0.86,40,100,7,true"
        table.write_roc_points(tmp_path / "roc.csv")
        roc_lines = (tmp_path / "roc.csv").read_text().splitlines()
        assert roc_lines[0] == "model_id,cohort_id,fpr,tpr"
        assert len(roc_lines) == 4


class TestMonotoneInvariance:
    def test_auroc_invariant_under_increasing_maps(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            pos, neg = random_cohort(rng)
            c = cohort(pos, neg)
            base = auroc(c)
            t = float(rng.uniform(0.1, 0.9))
            maps = [
                lambda s: calibrate_score(s, t),
                lambda s: s**3,
                lambda s: 0.5 + np.arctan(4 * (s - 0.5)) / np.pi,
            ]
            for f in maps:
                mapped = CohortPredictions(
                    "m", [CohortEntry(e.slide_id, float(np.clip(f(e.score), 0, 1)), e.label) for e in c.entries]
                )
                assert abs(auroc(mapped) - base) < 1e-12


class TestCohortCsv:
    def test_roundtrip(self, tmp_path):
        c = cohort([0.9, 0.8], [0.3])
        path = tmp_path / "cohort.csv"
        write_cohort_csv(path, c)
        assert path.read_text().splitlines()[0] == "slide_id,score,label"
        back = read_cohort_csv(path, cohort_id="c")
        assert back.entries == c.entries

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("slide_id,score,label\ns1,0.5,benign\n")
        with pytest.raises(ValueError):
            read_cohort_csv(path, cohort_id="c")

    def test_duplicate_slides_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            CohortPredictions("c", [CohortEntry("s", 0.5, "melanoma"), CohortEntry("s", 0.6, "nevus")])


def test_evaluate_cohort_bundles_everything():
    rng = np.random.default_rng(8)
    c = cohort(rng.uniform(0.5, 1, 20), rng.uniform(0, 0.5, 20))
    res = evaluate_cohort(c, BootstrapConfig(n_boot=1000, seed=3))
    assert res.n == 40 and res.n_boot == 1000 and res.seed == 3
    assert res.ci_low <= res.auroc <= res.ci_high
    assert res.curve[0] == (0.0, 0.0) and res.curve[-1] == (1.0, 1.0)
