from __future__ import annotations

import numpy as np
import pytest
from scipy.special import expit

import oracles
from ewcseg.evaluation import (EvalResult, SchemeReport, TableError, dice, emit_results_table,
                               evaluate_model, per_subject_csv, scheme_label, tiled_predict)
from ewcseg.model import ArchitectureConfig, build_model, context_margin, forward
from ewcseg.tensor import ShapeError, Tensor

TINY = ArchitectureConfig(levels=2, base_channels=2)


class TestDice:
    def test_identical_masks(self, rng):
        m = rng.random((8, 8, 8)) < 0.3
        m[0, 0, 0] = True
        assert dice(m, m) == 100.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a[0, 0, 0] = True
        b[1, 1, 1] = True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4, 4), bool)
        b = np.zeros((4, 4, 4), bool)
        a.reshape(-1)[:8] = True
        b.reshape(-1)[4:12] = True
        assert dice(a, b) == 50.0

    def test_both_empty_is_perfect_agreement(self):
        z = np.zeros((3, 3, 3), bool)
        assert dice(z, z) == 100.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            dice(np.zeros((2, 2, 2), bool), np.zeros((2, 2, 3), bool))

    def test_against_counting_oracle_with_symmetry_and_range(self, rng):
        for _ in range(200):
            a = rng.random((8, 8, 8)) < rng.random()
            b = rng.random((8, 8, 8)) < rng.random()
            d = dice(a, b)
            assert abs(d - oracles.count_dice(a, b)) < 1e-9
            assert d == dice(b, a)
            assert 0.0 <= d <= 100.0


class TestTiledPredict:
    def test_single_tile_equals_direct_forward(self, tiny_cohort):
        # with volume extent + margin valid, one window covers everything and
        # the stitched result is the direct forward, bit for bit
        sample = tiny_cohort["source"][0]
        params = build_model(TINY, seed=3)
        probs = tiled_predict(params, TINY, sample)
        direct = oracles.whole_volume_probabilities(params, TINY, sample)
        assert probs.shape == (1,) + sample.image.shape[1:]
        assert np.array_equal(probs.data, direct.astype(np.float32))

    def test_multi_tile_matches_whole_volume_oracle(self, tiny_cohort):
        sample = tiny_cohort["source"][1]
        params = build_model(TINY, seed=4)
        tiled = tiled_predict(params, TINY, sample, max_input_extent=24)
        oracle = oracles.whole_volume_probabilities(params, TINY, sample)
        assert np.max(np.abs(tiled.data - oracle)) < 1e-5

    def test_output_covers_volume_for_random_extents(self, rng):
        from ewcseg.data import DomainSpec, generate_domain

        for extent in (26, 31, 40):
            spec = DomainSpec(name="source", n_subjects=1, volume_extent=extent,
                              mean_tumor_volume=120.0, seed=extent)
            sample = generate_domain(spec)[0]
            params = build_model(TINY, seed=6)
            probs = tiled_predict(params, TINY, sample, max_input_extent=24)
            assert probs.shape == (1, extent, extent, extent)
            assert np.all(probs.data > 0.0) and np.all(probs.data < 1.0)

    def test_zero_model_predicts_nothing_after_threshold(self, tiny_cohort):
        params = build_model(TINY, seed=3)
        params.set_flat(np.zeros(params.total_size, np.float32))
        result = evaluate_model(params, TINY, tiny_cohort["source"][:2])
        # probabilities are exactly 0.5; the strict predicate empties the mask
        assert all(d == 0.0 for _, d in result.per_subject)

    def test_threshold_monotonicity(self, tiny_cohort):
        sample = tiny_cohort["source"][0]
        params = build_model(TINY, seed=8)
        probs = tiled_predict(params, TINY, sample)
        sizes = [(probs.data > tau).sum() for tau in (0.3, 0.5, 0.7)]
        assert sizes[0] >= sizes[1] >= sizes[2]

    def test_mean_matches_per_subject(self, tiny_cohort):
        params = build_model(TINY, seed=9)
        result = evaluate_model(params, TINY, tiny_cohort["target"][:3])
        assert abs(result.mean - np.mean([d for _, d in result.per_subject])) < 1e-9

    def test_empty_test_set_rejected(self):
        with pytest.raises(ValueError, match="nonempty"):
            evaluate_model(build_model(TINY, seed=1), TINY, [])


def report(scheme, lam, split, src, tgt, pre=None):
    return SchemeReport(
        scheme=scheme, lam=lam, split_id=split,
        source_dice_mean=src, target_dice_mean=tgt,
        per_subject={"source": [("s0", src)], "target": [("t0", tgt)]},
        pre_finetune_source_dice=pre)


def full_grid():
    reports = []
    for split in (1, 2):
        reports += [
            report("target-only", 0.0, split, 60.0 + split, 71.5),
            report("source-only", 0.0, split, 86.2, 58.0),
            report("source-then-target", 0.0, split, 68.0, 73.0, pre=86.2),
            report("source-then-target", 10.0, split, 78.0, 72.0, pre=86.2),
            report("source-then-target", 100.0, split, 73.0, 69.4, pre=86.2),
            report("joint", 0.0, split, 87.0, 67.0),
        ]
    return reports


class TestReportsAndTables:
    def test_scheme_labels(self):
        assert scheme_label("target-only", 0) == "Target only"
        assert scheme_label("source-only", 0) == "Source only"
        assert scheme_label("source-then-target", 0) == "+ Target"
        assert scheme_label("source-then-target", 10) == "+ Target EWC 10"
        assert scheme_label("joint", 0) == "Source & Target"

    def test_report_validates_mean(self):
        with pytest.raises(ValueError, match="mean"):
            SchemeReport(scheme="joint", lam=0.0, split_id=1,
                         source_dice_mean=50.0, target_dice_mean=10.0,
                         per_subject={"source": [("a", 40.0)], "target": [("b", 10.0)]})

    def test_report_validates_range(self):
        with pytest.raises(ValueError, match="0, 100"):
            SchemeReport(scheme="joint", lam=0.0, split_id=1,
                         source_dice_mean=101.0, target_dice_mean=10.0,
                         per_subject={"source": [("a", 101.0)], "target": [("b", 10.0)]})

    def test_roundtrip_dict(self):
        r = report("source-then-target", 10.0, 1, 78.0, 72.0, pre=86.2)
        r2 = SchemeReport.from_dict(r.to_dict())
        assert r2 == r
        assert r2.forgetting == pytest.approx(8.2)
        assert r2.adaptation == 72.0

    def test_six_by_four_grid(self):
        md = emit_results_table(full_grid(), "markdown")
        lines = md.strip().split("\n")
        assert len(lines) == 8  # header + separator + 6 rows
        assert lines[0] == ("| Training | Split 1 Source | Split 1 Target "
                            "| Split 2 Source | Split 2 Target |")
        labels = [l.split("|")[1].strip() for l in lines[2:]]
        assert labels == ["Target only", "Source only", "+ Target",
                          "+ Target EWC 10", "+ Target EWC 100", "Source & Target"]
        assert lines[2].split("|")[2].strip() == "61"

    def test_single_report_minimal_grid(self):
        md = emit_results_table([report("source-only", 0.0, 1, 80.0, 55.0)], "markdown")
        lines = md.strip().split("\n")
        assert len(lines) == 3
        assert "Split 2" not in md

    def test_csv_and_markdown_agree_after_rounding(self):
        reports = full_grid()
        md = emit_results_table(reports, "markdown")
        csv = emit_results_table(reports, "csv")
        md_rows = [l.split("|")[2:-1] for l in md.strip().split("\n")[2:]]
        csv_rows = [l.split(",")[1:] for l in csv.strip().split("\n")[1:]]
        for mrow, crow in zip(md_rows, csv_rows):
            assert [int(c.strip()) for c in mrow] == [round(float(c)) for c in crow]

    def test_missing_cell_error_lists_pairs(self):
        reports = full_grid()[:-1]
        with pytest.raises(TableError, match=r"Source & Target.*2"):
            emit_results_table(reports, "markdown")

    def test_per_subject_csv_layout(self):
        csv = per_subject_csv([report("source-only", 0.0, 1, 80.0, 55.0)])
        lines = csv.strip().split("\n")
        assert lines[0] == "scheme,split,domain,subject_id,dice"
        assert lines[1] == "Source only,1,source,s0,80.0"

    def test_eval_result_from_scores(self):
        r = EvalResult.from_scores([("a", 10.0), ("b", 20.0)])
        assert r.mean == 15.0
