"""Case-family construction, manifest invariants, and the synthetic corpus."""

import json
import math

import numpy as np
import pytest

from autoretouch.dataforge import (
    CASE_CONTENT_NEGATIVE,
    CASE_POSITIVE,
    CASE_SPATIAL_NEGATIVE,
    Manifest,
    ManifestError,
    SynthParams,
    build_dataset,
    load_triple,
    make_content_negative,
    make_positive,
    make_spatial_negative,
    save_triple,
    spatial_negative_from_placement,
    synth_corpus,
    synth_scene,
)
from autoretouch.imaging import Placement, max_displacement
from autoretouch.scoring import spatial_score


def rank_correlation(a, b):
    """Spearman rank correlation, hand-rolled to stay library-independent."""
    ra = np.argsort(np.argsort(a)).astype(np.float64)
    rb = np.argsort(np.argsort(b)).astype(np.float64)
    ra -= ra.mean()
    rb -= rb.mean()
    return float((ra * rb).sum() / math.sqrt((ra**2).sum() * (rb**2).sum()))


class TestMakePositive:
    def test_fields(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        s = make_positive(t)
        assert s.case_kind == CASE_POSITIVE
        assert s.content_label is True
        assert s.spatial_target == 1.0
        assert (s.placement.cx, s.placement.cy) == t.fg.origin_center
        assert s.placement.scale == 1.0
        assert s.fg_id == s.bg_id == t.id

    def test_deterministic(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        assert make_positive(t) == make_positive(t)

    def test_bijection_over_corpus(self, tiny_corpus):
        positives = [make_positive(t) for t in tiny_corpus.values()]
        assert len(positives) == len(tiny_corpus)
        assert len({s.fg_id for s in positives}) == len(tiny_corpus)


class TestMakeContentNegative:
    def test_label_false_and_distinct_ids(self, tiny_corpus):
        a, b = list(tiny_corpus.values())[:2]
        s = make_content_negative(a, b)
        assert s.content_label is False
        assert s.case_kind == CASE_CONTENT_NEGATIVE
        assert s.fg_id == a.id and s.bg_id == b.id
        assert s.spatial_target == 1.0

    def test_same_source_rejected(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        with pytest.raises(ManifestError):
            make_content_negative(t, t)

    def test_equal_canvases_keep_origin_pose(self, tiny_corpus):
        a, b = list(tiny_corpus.values())[:2]
        s = make_content_negative(a, b)
        assert (s.placement.cx, s.placement.cy) == a.fg.origin_center
        assert s.placement.scale == 1.0

    def test_twenty_negatives_all_cross_source(self, tiny_corpus):
        triples = list(tiny_corpus.values())[:10]
        manifest = build_dataset(triples, seed=5)
        negs = [s for s in manifest.samples if s.case_kind == CASE_CONTENT_NEGATIVE]
        assert len(negs) == 20
        assert all(s.fg_id != s.bg_id for s in negs)


class TestSpatialNegatives:
    def test_origin_pose_scores_near_one(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        ox, oy = t.fg.origin_center
        s = spatial_negative_from_placement(t, Placement(ox, oy, 1.0))
        assert s.spatial_target == pytest.approx(0.9999546, abs=1e-6)
        assert s.content_label is True
        assert s.case_kind == CASE_SPATIAL_NEGATIVE

    def test_farthest_corner_scores_near_zero(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        ox, oy = t.fg.origin_center
        corners = [(0, 0), (t.bg.width, 0), (0, t.bg.height), (t.bg.width, t.bg.height)]
        far = max(corners, key=lambda c: math.hypot(c[0] - ox, c[1] - oy))
        s = spatial_negative_from_placement(t, Placement(far[0], far[1], 1.0))
        assert s.spatial_target == pytest.approx(4.54e-5, abs=1e-6)

    def test_thousand_draws_in_open_interval(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        rng = np.random.default_rng(2)
        targets = [make_spatial_negative(t, rng).spatial_target for _ in range(1000)]
        assert all(0.0 < y < 1.0 for y in targets)

    def test_score_anticorrelates_with_displacement(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        ox, oy = t.fg.origin_center
        rng = np.random.default_rng(3)
        draws = [make_spatial_negative(t, rng, scale_bounds=(1.0, 1.0)) for _ in range(1000)]
        dist = [math.hypot(s.placement.cx - ox, s.placement.cy - oy) for s in draws]
        ys = [s.spatial_target for s in draws]
        assert rank_correlation(dist, ys) < -0.99

    def test_target_matches_formula(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        rng = np.random.default_rng(4)
        s = make_spatial_negative(t, rng)
        ox, oy = t.fg.origin_center
        x = math.hypot(s.placement.cx - ox, s.placement.cy - oy)
        x_max = max_displacement((ox, oy), t.bg.width, t.bg.height)
        assert s.spatial_target == pytest.approx(
            spatial_score(x, x_max, s.placement.scale), abs=1e-12
        )

    def test_scale_draw_within_bounds(self, tiny_corpus):
        t = next(iter(tiny_corpus.values()))
        rng = np.random.default_rng(5)
        scales = [make_spatial_negative(t, rng, (0.5, 2.0)).placement.scale for _ in range(500)]
        assert all(0.5 <= s <= 2.0 for s in scales)
        assert min(scales) < 0.7 and max(scales) > 1.5


class TestBuildDataset:
    def test_counts_and_ratio(self):
        triples = synth_corpus(100, SynthParams(canvas=32), seed=8)
        manifest = build_dataset(triples, seed=8)
        counts = manifest.counts()
        assert counts == {
            CASE_POSITIVE: 100,
            CASE_SPATIAL_NEGATIVE: 200,
            CASE_CONTENT_NEGATIVE: 200,
        }
        assert len(manifest.split_samples("test")) == 100

    def test_split_fraction_per_case_kind(self):
        triples = synth_corpus(100, SynthParams(canvas=32), seed=8)
        manifest = build_dataset(triples, seed=8)
        for kind, per_triple in [
            (CASE_POSITIVE, 1),
            (CASE_SPATIAL_NEGATIVE, 2),
            (CASE_CONTENT_NEGATIVE, 2),
        ]:
            test_n = sum(
                1
                for s in manifest.split_samples("test")
                if s.case_kind == kind
            )
            assert abs(test_n - 0.2 * 100 * per_triple) <= per_triple

    def test_same_seed_byte_identical(self):
        triples = synth_corpus(24, SynthParams(canvas=32), seed=9)
        a = build_dataset(triples, seed=77).to_jsonl()
        b = build_dataset(triples, seed=77).to_jsonl()
        assert a == b

    def test_different_seed_differs(self):
        triples = synth_corpus(24, SynthParams(canvas=32), seed=9)
        a = build_dataset(triples, seed=77).to_jsonl()
        b = build_dataset(triples, seed=78).to_jsonl()
        assert a != b

    def test_too_few_triples_rejected(self):
        triples = synth_corpus(1, SynthParams(canvas=32), seed=9)
        with pytest.raises(ManifestError):
            build_dataset(triples, seed=0)

    def test_case_kind_invariants(self, tiny_manifest, tiny_corpus):
        for s in tiny_manifest.samples:
            if s.case_kind == CASE_POSITIVE:
                t = tiny_corpus[s.fg_id]
                assert s.content_label and s.spatial_target == 1.0
                assert (s.placement.cx, s.placement.cy) == t.fg.origin_center
                assert s.placement.scale == 1.0
            elif s.case_kind == CASE_CONTENT_NEGATIVE:
                assert not s.content_label
                assert s.fg_id != s.bg_id
                assert tiny_corpus[s.fg_id].group != tiny_corpus[s.bg_id].group
            else:
                assert s.content_label
                assert s.fg_id == s.bg_id
                assert 0.0 < s.spatial_target < 1.0

    def test_split_is_by_source_triple(self, tiny_manifest):
        split_of = {}
        for s in tiny_manifest.samples:
            split_of.setdefault(s.bg_id, s.split)
            # every sample referencing a triple (as host or foreground donor)
            # stays inside that triple's split
            assert split_of[s.bg_id] == s.split
        for s in tiny_manifest.samples:
            assert split_of[s.fg_id] == s.split

    def test_manifest_round_trip(self, tiny_manifest, tmp_path):
        path = tmp_path / "m.jsonl"
        tiny_manifest.write(path)
        back = Manifest.read(path)
        assert back.samples == tiny_manifest.samples
        assert back.seed == tiny_manifest.seed
        assert back.to_jsonl() == tiny_manifest.to_jsonl()


class TestSynthScene:
    def test_same_family_pair_is_consistent_by_construction(self):
        rng = np.random.default_rng(0)
        a = synth_scene(rng, SynthParams(), family="warm", scene_id="a")
        b = synth_scene(rng, SynthParams(), family="warm", scene_id="b")
        assert a.group == b.group == "warm"

    def test_cross_family_pair_is_inconsistent_by_construction(self):
        rng = np.random.default_rng(0)
        a = synth_scene(rng, SynthParams(), family="warm", scene_id="a")
        b = synth_scene(rng, SynthParams(), family="cool", scene_id="b")
        assert a.group != b.group

    def test_geometry_invariants(self):
        for i in range(10):
            t = synth_scene(np.random.default_rng(i), SynthParams(), scene_id=f"s{i}")
            assert (t.parsing.height, t.parsing.width) == (t.bg.height, t.bg.width)
            ox, oy = t.fg.origin_center
            assert 0 <= ox <= t.bg.width and 0 <= oy <= t.bg.height
            assert np.any(t.fg.alpha > 0)
            assert t.parsing.labels.max() == 1  # sky and ground

    def test_corpus_families_balanced(self):
        triples = synth_corpus(20, SynthParams(canvas=32), seed=1)
        groups = [t.group for t in triples]
        assert groups.count("warm") == groups.count("cool") == 10
        assert len({t.id for t in triples}) == 20

    def test_histogram_classifier_separates_families(self):
        """Color-statistic oracle: first-order stats decide consistency."""
        triples = synth_corpus(500, SynthParams(), seed=55)

        def warmness(mean_rgb):
            return mean_rgb[0] - mean_rgb[2]

        correct = 0
        total = 0
        rng = np.random.default_rng(0)
        for t in triples:
            partner = triples[int(rng.integers(len(triples)))]
            fg_mean = t.fg.rgb.data[t.fg.alpha > 0].mean(axis=0)
            bg_mean = partner.bg.data.mean(axis=(0, 1))
            predicted_same = (warmness(fg_mean) > 0) == (warmness(bg_mean) > 0)
            actual_same = t.group == partner.group
            correct += predicted_same == actual_same
            total += 1
        assert correct / total >= 0.95


class TestTripleIO:
    def test_round_trip_preserves_origin_and_group(self, tmp_path):
        t = synth_scene(np.random.default_rng(3), SynthParams(), family="cool", scene_id="c3")
        save_triple(t, tmp_path)
        back = load_triple(tmp_path, "c3")
        assert back.group == "cool"
        assert back.fg.origin_center == pytest.approx(t.fg.origin_center)
        assert (back.bg.height, back.bg.width) == (t.bg.height, t.bg.width)
        np.testing.assert_allclose(back.bg.data, t.bg.data, atol=1e-2)
        assert np.array_equal(back.parsing.labels, t.parsing.labels)

    def test_directory_layout(self, tmp_path):
        t = synth_scene(np.random.default_rng(4), SynthParams(), scene_id="x1")
        d = save_triple(t, tmp_path)
        assert (d / "fg.png").exists()
        assert (d / "bg.png").exists()
        assert (d / "parsing.png").exists()
        meta = json.loads((d / "meta.json").read_text())
        assert "origin_center" in meta and "group" in meta
