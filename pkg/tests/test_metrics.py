"""Detector round-trips, presence metrics, RSIM vs the brute-force oracle."""

import numpy as np
import pytest

from instructpaint import data as mdata
from instructpaint import metrics as mm
from instructpaint.data import ObjectSpec, generate_dataset, render
from oracles import brute_prf1, brute_rsim


def O(shape, color, row=0, col=0):
    return ObjectSpec(shape, color, row, col)


class TestDetector:
    def test_background_only_empty(self):
        det = mm.detect_objects(render([], 5, 32), 5)
        assert det.objects == []

    def test_single_object_roundtrip(self):
        obj = O("cube", "red", 2, 2)
        det = mm.detect_objects(render([obj], 5, 32), 5)
        assert det.objects == [obj]

    def test_full_scene_roundtrip(self):
        eps = generate_dataset(21, 10, grid_size=5)
        for ep in eps:
            det = mm.detect_objects(ep.turns[-1].image, 5)
            assert set(det.objects) == set(ep.turns[-1].objects)

    def test_roundtrip_under_uniform_noise(self):
        rng = np.random.default_rng(0)
        eps = generate_dataset(22, 20, grid_size=5)
        for ep in eps:
            noisy = ep.turns[-1].image + rng.uniform(0, 1 / 64, ep.turns[-1].image.shape).astype(np.float32)
            det = mm.detect_objects(noisy, 5, tau_det=0.05)
            assert set(det.objects) == set(ep.turns[-1].objects)

    def test_deterministic_idempotent(self):
        img = generate_dataset(5, 1, grid_size=5)[0].turns[-1].image
        d1 = mm.detect_objects(img, 5)
        d2 = mm.detect_objects(img, 5)
        assert d1.objects == d2.objects and d1.errors == d2.errors

    def test_template_margins_dominate_noise(self):
        # The closest pair of distinct templates must sit far above the MSE
        # that Uniform(0, 1/64) noise adds (~(1/64)^2/3 ~ 8e-5), so argmin
        # stays unambiguous on noisy exact renders.
        templates = mm._cell_templates(5, 32)
        n = templates.shape[0]
        dists = ((templates[:, None] - templates[None]) ** 2).mean(axis=(2, 3, 4))
        off = dists[~np.eye(n, dtype=bool)]
        noise_floor = (1 / 64) ** 2 / 3
        assert off.min() > 100 * noise_floor


class TestPRF1:
    def test_perfect_match(self):
        cats = [("cube", "red"), ("sphere", "blue")]
        assert mm.prf1(cats, cats) == (1.0, 1.0, 1.0)

    def test_total_miss(self):
        assert mm.prf1([("cube", "red"), ("sphere", "blue")], []) == (0.0, 0.0, 0.0)

    def test_two_thirds_case(self):
        gt = [("cube", "red"), ("sphere", "blue"), ("cylinder", "cyan")]
        gen = [("cube", "red"), ("sphere", "blue"), ("cube", "gray")]
        p, r, f1 = mm.prf1(gt, gen)
        assert (p, r) == (2 / 3, 2 / 3)
        assert f1 == pytest.approx(2 / 3)

    def test_empty_empty(self):
        assert mm.prf1([], []) == (1.0, 1.0, 1.0)

    def test_monotonicity_against_oracle(self):
        rng = np.random.default_rng(4)
        cats = [(s, c) for s in mdata.SHAPES for c in mdata.COLORS]
        for _ in range(200):
            gt = {cats[i] for i in rng.choice(24, rng.integers(0, 6), replace=False)}
            gen = {cats[i] for i in rng.choice(24, rng.integers(0, 6), replace=False)}
            assert mm.prf1(gt, gen) == pytest.approx(brute_prf1(gt, gen), abs=1e-12)
            correct = next(iter(gt - gen), None)
            if correct is not None:
                r0 = mm.prf1(gt, gen)[1]
                r1 = mm.prf1(gt, gen | {correct})[1]
                assert r1 >= r0
            wrong = next(iter(set(cats) - gt - gen), None)
            if wrong is not None:
                p0 = mm.prf1(gt, gen)[0]
                p1 = mm.prf1(gt, gen | {wrong})[0]
                assert p1 <= p0


class TestRSIM:
    def test_identical_graphs(self):
        objs = [O("cube", "red", 0, 0), O("sphere", "blue", 1, 2), O("cylinder", "cyan", 3, 3)]
        assert mm.rsim(objs, objs) == 1.0

    def test_missing_vertex_recall(self):
        gt = [O("cube", "red", 0, 0), O("sphere", "blue", 1, 2), O("cylinder", "cyan", 3, 3)]
        gen = [O("cube", "red", 0, 0), O("sphere", "blue", 1, 2)]
        # A-B relations preserved exactly: recall 2/3, ratio 1.
        assert mm.rsim(gt, gen) == pytest.approx(2 / 3)

    def test_flipped_edges(self):
        gt = [O("cube", "red", 0, 0), O("sphere", "blue", 0, 2)]
        gen = [O("cube", "red", 0, 2), O("sphere", "blue", 0, 0)]  # swapped columns
        # recall 1; both edges flipped -> ratio 0.
        assert mm.rsim(gt, gen) == 0.0

    def test_duplicate_categories_rejected(self):
        objs = [O("cube", "red", 0, 0), O("cube", "red", 1, 1)]
        with pytest.raises(ValueError):
            mm.rsim(objs, [O("cube", "red", 0, 0)])

    def test_zero_common_vertices(self):
        gt = [O("cube", "red", 0, 0)]
        gen = [O("sphere", "blue", 0, 0)]
        assert mm.rsim(gt, gen) == 0.0

    def test_single_common_vertex_ratio_one(self):
        gt = [O("cube", "red", 0, 0), O("sphere", "blue", 1, 1)]
        gen = [O("cube", "red", 4, 4)]
        # One common vertex: no restricted edges, ratio 1, recall 1/2.
        assert mm.rsim(gt, gen) == pytest.approx(0.5)

    @staticmethod
    def random_scene_pair(rng):
        """Random gt/gen scenes with overlapping categories at shuffled cells."""
        cats = [(s, c) for s in mdata.SHAPES for c in mdata.COLORS]
        all_cells = [(r, c) for r in range(5) for c in range(5)]
        n_gt = int(rng.integers(1, 6))
        n_gen = int(rng.integers(0, 6))
        gt_cat_idx = rng.choice(24, n_gt, replace=False)
        # gen categories overlap gt about half the time
        gen_cat_idx = [
            int(i) if rng.random() < 0.5 else int(rng.integers(24))
            for i in np.resize(gt_cat_idx, max(n_gen, 1))[:n_gen]
        ]
        gen_cat_idx = list(dict.fromkeys(gen_cat_idx))  # categories unique per scene
        gt_cells = [all_cells[i] for i in rng.choice(25, n_gt, replace=False)]
        gen_cells = [all_cells[i] for i in rng.choice(25, len(gen_cat_idx), replace=False)]
        gt = [ObjectSpec(*cats[i], *cell) for i, cell in zip(gt_cat_idx, gt_cells)]
        gen = [ObjectSpec(*cats[i], *cell) for i, cell in zip(gen_cat_idx, gen_cells)]
        return gt, gen

    def test_matches_brute_force_on_random_scenes(self):
        rng = np.random.default_rng(9)
        for _ in range(60):
            gt, gen = self.random_scene_pair(rng)
            assert mm.rsim(gt, gen) == pytest.approx(brute_rsim(gt, gen), abs=1e-12)
            assert 0.0 <= mm.rsim(gt, gen) <= 1.0

    def test_rsim_bounded_by_recall(self):
        rng = np.random.default_rng(10)
        eps = generate_dataset(30, 10, grid_size=5)
        for ep in eps:
            objs = list(ep.turns[-1].objects)
            kept = [o for o in objs if rng.random() > 0.4]
            recall = len({o.category for o in kept}) / len(objs)
            assert mm.rsim(objs, kept) <= recall + 1e-12


class TestDedupe:
    def test_keeps_lowest_error_cell(self):
        det = mm.Detection(
            objects=[O("cube", "red", 0, 0), O("cube", "red", 2, 2), O("sphere", "blue", 1, 1)],
            errors={(0, 0): 0.02, (2, 2): 0.001, (1, 1): 0.01},
        )
        kept = mm.dedupe_by_category(det)
        assert O("cube", "red", 2, 2) in kept and O("sphere", "blue", 1, 1) in kept
        assert len(kept) == 2

    def test_scoring_survives_duplicate_detections(self):
        # Two cells showing the same category must not crash scene scoring.
        gt = [O("cube", "red", 2, 2)]
        img = mdata.render([O("cube", "red", 0, 0), O("cube", "red", 4, 4)], 5, 32)
        scored = mm.score_scene(gt, img, 5)
        assert scored.recall == 1.0


class TestEvaluate:
    def test_oracle_generator_scores_one(self):
        eps = generate_dataset(11, 5, grid_size=5)
        rep = mm.evaluate(eps, lambda ep: [t.image for t in ep.turns], 5)
        assert rep.precision == rep.recall == rep.f1 == rep.rsim == 1.0

    def test_background_generator_scores_zero(self):
        eps = generate_dataset(12, 5, grid_size=5)
        bg = render([], 5, 32)
        rep = mm.evaluate(eps, lambda ep: [bg] * len(ep.turns), 5)
        assert rep.f1 == 0.0 and rep.rsim == 0.0

    def test_report_json_csv(self, tmp_path):
        eps = generate_dataset(13, 3, grid_size=5)
        rep = mm.evaluate(eps, lambda ep: [t.image for t in ep.turns], 5)
        rep.save_json(tmp_path / "r.json", extra={"config_hash": "abc"})
        rep.save_csv(tmp_path / "r.csv")
        import json

        blob = json.loads((tmp_path / "r.json").read_text())
        assert blob["f1"] == 1.0 and blob["config_hash"] == "abc"
        assert (tmp_path / "r.csv").read_text().count("\n") == 4
