"""Quantitative evaluation: analytic per-cell object detection, per-scene
precision/recall/F1 over object categories, and relational similarity on the
final turn's scene graphs.

Detection compares every grid cell against every single-object template (and
the empty cell) by pixel MSE; the analytic detector replaces a learned one,
so presence metrics reduce to plain set precision/recall.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import data as mdata

TAU_DET_DEFAULT = 0.05


@dataclass
class Detection:
    objects: list  # ObjectSpec, at most one per cell
    errors: dict  # (row, col) -> matched-template MSE


@dataclass
class SceneMetrics:
    precision: float
    recall: float
    f1: float
    rsim: float


@dataclass
class MetricReport:
    precision: float
    recall: float
    f1: float
    rsim: float
    per_scene: list = field(default_factory=list)

    def to_dict(self):
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "rsim": self.rsim,
            "per_scene": [vars(s) for s in self.per_scene],
        }

    def save_json(self, path, extra=None):
        blob = self.to_dict()
        if extra:
            blob.update(extra)
        with open(path, "w") as f:
            json.dump(blob, f, indent=2, sort_keys=True)
            f.write("\n")

    def save_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["scene", "precision", "recall", "f1", "rsim"])
            for i, s in enumerate(self.per_scene):
                w.writerow([i, s.precision, s.recall, s.f1, s.rsim])


_template_cache = {}


def _cell_templates(grid_size, image_size):
    """[25, 3, k, k] stack: empty cell first, then the 24 object classes."""
    key = (grid_size, image_size)
    if key not in _template_cache:
        k, _ = mdata.cell_geometry(grid_size, image_size)
        bg = np.empty((3, k, k), dtype=np.float32)
        bg[:] = (np.asarray(mdata.BACKGROUND_RGB, dtype=np.float32)[:, None, None] - 127.5) / 128.0
        stack = [bg]
        for cid in range(mdata.N_CLASSES):
            shape, color = mdata.class_category(cid)
            t = bg.copy()
            mask = mdata.glyph_mask(shape, k)
            color_v = (np.asarray(mdata.PALETTE[color], dtype=np.float32) - 127.5) / 128.0
            t[:, mask] = color_v[:, None]
            stack.append(t)
        _template_cache[key] = np.stack(stack)
    return _template_cache[key]


def detect_objects(image, grid_size, tau_det=TAU_DET_DEFAULT):
    """Template-matching detection over grid cells.

    For each cell the argmin-MSE template wins (first index breaks ties, so
    empty beats objects and lower class ids beat higher); an object is
    reported only when the winning template is non-empty with MSE < tau_det.
    """
    image = np.clip(np.asarray(image, dtype=np.float32), -1.0, 1.0)
    size = image.shape[-1]
    templates = _cell_templates(grid_size, size)
    k, off = mdata.cell_geometry(grid_size, size)
    objects = []
    errors = {}
    for row in range(grid_size):
        for col in range(grid_size):
            r0 = off + row * k
            c0 = off + col * k
            crop = image[:, r0:r0 + k, c0:c0 + k]
            mse = ((templates - crop[None]) ** 2).mean(axis=(1, 2, 3))
            best = int(np.argmin(mse))
            if best > 0 and mse[best] < tau_det:
                shape, color = mdata.class_category(best - 1)
                objects.append(mdata.ObjectSpec(shape, color, row, col))
                errors[(row, col)] = float(mse[best])
    return Detection(objects=objects, errors=errors)


def prf1(gt_categories, gen_categories):
    """Set precision/recall/F1 over (shape, color) categories."""
    gt = set(gt_categories)
    gen = set(gen_categories)
    inter = len(gt & gen)
    if not gen:
        p = 1.0 if not gt else 0.0
    else:
        p = inter / len(gen)
    r = 1.0 if not gt else inter / len(gt)
    f1 = 0.0 if (p + r) == 0 else 2.0 * p * r / (p + r)
    return p, r, f1


def _check_unique(objects, which):
    cats = [o.category for o in objects]
    if len(set(cats)) != len(cats):
        raise ValueError(f"rsim: duplicate categories in {which} graph")


def rsim(gt_objects, gen_objects):
    """recall x (preserved fraction of ground-truth edges over common vertices).

    Vertices are object categories; edge sets are restricted to vertices
    detected in both scenes. With no restricted ground-truth edges the ratio
    is 1 (nothing to violate).
    """
    _check_unique(gt_objects, "ground-truth")
    _check_unique(gen_objects, "generated")
    gt_cats = {o.category for o in gt_objects}
    gen_cats = {o.category for o in gen_objects}
    common = gt_cats & gen_cats
    recall = 1.0 if not gt_cats else len(common) / len(gt_cats)
    gt_edges = {e for e in mdata.category_edges(gt_objects) if e[0] in common and e[1] in common}
    gen_edges = {e for e in mdata.category_edges(gen_objects) if e[0] in common and e[1] in common}
    ratio = 1.0 if not gt_edges else len(gt_edges & gen_edges) / len(gt_edges)
    return recall * ratio


def dedupe_by_category(detection):
    """Best (lowest-error) cell per category.

    Generated images can trigger the same category in several cells; graph
    vertices are categories, so duplicates collapse to the most confident one.
    """
    best = {}
    for obj in detection.objects:
        err = detection.errors[obj.cell]
        cur = best.get(obj.category)
        if cur is None or err < detection.errors[cur.cell]:
            best[obj.category] = obj
    return sorted(best.values(), key=lambda o: o.cell)


def score_scene(gt_objects, gen_image, grid_size, tau_det=TAU_DET_DEFAULT):
    det = detect_objects(gen_image, grid_size, tau_det)
    objects = dedupe_by_category(det)
    p, r, f1 = prf1([o.category for o in gt_objects], [o.category for o in objects])
    return SceneMetrics(precision=p, recall=r, f1=f1, rsim=rsim(gt_objects, objects))


def evaluate(episodes, rollout_fn, grid_size, tau_det=TAU_DET_DEFAULT):
    """Macro-averaged last-turn metrics over episodes.

    rollout_fn(episode) -> list of generated [3, S, S] images, one per turn
    (free-running; plugging the ground-truth renderer gives all-ones metrics).
    """
    per_scene = []
    for ep in episodes:
        images = rollout_fn(ep)
        last_gt = ep.turns[-1].objects
        per_scene.append(score_scene(last_gt, images[-1], grid_size, tau_det))
    n = len(per_scene)

    def avg(attr):
        return math.fsum(getattr(s, attr) for s in per_scene) / n if n else 0.0

    return MetricReport(
        precision=avg("precision"), recall=avg("recall"), f1=avg("f1"), rsim=avg("rsim"),
        per_scene=per_scene,
    )
