"""Slow, obviously-correct reference implementations used only by the tests.

They share no code with the package beyond the value types, so agreement
between the two is meaningful.
"""

from __future__ import annotations

import itertools

from lesionmine.fusion import Detection
from lesionmine.geometry import BBox
from lesionmine.dataset import Annotation
from lesionmine.tags import TAGGED_CLASSES, LesionTag


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    w = min(ax1, bx1) - max(ax0, bx0)
    h = min(ay1, by1) - max(ay0, by0)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def _order(tag) -> int:
    return list(TAGGED_CLASSES).index(tag)


def brute_force_wbf(per_model, iou_thr=0.5, skip=0.0, model_count=None):
    """Recompute every cluster's fused box from its members at each step."""
    model_count = model_count or len(per_model)
    dets = [d for dets in per_model for d in dets if d.score >= skip]
    dets.sort(key=lambda d: (-d.score, _order(d.tag), tuple(d.box.as_list())))
    clusters = []  # (tag, [detections])
    for d in dets:
        best, best_v = None, None
        for cl in clusters:
            if cl[0] != d.tag:
                continue
            v = box_iou(_fused_box(cl[1]), d.box.as_list())
            if v >= iou_thr and (best_v is None or v > best_v):
                best, best_v = cl, v
        if best is None:
            clusters.append((d.tag, [d]))
        else:
            best[1].append(d)
    out = []
    for tag, members in clusters:
        n = len(members)
        score = sum(m.score for m in members) / n * min(n, model_count) / model_count
        out.append((_fused_box(members), tag, min(score, 1.0)))
    out.sort(key=lambda t: (-t[2], _order(t[1]), tuple(t[0])))
    return out


def _fused_box(members):
    total = sum(m.score for m in members)
    if total == 0:
        return [sum(m.box.as_list()[i] for m in members) / len(members) for i in range(4)]
    return [sum(m.score * m.box.as_list()[i] for m in members) / total for i in range(4)]


def brute_force_froc(images, fp_points, iou_thr=0.5):
    """Sensitivity at each FP/image budget by enumerating every score threshold.

    For each threshold the predictions at or above it are re-matched from
    scratch (greedy by descending score, best-IoU unmatched ground truth).
    The curve is the set of (fp/image, sensitivity) points plus the origin,
    interpolated linearly, taking the best sensitivity among points that
    share an FP rate and clamping beyond the last point.
    """
    n_img = len(images)
    n_gt = sum(len(g) for g, _ in images)
    scores = sorted({p.score for _, preds in images for p in preds}, reverse=True)
    pts = [(0.0, 0.0)]
    for thr in scores:
        tp = fp = 0
        for gts, preds in images:
            kept = [p for p in preds if p.score >= thr]
            t, f = _greedy(gts, kept, iou_thr)
            tp += t
            fp += f
        pts.append((fp / n_img, tp / n_gt))
    result = []
    for x in fp_points:
        result.append(_interp(pts, x))
    return result


def _greedy(gts, preds, iou_thr):
    order = sorted(
        preds,
        key=lambda p: (
            -p.score,
            -max([box_iou(p.box.as_list(), g.box.as_list()) for g in gts] or [0.0]),
            tuple(p.box.as_list()),
            _order(p.tag),
        ),
    )
    used = set()
    tp = fp = 0
    for p in order:
        best, best_v = None, -1.0
        for i, g in enumerate(gts):
            if i in used:
                continue
            v = box_iou(p.box.as_list(), g.box.as_list())
            key = (v, [-c for c in g.box.as_list()], -_order(g.tag))
            if v >= iou_thr and (best is None or key > best_v):
                best, best_v = i, key
        if best is None:
            fp += 1
        else:
            used.add(best)
            tp += 1
    return tp, fp


def _interp(pts, x):
    # best sensitivity for each distinct fp value
    by_fp = {}
    for f, s in pts:
        by_fp[f] = max(s, by_fp.get(f, 0.0))
    xs = sorted(by_fp)
    if x >= xs[-1]:
        return by_fp[xs[-1]]
    for a, b in zip(xs, xs[1:]):
        if a <= x < b:
            ya, yb = by_fp[a], by_fp[b]
            return ya + (yb - ya) * (x - a) / (b - a)
    raise AssertionError("unreachable")


def random_box(rng, size=100.0):
    x0, y0 = rng.uniform(0, size), rng.uniform(0, size)
    w, h = rng.uniform(1, size / 2), rng.uniform(1, size / 2)
    return BBox(x0, y0, x0 + w, y0 + h)


def random_detections(rng, n, tags, model_id="m", jitter_from=None):
    out = []
    for _ in range(n):
        if jitter_from and rng.random() < 0.6:
            b = jitter_from[int(rng.integers(len(jitter_from)))]
            d = rng.normal(0, 2.0, size=4)
            try:
                box = BBox(b.x_min + d[0], b.y_min + d[1], b.x_max + d[2], b.y_max + d[3])
            except Exception:
                box = b
        else:
            box = random_box(rng)
        tag = tags[int(rng.integers(len(tags)))]
        out.append(Detection(box, tag, float(rng.uniform(0, 1)), model_id))
    return out


def all_subsets(items):
    for r in range(len(items) + 1):
        yield from itertools.combinations(items, r)


def random_froc_instance(rng):
    """Up to 5 images and 10 predictions, most of them near a ground-truth box."""
    images = []
    n_img = int(rng.integers(1, 6))
    budget = int(rng.integers(0, 11))
    for i in range(n_img):
        gts = [Annotation(random_box(rng), TAGGED_CLASSES[int(rng.integers(3))]) for _ in range(int(rng.integers(0, 4)))]
        images.append([gts, []])
    if not any(g for g, _ in images):
        images[0][0].append(Annotation(random_box(rng), LesionTag.LUNG))
    scores = [0.2, 0.4, 0.6, 0.8, 0.9]
    for _ in range(budget):
        gts, preds = images[int(rng.integers(n_img))]
        if gts and rng.random() < 0.6:
            b = gts[int(rng.integers(len(gts)))].box
            d = rng.normal(0, 1.5, size=4)
            try:
                box = BBox(b.x_min + d[0], b.y_min + d[1], b.x_max + d[2], b.y_max + d[3])
            except Exception:
                box = b
        else:
            box = random_box(rng)
        preds.append(Detection(box, TAGGED_CLASSES[int(rng.integers(3))], float(rng.choice(scores))))
    return [(g, p) for g, p in images]
