"""Evaluation protocols: Chamfer on sampled abstractions, normal consistency,
label-transfer mIOU, active-cuboid statistics, structural clustering.

IOU is pooled over the dataset (not averaged per shape); reports record this.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import DataError, InvalidConfigError, InvalidInputError
from .losses import chamfer_distance


@dataclass
class MetricsReport:
    chamfer: float
    normal_consistency: float
    n_ac: float
    per_label_iou: list
    miou: float | None

    def to_dict(self):
        return {
            "chamfer": self.chamfer,
            "normal_consistency": self.normal_consistency,
            "n_ac": self.n_ac,
            "per_label_iou": [[int(label), float(v)] for label, v in self.per_label_iou],
            "miou": self.miou,
            "iou_pooling": "dataset",
        }


def _active_cuboids(result):
    flags = np.asarray(result.existence)
    cuboids = [c for c, f in zip(result.cuboids, flags) if f]
    if not cuboids:
        raise DataError("empty abstraction: no active cuboids")
    return cuboids


def sample_abstraction(result, samples, rng):
    """Area-weighted uniform samples (points, normals) over active cuboids."""
    cuboids = _active_cuboids(result)
    pts, nrm, _, _, _ = geometry.sample_cuboids_surface(cuboids, samples, rng)
    return pts, nrm


def eval_chamfer(result, pc, samples=4096, rng=None):
    """Symmetric Chamfer between `samples` abstraction-surface points and the
    cloud resampled/subsampled to the same count."""
    if rng is None:
        rng = np.random.default_rng(0)
    abs_pts, _ = sample_abstraction(result, samples, rng)
    n = len(pc)
    idx = rng.choice(n, size=samples, replace=n < samples)
    return chamfer_distance(abs_pts, pc.points[idx])


def normal_consistency(result, pc, samples=4096, rng=None):
    """Symmetric mean absolute cosine between matched normals, in [0, 1].

    Direction 1 matches every input point to its nearest abstraction sample;
    direction 2 the reverse; the two means are averaged.
    """
    if pc.normals is None:
        raise InvalidInputError("normal consistency requires point normals")
    if rng is None:
        rng = np.random.default_rng(0)
    abs_pts, abs_nrm = sample_abstraction(result, samples, rng)
    _, to_abs = cKDTree(abs_pts).query(pc.points)
    _, to_pc = cKDTree(pc.points).query(abs_pts)
    fwd = np.abs(np.einsum("ni,ni->n", pc.normals, abs_nrm[to_abs])).mean()
    bwd = np.abs(np.einsum("ni,ni->n", abs_nrm, pc.normals[to_pc])).mean()
    return float((fwd + bwd) / 2.0)


def transfer_labels(results, gt_labels, fraction=0.2, rng=None):
    """Majority-vote semantic label per cuboid index from a random shape subset.

    Cuboids that receive no points in the subset map to the globally most
    frequent label; count ties resolve to the lower label id.
    """
    if len(results) != len(gt_labels):
        raise InvalidInputError("results and ground-truth label sets differ in length")
    n_shapes = len(results)
    n_sub = int(round(fraction * n_shapes))
    if n_sub < 1:
        raise InvalidConfigError("label-transfer subset is empty")
    n_sub = min(n_sub, n_shapes)
    if rng is None:
        rng = np.random.default_rng(0)
    subset = rng.choice(n_shapes, size=n_sub, replace=False)

    m = max(len(r.cuboids) for r in results)
    n_labels = int(max(np.max(g) for g in gt_labels)) + 1
    counts = np.zeros((m, n_labels), dtype=np.int64)
    for si in subset:
        pred = np.asarray(results[si].labels)
        gt = np.asarray(gt_labels[si])
        np.add.at(counts, (pred, gt), 1)

    global_best = int(np.argmax(counts.sum(axis=0)))
    labelmap = np.argmax(counts, axis=1)
    labelmap[counts.sum(axis=1) == 0] = global_best
    return labelmap


def miou(results, gt_labels, labelmap):
    """Pooled per-label IOU over the dataset and its mean (x100).

    Labels absent from both predictions and ground truth are skipped.
    Returns ``(per_label, miou)`` with ``per_label`` a list of (label, iou).
    """
    labelmap = np.asarray(labelmap)
    pred = np.concatenate([labelmap[np.asarray(r.labels)] for r in results])
    gt = np.concatenate([np.asarray(g) for g in gt_labels])
    labels = np.union1d(np.unique(pred), np.unique(gt))
    per_label = []
    for lab in labels:
        inter = int(np.sum((pred == lab) & (gt == lab)))
        union = int(np.sum((pred == lab) | (gt == lab)))
        per_label.append((int(lab), inter / union))
    mean_iou = 100.0 * float(np.mean([v for _, v in per_label]))
    return per_label, mean_iou


def structural_clusters(results):
    """Group shape indices by identical existence bit-vectors.

    Clusters are ordered by size descending, then by lexicographic vector;
    members are ascending shape indices.  The clusters partition the dataset.
    """
    groups = {}
    for i, r in enumerate(results):
        key = tuple(int(f) for f in np.asarray(r.existence))
        groups.setdefault(key, []).append(i)
    ordered = sorted(groups.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    return [members for _, members in ordered]


def active_cuboid_stats(results):
    """Mean number of active cuboids over the dataset."""
    return float(np.mean([float(np.asarray(r.existence).sum()) for r in results]))
