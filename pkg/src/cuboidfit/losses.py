"""Training objectives: reconstruction, compactness, existence, Chamfer.

The total objective is ``recons + lambda1 * compact + lambda2 * exist``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .assignment import coverage, validate_assignment
from .errors import InvalidConfigError, InvalidInputError

RECONS_VARIANTS = ("p2c-seg", "p2c-dis", "mindist")


@dataclass(frozen=True)
class LossBreakdown:
    recons: float
    compact: float
    exist: float
    total: float


def _cuboid_arrays(cuboids):
    t = np.stack([c.t for c in cuboids])
    rot = np.stack([c.rotation for c in cuboids])
    s = np.stack([c.half_extents for c in cuboids])
    return t, rot, s


def hard_nearest_assignment(points, cuboids):
    """(M, N) one-hot assignment of each point to its geometrically closest cuboid."""
    t, rot, s = _cuboid_arrays(cuboids)
    d2, _ = geometry.min_face_distances(points, t, rot, s)
    nearest = np.argmin(d2, axis=0)
    w_matrix = np.zeros_like(d2)
    w_matrix[nearest, np.arange(points.shape[0])] = 1.0
    return w_matrix


def reconstruction_loss(pc, cuboids, w_matrix, sigma_s=0.0, variant="p2c-seg", rng=None):
    """Assignment-weighted mean point-to-cuboid squared distance.

    Variants: ``p2c-seg`` uses W as given with the normal-similar distance;
    ``p2c-dis`` replaces W by the hard nearest-cuboid indicator; ``mindist``
    keeps W but projects to the closest face instead of the normal-similar one
    (no sampling along normals in that case).
    """
    if len(cuboids) == 0:
        raise InvalidConfigError("reconstruction loss requires at least one cuboid")
    if variant not in RECONS_VARIANTS:
        raise InvalidConfigError(f"unknown reconstruction variant {variant!r}")
    points = pc.points
    t, rot, s = _cuboid_arrays(cuboids)

    if variant == "mindist":
        d2, _ = geometry.min_face_distances(points, t, rot, s)
    else:
        if pc.normals is None:
            raise InvalidInputError("reconstruction loss requires point normals")
        faces = geometry.select_faces_by_normal(pc.normals, rot)
        eta = None
        if sigma_s > 0.0:
            if rng is None:
                raise InvalidInputError("sigma_s > 0 requires an rng")
            eta = rng.normal(0.0, sigma_s, size=points.shape[0])
        parts = geometry.fixed_face_distances(
            points, t, rot, s, faces, normals=pc.normals, eta=eta
        )
        d2 = parts["d2"]

    if variant == "p2c-dis":
        w_matrix = hard_nearest_assignment(points, cuboids)
    else:
        w_matrix = validate_assignment(w_matrix)
    return float((w_matrix * d2).sum() / points.shape[0])


def compactness_loss(coverage_vec, eps_sps=0.01):
    """L0.5-style sparsity on coverage: ``(sum_m sqrt(w_m + eps))^2``."""
    w = np.asarray(coverage_vec, dtype=float)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < -1e-9):
        raise InvalidInputError("coverage must lie on the probability simplex")
    return float(np.sqrt(np.maximum(w, 0.0) + eps_sps).sum() ** 2)


def existence_loss(delta, targets):
    """Binary cross-entropy between predicted existence and binary targets."""
    delta = np.clip(np.asarray(delta, dtype=float), 1e-7, 1.0 - 1e-7)
    targets = np.asarray(targets, dtype=float)
    bce = -(targets * np.log(delta) + (1.0 - targets) * np.log(1.0 - delta))
    return float(bce.mean())


def chamfer_distance(a, b):
    """Symmetric L2 Chamfer: sum of the two directional means of squared distances."""
    a = np.asarray(a, dtype=float).reshape(-1, 3)
    b = np.asarray(b, dtype=float).reshape(-1, 3)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidInputError("chamfer distance of an empty point set")
    _, idx_ab = cKDTree(b).query(a)
    _, idx_ba = cKDTree(a).query(b)
    d_ab = ((a - b[idx_ab]) ** 2).sum(axis=1).mean()
    d_ba = ((b - a[idx_ba]) ** 2).sum(axis=1).mean()
    return float(d_ab + d_ba)


def total_loss(recons, compact, exist, lambda1=0.1, lambda2=0.01):
    """Weighted sum of the three objectives as a LossBreakdown."""
    if lambda1 < 0 or lambda2 < 0:
        raise InvalidConfigError("loss weights must be non-negative")
    return LossBreakdown(
        recons=float(recons),
        compact=float(compact),
        exist=float(exist),
        total=float(recons + lambda1 * compact + lambda2 * exist),
    )
