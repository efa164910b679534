"""Cuboid geometry: rotations, faces, point-to-cuboid distances, surface sampling.

Conventions used throughout the package:

* quaternions are ``[w, x, y, z]`` and unit length;
* a cuboid spans ``[-s_i, s_i]`` along axis ``i`` of its local frame, i.e.
  ``s`` holds HALF-extents (kept as logs so they stay positive);
* faces are ordered ``+x, -x, +y, -y, +z, -z`` and every tie between faces
  resolves to the lowest index in that order.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

# Face table: index -> (axis, sign, tangent axes).  Tangent axes are the two
# remaining coordinate axes in ascending order.
FACE_AXES = np.array([0, 0, 1, 1, 2, 2], dtype=int)
FACE_SIGNS = np.array([1.0, -1.0, 1.0, -1.0, 1.0, -1.0])
FACE_TANGENTS = np.array([[1, 2], [1, 2], [0, 2], [0, 2], [0, 1], [0, 1]], dtype=int)
FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=float)))


def normalize_quat(q):
    """Return q scaled to unit norm."""
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if not np.isfinite(n) or n == 0.0:
        raise InvalidInputError("cannot normalize zero or non-finite quaternion")
    return q / n


def quat_to_rotmat(q):
    """Rotation matrix of a quaternion ``[w, x, y, z]``.

    The input is normalized internally; ``q`` and ``-q`` map to the same
    matrix exactly.
    """
    q = np.asarray(q, dtype=float)
    if q.shape != (4,):
        raise InvalidInputError(f"quaternion must have 4 components, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise InvalidInputError("quaternion has non-finite components")
    w, x, y, z = normalize_quat(q)
    return np.array(
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    )


def rotation_matrices(quats):
    """Vectorized :func:`quat_to_rotmat` for an (M, 4) array (normalizes rows)."""
    q = np.asarray(quats, dtype=float)
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3))
    rot[:, 0, 0] = 1.0 - 2.0 * (y * y + z * z)
    rot[:, 0, 1] = 2.0 * (x * y - w * z)
    rot[:, 0, 2] = 2.0 * (x * z + w * y)
    rot[:, 1, 0] = 2.0 * (x * y + w * z)
    rot[:, 1, 1] = 1.0 - 2.0 * (x * x + z * z)
    rot[:, 1, 2] = 2.0 * (y * z - w * x)
    rot[:, 2, 0] = 2.0 * (x * z - w * y)
    rot[:, 2, 1] = 2.0 * (y * z + w * x)
    rot[:, 2, 2] = 1.0 - 2.0 * (x * x + y * y)
    return rot


@dataclass
class Cuboid:
    """Oriented box: translation, unit quaternion, log half-extents, existence logit.

    The serialized form is the 11-D vector ``[t; r; s; delta]`` with ``s`` the
    positive half-extents and ``delta = sigmoid(delta_logit)``.
    """

    t: np.ndarray
    r: np.ndarray
    s_log: np.ndarray
    delta_logit: float = 0.0

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(3)
        self.r = normalize_quat(np.asarray(self.r, dtype=float).reshape(4))
        self.s_log = np.asarray(self.s_log, dtype=float).reshape(3)
        self.delta_logit = float(self.delta_logit)

    @property
    def half_extents(self):
        return np.exp(self.s_log)

    @property
    def delta(self):
        return float(_sigmoid(self.delta_logit))

    @property
    def rotation(self):
        return quat_to_rotmat(self.r)

    def to_vector(self):
        """11-D parameter vector [t; r; s; delta]."""
        return np.concatenate([self.t, self.r, self.half_extents, [self.delta]])

    @classmethod
    def from_halfextents(cls, t, r, half_extents, delta=0.5):
        half_extents = np.asarray(half_extents, dtype=float)
        if np.any(half_extents <= 0):
            raise InvalidInputError("half-extents must be positive")
        delta = min(max(float(delta), 1e-7), 1.0 - 1e-7)
        logit = float(np.log(delta) - np.log1p(-delta))
        return cls(t=t, r=r, s_log=np.log(half_extents), delta_logit=logit)


@dataclass
class Face:
    """One rectangular face of a cuboid in world coordinates."""

    index: int
    world_normal: np.ndarray
    world_center: np.ndarray
    tangent_axes: np.ndarray  # (2, 3) unit vectors
    half_extents_2d: np.ndarray  # (2,)

    @property
    def axis(self):
        return int(FACE_AXES[self.index])

    @property
    def sign(self):
        return float(FACE_SIGNS[self.index])

    @property
    def name(self):
        return FACE_NAMES[self.index]


@dataclass
class PointCloud:
    """N points with unit normals and optional integer part labels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    gt_labels: np.ndarray | None = None
    normals_source: str = "file"

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise InvalidInputError("point cloud must contain at least one point")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise InvalidInputError("normals shape does not match points")
        if self.gt_labels is not None:
            self.gt_labels = np.asarray(self.gt_labels, dtype=int).reshape(-1)
            if self.gt_labels.shape[0] != self.points.shape[0]:
                raise InvalidInputError("labels length does not match points")

    def __len__(self):
        return self.points.shape[0]


def cuboid_faces(c: Cuboid):
    """The 6 faces of a cuboid, in the canonical +x, -x, +y, -y, +z, -z order."""
    rot = c.rotation
    s = c.half_extents
    faces = []
    for idx in range(6):
        a = int(FACE_AXES[idx])
        sg = FACE_SIGNS[idx]
        t1, t2 = FACE_TANGENTS[idx]
        faces.append(
            Face(
                index=idx,
                world_normal=sg * rot[:, a],
                world_center=c.t + sg * s[a] * rot[:, a],
                tangent_axes=np.stack([rot[:, t1], rot[:, t2]]),
                half_extents_2d=np.array([s[t1], s[t2]]),
            )
        )
    return faces


def _face_of(c, idx):
    return cuboid_faces(c)[idx]


def point_to_cuboid_distance(p, n_p, c: Cuboid, sigma_s=0.0, rng=None):
    """Squared distance from p to the cuboid face whose normal best matches n_p.

    A probe point ``p_s = p + eta * n_p`` with ``eta ~ N(0, sigma_s^2)`` is
    projected onto the selected face rectangle; the returned squared distance
    is measured from the ORIGINAL p to that foot point.  With ``sigma_s = 0``
    no random draw happens at all.

    Returns ``(d2, face, foot)``.
    """
    p = np.asarray(p, dtype=float).reshape(3)
    n_p = np.asarray(n_p, dtype=float).reshape(3)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(n_p))):
        raise InvalidInputError("point or normal has non-finite components")
    if sigma_s < 0:
        raise InvalidInputError("sigma_s must be >= 0")
    rot = c.rotation
    s = c.half_extents
    nu = rot.T @ n_p
    dots = np.array([nu[0], -nu[0], nu[1], -nu[1], nu[2], -nu[2]])
    idx = int(np.argmax(dots))  # first max == lowest face index on ties
    a = int(FACE_AXES[idx])
    sg = FACE_SIGNS[idx]

    eta = 0.0
    if sigma_s > 0.0:
        if rng is None:
            raise InvalidInputError("sigma_s > 0 requires an rng")
        eta = float(rng.normal(0.0, sigma_s))

    u_orig = rot.T @ (p - c.t)
    u_probe = u_orig + eta * nu
    foot_local = np.clip(u_probe, -s, s)
    foot_local[a] = sg * s[a]
    diff = foot_local - u_orig
    d2 = float(diff @ diff)
    foot = c.t + rot @ foot_local
    return d2, _face_of(c, idx), foot


def min_distance_point_to_cuboid(p, c: Cuboid):
    """Squared distance from p to the closest point on the whole cuboid surface.

    Interior points project to the nearest face; equidistant faces resolve to
    the lowest face index.  Returns ``(d2, face, foot)``.
    """
    p = np.asarray(p, dtype=float).reshape(3)
    rot = c.rotation
    s = c.half_extents
    u = rot.T @ (p - c.t)
    feet = np.clip(np.tile(u, (6, 1)), -s, s)
    feet[np.arange(6), FACE_AXES] = FACE_SIGNS * s[FACE_AXES]
    d2_all = ((feet - u) ** 2).sum(axis=1)
    idx = int(np.argmin(d2_all))  # first min == lowest face index on ties
    foot = c.t + rot @ feet[idx]
    return float(d2_all[idx]), _face_of(c, idx), foot


def _face_areas(half_extents):
    """(6,) world areas of the faces of a cuboid with the given half-extents."""
    s = np.asarray(half_extents, dtype=float)
    t1 = s[FACE_TANGENTS[:, 0]]
    t2 = s[FACE_TANGENTS[:, 1]]
    return 4.0 * t1 * t2


def sample_cuboid_surface(c: Cuboid, k, rng):
    """k points sampled uniformly over the cuboid surface, with face normals.

    Faces are chosen with probability proportional to area, then uv uniform in
    the face rectangle.  Returns ``(points (k,3), normals (k,3))``.
    """
    pts, nrm, _, _, _ = sample_cuboids_surface([c], k, rng)
    return pts, nrm


def sample_cuboids_surface(cuboids, k, rng, weights=None):
    """Area-weighted uniform sampling over the union of several cuboid surfaces.

    Returns ``(points, normals, cuboid_idx, face_idx, uv)`` where ``uv`` is the
    in-face coordinate in ``[-1, 1]^2``; the structural outputs let callers
    re-evaluate sample positions under perturbed cuboid parameters.
    """
    if k < 1:
        raise InvalidInputError("sample count must be >= 1")
    if len(cuboids) == 0:
        raise InvalidInputError("no cuboids to sample from")
    areas = np.concatenate([_face_areas(c.half_extents) for c in cuboids])
    if weights is not None:
        areas = areas * np.repeat(np.asarray(weights, dtype=float), 6)
    total = areas.sum()
    if total <= 0:
        raise InvalidInputError("total sampling area is zero")
    flat = rng.choice(areas.size, size=k, p=areas / total)
    uv = rng.uniform(-1.0, 1.0, size=(k, 2))
    cub_idx = flat // 6
    face_idx = flat % 6

    points = np.empty((k, 3))
    normals = np.empty((k, 3))
    for ci in np.unique(cub_idx):
        sel = cub_idx == ci
        c = cuboids[int(ci)]
        points[sel], normals[sel] = _face_points(c, face_idx[sel], uv[sel])
    return points, normals, cub_idx, face_idx, uv


def _face_points(c: Cuboid, face_idx, uv):
    """World positions and normals for (face, uv) samples on one cuboid."""
    rot = c.rotation
    s = c.half_extents
    a = FACE_AXES[face_idx]
    sg = FACE_SIGNS[face_idx]
    t1 = FACE_TANGENTS[face_idx, 0]
    t2 = FACE_TANGENTS[face_idx, 1]
    local = np.zeros((len(face_idx), 3))
    local[np.arange(len(face_idx)), a] = sg * s[a]
    local[np.arange(len(face_idx)), t1] = uv[:, 0] * s[t1]
    local[np.arange(len(face_idx)), t2] = uv[:, 1] * s[t2]
    points = c.t + local @ rot.T
    normals = (sg[:, None] * rot[:, a].T)
    return points, normals


# Outward-oriented triangle table for the canonical corner ordering
# (corner index bits = (x, y, z), bit set = positive side).
_BOX_CORNERS = np.array(
    [[sx, sy, sz] for sx in (-1.0, 1.0) for sy in (-1.0, 1.0) for sz in (-1.0, 1.0)]
)
_BOX_TRIANGLES = np.array(
    [
        [4, 6, 7], [4, 7, 5],  # +x
        [0, 1, 3], [0, 3, 2],  # -x
        [2, 3, 7], [2, 7, 6],  # +y
        [0, 4, 5], [0, 5, 1],  # -y
        [1, 5, 7], [1, 7, 3],  # +z
        [0, 2, 6], [0, 6, 4],  # -z
    ],
    dtype=int,
)


def cuboid_mesh(c: Cuboid):
    """8 vertices and 12 outward-oriented triangles of the cuboid.

    Triangle pairs follow the face order, so triangles ``2f`` and ``2f+1``
    belong to face ``f``.
    """
    vertices = c.t + (_BOX_CORNERS * c.half_extents) @ c.rotation.T
    return vertices, _BOX_TRIANGLES.copy()


def estimate_normals(points, k):
    """Per-point unit normals from the PCA of the k nearest neighbors.

    The normal is the smallest-eigenvalue eigenvector of the neighborhood
    covariance, flipped so it points away from the shape centroid.  A
    rank-deficient neighborhood falls back to the centroid-to-point direction.
    """
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    n = points.shape[0]
    if k < 3:
        raise InvalidInputError("estimate_normals requires k >= 3")
    if n <= k:
        raise InvalidInputError(f"estimate_normals requires N > k (N={n}, k={k})")
    tree = cKDTree(points)
    _, idx = tree.query(points, k=k)
    neigh = points[idx]
    centered = neigh - neigh.mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", centered, centered) / k
    evals, evecs = np.linalg.eigh(cov)
    evals = np.maximum(evals, 0.0)
    normals = evecs[:, :, 0].copy()

    centroid = points.mean(axis=0)
    radial = points - centroid
    radial_norm = np.linalg.norm(radial, axis=1)

    # Neighborhood does not span a plane: use the radial direction instead.
    degenerate = evals[:, 1] <= 1e-12 * evals[:, 2]
    if np.any(degenerate):
        fallback = np.where(
            radial_norm[degenerate, None] > 0,
            radial[degenerate] / np.maximum(radial_norm[degenerate, None], 1e-300),
            np.array([0.0, 0.0, 1.0]),
        )
        normals[degenerate] = fallback

    flip = np.einsum("ni,ni->n", normals, radial) < 0
    normals[flip] *= -1.0
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    return normals


# ---------------------------------------------------------------------------
# Batched distance machinery shared by the losses and the optimizer.
# Shapes: P (N,3) points, NP (N,3) normals, t (M,3), rot (M,3,3), s (M,3).
# ---------------------------------------------------------------------------

def select_faces_by_normal(normals, rotations):
    """(M, N) face indices maximizing dot(face normal, point normal)."""
    nu = np.einsum("mdi,nd->mni", rotations, normals)  # local-frame point normals
    dots = np.empty((rotations.shape[0], normals.shape[0], 6))
    dots[:, :, 0::2] = nu
    dots[:, :, 1::2] = -nu
    return np.argmax(dots, axis=2)


def fixed_face_distances(points, t, rotations, s, faces, normals=None, eta=None):
    """Squared distances to frozen per-pair faces, plus backprop intermediates.

    ``eta`` (N,) offsets points along their normals before the in-face clamp;
    distances are always measured from the original points.  Returns a dict of
    (M, N, ...) arrays consumed by the analytic gradients.
    """
    m = t.shape[0]
    n = points.shape[0]
    w_orig = points[None, :, :] - t[:, None, :]  # (M,N,3)
    if eta is not None:
        w_probe = (points + eta[:, None] * normals)[None, :, :] - t[:, None, :]
    else:
        w_probe = w_orig
    u_orig = np.einsum("mdi,mnd->mni", rotations, w_orig)
    u_probe = u_orig if eta is None else np.einsum("mdi,mnd->mni", rotations, w_probe)

    axis = FACE_AXES[faces]  # (M,N)
    sign = FACE_SIGNS[faces]
    s_mn = np.broadcast_to(s[:, None, :], (m, n, 3))
    v = np.clip(u_probe, -s_mn, s_mn)
    unclamped = (u_probe > -s_mn) & (u_probe < s_mn)
    rows = np.arange(m)[:, None]
    cols = np.arange(n)[None, :]
    v[rows, cols, axis] = sign * s[rows, axis]
    e = v - u_orig
    d2 = np.einsum("mni,mni->mn", e, e)
    return {
        "d2": d2,
        "e": e,
        "u_probe": u_probe,
        "w_orig": w_orig,
        "w_probe": w_probe,
        "axis": axis,
        "sign": sign,
        "unclamped": unclamped,
    }


def min_face_distances(points, t, rotations, s):
    """(M, N) squared distances to the whole surface and the argmin faces."""
    m = t.shape[0]
    n = points.shape[0]
    u = np.einsum("mdi,mnd->mni", rotations, points[None, :, :] - t[:, None, :])
    s_mn = s[:, None, :]
    d2_faces = np.empty((m, n, 6))
    for f in range(6):
        a = int(FACE_AXES[f])
        v = np.clip(u, -s_mn, s_mn)
        v[:, :, a] = FACE_SIGNS[f] * np.broadcast_to(s_mn[:, :, a], (m, n))
        diff = v - u
        d2_faces[:, :, f] = np.einsum("mni,mni->mn", diff, diff)
    faces = np.argmin(d2_faces, axis=2)
    d2 = np.take_along_axis(d2_faces, faces[:, :, None], axis=2)[:, :, 0]
    return d2, faces
