"""Joint gradient optimization of cuboid parameters and assignment logits.

Each fitting step freezes the non-smooth pieces of the objective (face
selection, the normal-offset samples, existence targets, and the hard
assignment of the ablation variants), which makes the loss piecewise smooth;
gradients are then exact analytic derivatives of that frozen-step loss and
are validated against central finite differences in the test suite.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .assignment import coverage, existence_targets, hard_labels, softmax_columns
from .errors import InvalidConfigError, InvalidInputError, NumericalError
from .geometry import (
    FACE_AXES,
    FACE_SIGNS,
    FACE_TANGENTS,
    Cuboid,
    PointCloud,
    rotation_matrices,
)
from .losses import LossBreakdown, total_loss

PARAM_KEYS = ("t", "quat", "s_log", "delta_logit", "logits")
VARIANTS = ("p2c-seg", "p2c-dis", "chamfer-dis")
PROJECTIONS = ("normal", "mindist")


@dataclass
class FitConfig:
    """All hyperparameters of one fitting session."""

    num_cuboids: int = 16
    steps: int = 2000
    lr: float = 6e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    lambda1: float = 0.1
    lambda2: float = 0.01
    sigma_s: float = 0.05
    eps_sps: float = 0.01
    eps_ext: float = 0.05
    variant: str = "p2c-seg"
    projection: str = "normal"
    seed: int = 0
    batch_points: int | None = None
    # Adam learning-rate multiplier for the free assignment logits; they stand
    # in for a whole network branch and need a faster timescale than the
    # geometric parameters.
    logit_lr_scale: float = 25.0
    # Redundancy gate width for the compactness->assignment coupling, in units
    # of squared bounding-box diagonal.  With free per-point logits an ungated
    # L0.5 coverage loss is winner-take-all (its pull toward the largest
    # cuboid exceeds any reconstruction defense on unit-scale shapes), so the
    # compact force on a point's logits is weighted by how geometrically
    # interchangeable the competing cuboids are for that point.  Set to None
    # to optimize the raw ungated objective.
    compact_gate_tau: float = 0.005
    # "voronoi" starts the assignment from seed proximity (soft nearest-seed
    # partition); "zero" starts it uniform.  A uniform start makes every
    # cuboid chase the global mass centroid (points a cuboid already fits
    # exert no pull, so even tiny residual weights on far points win), which
    # loses whole parts; the proximity start anchors each cuboid to its
    # region from step one.
    logit_init: str = "voronoi"

    def validate(self):
        if self.num_cuboids < 1:
            raise InvalidConfigError("num_cuboids must be >= 1")
        if self.steps < 1:
            raise InvalidConfigError("steps must be >= 1")
        if self.lr <= 0:
            raise InvalidConfigError("lr must be > 0")
        if self.sigma_s < 0:
            raise InvalidConfigError("sigma_s must be >= 0")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise InvalidConfigError("loss weights must be non-negative")
        if not 0.0 < self.eps_ext < 1.0:
            raise InvalidConfigError("eps_ext must lie in (0, 1)")
        if self.eps_sps < 0:
            raise InvalidConfigError("eps_sps must be >= 0")
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise InvalidConfigError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise InvalidConfigError("adam_eps must be > 0")
        if self.variant not in VARIANTS:
            raise InvalidConfigError(f"unknown variant {self.variant!r}")
        if self.projection not in PROJECTIONS:
            raise InvalidConfigError(f"unknown projection {self.projection!r}")
        if self.batch_points is not None and self.batch_points < 1:
            raise InvalidConfigError("batch_points must be >= 1")
        if self.logit_lr_scale <= 0:
            raise InvalidConfigError("logit_lr_scale must be > 0")
        if self.compact_gate_tau is not None and self.compact_gate_tau <= 0:
            raise InvalidConfigError("compact_gate_tau must be positive or None")
        if self.logit_init not in ("voronoi", "zero"):
            raise InvalidConfigError(f"unknown logit_init {self.logit_init!r}")
        return self

    def to_dict(self):
        return {
            "num_cuboids": self.num_cuboids,
            "steps": self.steps,
            "lr": self.lr,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
            "lambda1": self.lambda1,
            "lambda2": self.lambda2,
            "sigma_s": self.sigma_s,
            "eps_sps": self.eps_sps,
            "eps_ext": self.eps_ext,
            "variant": self.variant,
            "projection": self.projection,
            "seed": self.seed,
            "batch_points": self.batch_points,
            "logit_lr_scale": self.logit_lr_scale,
            "compact_gate_tau": self.compact_gate_tau,
            "logit_init": self.logit_init,
        }


@dataclass
class FitState:
    """Mutable optimization state: parameters, Adam moments, step counter."""

    t: np.ndarray            # (M, 3)
    quat: np.ndarray         # (M, 4)
    s_log: np.ndarray        # (M, 3)
    delta_logit: np.ndarray  # (M,)
    logits: np.ndarray       # (M, N)
    m1: dict = field(default_factory=dict)
    m2: dict = field(default_factory=dict)
    step: int = 0

    def params(self):
        return {k: getattr(self, k) for k in PARAM_KEYS}

    def cuboids(self):
        return [
            Cuboid(t=self.t[m], r=self.quat[m], s_log=self.s_log[m],
                   delta_logit=self.delta_logit[m])
            for m in range(self.t.shape[0])
        ]


@dataclass
class StepContext:
    """Quantities frozen within one optimization step."""

    indices: np.ndarray             # (B,) point subset used this step
    faces: np.ndarray | None        # (M, B) frozen face selection
    eta: np.ndarray | None          # (B,) normal-offset samples
    w_hard: np.ndarray | None       # (M, B) frozen hard assignment
    targets: np.ndarray             # (M,) frozen existence targets
    compact_gate: np.ndarray | None  # (M, B) frozen redundancy gate
    surf_cuboid: np.ndarray | None  # (K,) cuboid index per surface sample
    surf_coef: np.ndarray | None    # (K, 3) local coords in half-extent units


@dataclass
class AbstractionResult:
    """Everything a fitting session produces."""

    cuboids: list
    assignment: np.ndarray   # W, (M, N)
    labels: np.ndarray       # (N,)
    coverage: np.ndarray     # (M,)
    existence: np.ndarray    # (M,) binary flags from the coverage rule
    deltas: np.ndarray       # (M,) sigmoid existence predictions
    loss_trace: list
    metrics: dict

    @property
    def n_active(self):
        return int(np.asarray(self.existence).sum())


def farthest_point_indices(points, m):
    """Greedy farthest-point sample of m indices, always starting at index 0."""
    points = np.asarray(points, dtype=float)
    n = points.shape[0]
    order = [0]
    d2 = ((points - points[0]) ** 2).sum(axis=1)
    while len(order) < min(m, n):
        nxt = int(np.argmax(d2))
        order.append(nxt)
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    if m > n:
        warnings.warn(
            f"requested {m} cuboid seeds from {n} points; sampling with replacement"
        )
        order = [order[i % n] for i in range(m)]
    return np.array(order[:m], dtype=int)


def init_fit(pc: PointCloud, config: FitConfig) -> FitState:
    """Deterministic initial state: FPS translations, identity rotations.

    Half-extents start at 10% of the bounding-box diagonal; existence logits
    at 0 (delta = 0.5); assignment logits at 0 (uniform soft assignment).
    """
    config.validate()
    n = len(pc)
    m = config.num_cuboids
    seeds = farthest_point_indices(pc.points, m)
    diag = float(np.linalg.norm(pc.points.max(axis=0) - pc.points.min(axis=0)))
    if diag <= 0.0:
        diag = 1.0
    if config.logit_init == "voronoi":
        d2_seed = ((pc.points[None, :, :] - pc.points[seeds][:, None, :]) ** 2).sum(-1)
        logits = -d2_seed / (0.15 * diag) ** 2
    else:
        logits = np.zeros((m, n))
    state = FitState(
        t=pc.points[seeds].copy(),
        quat=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (m, 1)),
        s_log=np.full((m, 3), np.log(0.1 * diag)),
        delta_logit=np.zeros(m),
        logits=logits,
    )
    state.m1 = {k: np.zeros_like(v) for k, v in state.params().items()}
    state.m2 = {k: np.zeros_like(v) for k, v in state.params().items()}
    return state


def _hard_nearest(points, t, rot, s):
    d2, min_faces = geometry.min_face_distances(points, t, rot, s)
    nearest = np.argmin(d2, axis=0)
    w_hard = np.zeros_like(d2)
    w_hard[nearest, np.arange(points.shape[0])] = 1.0
    return w_hard, min_faces


def freeze_step(state: FitState, pc: PointCloud, config: FitConfig, rng) -> StepContext:
    """Draw and freeze the stochastic/non-smooth pieces of one step."""
    n = len(pc)
    if config.batch_points is not None and config.batch_points < n:
        indices = np.sort(rng.choice(n, config.batch_points, replace=False))
    else:
        indices = np.arange(n)
    pts = pc.points[indices]
    rot = rotation_matrices(state.quat)
    s = np.exp(state.s_log)

    w_hard = None
    min_faces = None
    if config.variant in ("p2c-dis", "chamfer-dis"):
        w_hard, min_faces = _hard_nearest(pts, state.t, rot, s)

    faces = None
    eta = None
    surf_cuboid = None
    surf_coef = None
    compact_gate = None
    if config.variant == "chamfer-dis":
        w_cov = w_hard.mean(axis=1)
        flags = existence_targets(w_cov, config.eps_ext)
        surf_cuboid, surf_coef = _sample_surface_structure(
            s, flags, indices.shape[0], rng
        )
    elif config.projection == "mindist":
        if min_faces is None:
            _, min_faces = geometry.min_face_distances(pts, state.t, rot, s)
        faces = min_faces
    else:
        faces = geometry.select_faces_by_normal(pc.normals[indices], rot)
        if config.sigma_s > 0.0:
            eta = rng.normal(0.0, config.sigma_s, size=indices.shape[0])

    if w_hard is None and config.compact_gate_tau is not None:
        compact_gate = _redundancy_gate(state, pc, config, indices, faces, rot, s)

    if w_hard is not None:
        w_cov = w_hard.mean(axis=1)
    else:
        w_cov = coverage(softmax_columns(state.logits[:, indices]))
    targets = existence_targets(w_cov, config.eps_ext)
    return StepContext(
        indices=indices,
        faces=faces,
        eta=eta,
        w_hard=w_hard,
        targets=targets,
        compact_gate=compact_gate,
        surf_cuboid=surf_cuboid,
        surf_coef=surf_coef,
    )


def _redundancy_gate(state, pc, config, indices, faces, rot, s):
    """Per-(cuboid, point) weight in (0, 1] for the compactness coupling.

    Uses deterministic (eta = 0) distances at the current parameters: a
    cuboid's gate for a point decays with its excess squared distance over
    the point's best cuboid, so compactness can merge interchangeable cuboids
    but cannot pull points across real geometric boundaries.
    """
    pts = pc.points[indices]
    if config.projection == "mindist":
        d2, _ = geometry.min_face_distances(pts, state.t, rot, s)
    else:
        parts = geometry.fixed_face_distances(pts, state.t, rot, s, faces)
        d2 = parts["d2"]
    diag = float(np.linalg.norm(pc.points.max(axis=0) - pc.points.min(axis=0)))
    tau = config.compact_gate_tau * max(diag, 1e-12) ** 2
    return np.exp(-(d2 - d2.min(axis=0, keepdims=True)) / tau)


def _sample_surface_structure(s, flags, k, rng):
    """Frozen (cuboid, face, uv) structure for area-weighted surface samples."""
    active = np.flatnonzero(np.asarray(flags))
    if active.size == 0:
        active = np.arange(s.shape[0])
    areas = np.concatenate([geometry._face_areas(s[m]) for m in active])
    flat = rng.choice(areas.size, size=k, p=areas / areas.sum())
    uv = rng.uniform(-1.0, 1.0, size=(k, 2))
    cub = active[flat // 6]
    face = flat % 6
    coef = np.zeros((k, 3))
    rows = np.arange(k)
    coef[rows, FACE_AXES[face]] = FACE_SIGNS[face]
    coef[rows, FACE_TANGENTS[face, 0]] = uv[:, 0]
    coef[rows, FACE_TANGENTS[face, 1]] = uv[:, 1]
    return cub, coef


def evaluate_losses(params, pc, config, ctx):
    """Loss breakdown for raw parameters under a frozen step context.

    This is the exact (piecewise smooth) function the analytic gradients
    differentiate, so finite differences of it must match them.
    """
    indices = ctx.indices
    pts = pc.points[indices]
    b = pts.shape[0]
    m = params["t"].shape[0]
    rot = rotation_matrices(params["quat"])
    s = np.exp(params["s_log"])

    if ctx.w_hard is not None:
        w_matrix = ctx.w_hard
    else:
        w_matrix = softmax_columns(params["logits"][:, indices])
    w_cov = w_matrix.mean(axis=1)

    aux = {"rot": rot, "s": s, "w_matrix": w_matrix, "w_cov": w_cov, "b": b}

    if config.variant == "chamfer-dis":
        local = ctx.surf_coef * s[ctx.surf_cuboid]
        samples = params["t"][ctx.surf_cuboid] + np.einsum(
            "kij,kj->ki", rot[ctx.surf_cuboid], local
        )
        _, idx_ab = cKDTree(samples).query(pts)
        _, idx_ba = cKDTree(pts).query(samples)
        d_ab = ((pts - samples[idx_ab]) ** 2).sum(axis=1).mean()
        d_ba = ((samples - pts[idx_ba]) ** 2).sum(axis=1).mean()
        recons = float(d_ab + d_ba)
        aux.update(samples=samples, idx_ab=idx_ab, idx_ba=idx_ba, local=local)
    else:
        parts = geometry.fixed_face_distances(
            pts, params["t"], rot, s, ctx.faces,
            normals=None if ctx.eta is None else pc.normals[indices],
            eta=ctx.eta,
        )
        recons = float((w_matrix * parts["d2"]).sum() / b)
        aux["parts"] = parts

    if ctx.compact_gate is not None:
        w_compact = (w_matrix * ctx.compact_gate).mean(axis=1)
    else:
        w_compact = w_cov
    aux["w_compact"] = w_compact
    compact = float(np.sqrt(w_compact + config.eps_sps).sum() ** 2)
    delta = 1.0 / (1.0 + np.exp(-params["delta_logit"]))
    delta_c = np.clip(delta, 1e-7, 1.0 - 1e-7)
    exist = float(
        -(ctx.targets * np.log(delta_c) + (1 - ctx.targets) * np.log(1.0 - delta_c)).mean()
    )
    aux["delta"] = delta
    return total_loss(recons, compact, exist, config.lambda1, config.lambda2), aux


def _quat_grad_from_rot_grad(quat_raw, grad_rot):
    """Chain (M,3,3) rotation-matrix gradients back to raw quaternions.

    Uses the unit-quaternion Jacobian of the rotation formula followed by the
    normalization Jacobian (I - u u^T) / |q|.
    """
    norms = np.linalg.norm(quat_raw, axis=1, keepdims=True)
    u = quat_raw / norms
    w, x, y, z = u[:, 0], u[:, 1], u[:, 2], u[:, 3]
    zero = np.zeros_like(w)
    drot = np.empty((quat_raw.shape[0], 4, 3, 3))
    drot[:, 0] = 2.0 * np.stack(
        [np.stack([zero, -z, y], axis=-1),
         np.stack([z, zero, -x], axis=-1),
         np.stack([-y, x, zero], axis=-1)], axis=1)
    drot[:, 1] = 2.0 * np.stack(
        [np.stack([zero, y, z], axis=-1),
         np.stack([y, -2 * x, -w], axis=-1),
         np.stack([z, w, -2 * x], axis=-1)], axis=1)
    drot[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y, x, w], axis=-1),
         np.stack([x, zero, z], axis=-1),
         np.stack([-w, z, -2 * y], axis=-1)], axis=1)
    drot[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z, -w, x], axis=-1),
         np.stack([w, -2 * z, y], axis=-1),
         np.stack([x, y, zero], axis=-1)], axis=1)
    g_hom = np.einsum("mdj,mkdj->mk", grad_rot, drot)
    g_proj = g_hom - np.einsum("mk,mk->m", g_hom, u)[:, None] * u
    return g_proj / norms


def _backward(params, pc, config, ctx, aux):
    """Analytic gradients of the frozen-step total loss."""
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    rot = aux["rot"]
    s = aux["s"]
    b = aux["b"]
    m = params["t"].shape[0]
    w_matrix = aux["w_matrix"]
    grad_rot = np.zeros((m, 3, 3))

    if config.variant == "chamfer-dis":
        pts = pc.points[ctx.indices]
        samples = aux["samples"]
        k = samples.shape[0]
        g_b = (2.0 / k) * (samples - pts[aux["idx_ba"]])
        np.add.at(g_b, aux["idx_ab"], (-2.0 / b) * (pts - samples[aux["idx_ab"]]))
        sc = ctx.surf_cuboid
        np.add.at(grads["t"], sc, g_b)
        np.add.at(grad_rot, sc, g_b[:, :, None] * aux["local"][:, None, :])
        g_s = np.einsum("kij,ki->kj", rot[sc], g_b) * ctx.surf_coef
        g_s_acc = np.zeros((m, 3))
        np.add.at(g_s_acc, sc, g_s)
        grads["s_log"] += g_s_acc * s
        grads["logits"] = None
    else:
        parts = aux["parts"]
        e = parts["e"]
        axis = parts["axis"]
        sign = parts["sign"]
        rows = np.arange(m)[:, None]
        cols = np.arange(b)[None, :]

        weight = w_matrix / b
        g_v = 2.0 * weight[:, :, None] * e  # dL/d(foot local)
        dv_du = parts["unclamped"].astype(float)
        dv_du[rows, cols, axis] = 0.0
        g_up = g_v * dv_du       # dL/d(u_probe)
        g_uo = -g_v              # dL/d(u_orig), direct term

        g_u_sum = (g_up + g_uo).sum(axis=1)
        grads["t"] += -np.einsum("mij,mj->mi", rot, g_u_sum)

        s_mn = np.broadcast_to(s[:, None, :], e.shape)
        dv_ds = np.zeros_like(e)
        dv_ds[parts["u_probe"] >= s_mn] = 1.0
        dv_ds[parts["u_probe"] <= -s_mn] = -1.0
        dv_ds[rows, cols, axis] = sign
        grads["s_log"] += (g_v * dv_ds).sum(axis=1) * s

        grad_rot += np.einsum("mnd,mnj->mdj", parts["w_probe"], g_up)
        grad_rot += np.einsum("mnd,mnj->mdj", parts["w_orig"], g_uo)

        if ctx.w_hard is None:
            # dL/dW: reconstruction + compactness, then back through softmax.
            w_compact = aux["w_compact"]
            s_cov = np.sqrt(w_compact + config.eps_sps).sum()
            bias = (config.lambda1 * s_cov / np.sqrt(w_compact + config.eps_sps))
            if ctx.compact_gate is not None:
                compact_term = bias[:, None] * ctx.compact_gate / b
            else:
                compact_term = np.broadcast_to(bias[:, None] / b, parts["d2"].shape)
            c = parts["d2"] / b + compact_term
            colsum = (w_matrix * c).sum(axis=0, keepdims=True)
            grads["logits"][:, ctx.indices] = w_matrix * (c - colsum)
        else:
            grads["logits"] = None

    grads["quat"] += _quat_grad_from_rot_grad(params["quat"], grad_rot)

    delta = aux["delta"]
    inside = (delta > 1e-7) & (delta < 1.0 - 1e-7)
    grads["delta_logit"] += np.where(
        inside, config.lambda2 * (delta - ctx.targets) / m, 0.0
    )
    return grads


def _check_finite(grads, step=None, state=None):
    for key, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(
                f"non-finite gradient for parameter '{key}'", last_state=state, step=step
            )


def compute_gradients(state: FitState, pc: PointCloud, config: FitConfig, rng=None,
                      ctx=None):
    """Gradients of the total loss w.r.t. every parameter group.

    The step context (face selection, eta samples, targets, hard assignment)
    is frozen before differentiating; pass ``ctx`` to reuse one, otherwise it
    is drawn from ``rng``.
    """
    if ctx is None:
        if rng is None:
            rng = np.random.default_rng(config.seed)
        ctx = freeze_step(state, pc, config, rng)
    params = state.params()
    _, aux = evaluate_losses(params, pc, config, ctx)
    grads = _backward(params, pc, config, ctx, aux)
    _check_finite(grads, step=state.step, state=state)
    return grads


def adam_step(state: FitState, grads, config: FitConfig) -> FitState:
    """One bias-corrected Adam update; quaternions are renormalized after it."""
    state.step += 1
    t_step = state.step
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** t_step
    bc2 = 1.0 - b2 ** t_step
    for key in PARAM_KEYS:
        g = grads.get(key)
        if g is None:
            continue
        m1 = state.m1[key]
        m2 = state.m2[key]
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b2
        m2 += (1.0 - b2) * (g * g)
        lr = config.lr * (config.logit_lr_scale if key == "logits" else 1.0)
        getattr(state, key)[...] -= lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + config.adam_eps)
    state.quat /= np.linalg.norm(state.quat, axis=1, keepdims=True)
    return state


def _final_assignment(state, pc, config):
    if config.variant in ("p2c-dis", "chamfer-dis"):
        rot = rotation_matrices(state.quat)
        w_matrix, _ = _hard_nearest(pc.points, state.t, rot, np.exp(state.s_log))
        return w_matrix
    return softmax_columns(state.logits)


def _final_metrics(state, pc, config, w_matrix, w_cov, targets):
    """Deterministic full-cloud loss summary (sigma_s treated as 0)."""
    rot = rotation_matrices(state.quat)
    s = np.exp(state.s_log)
    if config.variant == "chamfer-dis":
        rng = np.random.default_rng([config.seed, 0x5EED])
        cub, coef = _sample_surface_structure(s, targets, len(pc), rng)
        local = coef * s[cub]
        samples = state.t[cub] + np.einsum("kij,kj->ki", rot[cub], local)
        _, i_ab = cKDTree(samples).query(pc.points)
        _, i_ba = cKDTree(pc.points).query(samples)
        recons = float(
            ((pc.points - samples[i_ab]) ** 2).sum(axis=1).mean()
            + ((samples - pc.points[i_ba]) ** 2).sum(axis=1).mean()
        )
    elif config.projection == "mindist":
        d2, _ = geometry.min_face_distances(pc.points, state.t, rot, s)
        recons = float((w_matrix * d2).sum() / len(pc))
    else:
        faces = geometry.select_faces_by_normal(pc.normals, rot)
        parts = geometry.fixed_face_distances(pc.points, state.t, rot, s, faces)
        recons = float((w_matrix * parts["d2"]).sum() / len(pc))
    compact = float(np.sqrt(w_cov + config.eps_sps).sum() ** 2)
    delta = np.clip(1.0 / (1.0 + np.exp(-state.delta_logit)), 1e-7, 1.0 - 1e-7)
    exist = float(
        -(targets * np.log(delta) + (1 - targets) * np.log(1.0 - delta)).mean()
    )
    breakdown = total_loss(recons, compact, exist, config.lambda1, config.lambda2)
    return {
        "final_recons": breakdown.recons,
        "final_compact": breakdown.compact,
        "final_exist": breakdown.exist,
        "final_total": breakdown.total,
    }


def fit(pc: PointCloud, config: FitConfig) -> AbstractionResult:
    """Run the full fitting loop and summarize the abstraction.

    Existence flags in the result come from the coverage rule (w_m > eps_ext);
    the sigmoid existence predictions are reported alongside.
    """
    config.validate()
    if pc.normals is None:
        pc = PointCloud(
            points=pc.points,
            normals=geometry.estimate_normals(pc.points, k=min(16, len(pc) - 1)),
            gt_labels=pc.gt_labels,
            normals_source="estimated",
        )
    rng = np.random.default_rng(config.seed)
    state = init_fit(pc, config)
    trace = []
    for step in range(config.steps):
        ctx = freeze_step(state, pc, config, rng)
        params = state.params()
        losses, aux = evaluate_losses(params, pc, config, ctx)
        if not np.isfinite(losses.total):
            raise NumericalError(
                f"total loss became non-finite at step {step}",
                last_state=state, step=step,
            )
        grads = _backward(params, pc, config, ctx, aux)
        _check_finite(grads, step=step, state=state)
        adam_step(state, grads, config)
        trace.append(losses)

    w_matrix = _final_assignment(state, pc, config)
    w_cov = coverage(w_matrix)
    flags = existence_targets(w_cov, config.eps_ext)
    metrics = _final_metrics(state, pc, config, w_matrix, w_cov, flags)
    metrics["steps"] = config.steps
    return AbstractionResult(
        cuboids=state.cuboids(),
        assignment=w_matrix,
        labels=hard_labels(w_matrix),
        coverage=w_cov,
        existence=flags,
        deltas=1.0 / (1.0 + np.exp(-state.delta_logit)),
        loss_trace=trace,
        metrics=metrics,
    )
