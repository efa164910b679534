"""Point-cloud ingestion, synthetic ground-truth shapes, result serialization,
and OBJ export.

Result files use the versioned "cuboidfit/1" schema; floats are written with
17 significant digits so round trips are bit-exact.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import geometry
from .errors import DataError, InvalidConfigError, InvalidInputError
from .geometry import Cuboid, PointCloud

SCHEMA_VERSION = "cuboidfit/1"
FORMATS = ("xyz", "ply-ascii", "obj-vertices")
_SUFFIX_FORMATS = {".xyz": "xyz", ".ply": "ply-ascii", ".obj": "obj-vertices"}


# ---------------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------------

def normalize_points(points):
    """Recenter to the centroid and scale the bounding-box diagonal to 1."""
    points = np.asarray(points, dtype=float)
    centered = points - points.mean(axis=0)
    diag = float(np.linalg.norm(centered.max(axis=0) - centered.min(axis=0)))
    if diag > 0.0:
        centered = centered / diag
    return centered


def _parse_xyz(lines):
    pts, nrm, labels = [], [], []
    ncols = None
    for lineno, raw in enumerate(lines, 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if ncols is None:
            ncols = len(parts)
            if ncols not in (3, 4, 6, 7):
                raise DataError(
                    f"line {lineno}: expected 3, 4, 6 or 7 columns, got {ncols}"
                )
        elif len(parts) != ncols:
            raise DataError(
                f"line {lineno}: expected {ncols} columns, got {len(parts)}"
            )
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise DataError(f"line {lineno}: malformed number") from None
        pts.append(vals[:3])
        if ncols in (6, 7):
            nrm.append(vals[3:6])
        if ncols in (4, 7):
            label = vals[-1]
            if label != int(label):
                raise DataError(f"line {lineno}: label column must be an integer")
            labels.append(int(label))
    return (
        np.array(pts, dtype=float).reshape(-1, 3),
        np.array(nrm, dtype=float).reshape(-1, 3) if nrm else None,
        np.array(labels, dtype=int) if labels else None,
    )


def _parse_ply(lines):
    it = iter(enumerate(lines, 1))
    try:
        _, magic = next(it)
    except StopIteration:
        raise DataError("empty ply file") from None
    if magic.strip() != "ply":
        raise DataError("line 1: not a ply file")
    elements = []  # (name, count, [property names])
    fmt_seen = False
    for lineno, raw in it:
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise DataError(f"line {lineno}: only ascii ply is supported")
            fmt_seen = True
        elif tokens[0] == "element":
            elements.append([tokens[1], int(tokens[2]), []])
        elif tokens[0] == "property":
            if not elements:
                raise DataError(f"line {lineno}: property before any element")
            if tokens[1] == "list":
                elements[-1][2].append(("list", tokens[4]))
            else:
                elements[-1][2].append(("scalar", tokens[2]))
        elif tokens[0] == "end_header":
            break
    else:
        raise DataError("ply header has no end_header")
    if not fmt_seen:
        raise DataError("ply header has no format line")

    vertex = next((e for e in elements if e[0] == "vertex"), None)
    if vertex is None:
        raise DataError("ply file has no vertex element")
    names = [n for kind, n in vertex[2] if kind == "scalar"]
    if any(kind == "list" for kind, _ in vertex[2]):
        raise DataError("list properties on vertex elements are not supported")
    for coord in ("x", "y", "z"):
        if coord not in names:
            raise DataError(f"ply vertex element lacks property '{coord}'")
    has_normals = all(n in names for n in ("nx", "ny", "nz"))

    rows = []
    for name, count, props in elements:
        take = name == "vertex"
        got = 0
        while got < count:
            try:
                lineno, raw = next(it)
            except StopIteration:
                raise DataError(
                    f"ply data ended early in element '{name}'"
                ) from None
            if not raw.split():
                continue
            if take:
                vals = raw.split()
                if len(vals) != len(names):
                    raise DataError(
                        f"line {lineno}: expected {len(names)} values, got {len(vals)}"
                    )
                try:
                    rows.append([float(v) for v in vals])
                except ValueError:
                    raise DataError(f"line {lineno}: malformed number") from None
            got += 1
    arr = np.array(rows, dtype=float).reshape(-1, len(names))
    cols = {n: i for i, n in enumerate(names)}
    pts = arr[:, [cols["x"], cols["y"], cols["z"]]] if arr.size else np.empty((0, 3))
    nrm = (
        arr[:, [cols["nx"], cols["ny"], cols["nz"]]]
        if has_normals and arr.size
        else None
    )
    return pts, nrm, None


def _parse_obj(lines):
    pts, nrm = [], []
    for lineno, raw in enumerate(lines, 1):
        tokens = raw.split()
        if not tokens:
            continue
        if tokens[0] == "v":
            if len(tokens) < 4:
                raise DataError(f"line {lineno}: v line needs 3 coordinates")
            try:
                pts.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise DataError(f"line {lineno}: malformed number") from None
        elif tokens[0] == "vn":
            if len(tokens) < 4:
                raise DataError(f"line {lineno}: vn line needs 3 components")
            try:
                nrm.append([float(t) for t in tokens[1:4]])
            except ValueError:
                raise DataError(f"line {lineno}: malformed number") from None
    normals = np.array(nrm, dtype=float) if len(nrm) == len(pts) and nrm else None
    return np.array(pts, dtype=float).reshape(-1, 3), normals, None


_PARSERS = {"xyz": _parse_xyz, "ply-ascii": _parse_ply, "obj-vertices": _parse_obj}


def load_pointcloud(path, fmt=None, normalize=True, estimate_k=16):
    """Read a point cloud from xyz / ascii-ply / obj.

    Unless ``normalize`` is off, the cloud is recentered and scaled to a unit
    bounding-box diagonal.  File normals are renormalized; missing normals are
    estimated (and flagged via ``normals_source``).
    """
    path = Path(path)
    if fmt is None:
        fmt = _SUFFIX_FORMATS.get(path.suffix.lower())
        if fmt is None:
            raise DataError(f"cannot infer format from suffix {path.suffix!r}")
    if fmt not in _PARSERS:
        raise InvalidConfigError(f"unknown point-cloud format {fmt!r}")
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    points, normals, labels = _PARSERS[fmt](lines)
    if points.shape[0] == 0:
        raise DataError(f"{path}: no points found")

    if normalize:
        points = normalize_points(points)
    if normals is not None:
        norms = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(norms <= 0) or not np.all(np.isfinite(norms)):
            raise DataError(f"{path}: zero or non-finite normal in file")
        normals = normals / norms
        source = "file"
    else:
        if points.shape[0] > max(3, min(estimate_k, points.shape[0] - 1)):
            k = min(estimate_k, points.shape[0] - 1)
            normals = geometry.estimate_normals(points, k=k)
        else:
            centered = points - points.mean(axis=0)
            lengths = np.linalg.norm(centered, axis=1, keepdims=True)
            normals = np.where(lengths > 0, centered / np.maximum(lengths, 1e-300),
                               np.array([0.0, 0.0, 1.0]))
        source = "estimated"
    return PointCloud(points=points, normals=normals, gt_labels=labels,
                      normals_source=source)


def save_pointcloud_xyz(pc: PointCloud, path):
    """Write an xyz file with normals (and labels when present)."""
    path = Path(path)
    with open(path, "w") as fh:
        for i in range(len(pc)):
            cols = [*pc.points[i], *pc.normals[i]]
            line = " ".join(format(v, ".17g") for v in cols)
            if pc.gt_labels is not None:
                line += f" {int(pc.gt_labels[i])}"
            fh.write(line + "\n")


# ---------------------------------------------------------------------------
# Synthetic ground-truth shapes
# ---------------------------------------------------------------------------

def _gt(center, half_extents, quat=(1.0, 0.0, 0.0, 0.0)):
    return Cuboid.from_halfextents(t=center, r=quat, half_extents=half_extents,
                                   delta=1.0)


def _parts_cuboid(params):
    return [
        _gt(
            params.get("center", (0.0, 0.0, 0.0)),
            params.get("half_extents", (0.35, 0.25, 0.15)),
            params.get("quat", (1.0, 0.0, 0.0, 0.0)),
        )
    ]


def _parts_table(params):
    leg = (0.06, 0.06, 0.25)
    parts = [_gt((0.0, 0.0, 0.53), (0.5, 0.5, 0.03))]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append(_gt((0.38 * sx, 0.38 * sy, 0.25), leg))
    return parts


def _parts_chair(params):
    parts = [
        _gt((0.0, 0.0, 0.5), (0.4, 0.4, 0.04)),     # seat
        _gt((0.0, -0.36, 0.96), (0.4, 0.04, 0.42)),  # back
    ]
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            parts.append(_gt((0.32 * sx, 0.32 * sy, 0.23), (0.05, 0.05, 0.23)))
    return parts


def _parts_stack(params):
    return [
        _gt((0.0, 0.0, 0.15), (0.45, 0.45, 0.15)),
        _gt((0.0, 0.0, 0.45), (0.30, 0.30, 0.15)),
        _gt((0.0, 0.0, 0.75), (0.15, 0.15, 0.15)),
    ]


_SHAPES = {
    "cuboid": _parts_cuboid,
    "table": _parts_table,
    "chair": _parts_chair,
    "stack": _parts_stack,
}

SHAPE_KINDS = tuple(_SHAPES)


def synth_shape(kind, params=None, n_points=2048, noise_sigma=0.0, seed=0):
    """Sample a labeled cloud from a union of ground-truth cuboids.

    Points are area-weighted over all faces with exact face normals; isotropic
    Gaussian noise of std ``noise_sigma`` is added to positions afterwards.
    Labels are the generating cuboid index (also for overlap regions).

    Returns ``(PointCloud, gt_cuboids, labels)``.
    """
    if kind not in _SHAPES:
        raise InvalidConfigError(f"unknown shape kind {kind!r}")
    if n_points < 1:
        raise InvalidInputError("n_points must be >= 1")
    if noise_sigma < 0:
        raise InvalidInputError("noise_sigma must be >= 0")
    gt_cuboids = _SHAPES[kind](params or {})
    rng = np.random.default_rng(seed)
    pts, nrm, cub_idx, _, _ = geometry.sample_cuboids_surface(gt_cuboids, n_points, rng)
    if noise_sigma > 0.0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    labels = cub_idx.astype(int)
    pc = PointCloud(points=pts, normals=nrm, gt_labels=labels, normals_source="file")
    return pc, gt_cuboids, labels


# ---------------------------------------------------------------------------
# Result documents
# ---------------------------------------------------------------------------

@dataclass
class ResultDocument:
    """Serializable record of one abstraction: the 11-D cuboid vectors plus
    labels, metrics, config echo, and provenance."""

    version: str
    config: dict
    cuboids: list
    labels: list
    metrics: dict
    provenance: dict

    def to_cuboids(self):
        return [
            Cuboid.from_halfextents(
                t=rec["t"], r=rec["r"], half_extents=rec["s"],
                delta=min(max(rec["delta"], 1e-7), 1.0 - 1e-7),
            )
            for rec in self.cuboids
        ]

    @property
    def existence(self):
        return np.array([int(rec["exists"]) for rec in self.cuboids])

    @property
    def coverage_vector(self):
        return np.array([float(rec["coverage"]) for rec in self.cuboids])

    def labels_array(self):
        return np.array(self.labels, dtype=int)


def result_document(result, config, input_path="", normals_source="file",
                    extra_config=None):
    """Build a ResultDocument from an AbstractionResult and its FitConfig."""
    cfg = dict(config.to_dict())
    if extra_config:
        cfg.update(extra_config)
    records = []
    for m, c in enumerate(result.cuboids):
        records.append(
            {
                "t": [float(v) for v in c.t],
                "r": [float(v) for v in c.r],
                "s": [float(v) for v in c.half_extents],
                "delta": float(result.deltas[m]),
                "exists": int(result.existence[m]),
                "coverage": float(result.coverage[m]),
            }
        )
    return ResultDocument(
        version=SCHEMA_VERSION,
        config=cfg,
        cuboids=records,
        labels=[int(v) for v in result.labels],
        metrics={k: (float(v) if isinstance(v, float) else v)
                 for k, v in result.metrics.items()},
        provenance={
            "input": str(input_path),
            "seed": int(config.seed),
            "normals_source": str(normals_source),
        },
    )


def _json_text(obj, indent=0):
    """Deterministic JSON with floats at 17 significant digits."""
    pad = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        rows = [
            f'{pad}  {json.dumps(str(k))}: {_json_text(v, indent + 1)}'
            for k, v in obj.items()
        ]
        return "{\n" + ",\n".join(rows) + f"\n{pad}}}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        inner = ", ".join(_json_text(v, indent + 1) for v in obj)
        return f"[{inner}]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise InvalidInputError("cannot serialize non-finite float")
        return format(x, ".17g")
    if isinstance(obj, str):
        return json.dumps(obj)
    raise InvalidInputError(f"cannot serialize value of type {type(obj).__name__}")


def save_result(doc: ResultDocument, path):
    """Write a ResultDocument as deterministic JSON text."""
    body = {
        "version": doc.version,
        "config": doc.config,
        "cuboids": doc.cuboids,
        "labels": doc.labels,
        "metrics": doc.metrics,
        "provenance": doc.provenance,
    }
    Path(path).write_text(_json_text(body) + "\n")


def _require(mapping, key, where):
    if key not in mapping:
        raise DataError(f"missing field '{key}' in {where}")
    return mapping[key]


def load_result(path) -> ResultDocument:
    """Parse and validate a result file written by :func:`save_result`."""
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise DataError(f"{path}: result document must be a JSON object")
    version = _require(data, "version", "result document")
    if version != SCHEMA_VERSION:
        raise DataError(
            f"unsupported result version {version!r} (expected {SCHEMA_VERSION!r})"
        )
    config = _require(data, "config", "result document")
    cuboids = _require(data, "cuboids", "result document")
    labels = _require(data, "labels", "result document")
    metrics = _require(data, "metrics", "result document")
    provenance = _require(data, "provenance", "result document")
    for key in ("input", "seed", "normals_source"):
        _require(provenance, key, "provenance")
    for m, rec in enumerate(cuboids):
        where = f"cuboid record {m}"
        for key in ("t", "r", "s", "delta", "exists", "coverage"):
            _require(rec, key, where)
        if len(rec["t"]) != 3 or len(rec["r"]) != 4 or len(rec["s"]) != 3:
            raise DataError(f"{where}: wrong vector lengths")
        if not 0.0 <= rec["delta"] <= 1.0:
            raise DataError(f"{where}: delta must lie in [0, 1]")
        if any(v <= 0 for v in rec["s"]):
            raise DataError(f"{where}: half-extents must be positive")
    return ResultDocument(
        version=version,
        config=config,
        cuboids=cuboids,
        labels=labels,
        metrics=metrics,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# OBJ export
# ---------------------------------------------------------------------------

def export_obj(result, path):
    """Write the active cuboids as an OBJ mesh, one group per cuboid.

    Accepts an AbstractionResult or a ResultDocument.  With no active cuboid
    the file contains only a comment header.
    """
    if isinstance(result, ResultDocument):
        cuboids = result.to_cuboids()
        flags = result.existence
    else:
        cuboids = result.cuboids
        flags = np.asarray(result.existence)
    active = np.flatnonzero(flags)
    with open(path, "w") as fh:
        fh.write("# cuboidfit abstraction\n")
        if active.size == 0:
            fh.write("# empty abstraction (no active cuboids)\n")
            return
        base = 0
        for m in active:
            vertices, triangles = geometry.cuboid_mesh(cuboids[int(m)])
            fh.write(f"g cuboid_{int(m)}\n")
            for v in vertices:
                fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
            for tri in triangles:
                fh.write(f"f {tri[0] + 1 + base} {tri[1] + 1 + base} {tri[2] + 1 + base}\n")
            base += 8
