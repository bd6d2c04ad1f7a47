"""Point cloud loading, normalization, and synthetic dataset generation.

Clouds carry positions and unit normals in double precision.  Supported file
formats: XYZ text (3 or 6 columns), OFF, and ASCII PLY.  Missing normals are
estimated from mesh faces when available, otherwise by k-NN PCA.  The
synthetic generator produces labeled clouds from eight analytic surface
families and is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace

import numpy as np


class ParseError(ValueError):
    """A point cloud file failed to parse; message carries path and line."""


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) float64
    normals: np.ndarray  # (N, 3) float64, unit length
    label: int | None = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        if self.positions.ndim != 2 or self.positions.shape[1] != 3 or len(self.positions) < 1:
            raise ValueError(f"positions must be (N>=1, 3), got {self.positions.shape}")
        if self.normals.shape != self.positions.shape:
            raise ValueError("normals shape must match positions")

    def __len__(self) -> int:
        return len(self.positions)

    def check_normals_unit(self, tol: float = 1e-4) -> None:
        lengths = np.linalg.norm(self.normals, axis=1)
        if np.any(np.abs(lengths - 1.0) > tol):
            worst = float(np.abs(lengths - 1.0).max())
            raise ValueError(f"normals are not unit length (max deviation {worst:.2e})")


@dataclass
class Dataset:
    clouds: list[PointCloud]
    class_names: list[str]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.clouds)

    def labels(self) -> np.ndarray:
        return np.array([c.label for c in self.clouds], dtype=np.int64)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def load(path: str, format: str | None = None) -> PointCloud:
    """Load a cloud from XYZ / OFF / ASCII-PLY; estimate normals if absent."""
    if format is None:
        ext = os.path.splitext(path)[1].lower().lstrip(".")
        format = {"xyz": "xyz", "txt": "xyz", "off": "off", "ply": "ply-ascii"}.get(ext)
        if format is None:
            raise ParseError(f"{path}: cannot infer format from extension; pass format=")
    if format == "xyz":
        return _load_xyz(path)
    if format == "off":
        return _load_off(path)
    if format == "ply-ascii":
        return _load_ply(path)
    raise ValueError(f"unknown format {format!r}")


def _floats(tokens, path, lineno):
    try:
        return [float(t) for t in tokens]
    except ValueError:
        raise ParseError(f"{path}:{lineno}: expected numeric fields, got {tokens!r}") from None


def _load_xyz(path: str) -> PointCloud:
    rows, width = [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            tokens = line.split()
            if not tokens or tokens[0].startswith("#"):
                continue
            if len(tokens) not in (3, 6):
                raise ParseError(f"{path}:{lineno}: expected 3 or 6 columns, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise ParseError(f"{path}:{lineno}: inconsistent column count")
            rows.append(_floats(tokens, path, lineno))
    if not rows:
        raise ParseError(f"{path}: empty point cloud")
    arr = np.array(rows, dtype=np.float64)
    if width == 6:
        return PointCloud(arr[:, :3], arr[:, 3:])
    return _with_estimated_normals(arr)


def write_xyz(cloud: PointCloud, path: str, scores: np.ndarray | None = None) -> None:
    """Write x y z nx ny nz (plus an optional 7th score column).

    Uses 17 significant digits so float64 round-trips exactly.
    """
    cols = [cloud.positions, cloud.normals]
    if scores is not None:
        cols.append(np.asarray(scores, dtype=np.float64).reshape(-1, 1))
    data = np.hstack(cols)
    with open(path, "w") as fh:
        for row in data:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def _load_off(path: str) -> PointCloud:
    with open(path) as fh:
        lines = fh.readlines()
    cursor = 0

    def next_tokens():
        nonlocal cursor
        while cursor < len(lines):
            cursor += 1
            tokens = lines[cursor - 1].split()
            if tokens and not tokens[0].startswith("#"):
                return tokens, cursor
        raise ParseError(f"{path}:{len(lines)}: unexpected end of file")

    header, lineno = next_tokens()
    if header[0] != "OFF":
        raise ParseError(f"{path}:{lineno}: missing OFF header")
    if len(header) == 4:  # counts may share the header line
        counts = header[1:]
    else:
        counts, lineno = next_tokens()
    if len(counts) != 3:
        raise ParseError(f"{path}:{lineno}: expected 'nv nf ne' counts")
    nv, nf, _ = (int(c) for c in counts)
    if nv < 1:
        raise ParseError(f"{path}:{lineno}: empty point cloud")

    verts = np.empty((nv, 3), dtype=np.float64)
    for i in range(nv):
        tokens, lineno = next_tokens()
        if len(tokens) < 3:
            raise ParseError(f"{path}:{lineno}: vertex needs 3 coordinates")
        verts[i] = _floats(tokens[:3], path, lineno)
    faces = []
    for _ in range(nf):
        tokens, lineno = next_tokens()
        cnt = int(tokens[0])
        if len(tokens) < cnt + 1:
            raise ParseError(f"{path}:{lineno}: face lists {cnt} vertices, fewer given")
        idx = [int(t) for t in tokens[1 : cnt + 1]]
        if any(not 0 <= j < nv for j in idx):
            raise ParseError(f"{path}:{lineno}: face index out of range")
        faces.append(idx)
    return _finish_mesh(verts, faces)


def _load_ply(path: str) -> PointCloud:
    with open(path) as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}:1: missing ply magic")
    nv = nf = 0
    vertex_props: list[str] = []
    cursor, element = 1, None
    while cursor < len(lines):
        tokens = lines[cursor].split()
        cursor += 1
        if not tokens or tokens[0] == "comment":
            continue
        if tokens[0] == "format":
            if tokens[1] != "ascii":
                raise ParseError(f"{path}:{cursor}: only ascii PLY is supported")
        elif tokens[0] == "element":
            element = tokens[1]
            if element == "vertex":
                nv = int(tokens[2])
            elif element == "face":
                nf = int(tokens[2])
        elif tokens[0] == "property" and element == "vertex":
            vertex_props.append(tokens[-1])
        elif tokens[0] == "end_header":
            break
    else:
        raise ParseError(f"{path}: missing end_header")
    if nv < 1:
        raise ParseError(f"{path}: empty point cloud")
    for req in ("x", "y", "z"):
        if req not in vertex_props:
            raise ParseError(f"{path}: vertex property {req!r} missing")

    rows = []
    for i in range(nv):
        if cursor + i >= len(lines):
            raise ParseError(f"{path}:{len(lines)}: expected {nv} vertex rows")
        tokens = lines[cursor + i].split()
        if len(tokens) < len(vertex_props):
            raise ParseError(f"{path}:{cursor + i + 1}: vertex row too short")
        rows.append(_floats(tokens[: len(vertex_props)], path, cursor + i + 1))
    cursor += nv
    table = np.array(rows, dtype=np.float64)
    cols = {name: table[:, j] for j, name in enumerate(vertex_props)}
    verts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1)

    if all(n in cols for n in ("nx", "ny", "nz")):
        normals = np.stack([cols["nx"], cols["ny"], cols["nz"]], axis=1)
        return PointCloud(verts, _renormalize(normals))

    faces = []
    for i in range(nf):
        if cursor + i >= len(lines):
            raise ParseError(f"{path}:{len(lines)}: expected {nf} face rows")
        tokens = lines[cursor + i].split()
        cnt = int(tokens[0])
        faces.append([int(t) for t in tokens[1 : cnt + 1]])
    return _finish_mesh(verts, faces)


def _finish_mesh(verts: np.ndarray, faces: list[list[int]]) -> PointCloud:
    if not faces:
        return _with_estimated_normals(verts)
    # area-weighted accumulation of face normals onto vertices
    acc = np.zeros_like(verts)
    for face in faces:
        for a in range(1, len(face) - 1):
            i, j, k = face[0], face[a], face[a + 1]
            fn = np.cross(verts[j] - verts[i], verts[k] - verts[i])
            acc[i] += fn
            acc[j] += fn
            acc[k] += fn
    lengths = np.linalg.norm(acc, axis=1)
    ok = lengths > 1e-12
    normals = np.zeros_like(verts)
    normals[ok] = acc[ok] / lengths[ok, None]
    if not np.all(ok):
        filler = estimate_normals_array(verts, k=min(16, len(verts) - 1)) if len(verts) > 1 else np.tile(
            [0.0, 0.0, 1.0], (len(verts), 1)
        )
        normals[~ok] = filler[~ok]
    return PointCloud(verts, normals)


def _with_estimated_normals(verts: np.ndarray) -> PointCloud:
    if len(verts) == 1:
        return PointCloud(verts, np.array([[0.0, 0.0, 1.0]]))
    k = min(16, len(verts) - 1)
    return PointCloud(verts, estimate_normals_array(verts, k=k))


def _renormalize(normals: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(normals, axis=1)
    out = normals.copy()
    ok = lengths > 1e-12
    out[ok] = normals[ok] / lengths[ok, None]
    out[~ok] = (0.0, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# normals, normalization, resampling
# ---------------------------------------------------------------------------

def estimate_normals_array(positions: np.ndarray, k: int = 16) -> np.ndarray:
    """Per-point normal = smallest-eigenvalue eigenvector of the k-NN covariance.

    Signs are oriented away from the cloud centroid; neighborhoods whose two
    smallest covariance eigenvalues both vanish (normal direction undefined)
    fall back to (0, 0, 1).
    """
    pos = np.asarray(positions, dtype=np.float64)
    n = len(pos)
    if n <= k:
        raise ValueError(f"need more than k={k} points, got {n}")
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    # k nearest plus the point itself
    nn = np.argpartition(d2, kth=k, axis=1)[:, : k + 1]

    centroid = pos.mean(axis=0)
    normals = np.empty_like(pos)
    for i in range(n):
        pts = pos[nn[i]]
        centered = pts - pts.mean(axis=0)
        cov = centered.T @ centered / len(pts)
        evals, evecs = np.linalg.eigh(cov)
        if evals[1] <= max(evals[2] * 1e-9, 1e-18):
            normals[i] = (0.0, 0.0, 1.0)
            continue
        normal = evecs[:, 0]
        if np.dot(normal, pos[i] - centroid) < 0:
            normal = -normal
        normals[i] = normal / np.linalg.norm(normal)
    return normals


def estimate_normals(cloud: PointCloud, k: int = 16) -> PointCloud:
    return replace(cloud, normals=estimate_normals_array(cloud.positions, k=k))


def normalize(cloud: PointCloud) -> PointCloud:
    """Center at the centroid and scale the farthest point to unit norm."""
    centered = cloud.positions - cloud.positions.mean(axis=0)
    scale = float(np.linalg.norm(centered, axis=1).max())
    if scale == 0.0:
        scale = 1.0
    return replace(cloud, positions=centered / scale)


def resample(cloud: PointCloud, m: int, seed: int) -> PointCloud:
    """Uniform draw of M points: without replacement when M <= N, else with."""
    if m < 1:
        raise ValueError(f"resample count must be >= 1, got {m}")
    rng = np.random.default_rng(seed)
    n = len(cloud)
    idx = rng.choice(n, size=m, replace=m > n)
    return replace(cloud, positions=cloud.positions[idx], normals=cloud.normals[idx])


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------

def _unit_rows(v: np.ndarray) -> np.ndarray:
    lengths = np.linalg.norm(v, axis=1, keepdims=True)
    lengths[lengths < 1e-12] = 1.0
    return v / lengths


def _sphere_at(rng, n, radius, center):
    dirs = _unit_rows(rng.normal(size=(n, 3)))
    return np.asarray(center) + radius * dirs, dirs


def _sample_sphere(rng, n):
    return _sphere_at(rng, n, 0.5, (0.0, 0.0, 0.0))


def _box_surface(rng, n, lo, hi):
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    ext = hi - lo
    # 6 axis-aligned faces, picked by area
    areas = np.array([ext[1] * ext[2]] * 2 + [ext[0] * ext[2]] * 2 + [ext[0] * ext[1]] * 2)
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(size=(n, 2))
    pos = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        mask = face == f
        axis, side = divmod(f, 2)  # axis 0/1/2, side 0=low 1=high
        others = [a for a in range(3) if a != axis]
        pos[mask, axis] = hi[axis] if side else lo[axis]
        pos[mask, others[0]] = lo[others[0]] + u[mask, 0] * ext[others[0]]
        pos[mask, others[1]] = lo[others[1]] + u[mask, 1] * ext[others[1]]
        nrm[mask, axis] = 1.0 if side else -1.0
    return pos, nrm


def _sample_cube(rng, n):
    return _box_surface(rng, n, (-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))


def _sample_cylinder(rng, n, r=0.3, h=1.0):
    lateral = 2 * np.pi * r * h
    cap = np.pi * r * r
    part = rng.choice(3, size=n, p=np.array([lateral, cap, cap]) / (lateral + 2 * cap))
    theta = rng.uniform(0, 2 * np.pi, size=n)
    u = rng.uniform(size=n)
    pos = np.empty((n, 3))
    nrm = np.empty((n, 3))
    side = part == 0
    pos[side] = np.stack(
        [r * np.cos(theta[side]), r * np.sin(theta[side]), (u[side] - 0.5) * h], axis=1
    )
    nrm[side] = np.stack([np.cos(theta[side]), np.sin(theta[side]), np.zeros(side.sum())], axis=1)
    for which, zsign in ((part == 1, 1.0), (part == 2, -1.0)):
        rad = r * np.sqrt(u[which])
        pos[which] = np.stack(
            [rad * np.cos(theta[which]), rad * np.sin(theta[which]),
             np.full(which.sum(), zsign * h / 2)], axis=1
        )
        nrm[which] = np.tile([0.0, 0.0, zsign], (which.sum(), 1))
    return pos, nrm


def _sample_cone(rng, n, r=0.4, h=0.9):
    slant = np.sqrt(r * r + h * h)
    lateral = np.pi * r * slant
    base = np.pi * r * r
    on_base = rng.uniform(size=n) < base / (lateral + base)
    theta = rng.uniform(0, 2 * np.pi, size=n)
    u = rng.uniform(size=n)
    pos = np.empty((n, 3))
    nrm = np.empty((n, 3))
    lat = ~on_base
    t = np.sqrt(u[lat])  # area grows with distance from the apex
    rad = t * r
    pos[lat] = np.stack(
        [rad * np.cos(theta[lat]), rad * np.sin(theta[lat]), h / 2 - t * h], axis=1
    )
    nrm[lat] = np.stack(
        [h * np.cos(theta[lat]) / slant, h * np.sin(theta[lat]) / slant,
         np.full(lat.sum(), r / slant)], axis=1
    )
    rad = r * np.sqrt(u[on_base])
    pos[on_base] = np.stack(
        [rad * np.cos(theta[on_base]), rad * np.sin(theta[on_base]),
         np.full(on_base.sum(), -h / 2)], axis=1
    )
    nrm[on_base] = np.tile([0.0, 0.0, -1.0], (on_base.sum(), 1))
    return pos, nrm


def _sample_torus(rng, n, big=0.35, small=0.15):
    theta = rng.uniform(0, 2 * np.pi, size=n)
    phi = np.empty(n)
    # rejection sampling: surface density along phi is (big + small*cos(phi))
    need = np.arange(n)
    while len(need):
        cand = rng.uniform(0, 2 * np.pi, size=len(need))
        accept = rng.uniform(size=len(need)) < (big + small * np.cos(cand)) / (big + small)
        phi[need[accept]] = cand[accept]
        need = need[~accept]
    ring = big + small * np.cos(phi)
    pos = np.stack([ring * np.cos(theta), ring * np.sin(theta), small * np.sin(phi)], axis=1)
    nrm = np.stack([np.cos(phi) * np.cos(theta), np.cos(phi) * np.sin(theta), np.sin(phi)], axis=1)
    return pos, nrm


def _sample_plane(rng, n):
    uv = rng.uniform(-0.5, 0.5, size=(n, 2))
    pos = np.concatenate([uv, np.zeros((n, 1))], axis=1)
    return pos, np.tile([0.0, 0.0, 1.0], (n, 1))


def _sample_two_spheres(rng, n):
    n_left = n // 2
    p1, n1 = _sphere_at(rng, n_left, 0.22, (-0.35, 0.0, 0.0))
    p2, n2 = _sphere_at(rng, n - n_left, 0.22, (0.35, 0.0, 0.0))
    return np.vstack([p1, p2]), np.vstack([n1, n2])


def _sample_l_bracket(rng, n):
    box_a = ((-0.5, -0.5, -0.1), (-0.1, 0.5, 0.1))
    box_b = ((-0.1, -0.5, -0.1), (0.5, -0.1, 0.1))

    def area(lo, hi):
        e = np.subtract(hi, lo)
        return 2 * (e[0] * e[1] + e[1] * e[2] + e[0] * e[2])

    n_a = int(round(n * area(*box_a) / (area(*box_a) + area(*box_b))))
    pa, na = _box_surface(rng, n_a, *box_a)
    pb, nb = _box_surface(rng, n - n_a, *box_b)
    return np.vstack([pa, pb]), np.vstack([na, nb])


SHAPES = {
    "sphere": _sample_sphere,
    "cube": _sample_cube,
    "cylinder": _sample_cylinder,
    "cone": _sample_cone,
    "torus": _sample_torus,
    "plane": _sample_plane,
    "two-spheres": _sample_two_spheres,
    "l-bracket": _sample_l_bracket,
}

DEFAULT_CLASSES = tuple(SHAPES)


def synth_dataset(
    classes,
    per_class: int,
    points: int,
    noise_sigma: float = 0.0,
    seed: int = 0,
    split: str = "train",
) -> Dataset:
    """Generate `per_class` clouds per shape class, deterministic for a seed.

    Each sample gets a random rotation about the up (z) axis, independent
    per-axis scales in [0.8, 1.2], and Gaussian displacement of magnitude
    `noise_sigma` along the surface normal.
    """
    classes = list(classes)
    for name in classes:
        if name not in SHAPES:
            raise ValueError(f"unknown shape-spec {name!r}; known: {sorted(SHAPES)}")
    rng = np.random.default_rng(seed)
    clouds = []
    for label, name in enumerate(classes):
        sampler = SHAPES[name]
        for _ in range(per_class):
            pos, nrm = sampler(rng, points)
            axis_scale = rng.uniform(0.8, 1.2, size=3)
            theta = rng.uniform(0, 2 * np.pi)
            c, s = np.cos(theta), np.sin(theta)
            rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
            pos = (pos * axis_scale) @ rot.T
            # normals transform by the inverse-transpose of the scaling
            nrm = _unit_rows((nrm / axis_scale) @ rot.T)
            if noise_sigma > 0:
                pos = pos + rng.normal(0.0, noise_sigma, size=(points, 1)) * nrm
            clouds.append(PointCloud(pos, nrm, label=label))
    return Dataset(clouds, classes, split=split)


# ---------------------------------------------------------------------------
# dataset manifests
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, out_dir: str) -> str:
    """Write one XYZ file per cloud plus a JSON manifest; returns manifest path."""
    os.makedirs(out_dir, exist_ok=True)
    items = []
    for i, cloud in enumerate(dataset.clouds):
        name = f"{dataset.split}_{i:05d}_{dataset.class_names[cloud.label]}.xyz"
        write_xyz(cloud, os.path.join(out_dir, name))
        items.append({"path": name, "label": int(cloud.label)})
    manifest = {
        "classes": list(dataset.class_names),
        "split": dataset.split,
        "items": items,
    }
    manifest_path = os.path.join(out_dir, f"{dataset.split}_manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest_path


def load_dataset(manifest_path: str) -> Dataset:
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{manifest_path}: invalid JSON manifest ({exc})") from None
    base = os.path.dirname(os.path.abspath(manifest_path))
    classes = manifest["classes"]
    clouds = []
    for item in manifest["items"]:
        cloud = load(os.path.join(base, item["path"]))
        label = int(item["label"])
        if not 0 <= label < len(classes):
            raise ParseError(f"{manifest_path}: label {label} outside [0, {len(classes)})")
        cloud.label = label
        clouds.append(cloud)
    return Dataset(clouds, classes, split=manifest.get("split", "train"))
