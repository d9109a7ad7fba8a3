"""Synthetic shapes, simulated single-view observations and normalization."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DegenerateError, ParameterError, ShapeError

FAMILIES = ("sphere", "box", "cylinder", "torus", "superellipsoid")

_REQUIRED_PARAMS = {
    "sphere": ("radius",),
    "box": ("hx", "hy", "hz"),
    "cylinder": ("radius", "half_height"),
    "torus": ("major", "minor"),
    "superellipsoid": ("a", "b", "c", "e1", "e2"),
}


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ShapeError(
                    f"normals length {len(self.normals)} != points length {len(self.points)}"
                )

    def __len__(self) -> int:
        return len(self.points)

    def take(self, idx) -> "PointCloud":
        normals = None if self.normals is None else self.normals[idx]
        return PointCloud(self.points[idx], normals)


@dataclass
class ShapeSpec:
    family: str
    params: dict
    rotation: tuple = (1.0, 0.0, 0.0, 0.0)  # (w, x, y, z)
    scale: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.family not in _REQUIRED_PARAMS:
            raise ParameterError(f"unknown shape family {self.family!r}")
        missing = [k for k in _REQUIRED_PARAMS[self.family] if k not in self.params]
        if missing:
            raise ParameterError(f"{self.family} is missing params {missing}")
        for k in _REQUIRED_PARAMS[self.family]:
            v = float(self.params[k])
            if not np.isfinite(v) or v <= 0:
                raise ParameterError(f"{self.family} param {k}={v} must be > 0")
        if self.family == "superellipsoid":
            for k in ("e1", "e2"):
                if not 0.3 <= self.params[k] <= 4.0:
                    raise ParameterError(f"superellipsoid exponent {k} outside [0.3, 4.0]")
        if self.family == "torus" and self.params["minor"] >= self.params["major"]:
            raise ParameterError("torus minor radius must be below major radius")
        q = np.asarray(self.rotation, dtype=np.float64)
        if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-6:
            raise ParameterError("rotation must be a unit quaternion (w, x, y, z)")
        s = np.asarray(self.scale, dtype=np.float64)
        if s.shape != (3,) or np.any(s <= 0) or not np.all(np.isfinite(s)):
            raise ParameterError("scale must be three positive reals")


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _sample_sphere(p, n, rng):
    d = _unit(rng.standard_normal((n, 3)))
    return p["radius"] * d, d


def _sample_box(p, n, rng):
    half = np.array([p["hx"], p["hy"], p["hz"]])
    # face pair k (normal along axis k) has area 4 * prod(other half extents)
    pair_area = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    face_w = np.repeat(pair_area, 2)
    face = rng.choice(6, size=n, p=face_w / face_w.sum())
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    pts = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    rows = np.arange(n)
    pts[rows, axis] = sign * half[axis]
    normals = np.zeros((n, 3))
    normals[rows, axis] = sign
    return pts, normals


def _sample_cylinder(p, n, rng):
    r, h = p["radius"], p["half_height"]
    areas = np.array([2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r])
    part = rng.choice(3, size=n, p=areas / areas.sum())
    theta = rng.uniform(0, 2 * np.pi, size=n)
    pts = np.empty((n, 3))
    normals = np.zeros((n, 3))
    side = part == 0
    pts[side, 0] = r * np.cos(theta[side])
    pts[side, 1] = r * np.sin(theta[side])
    pts[side, 2] = rng.uniform(-h, h, size=side.sum())
    normals[side, 0] = np.cos(theta[side])
    normals[side, 1] = np.sin(theta[side])
    cap = ~side
    rad = r * np.sqrt(rng.uniform(0, 1, size=cap.sum()))
    pts[cap, 0] = rad * np.cos(theta[cap])
    pts[cap, 1] = rad * np.sin(theta[cap])
    zsign = np.where(part[cap] == 1, 1.0, -1.0)
    pts[cap, 2] = zsign * h
    normals[cap, 2] = zsign
    return pts, normals


def _sample_torus(p, n, rng):
    big, small = p["major"], p["minor"]
    u_all, v_all = [], []
    got = 0
    while got < n:
        m = 2 * (n - got) + 16
        u = rng.uniform(0, 2 * np.pi, size=m)
        v = rng.uniform(0, 2 * np.pi, size=m)
        # area element is proportional to (R + r cos v)
        keep = rng.uniform(0, 1, size=m) < (big + small * np.cos(v)) / (big + small)
        u_all.append(u[keep])
        v_all.append(v[keep])
        got += keep.sum()
    u = np.concatenate(u_all)[:n]
    v = np.concatenate(v_all)[:n]
    ring = big + small * np.cos(v)
    pts = np.stack([ring * np.cos(u), ring * np.sin(u), small * np.sin(v)], axis=1)
    normals = np.stack([np.cos(v) * np.cos(u), np.cos(v) * np.sin(u), np.sin(v)], axis=1)
    return pts, normals


def _spow(x, e):
    return np.sign(x) * np.abs(x) ** e


def _superellipsoid_normals(pts, a, b, c, e1, e2):
    # gradient of the inside-outside function, evaluated in log space so that
    # exponents above 2 (infinite partials on the axes) stay finite after scaling
    tiny = 1e-300
    u = np.maximum(np.abs(pts[:, 0] / a), tiny)
    v = np.maximum(np.abs(pts[:, 1] / b), tiny)
    w = np.maximum(np.abs(pts[:, 2] / c), tiny)
    g = np.maximum(u ** (2 / e2) + v ** (2 / e2), tiny)
    lg = (e2 / e1 - 1) * np.log(g)
    lx = lg + (2 / e2 - 1) * np.log(u) - np.log(a)
    ly = lg + (2 / e2 - 1) * np.log(v) - np.log(b)
    lz = (2 / e1 - 1) * np.log(w) - np.log(c)
    logs = np.stack([lx, ly, lz], axis=1)
    mags = np.exp(logs - logs.max(axis=1, keepdims=True))
    return _unit(np.sign(pts) * mags)


def _sample_superellipsoid(p, n, rng, grid=(96, 192)):
    a, b, c, e1, e2 = (p[k] for k in ("a", "b", "c", "e1", "e2"))
    eta = np.linspace(-np.pi / 2, np.pi / 2, grid[0] + 1)
    omega = np.linspace(-np.pi, np.pi, grid[1] + 1)
    E, W = np.meshgrid(eta, omega, indexing="ij")
    verts = np.stack(
        [
            a * _spow(np.cos(E), e1) * _spow(np.cos(W), e2),
            b * _spow(np.cos(E), e1) * _spow(np.sin(W), e2),
            c * _spow(np.sin(E), e1) * np.ones_like(W),
        ],
        axis=-1,
    )
    v00, v01 = verts[:-1, :-1], verts[:-1, 1:]
    v10, v11 = verts[1:, :-1], verts[1:, 1:]
    tris = np.concatenate(
        [np.stack([v00, v10, v11], axis=-2).reshape(-1, 3, 3),
         np.stack([v00, v11, v01], axis=-2).reshape(-1, 3, 3)]
    )
    area = 0.5 * np.linalg.norm(np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0]), axis=1)
    tri = rng.choice(len(tris), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(0, 1, size=n))
    r2 = rng.uniform(0, 1, size=n)
    t = tris[tri]
    pts = (1 - r1)[:, None] * t[:, 0] + (r1 * (1 - r2))[:, None] * t[:, 1] + (r1 * r2)[:, None] * t[:, 2]
    # radial projection onto the surface: F(s x) = s^(2/e1) F(x)
    F = (np.abs(pts[:, 0] / a) ** (2 / e2) + np.abs(pts[:, 1] / b) ** (2 / e2)) ** (e2 / e1) + np.abs(
        pts[:, 2] / c
    ) ** (2 / e1)
    pts = pts * (F ** (-e1 / 2))[:, None]
    return pts, _superellipsoid_normals(pts, a, b, c, e1, e2)


_SAMPLERS = {
    "sphere": _sample_sphere,
    "box": _sample_box,
    "cylinder": _sample_cylinder,
    "torus": _sample_torus,
    "superellipsoid": _sample_superellipsoid,
}


def sample_shape(spec: ShapeSpec, n: int, seed: int) -> PointCloud:
    """Sample ``n`` surface points (with outward normals) from an analytic shape.

    Points are drawn approximately uniformly by surface area in the shape's
    canonical frame, then scaled per axis and rotated. Non-uniform scaling
    distorts the area measure slightly; normals are transformed exactly.
    """
    if n < 1:
        raise ParameterError("n must be >= 1")
    spec.validate()
    rng = np.random.default_rng(seed)
    params = {k: float(v) for k, v in spec.params.items()}
    pts, normals = _SAMPLERS[spec.family](params, n, rng)
    rot = quat_to_matrix(spec.rotation)
    s = np.asarray(spec.scale, dtype=np.float64)
    pts = (pts * s) @ rot.T
    normals = _unit((normals / s) @ rot.T)
    return PointCloud(pts, normals)


def random_shape_spec(family: str, rng: np.random.Generator) -> ShapeSpec:
    """Draw a randomly sized and oriented shape of the given family."""
    if family == "sphere":
        params = {"radius": rng.uniform(0.6, 1.2)}
    elif family == "box":
        params = dict(zip(("hx", "hy", "hz"), rng.uniform(0.3, 1.0, size=3)))
    elif family == "cylinder":
        params = {"radius": rng.uniform(0.3, 0.8), "half_height": rng.uniform(0.4, 1.0)}
    elif family == "torus":
        major = rng.uniform(0.6, 1.0)
        params = {"major": major, "minor": rng.uniform(0.15, 0.45) * major}
    elif family == "superellipsoid":
        params = dict(zip(("a", "b", "c"), rng.uniform(0.4, 1.0, size=3)))
        params.update(e1=rng.uniform(0.3, 2.0), e2=rng.uniform(0.3, 2.0))
    else:
        raise ParameterError(f"unknown shape family {family!r}")
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    scale = rng.uniform(0.8, 1.2, size=3)
    return ShapeSpec(family, {k: float(v) for k, v in params.items()}, tuple(q), tuple(scale))


def random_view_dir(rng: np.random.Generator) -> np.ndarray:
    return _unit(rng.standard_normal(3))


def partial_view(cloud: PointCloud, view_dir) -> PointCloud:
    """Keep the points whose normals face a camera looking along ``view_dir``."""
    if cloud.normals is None:
        raise ParameterError("partial_view needs a cloud with normals")
    d = np.asarray(view_dir, dtype=np.float64)
    if d.shape != (3,) or abs(np.linalg.norm(d) - 1.0) > 1e-6:
        raise ParameterError("view_dir must be a unit 3-vector")
    visible = cloud.normals @ (-d) > 0
    if not visible.any():
        raise DegenerateError("no surface point faces the camera")
    return cloud.take(np.flatnonzero(visible))


@dataclass(frozen=True)
class NormTransform:
    """Maps world coordinates to ``(p - centroid) * scale``."""

    centroid: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def apply(self, cloud: PointCloud) -> PointCloud:
        return PointCloud((cloud.points - self.centroid) * self.scale, cloud.normals)

    def invert(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(cloud.points / self.scale + self.centroid, cloud.normals)


def fit_transform(points: np.ndarray) -> NormTransform:
    pts = np.asarray(points, dtype=np.float64)
    centroid = pts.mean(axis=0)
    std = np.sqrt(np.mean((pts - centroid) ** 2))
    if not std > 0:
        raise DegenerateError("all points coincide; zero variance cannot be normalized")
    return NormTransform(centroid, float(1.0 / std))


def normalize(cloud: PointCloud) -> tuple[PointCloud, NormTransform]:
    """Center a cloud and scale it to unit pooled coordinate standard deviation."""
    tf = fit_transform(cloud.points)
    return tf.apply(cloud), tf


def denormalize(cloud: PointCloud, tf: NormTransform) -> PointCloud:
    return tf.invert(cloud)
