"""Deterministic synthetic scenes: surface Gaussians, multi-view renders, proxy mesh."""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from ..core import Camera, DepthMap, GaussianSet, Image, SmplMesh
from ..render import rasterize

SCENE_KINDS = ("sphere", "box", "capsule-person")
SPHERE_RADIUS = 0.5
BOX_HALF = np.array([0.45, 0.35, 0.3])
# (start, end, radius) per body part.
PERSON_CAPSULES = (
    ((0.0, -0.15, 0.0), (0.0, 0.25, 0.0), 0.18),
    ((0.0, 0.5, 0.0), (0.0, 0.5, 0.0), 0.14),
    ((0.22, 0.3, 0.0), (0.45, -0.05, 0.0), 0.07),
    ((-0.22, 0.3, 0.0), (-0.45, -0.05, 0.0), 0.07),
    ((0.09, -0.2, 0.0), (0.11, -0.8, 0.0), 0.08),
    ((-0.09, -0.2, 0.0), (-0.11, -0.8, 0.0), 0.08),
)


class View(NamedTuple):
    camera: Camera
    image: Image
    depth: DepthMap


class SynthScene(NamedTuple):
    gaussians: GaussianSet
    views: list[View]
    mesh: SmplMesh


def _project_sphere(p):
    r = np.linalg.norm(p, axis=1, keepdims=True)
    return p * (SPHERE_RADIUS / np.maximum(r, 1e-12))


def _project_box(p):
    q = np.abs(p) - BOX_HALF
    outside = q.max(axis=1) > 0
    out = np.clip(p, -BOX_HALF, BOX_HALF)
    # Interior points snap to the nearest face.
    axis = np.argmax(q, axis=1)
    inner = p.copy()
    rows = np.arange(len(p))
    inner[rows, axis] = np.sign(p[rows, axis]) * BOX_HALF[axis]
    return np.where(outside[:, None], out, inner)


def _box_sdf(p):
    q = np.abs(p) - BOX_HALF
    return np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)


def _capsule_closest_axis(p, a, b):
    a, b = np.asarray(a), np.asarray(b)
    ab = b - a
    denom = float(ab @ ab)
    t = np.zeros(len(p)) if denom == 0 else np.clip((p - a) @ ab / denom, 0, 1)
    return a + t[:, None] * ab


def _capsule_sdf(p, a, b, r):
    return np.linalg.norm(p - _capsule_closest_axis(p, a, b), axis=1) - r


def _person_sdf(p):
    return np.min([_capsule_sdf(p, *cap) for cap in PERSON_CAPSULES], axis=0)


def _project_person(p):
    sdfs = np.stack([_capsule_sdf(p, *cap) for cap in PERSON_CAPSULES])
    best = np.argmin(sdfs, axis=0)
    out = np.empty_like(p)
    for k, (a, b, r) in enumerate(PERSON_CAPSULES):
        sel = best == k
        if sel.any():
            axis_pt = _capsule_closest_axis(p[sel], a, b)
            d = p[sel] - axis_pt
            out[sel] = axis_pt + d * (r / np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-12))
    return out


_SHAPES = {
    "sphere": (_project_sphere, lambda p: np.linalg.norm(p, axis=1) - SPHERE_RADIUS),
    "box": (_project_box, _box_sdf),
    "capsule-person": (_project_person, _person_sdf),
}


def surface_points(kind: str, resolution: int = 64) -> np.ndarray:
    """One surface point per lattice cell: the cell centre's projection, kept if it stays in the cell."""
    if kind not in _SHAPES:
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    project, sdf = _SHAPES[kind]
    edge = 2.0 / resolution
    centers = (np.arange(resolution) + 0.5) * edge - 1.0
    grid = np.stack(np.meshgrid(centers, centers, centers, indexing="ij"), axis=-1).reshape(-1, 3)
    grid = grid[np.abs(sdf(grid)) < edge]
    p = project(grid)
    same_cell = np.all(np.floor((p + 1.0) / edge) == np.floor((grid + 1.0) / edge), axis=1)
    on_surface = np.abs(sdf(p)) < 1e-9
    return p[same_cell & on_surface]


def _texture(p, seed):
    rng = np.random.default_rng([seed, 7])
    freq = rng.normal(scale=2.5, size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    return 0.5 + 0.35 * np.sin(p @ freq.T + phase)


def _ellipsoid_mesh(center, axes, n_lat=6, n_lon=10):
    """UV ellipsoid with semi-axes given as the columns of ``axes``."""
    theta = np.linspace(0, np.pi, n_lat + 1)[1:-1]
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    t, f = np.meshgrid(theta, phi, indexing="ij")
    unit = np.stack([np.sin(t) * np.cos(f), np.cos(t), np.sin(t) * np.sin(f)], axis=-1).reshape(-1, 3)
    unit = np.vstack([unit, [[0, 1, 0], [0, -1, 0]]])
    verts = unit @ np.asarray(axes).T + center
    top, bottom = len(unit) - 2, len(unit) - 1
    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([top, jn, j])
        for i in range(n_lat - 2):
            a, b = i * n_lon + j, i * n_lon + jn
            c, d = a + n_lon, b + n_lon
            faces += [[a, b, d], [a, d, c]]
        last = (n_lat - 2) * n_lon
        faces.append([bottom, last + j, last + jn])
    return verts, np.array(faces)


def proxy_mesh(kind: str) -> SmplMesh:
    """Coarse body-like proxy lying just inside the shape surface."""
    parts = []
    if kind == "sphere":
        parts.append(_ellipsoid_mesh(np.zeros(3), np.eye(3) * 0.9 * SPHERE_RADIUS))
    elif kind == "box":
        parts.append(_ellipsoid_mesh(np.zeros(3), np.diag(BOX_HALF)))
    else:
        for a, b, r in PERSON_CAPSULES:
            a, b = np.asarray(a), np.asarray(b)
            axis = b - a
            length = np.linalg.norm(axis)
            u = axis / length if length > 0 else np.array([0.0, 1.0, 0.0])
            v = np.cross(u, [0.0, 0.0, 1.0])
            v = v / np.linalg.norm(v) if np.linalg.norm(v) > 1e-9 else np.array([1.0, 0.0, 0.0])
            w = np.cross(u, v)
            axes = np.stack([v * 0.9 * r, u * (0.5 * length + 0.9 * r), w * 0.9 * r], axis=1)
            parts.append(_ellipsoid_mesh(0.5 * (a + b), axes))
    verts, faces, base = [], [], 0
    for v, f in parts:
        verts.append(v)
        faces.append(f + base)
        base += len(v)
    return SmplMesh(np.vstack(verts), np.vstack(faces))


def _revolve(center, frame, profile, n_lon):
    """Closed surface of revolution about ``frame[:, 1]``; ``profile`` is (radius, height) rings, poles excluded."""
    phi = np.linspace(0, 2 * np.pi, n_lon, endpoint=False)
    ring = np.stack([np.cos(phi), np.zeros(n_lon), np.sin(phi)], axis=1)
    top, bottom = profile[0][1], profile[-1][1]
    rings = [ring * rad + [0.0, h, 0.0] for rad, h in profile[1:-1]]
    local = np.vstack(rings + [[[0.0, top, 0.0], [0.0, bottom, 0.0]]])
    verts = local @ np.asarray(frame).T + center
    n_rings = len(rings)
    i_top, i_bottom = len(local) - 2, len(local) - 1
    faces = []
    for j in range(n_lon):
        jn = (j + 1) % n_lon
        faces.append([i_top, jn, j])
        for i in range(n_rings - 1):
            a, b = i * n_lon + j, i * n_lon + jn
            faces += [[a, b, b + n_lon], [a, b + n_lon, a + n_lon]]
        last = (n_rings - 1) * n_lon
        faces.append([i_bottom, last + j, last + jn])
    return verts, np.array(faces)


def _capsule_mesh(a, b, r, n_lat, n_lon):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    length = np.linalg.norm(b - a)
    u = (b - a) / length if length > 0 else np.array([0.0, 1.0, 0.0])
    v = np.cross(u, [0.0, 0.0, 1.0])
    v = v / np.linalg.norm(v) if np.linalg.norm(v) > 1e-9 else np.array([1.0, 0.0, 0.0])
    w = np.cross(v, u)
    half = n_lat // 2
    theta = np.linspace(0, np.pi / 2, half + 1)
    cap_top = [(r * np.sin(t), 0.5 * length + r * np.cos(t)) for t in theta]
    cap_bottom = [(rad, -h) for rad, h in reversed(cap_top)]
    # Cylinder rings at about the cap's ring spacing keep every triangle small.
    bands = int(np.ceil(length / (r * np.pi / n_lat)))
    side = [(r, h) for h in np.linspace(0.5 * length, -0.5 * length, bands + 1)[1:-1]] if length > 0 else []
    if length == 0:
        cap_bottom = cap_bottom[1:]
    profile = cap_top + side + cap_bottom
    return _revolve(0.5 * (a + b), np.stack([v, u, w], axis=1), profile, n_lon)


def surface_mesh(kind: str, n_lat: int = 24, n_lon: int = 48) -> SmplMesh:
    """Triangulated ground-truth surface of ``kind``, used as the reference for point-to-surface distance.

    The sphere is a UV tessellation and the box is exact. The person keeps each capsule's
    triangles whose centroid is not buried inside another capsule, leaving hairline gaps at joints.
    """
    if kind == "sphere":
        return SmplMesh(*_ellipsoid_mesh(np.zeros(3), np.eye(3) * SPHERE_RADIUS, n_lat, n_lon))
    if kind == "box":
        corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]) * BOX_HALF
        faces = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                          [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]])
        return SmplMesh(corners, faces)
    if kind != "capsule-person":
        raise ValueError(f"unknown scene kind {kind!r}; choose from {SCENE_KINDS}")
    verts, faces, base = [], [], 0
    for k, cap in enumerate(PERSON_CAPSULES):
        v, f = _capsule_mesh(*cap, n_lat, n_lon)
        centroids = v[f].mean(axis=1)
        others = [_capsule_sdf(centroids, *c) for i, c in enumerate(PERSON_CAPSULES) if i != k]
        buried = np.min(others, axis=0) < 0
        verts.append(v)
        faces.append(f[~buried] + base)
        base += len(v)
    return SmplMesh(np.vstack(verts), np.vstack(faces))


def orbit_cameras(count: int, seed: int, image_size: int = 32, distance: float = 2.6,
                  elevation_deg: float = 20.0, fov_deg: float = 45.0) -> list[Camera]:
    """``count`` cameras evenly spaced in azimuth, with a seed-dependent starting angle."""
    start = np.random.default_rng([seed, 11]).uniform(0, 2 * np.pi)
    elev = np.radians(elevation_deg)
    cams = []
    for k in range(count):
        az = start + 2 * np.pi * k / count
        eye = distance * np.array([np.cos(elev) * np.sin(az), np.sin(elev), np.cos(elev) * np.cos(az)])
        cams.append(Camera.look_at(eye, fov_deg=fov_deg, width=image_size, height=image_size))
    return cams


def render_views(gaussians: GaussianSet, cameras, background=(1.0, 1.0, 1.0)) -> list[View]:
    views = []
    for cam in cameras:
        out = rasterize(gaussians, cam, background=background, keep_cache=False)
        views.append(View(cam, Image(np.clip(out.image, 0, 1)), DepthMap(out.depth)))
    return views


def synth_scene(kind: str, count: int, seed: int, resolution: int = 64,
                image_size: int = 32) -> SynthScene:
    """Textured surface Gaussians of ``kind`` rendered from ``count`` orbit views."""
    if count < 1:
        raise ValueError("count (number of views) must be at least 1")
    pts = surface_points(kind, resolution)
    n = len(pts)
    edge = 2.0 / resolution
    g = GaussianSet(
        pts,
        _texture(pts, seed),
        np.full((n, 3), np.log(0.6 * edge)),
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full(n, 3.0),
    )
    views = render_views(g, orbit_cameras(count, seed, image_size))
    return SynthScene(g, views, proxy_mesh(kind))
