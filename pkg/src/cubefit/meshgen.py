"""Mesh generators: x-z terrain meshes and single-layer spherical shells."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .mesh import FIXED_VALUE, NO_NORMAL_FLOW, ZERO_GRADIENT, Mesh, MeshError, Patch, mesh_from_polygons, \
    spherical_corrections

EARTH_RADIUS = 6.3712e6
SHELL_HALF_DEPTH = 1000.0

# snap distance for terrain samples onto mesh levels, as a fraction of dz
SNAP_FRACTION = 1e-9
# cut cells smaller than this fraction of dx*dz are flagged
SMALL_CELL_FRACTION = 1e-12

PLANAR_PATCHES = ("inlet", "outlet", "ground", "top")


@dataclass(frozen=True)
class TerrainProfile:
    h0: float = 0.0
    a: float = 25_000.0
    wavelength: float = 8_000.0

    @property
    def alpha(self) -> float:
        return math.pi / self.wavelength

    @property
    def beta(self) -> float:
        return math.pi / (2.0 * self.a)


@dataclass(frozen=True)
class DomainSpec:
    dx: float = 1000.0
    dz: float = 500.0
    width: float = 301_000.0
    height: float = 25_000.0

    def __post_init__(self):
        if not (self.width > 0 and self.height > 0 and self.dx > 0 and self.dz > 0):
            raise ValueError("domain extents and spacings must be positive")

    @property
    def nx(self) -> int:
        return max(1, round(self.width / self.dx))

    @property
    def nz(self) -> int:
        return max(1, round(self.height / self.dz))

    def x_edges(self) -> np.ndarray:
        return -0.5 * self.width + np.arange(self.nx + 1) * (self.width / self.nx)

    def z_levels(self) -> np.ndarray:
        return np.arange(self.nz + 1) * (self.height / self.nz)


def terrain_height(x, p: TerrainProfile):
    """Wave-shaped mountain ``h0 cos^2(beta x) cos^2(alpha x)`` on ``|x| < a``."""
    x = np.asarray(x, dtype=float)
    h = p.h0 * np.cos(p.beta * x) ** 2 * np.cos(p.alpha * x) ** 2
    return np.where(np.abs(x) < p.a, h, 0.0)


def terrain_slope(x, p: TerrainProfile):
    x = np.asarray(x, dtype=float)
    al, be = p.alpha, p.beta
    s = -p.h0 * (be * np.cos(al * x) ** 2 * np.sin(2 * be * x) + al * np.cos(be * x) ** 2 * np.sin(2 * al * x))
    return np.where(np.abs(x) < p.a, s, 0.0)


def _planar_patch_rule(spec: DomainSpec):
    xl, xr, top = -0.5 * spec.width, 0.5 * spec.width, spec.height

    def rule(a, b):
        if a[0] == xl and b[0] == xl:
            return "inlet", FIXED_VALUE, 0.0
        if a[0] == xr and b[0] == xr:
            return "outlet", ZERO_GRADIENT, 0.0
        if a[1] == top and b[1] == top:
            return "top", NO_NORMAL_FLOW, 0.0
        return "ground", NO_NORMAL_FLOW, 0.0

    return rule


def _shoelace(poly) -> float:
    p = np.asarray(poly)
    q = np.roll(p, -1, axis=0)
    return 0.5 * float(np.sum(p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]))


def _assemble(spec: DomainSpec, polys, info=None) -> Mesh:
    """Index vertices by exact coordinate in order of first appearance."""
    index: dict[tuple[float, float], int] = {}
    cells = []
    for poly in polys:
        cell = []
        for pt in poly:
            key = (float(pt[0]), float(pt[1]))
            if key not in index:
                index[key] = len(index)
            cell.append(index[key])
        cells.append(cell)
    points = np.array(list(index.keys()), dtype=float)
    return mesh_from_polygons(points, cells, _planar_patch_rule(spec), PLANAR_PATCHES, info=info)


def _dedupe_ring(poly):
    out = []
    for p in poly:
        if not out or p != out[-1]:
            out.append(p)
    while len(out) > 1 and out[0] == out[-1]:
        out.pop()
    return out


def gen_uniform(spec: DomainSpec) -> Mesh:
    return gen_btf(spec, TerrainProfile(h0=0.0))


def gen_btf(spec: DomainSpec, profile: TerrainProfile) -> Mesh:
    """Basic terrain-following mesh: levels decay linearly from the ground to the lid."""
    if profile.h0 >= spec.height:
        raise MeshError(f"mountain height {profile.h0} must be below the domain height {spec.height}")
    xe = spec.x_edges()
    zs = spec.z_levels()
    h = terrain_height(xe, profile)
    # z* + h(1 - z*/H) keeps z == z* bit-exactly when h == 0
    z = zs[None, :] + h[:, None] * (1.0 - zs[None, :] / spec.height)
    polys = []
    for k in range(spec.nz):
        for i in range(spec.nx):
            polys.append([(xe[i], z[i, k]), (xe[i + 1], z[i + 1, k]), (xe[i + 1], z[i + 1, k + 1]),
                          (xe[i], z[i, k + 1])])
    return _assemble(spec, polys, info={"kind": "btf"})


def _snapped_terrain(spec: DomainSpec, profile: TerrainProfile):
    xe = spec.x_edges()
    zs = spec.z_levels()
    h = terrain_height(xe, profile)
    tol = SNAP_FRACTION * (spec.height / spec.nz)
    k = np.clip(np.rint(h / (spec.height / spec.nz)).astype(int), 0, spec.nz)
    near = np.abs(h - zs[k]) <= tol
    h = np.where(near, zs[k], h)
    return xe, zs, h


def gen_cut_cell(spec: DomainSpec, profile: TerrainProfile) -> Mesh:
    """Regular mesh clipped by the piecewise-linear terrain through column-edge samples."""
    if profile.h0 >= spec.height:
        raise MeshError(f"mountain height {profile.h0} must be below the domain height {spec.height}")
    xe, zs, h = _snapped_terrain(spec, profile)
    cell_area = (spec.width / spec.nx) * (spec.height / spec.nz)

    def cross_x(i, zk):
        # intersection of level zk with the terrain segment in column i
        return xe[i] + (zk - h[i]) * (xe[i + 1] - xe[i]) / (h[i + 1] - h[i])

    polys, small = [], []
    for k in range(spec.nz):
        for i in range(spec.nx):
            if min(h[i], h[i + 1]) >= zs[k + 1]:
                continue
            corners = [(xe[i], zs[k], h[i]), (xe[i + 1], zs[k], h[i + 1]),
                       (xe[i + 1], zs[k + 1], h[i + 1]), (xe[i], zs[k + 1], h[i])]
            if max(h[i], h[i + 1]) <= zs[k]:
                polys.append([(c[0], c[1]) for c in corners])
                continue
            out = []
            for n in range(4):
                px, pz, ph = corners[n]
                qx, qz, qh = corners[(n + 1) % 4]
                sp, sq = np.sign(pz - ph), np.sign(qz - qh)
                if sp >= 0:
                    out.append((px, pz))
                if sp * sq < 0:
                    if px == qx:
                        out.append((px, ph))
                    else:
                        out.append((cross_x(i, pz), pz))
            out = _dedupe_ring(out)
            if len(out) < 3:
                continue
            area = _shoelace(out)
            if area <= 0.0:
                continue
            if area < SMALL_CELL_FRACTION * cell_area:
                small.append(len(polys))
            polys.append(out)
    return _assemble(spec, polys, info={"kind": "cutcell", "small_cells": small})


def gen_slanted_cell(spec: DomainSpec, profile: TerrainProfile) -> Mesh:
    """Regular mesh with buried vertices raised onto the terrain."""
    if profile.h0 >= spec.height:
        raise MeshError(f"mountain height {profile.h0} must be below the domain height {spec.height}")
    xe, zs, h = _snapped_terrain(spec, profile)
    z = np.maximum(zs[None, :], h[:, None])
    polys = []
    for k in range(spec.nz):
        for i in range(spec.nx):
            ring = _dedupe_ring([(xe[i], z[i, k]), (xe[i + 1], z[i + 1, k]), (xe[i + 1], z[i + 1, k + 1]),
                                 (xe[i], z[i, k + 1])])
            if len(ring) < 3 or _shoelace(ring) <= 0.0:
                continue
            polys.append(ring)
    return _assemble(spec, polys, info={"kind": "slanted"})


def generate_planar(kind: str, spec: DomainSpec, profile: TerrainProfile) -> Mesh:
    if kind == "uniform":
        return gen_uniform(spec)
    if kind == "btf":
        return gen_btf(spec, profile)
    if kind == "cutcell":
        return gen_cut_cell(spec, profile)
    if kind == "slanted":
        return gen_slanted_cell(spec, profile)
    raise ValueError(f"unknown planar mesh kind {kind!r}")


# --------------------------------------------------------------------- sphere


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _icosahedron():
    t = (1.0 + math.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    tris = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    return _normalize(verts), np.array(tris)


def icosahedral_triangulation(level: int):
    """Unit-sphere triangulation from ``level`` bisections of the icosahedron."""
    if level < 0:
        raise ValueError("refinement level must be non-negative")
    verts, tris = _icosahedron()
    verts = list(verts)
    for _ in range(level):
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in tris:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        tris = np.array(new)
    return np.array(verts), tris


def _circumcentres(p, tris):
    a, b, c = p[tris[:, 0]], p[tris[:, 1]], p[tris[:, 2]]
    n = np.cross(b - a, c - a)
    n *= np.sign(np.sum(n * (a + b + c), axis=1))[:, None]
    return _normalize(n)


def _shell_from_surface(dirs, polys, r1, r2, radius, info) -> Mesh:
    """Extrude counter-clockwise (seen from outside) unit-sphere polygons into a prism shell."""
    nv = len(dirs)
    points = np.vstack([r1 * dirs, r2 * dirs])
    edge_owner: dict[tuple[int, int], tuple[int, int, int]] = {}
    interior = []
    for c, poly in enumerate(polys):
        k = len(poly)
        for i in range(k):
            a, b = poly[i], poly[(i + 1) % k]
            key = (a, b) if a < b else (b, a)
            if key in edge_owner:
                oa, ob, oc = edge_owner.pop(key)
                if (oa, ob) != (b, a):
                    raise MeshError("inconsistent surface polygon orientation")
                interior.append((oc, c, oa, ob))
            else:
                edge_owner[key] = (a, b, c)
    if edge_owner:
        raise MeshError("surface mesh is not closed")
    interior.sort()
    faces, owner, neighbour = [], [], []
    for oc, nc, a, b in interior:
        faces.append((a, b, nv + b, nv + a))
        owner.append(oc)
        neighbour.append(nc)
    n_int = len(faces)
    for c, poly in enumerate(polys):
        faces.append(tuple(reversed(poly)))
        owner.append(c)
        neighbour.append(-1)
    for c, poly in enumerate(polys):
        faces.append(tuple(nv + v for v in poly))
        owner.append(c)
        neighbour.append(-1)
    nc = len(polys)
    patches = [Patch("inner", n_int, nc, NO_NORMAL_FLOW), Patch("outer", n_int + nc, nc, NO_NORMAL_FLOW)]
    mesh = Mesh(points, faces, owner, neighbour, patches, info=dict(info))
    return spherical_corrections(mesh, r1, r2, radius)


def _orient_ccw(dirs, poly):
    p = dirs[poly]
    n = 0.5 * np.cross(p, np.roll(p, -1, axis=0)).sum(axis=0)
    return poly if np.dot(n, p.mean(axis=0)) > 0 else poly[::-1]


def gen_hex_icosahedral(level: int, radius: float = EARTH_RADIUS) -> Mesh:
    """Dual of the refined icosahedron: 12 pentagons, the rest hexagons."""
    verts, tris = icosahedral_triangulation(level)
    centres = _circumcentres(verts, tris)
    around: list[list[int]] = [[] for _ in range(len(verts))]
    for t, tri in enumerate(tris):
        for v in tri:
            around[v].append(t)
    polys = []
    for v, ts in enumerate(around):
        # order the surrounding triangles by angle in the tangent plane at v
        n = verts[v]
        e1 = _normalize(np.cross(n, [0.0, 0.0, 1.0]) if abs(n[2]) < 0.9 else np.cross(n, [1.0, 0.0, 0.0]))
        e2 = np.cross(n, e1)
        d = centres[ts] - n
        ang = np.arctan2(d @ e2, d @ e1)
        polys.append([ts[j] for j in np.argsort(ang)])
    polys = [_orient_ccw(centres, np.array(p)).tolist() for p in polys]
    return _shell_from_surface(centres, polys, radius - SHELL_HALF_DEPTH, radius + SHELL_HALF_DEPTH, radius,
                               {"kind": "hexicos", "level": level})


_CUBE_PANELS = (
    lambda a, b: np.stack([np.ones_like(a), a, b], axis=-1),
    lambda a, b: np.stack([-a, np.ones_like(a), b], axis=-1),
    lambda a, b: np.stack([-np.ones_like(a), -a, b], axis=-1),
    lambda a, b: np.stack([a, -np.ones_like(a), b], axis=-1),
    lambda a, b: np.stack([-b, a, np.ones_like(a)], axis=-1),
    lambda a, b: np.stack([b, a, -np.ones_like(a)], axis=-1),
)


def gen_cubed_sphere(n: int, radius: float = EARTH_RADIUS) -> Mesh:
    """Equiangular gnomonic cubed sphere with ``n`` x ``n`` cells per panel."""
    if n < 1:
        raise ValueError("panel resolution must be at least 1")
    ang = np.tan(np.linspace(-math.pi / 4, math.pi / 4, n + 1))
    ang[0], ang[-1] = -1.0, 1.0
    a, b = np.meshgrid(ang, ang, indexing="ij")
    raw = np.concatenate([_normalize(f(a, b)).reshape(-1, 3) for f in _CUBE_PANELS])
    tree = cKDTree(raw)
    groups = tree.query_ball_point(raw, 1e-9)
    rep = np.array([min(g) for g in groups])
    uniq, inverse = np.unique(rep, return_inverse=True)
    dirs = raw[uniq]
    polys = []
    m = n + 1
    for p in range(6):
        base = p * m * m
        for i in range(n):
            for j in range(n):
                quad = [base + i * m + j, base + (i + 1) * m + j, base + (i + 1) * m + j + 1, base + i * m + j + 1]
                polys.append(_orient_ccw(dirs, np.array([inverse[q] for q in quad])).tolist())
    return _shell_from_surface(dirs, polys, radius - SHELL_HALF_DEPTH, radius + SHELL_HALF_DEPTH, radius,
                               {"kind": "cubedsphere", "panel_n": n})


def equatorial_spacing(mesh: Mesh) -> float:
    """Average spacing in degrees: 360 * mean neighbour-centre distance / (2 pi R)."""
    if mesh.shell is None:
        raise MeshError("equatorial spacing is defined for shell meshes only")
    ni = mesh.n_internal
    d = np.linalg.norm(mesh.cell_centres[mesh.owner[:ni]] - mesh.cell_centres[mesh.neighbour[:ni]], axis=1)
    return 360.0 * float(d.mean()) / (2.0 * math.pi * mesh.shell.radius)
