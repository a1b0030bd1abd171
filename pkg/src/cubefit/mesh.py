"""Unstructured polygonal / polyhedral mesh with planar and spherical-shell geometry.

Planar x-z meshes are true 2-D meshes: faces are edges with two vertices,
cells are polygons and the cell "volume" is its area (unit depth implied).
Spherical meshes are single-layer shells of prisms between radii ``r1`` and
``r2`` whose geometry is corrected for curvature.

Face ordering follows the usual finite-volume convention: interior faces
first, then boundary faces grouped into contiguous patches.  Every area
vector ``Sf`` points from the owner cell into the neighbour cell (outward on
the boundary).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np

FIXED_VALUE = "fixedValue"
ZERO_GRADIENT = "zeroNormalGradient"
NO_NORMAL_FLOW = "noNormalFlow"
BC_KINDS = (FIXED_VALUE, ZERO_GRADIENT, NO_NORMAL_FLOW)

# relative tolerance for "all vertices at the same radius"
RADIUS_RTOL = 1e-6


class MeshError(ValueError):
    """Invalid mesh topology or degenerate geometry."""


@dataclass(frozen=True)
class Patch:
    """A contiguous range of boundary faces sharing one boundary condition."""

    name: str
    start: int
    size: int
    kind: str
    value: float = 0.0

    def __post_init__(self):
        if self.kind not in BC_KINDS:
            raise MeshError(f"patch {self.name!r}: unknown boundary condition {self.kind!r}")

    @property
    def faces(self) -> range:
        return range(self.start, self.start + self.size)


@dataclass(frozen=True)
class Shell:
    r1: float
    r2: float
    radius: float


@dataclass(frozen=True, eq=False)
class Mesh:
    points: np.ndarray
    faces: tuple[tuple[int, ...], ...]
    owner: np.ndarray
    neighbour: np.ndarray
    patches: tuple[Patch, ...]
    shell: Shell | None = None
    face_centres: np.ndarray | None = None
    face_areas: np.ndarray | None = None
    cell_centres: np.ndarray | None = None
    volumes: np.ndarray | None = None
    # free-form generator diagnostics (e.g. flagged small cut cells)
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=float))
        object.__setattr__(self, "owner", np.asarray(self.owner, dtype=np.int64))
        object.__setattr__(self, "neighbour", np.asarray(self.neighbour, dtype=np.int64))
        object.__setattr__(self, "faces", tuple(tuple(int(v) for v in f) for f in self.faces))
        object.__setattr__(self, "patches", tuple(self.patches))
        self._check_topology()

    def _check_topology(self):
        nf = len(self.faces)
        if self.owner.shape != (nf,) or self.neighbour.shape != (nf,):
            raise MeshError("owner/neighbour arrays must have one entry per face")
        for i, f in enumerate(self.faces):
            if len(f) < 2:
                raise MeshError(f"face {i} has fewer than two vertices")
            if any(f[k] == f[(k + 1) % len(f)] for k in range(len(f))):
                raise MeshError(f"face {i} has repeated consecutive vertices")
        interior = self.neighbour >= 0
        n_int = int(interior.sum())
        if not interior[:n_int].all():
            raise MeshError("interior faces must precede boundary faces")
        if np.any(self.owner[:n_int] == self.neighbour[:n_int]):
            bad = int(np.nonzero(self.owner[:n_int] == self.neighbour[:n_int])[0][0])
            raise MeshError(f"face {bad}: owner equals neighbour")
        covered = np.zeros(nf - n_int, dtype=int)
        for p in self.patches:
            if p.start < n_int or p.start + p.size > nf:
                raise MeshError(f"patch {p.name!r} does not lie within the boundary faces")
            covered[p.start - n_int:p.start - n_int + p.size] += 1
        if np.any(covered != 1):
            raise MeshError("every boundary face must belong to exactly one patch")

    # ------------------------------------------------------------------ topology

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_cells(self) -> int:
        return int(max(self.owner.max(), self.neighbour.max())) + 1

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    @cached_property
    def n_internal(self) -> int:
        return int((self.neighbour >= 0).sum())

    @property
    def n_boundary(self) -> int:
        return self.n_faces - self.n_internal

    @property
    def has_geometry(self) -> bool:
        return self.volumes is not None

    @cached_property
    def cell_faces(self) -> list[np.ndarray]:
        """Faces of each cell in ascending face order."""
        nc = self.n_cells
        f_idx = np.concatenate([np.arange(self.n_faces), np.arange(self.n_internal)])
        c_idx = np.concatenate([self.owner, self.neighbour[:self.n_internal]])
        order = np.lexsort((f_idx, c_idx))
        counts = np.bincount(c_idx, minlength=nc)
        return np.split(f_idx[order], np.cumsum(counts)[:-1])

    @cached_property
    def cell_vertices(self) -> list[np.ndarray]:
        return [np.unique(np.concatenate([self.faces[f] for f in cf])) for cf in self.cell_faces]

    @cached_property
    def vertex_cells(self) -> list[np.ndarray]:
        cells: list[list[int]] = [[] for _ in range(len(self.points))]
        for c, verts in enumerate(self.cell_vertices):
            for v in verts:
                cells[v].append(c)
        return [np.array(c, dtype=np.int64) for c in cells]

    @cached_property
    def boundary_kind(self) -> np.ndarray:
        """Boundary-condition kind per boundary face (index = face - n_internal)."""
        kinds = np.empty(self.n_boundary, dtype=object)
        for p in self.patches:
            kinds[p.start - self.n_internal:p.start - self.n_internal + p.size] = p.kind
        return kinds

    @cached_property
    def boundary_value(self) -> np.ndarray:
        vals = np.zeros(self.n_boundary)
        for p in self.patches:
            vals[p.start - self.n_internal:p.start - self.n_internal + p.size] = p.value
        return vals

    def patch(self, name: str) -> Patch:
        for p in self.patches:
            if p.name == name:
                return p
        raise KeyError(name)

    def face_patch(self, face: int) -> Patch | None:
        for p in self.patches:
            if p.start <= face < p.start + p.size:
                return p
        return None

    def with_geometry(self) -> "Mesh":
        if self.shell is None:
            return compute_planar_geometry(self)
        return spherical_corrections(self, self.shell.r1, self.shell.r2, self.shell.radius)

    def fingerprint(self) -> str:
        """Content hash of topology and vertex positions."""
        import hashlib

        h = hashlib.sha1()
        h.update(np.ascontiguousarray(self.points).tobytes())
        h.update(np.array([len(f) for f in self.faces], dtype=np.int64).tobytes())
        h.update(np.concatenate([np.asarray(f) for f in self.faces]).astype(np.int64).tobytes())
        h.update(self.owner.tobytes())
        h.update(self.neighbour.tobytes())
        h.update(repr(self.patches).encode())
        h.update(repr(self.shell).encode())
        return h.hexdigest()


def _replace_geometry(mesh: Mesh, **geometry) -> Mesh:
    return dataclasses.replace(mesh, **geometry)


# ---------------------------------------------------------------- construction


def mesh_from_polygons(points, cells, boundary_patch, patch_order, *, info=None) -> Mesh:
    """Assemble a planar mesh from counter-clockwise cell polygons.

    ``cells`` is a sequence of vertex-index lists.  ``boundary_patch(a, b)``
    receives the two end positions of a boundary edge and returns
    ``(name, kind, value)``.  Patches are emitted in ``patch_order``.
    """
    points = np.asarray(points, dtype=float)
    edge_owner: dict[tuple[int, int], tuple[int, int, int]] = {}
    interior = []
    boundary: dict[str, list] = {}
    for c, poly in enumerate(cells):
        k = len(poly)
        for i in range(k):
            a, b = poly[i], poly[(i + 1) % k]
            key = (a, b) if a < b else (b, a)
            if key in edge_owner:
                oa, ob, oc = edge_owner.pop(key)
                if (oa, ob) != (b, a):
                    raise MeshError(f"edge {key} has inconsistent orientation (cells {oc}, {c})")
                interior.append((oc, c, oa, ob))
            else:
                edge_owner[key] = (a, b, c)
    for a, b, c in edge_owner.values():
        name, kind, value = boundary_patch(points[a], points[b])
        boundary.setdefault(name, []).append((c, a, b, kind, value))

    interior.sort(key=lambda e: (e[0], e[1]))
    faces, owner, neighbour = [], [], []
    for oc, nc, a, b in interior:
        faces.append((a, b))
        owner.append(oc)
        neighbour.append(nc)
    patches = []
    for name in patch_order:
        entries = sorted(boundary.pop(name, []), key=lambda e: (e[0], e[1], e[2]))
        if not entries:
            continue
        kind, value = entries[0][3], entries[0][4]
        patches.append(Patch(name, len(faces), len(entries), kind, value))
        for c, a, b, _, _ in entries:
            faces.append((a, b))
            owner.append(c)
            neighbour.append(-1)
    if boundary:
        raise MeshError(f"boundary edges assigned to unlisted patches {sorted(boundary)}")
    mesh = Mesh(points, faces, owner, neighbour, patches, info=dict(info or {}))
    return compute_planar_geometry(mesh)


# ------------------------------------------------------------ planar geometry


def compute_planar_geometry(mesh: Mesh) -> Mesh:
    """Face centres, area vectors, cell areas and centroids of a 2-D mesh."""
    if mesh.shell is not None or mesh.dim != 2:
        raise MeshError("planar geometry requires a 2-D mesh")
    faces = np.array(mesh.faces, dtype=np.int64)
    if faces.ndim != 2 or faces.shape[1] != 2:
        raise MeshError("planar mesh faces must be edges with two vertices")
    a = mesh.points[faces[:, 0]]
    b = mesh.points[faces[:, 1]]
    d = b - a
    sf = np.column_stack([d[:, 1], -d[:, 0]])
    cf = 0.5 * (a + b)
    mag = np.hypot(sf[:, 0], sf[:, 1])
    zero = np.nonzero(mag == 0.0)[0]
    if zero.size:
        raise MeshError(f"face {int(zero[0])} has zero area")

    nc = mesh.n_cells
    ni = mesh.n_internal
    own, nei = mesh.owner, mesh.neighbour[:ni]
    # per-cell reference point keeps the shoelace sums well conditioned
    cnt = np.bincount(own, minlength=nc) + np.bincount(nei, minlength=nc)
    ref = np.empty((nc, 2))
    for k in range(2):
        ref[:, k] = (np.bincount(own, cf[:, k], nc) + np.bincount(nei, cf[:ni, k], nc)) / cnt

    def edge_terms(cells, p, q):
        p = p - ref[cells]
        q = q - ref[cells]
        cross = p[:, 0] * q[:, 1] - q[:, 0] * p[:, 1]
        return cross, (p + q) * cross[:, None]

    cr_o, m_o = edge_terms(own, a, b)
    cr_n, m_n = edge_terms(nei, b[:ni], a[:ni])
    area2 = np.bincount(own, cr_o, nc) + np.bincount(nei, cr_n, nc)
    vol = 0.5 * area2
    bad = np.nonzero(~(vol > 0.0))[0]
    if bad.size:
        raise MeshError(f"cell {int(bad[0])} has non-positive volume {vol[bad[0]]:g}")
    cc = np.empty((nc, 2))
    for k in range(2):
        mom = np.bincount(own, m_o[:, k], nc) + np.bincount(nei, m_n[:, k], nc)
        cc[:, k] = ref[:, k] + mom / (3.0 * area2)
    return _replace_geometry(mesh, face_centres=cf, face_areas=sf, cell_centres=cc, volumes=vol)


# --------------------------------------------------------- spherical geometry


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _arc(u, v):
    return np.arctan2(np.linalg.norm(np.cross(u, v), axis=-1), np.sum(u * v, axis=-1))


def solid_angle(v1, v2, v3) -> np.ndarray:
    """Solid angle of the spherical triangle with unit-vector vertices (l'Huilier).

    Broadcasts over leading dimensions.  Raises for (near-)collinear input.
    Arcs and tangents are evaluated in extended precision with Kahan's
    ordering because thin triangles are ill-conditioned in the side lengths.
    """
    v1, v2, v3 = (np.asarray(v, dtype=float) for v in (v1, v2, v3))
    triple = np.abs(np.sum(v1 * np.cross(v2, v3), axis=-1))
    if np.any(triple <= 1e-300):
        raise MeshError("solid angle of collinear vertices is undefined")
    v1, v2, v3 = (v.astype(np.longdouble) for v in (v1, v2, v3))
    arcs = np.sort(np.stack([_arc(v2, v3), _arc(v1, v3), _arc(v1, v2)], axis=-1), axis=-1)
    c, b, a = arcs[..., 0], arcs[..., 1], arcs[..., 2]
    t = (np.tan(0.25 * (a + (b + c))) * np.tan(0.25 * (c - (a - b)))
         * np.tan(0.25 * (c + (a - b))) * np.tan(0.25 * (a + (b - c))))
    return (4.0 * np.arctan(np.sqrt(np.maximum(t, 0.0)))).astype(float)


def _newell(pts: np.ndarray) -> np.ndarray:
    nxt = np.roll(pts, -1, axis=0)
    return 0.5 * np.cross(pts, nxt).sum(axis=0)


def spherical_corrections(mesh: Mesh, r1: float, r2: float, radius: float) -> Mesh:
    """Curvature-aware geometry for a single-layer spherical shell mesh.

    Surface faces (all vertices at one radius) get solid-angle weighted
    centres and ``S = r^2 Omega rhat``; radial faces (four vertices on two
    radii) get annular-sector areas and centres at ``radius``.  Cell volumes
    come from the surface faces only and cell centres are moved to
    ``radius`` along the mean direction of the cell's vertices.
    """
    if mesh.dim != 3:
        raise MeshError("spherical geometry requires 3-D vertex positions")
    pts = mesh.points
    rad = np.linalg.norm(pts, axis=1)
    nf = mesh.n_faces
    cf = np.empty((nf, 3))
    sf = np.empty((nf, 3))
    is_surface = np.zeros(nf, dtype=bool)

    surface_by_k: dict[int, list[int]] = {}
    for i, f in enumerate(mesh.faces):
        r = rad[list(f)]
        if np.ptp(r) <= RADIUS_RTOL * r.max():
            surface_by_k.setdefault(len(f), []).append(i)
            continue
        if len(f) != 4:
            raise MeshError(f"face {i} is neither a surface face nor a radial quadrilateral")
        lo = r < 0.5 * (r.min() + r.max())
        dirs = _unit(pts[list(f)])
        u1 = dirs[lo][0]
        u2 = dirs[lo][1] if lo.sum() == 2 else None
        ok = lo.sum() == 2 and np.ptp(r[lo]) <= RADIUS_RTOL * r.max() and np.ptp(r[~lo]) <= RADIUS_RTOL * r.max()
        if not ok:
            raise MeshError(f"face {i} cannot be classified as surface or radial")
        hi_dirs = dirs[~lo]
        # each outer vertex must sit above one of the inner ones
        if min(np.linalg.norm(hi_dirs - u1, axis=1)) > 1e-9 or min(np.linalg.norm(hi_dirs - u2, axis=1)) > 1e-9:
            raise MeshError(f"face {i} cannot be classified as surface or radial")
        d = _arc(u1, u2)
        area = 0.5 * d * abs(r.max() ** 2 - r.min() ** 2)
        normal = _newell(pts[list(f)])
        sf[i] = area * normal / np.linalg.norm(normal)
        cf[i] = radius * _unit(u1 + u2)

    for k, idx in surface_by_k.items():
        idx = np.array(idx)
        verts = pts[np.array([mesh.faces[i] for i in idx])]            # (n, k, 3)
        ctil = verts.mean(axis=1)                                       # (n, 3)
        x1 = verts
        x2 = np.roll(verts, -1, axis=1)
        omega_t = solid_angle(_unit(x1), _unit(x2), _unit(ctil)[:, None, :])  # (n, k)
        omega = omega_t.sum(axis=1)
        if np.any(~(omega > 0.0)):
            bad = idx[np.nonzero(~(omega > 0.0))[0][0]]
            raise MeshError(f"face {bad} has non-positive solid angle")
        rhat = _unit(np.einsum("nk,nkd->nd", omega_t, x1 + x2 + ctil[:, None, :]))
        rmag = np.einsum("nk,nk->n", omega_t, 0.5 * (np.linalg.norm(x1, axis=2) + np.linalg.norm(x2, axis=2))) / omega
        normals = 0.5 * np.cross(x1, x2).sum(axis=1)
        sign = np.sign(np.einsum("nd,nd->n", normals, rhat))
        cf[idx] = rmag[:, None] * rhat
        sf[idx] = (sign * rmag ** 2 * omega)[:, None] * rhat
        is_surface[idx] = True

    nc = mesh.n_cells
    ni = mesh.n_internal
    sc = np.einsum("nd,nd->n", sf, cf)
    # surface faces are tangent to the sphere, radial faces contain the origin
    contrib_o = np.where(is_surface, sc, 0.0)
    contrib_n = -contrib_o[:ni]
    vol = (np.bincount(mesh.owner, contrib_o, nc) + np.bincount(mesh.neighbour[:ni], contrib_n, nc)) / 3.0
    bad = np.nonzero(~(vol > 0.0))[0]
    if bad.size:
        raise MeshError(f"cell {int(bad[0])} has non-positive volume")
    cc = np.array([_unit(_unit(pts[v]).mean(axis=0)) for v in mesh.cell_vertices]) * radius
    out = _replace_geometry(mesh, shell=Shell(r1, r2, radius), face_centres=cf, face_areas=sf,
                            cell_centres=cc, volumes=vol)
    out.info["surface_faces"] = is_surface
    return out


def surface_faces(mesh: Mesh) -> np.ndarray:
    """Boolean mask of surface (tangent) faces on a shell mesh."""
    if "surface_faces" in mesh.info:
        return mesh.info["surface_faces"]
    rad = np.linalg.norm(mesh.points, axis=1)
    return np.array([np.ptp(rad[list(f)]) <= RADIUS_RTOL * rad[list(f)].max() for f in mesh.faces])


# ------------------------------------------------------------------ Courant


def courant_field(mesh: Mesh, flux: np.ndarray, dt: float) -> np.ndarray:
    """Multidimensional Courant number per cell."""
    nc = mesh.n_cells
    ni = mesh.n_internal
    af = np.abs(flux)
    total = np.bincount(mesh.owner, af, nc) + np.bincount(mesh.neighbour[:ni], af[:ni], nc)
    return dt * total / (2.0 * mesh.volumes)


# ------------------------------------------------------------------ file I/O


def write_mesh(mesh: Mesh, path) -> None:
    lines = []
    if mesh.shell is None:
        lines.append("mesh2d")
    else:
        lines.append(f"meshShell {mesh.shell.r1!r} {mesh.shell.r2!r} {mesh.shell.radius!r}")
    lines.append(f"vertices {len(mesh.points)}")
    lines.extend(" ".join(repr(float(c)) for c in p) for p in mesh.points)
    lines.append(f"faces {mesh.n_faces}")
    for f, o, n in zip(mesh.faces, mesh.owner, mesh.neighbour):
        lines.append(f"{len(f)} {' '.join(map(str, f))} {o} {n}")
    lines.append(f"patches {len(mesh.patches)}")
    for p in mesh.patches:
        tail = f" {p.value!r}" if p.kind == FIXED_VALUE else ""
        lines.append(f"{p.name} {p.start} {p.size} {p.kind}{tail}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_mesh(path) -> Mesh:
    tokens = Path(path).read_text(encoding="utf-8").split("\n")
    it = iter(line.split() for line in tokens if line.strip())
    head = next(it)
    shell = None
    if head[0] == "meshShell":
        shell = Shell(float(head[1]), float(head[2]), float(head[3]))
    elif head[0] != "mesh2d":
        raise MeshError(f"unknown mesh header {head[0]!r}")

    def section(name):
        row = next(it)
        if row[0] != name:
            raise MeshError(f"expected section {name!r}, found {row[0]!r}")
        return int(row[1])

    points = np.array([[float(v) for v in next(it)] for _ in range(section("vertices"))])
    faces, owner, neighbour = [], [], []
    for _ in range(section("faces")):
        row = next(it)
        k = int(row[0])
        faces.append(tuple(int(v) for v in row[1:1 + k]))
        owner.append(int(row[1 + k]))
        neighbour.append(int(row[2 + k]))
    patches = []
    for _ in range(section("patches")):
        row = next(it)
        value = float(row[4]) if len(row) > 4 else 0.0
        patches.append(Patch(row[0], int(row[1]), int(row[2]), row[3], value))
    mesh = Mesh(points, faces, owner, neighbour, patches, shell=shell)
    return mesh.with_geometry()
