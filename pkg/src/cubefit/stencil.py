"""Upwind-biased stencils built from opposing faces of the upwind cell.

Stencil points are indices into the extended value vector
``[phi_0 .. phi_{nc-1}, b_0 .. b_{nb-1}]`` where ``b_j`` is the value on
boundary face ``n_internal + j``.  Only Dirichlet (fixedValue) boundary faces
ever appear as points.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import FIXED_VALUE, Mesh

OPP_THRESHOLD = 0.5
# Opp values within this margin of the threshold count as below it, so that
# symmetric ties (regular hexagons) do not depend on round-off
OPP_TIE_TOL = 1e-6

UPWIND, DOWNWIND, PERIPHERAL = "upwind", "downwind", "peripheral"


class StencilError(ValueError):
    pass


@dataclass(frozen=True)
class Stencil:
    face: int
    upwind: int
    downwind: int
    points: np.ndarray        # extended-vector indices, upwind first, downwind second
    positions: np.ndarray     # (n, dim) sample positions

    @property
    def size(self) -> int:
        return len(self.points)

    @property
    def roles(self) -> list[str]:
        return [UPWIND, DOWNWIND] + [PERIPHERAL] * (self.size - 2)


def outward_area(mesh: Mesh, face: int, cell: int) -> np.ndarray:
    s = mesh.face_areas[face]
    if mesh.owner[face] == cell:
        return s
    if face < mesh.n_internal and mesh.neighbour[face] == cell:
        return -s
    raise StencilError(f"face {face} does not border cell {cell}")


def opposedness(mesh: Mesh, f: int, g: int, cu: int) -> float:
    """``-S_f . S_g / |S_f|^2`` with both area vectors outward from ``cu``."""
    sf = outward_area(mesh, f, cu)
    sg = outward_area(mesh, g, cu)
    mag2 = float(sf @ sf)
    if mag2 == 0.0:
        raise StencilError(f"face {f} has zero area")
    return -float(sf @ sg) / mag2


def opposing_faces(mesh: Mesh, f: int, cu: int) -> list[int]:
    """Faces of ``cu`` with Opp at or above one half, always including the most opposed face."""
    others = [int(g) for g in mesh.cell_faces[cu] if g != f]
    opp = np.array([opposedness(mesh, f, g, cu) for g in others])
    best = int(np.argmax(opp))  # lowest face index wins ties: cell_faces is sorted
    return [g for k, g in enumerate(others) if k == best or opp[k] >= OPP_THRESHOLD + OPP_TIE_TOL]


class StencilBuilder:
    """Caches the adjacency needed to build every stencil of a mesh."""

    def __init__(self, mesh: Mesh):
        if not mesh.has_geometry:
            raise StencilError("mesh geometry must be computed before building stencils")
        self.mesh = mesh
        nc, ni = mesh.n_cells, mesh.n_internal
        self.cell_vertex_sets = [frozenset(v.tolist()) for v in mesh.cell_vertices]
        self.vertex_cells = mesh.vertex_cells
        # Dirichlet boundary faces touching each vertex
        dirichlet: dict[int, list[int]] = {}
        for j, kind in enumerate(mesh.boundary_kind):
            if kind == FIXED_VALUE:
                for v in mesh.faces[ni + j]:
                    dirichlet.setdefault(v, []).append(ni + j)
        self.dirichlet_at_vertex = dirichlet
        self.n_cells = nc
        self.cell_faces = mesh.cell_faces
        # outward area vectors of each cell's faces, aligned with cell_faces
        self.cell_out_area = []
        for c, faces in enumerate(self.cell_faces):
            sign = np.where(mesh.owner[faces] == c, 1.0, -1.0)
            self.cell_out_area.append(mesh.face_areas[faces] * sign[:, None])
        self.positions = np.vstack([mesh.cell_centres, mesh.face_centres[ni:]])

    def point_of_face(self, b: int) -> int:
        return self.n_cells + (b - self.mesh.n_internal)

    def opposing(self, f: int, cu: int) -> list[int]:
        """Vectorised equivalent of :func:`opposing_faces`."""
        faces = self.cell_faces[cu]
        areas = self.cell_out_area[cu]
        k = int(np.searchsorted(faces, f))
        sf = areas[k]
        opp = -(areas @ sf) / (sf @ sf)
        others = np.delete(np.arange(len(faces)), k)
        opp = opp[others]
        best = int(np.argmax(opp))
        keep = opp >= OPP_THRESHOLD + OPP_TIE_TOL
        keep[best] = True
        return faces[others[keep]].tolist()

    def build(self, f: int, cu: int) -> Stencil:
        mesh = self.mesh
        if f >= mesh.n_internal:
            raise StencilError(f"face {f} is a boundary face; stencils exist only for interior faces")
        own, nei = int(mesh.owner[f]), int(mesh.neighbour[f])
        if cu == own:
            cd = nei
        elif cu == nei:
            cd = own
        else:
            raise StencilError(f"cell {cu} is not adjacent to face {f}")

        internal = {cu}
        for g in self.opposing(f, cu):
            internal.add(int(mesh.owner[g]))
            if g < mesh.n_internal:
                internal.add(int(mesh.neighbour[g]))
        verts = set().union(*(self.cell_vertex_sets[c] for c in internal))
        cells = set(internal)
        bfaces = set()
        for v in verts:
            cells.update(self.vertex_cells[v].tolist())
            bfaces.update(self.dirichlet_at_vertex.get(v, ()))
        if cd not in cells:
            raise StencilError(f"downwind cell {cd} missing from stencil of face {f}")
        cells.discard(cu)
        cells.discard(cd)
        rest = sorted(cells) + [self.point_of_face(b) for b in sorted(bfaces)]
        rest = np.array(rest, dtype=np.int64)
        scale = float(np.linalg.norm(mesh.cell_centres[cd] - mesh.cell_centres[cu]))
        dist = np.linalg.norm(self.positions[rest] - mesh.face_centres[f], axis=1) / scale
        order = np.lexsort((rest, np.round(dist, 9)))
        points = np.concatenate([[cu, cd], rest[order]]).astype(np.int64)
        return Stencil(f, cu, cd, points, self.positions[points])


def build_stencil(mesh: Mesh, f: int, cu: int) -> Stencil:
    return StencilBuilder(mesh).build(f, cu)


def build_all_stencils(mesh: Mesh) -> list[tuple[Stencil, Stencil]]:
    """Both stencils of every interior face: (owner upwind, neighbour upwind)."""
    builder = StencilBuilder(mesh)
    return [(builder.build(f, int(mesh.owner[f])), builder.build(f, int(mesh.neighbour[f])))
            for f in range(mesh.n_internal)]
