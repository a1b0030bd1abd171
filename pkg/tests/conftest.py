import math
import os

import numpy as np
import pytest

from cubefit.mesh import ZERO_GRADIENT, mesh_from_polygons


def _wall(a, b):
    return "walls", ZERO_GRADIENT, 0.0


def rect_mesh(nx, ny, dx=1.0, dy=1.0, boundary=None, patch_order=("walls",)):
    """Uniform ``nx`` by ``ny`` rectangle mesh with the origin at the lower-left corner."""
    xs = np.arange(nx + 1) * dx
    ys = np.arange(ny + 1) * dy
    pts = np.array([(x, y) for y in ys for x in xs])
    vid = lambda i, j: j * (nx + 1) + i
    cells = [[vid(i, j), vid(i + 1, j), vid(i + 1, j + 1), vid(i, j + 1)] for j in range(ny) for i in range(nx)]
    return mesh_from_polygons(pts, cells, boundary or _wall, patch_order)


def bottom_rule(kind, value=0.0):
    def rule(a, b):
        if a[1] == 0.0 and b[1] == 0.0:
            return "bottom", kind, value
        return "walls", ZERO_GRADIENT, 0.0

    return rule


def hex_mesh(nx, ny, side=1.0):
    """Pointy-top regular hexagons on an offset lattice."""
    w = math.sqrt(3.0) * side
    key_of = {}
    pts = []
    cells = []

    def vertex(p):
        key = (round(p[0], 9), round(p[1], 9))
        if key not in key_of:
            key_of[key] = len(pts)
            pts.append(p)
        return key_of[key]

    for j in range(ny):
        for i in range(nx):
            cx = i * w + (0.5 * w if j % 2 else 0.0)
            cy = 1.5 * side * j
            ring = [vertex((cx + side * math.cos(math.radians(30 + 60 * k)),
                            cy + side * math.sin(math.radians(30 + 60 * k)))) for k in range(6)]
            cells.append(ring)
    return mesh_from_polygons(np.array(pts), cells, _wall, ("walls",))


def face_between(mesh, a, b):
    for f in range(mesh.n_internal):
        if {int(mesh.owner[f]), int(mesh.neighbour[f])} == {a, b}:
            return f
    raise KeyError((a, b))


def nearest_cell(mesh, p):
    return int(np.argmin(np.linalg.norm(mesh.cell_centres - np.asarray(p), axis=1)))


@pytest.fixture(scope="session", autouse=True)
def weight_cache(tmp_path_factory):
    if "CUBEFIT_CACHE_DIR" not in os.environ:
        os.environ["CUBEFIT_CACHE_DIR"] = str(tmp_path_factory.mktemp("weights"))
    yield


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record_acceptance(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = (ok, detail)
    print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")

