import math

import numpy as np
import pytest
from scipy.integrate import trapezoid

from cubefit.mesh import MeshError
from cubefit.meshgen import (DomainSpec, TerrainProfile, equatorial_spacing, gen_btf, gen_cubed_sphere,
                             gen_cut_cell, gen_hex_icosahedral, gen_slanted_cell, gen_uniform, generate_planar,
                             icosahedral_triangulation, terrain_height, terrain_slope)

# x = 0 falls on a column edge when the width is a multiple of dx
CENTRED = DomainSpec(dx=1000.0, dz=500.0, width=300_000.0)


def test_terrain_height_values():
    p = TerrainProfile(h0=6000.0)
    assert terrain_height(0.0, p) == 6000.0
    assert terrain_height(25_000.0, p) == 0.0
    assert terrain_height(-30_000.0, p) == 0.0
    assert terrain_height(4000.0, p) == pytest.approx(0.0, abs=1e-9)


def test_terrain_slope_matches_finite_difference():
    p = TerrainProfile(h0=5000.0)
    assert terrain_slope(0.0, p) == 0.0
    d = 0.01
    fd = (terrain_height(2000.0 + d, p) - terrain_height(2000.0 - d, p)) / (2 * d)
    assert terrain_slope(2000.0, p) == pytest.approx(fd, rel=1e-6)


def test_btf_rejects_tall_mountain():
    with pytest.raises(MeshError):
        gen_btf(CENTRED, TerrainProfile(h0=25_000.0))


def test_btf_levels():
    m = gen_btf(CENTRED, TerrainProfile(h0=5000.0))
    pts = m.points
    at0 = pts[pts[:, 0] == 0.0]
    assert 15_000.0 in at0[:, 1]        # z* = H/2 lifted by h/2
    assert at0[:, 1].max() == 25_000.0  # lid undistorted
    assert at0[:, 1].min() == 5000.0
    flat = pts[np.abs(pts[:, 0]) >= 25_000.0]
    assert np.all(np.isin(flat[:, 1], CENTRED.z_levels()))


def test_flat_meshes_are_identical():
    spec = DomainSpec(dx=5000.0, dz=2500.0)
    ref = gen_uniform(spec).fingerprint()
    for kind in ("btf", "cutcell", "slanted"):
        assert generate_planar(kind, spec, TerrainProfile(h0=0.0)).fingerprint() == ref


def _buried_area(spec, profile):
    xe = spec.x_edges()
    return trapezoid(terrain_height(xe, profile), xe)


@pytest.mark.parametrize("gen", [gen_cut_cell, gen_slanted_cell])
def test_volume_excludes_piecewise_linear_terrain(gen):
    profile = TerrainProfile(h0=5000.0)
    m = gen(CENTRED, profile)
    expect = CENTRED.width * CENTRED.height - _buried_area(CENTRED, profile)
    assert m.volumes.sum() == pytest.approx(expect, rel=1e-12)
    assert m.volumes.min() > 0.0


def test_cut_cell_terrain_through_vertex():
    # h(0) = 5000 m coincides with a mesh level
    m = gen_cut_cell(CENTRED, TerrainProfile(h0=5000.0))
    assert np.linalg.norm(m.face_areas, axis=1).min() > 0.0
    assert np.any(np.all(m.points == [0.0, 5000.0], axis=1))
    # the ground patch follows the terrain
    ground = m.patch("ground")
    xs = np.array([m.face_centres[f] for f in ground.faces])
    xe = CENTRED.x_edges()
    h = np.interp(xs[:, 0], xe, terrain_height(xe, TerrainProfile(h0=5000.0)))
    np.testing.assert_allclose(xs[:, 1], h, atol=1e-6)


def test_cut_cell_flags_small_cells():
    m = gen_cut_cell(DomainSpec(dx=1000.0, dz=500.0), TerrainProfile(h0=5000.0))
    small = m.info["small_cells"]
    assert all(m.volumes[c] < 1000.0 * 500.0 for c in small)
    assert m.volumes.min() < 1e-3 * 1000.0 * 500.0


def test_slanted_vertices_above_terrain():
    profile = TerrainProfile(h0=5000.0)
    m = gen_slanted_cell(CENTRED, profile)
    xe = CENTRED.x_edges()
    h = terrain_height(xe, profile)
    ground_at = np.interp(m.points[:, 0], xe, h)
    assert np.all(m.points[:, 1] >= ground_at - 1e-9)
    # a vertex exactly on the terrain keeps its position
    assert np.any(np.all(m.points == [0.0, 5000.0], axis=1))
    levels = set(CENTRED.z_levels())
    above = m.points[m.points[:, 1] > ground_at + 1e-9]
    assert all(z in levels for z in above[:, 1])


def test_patch_layout():
    m = gen_btf(DomainSpec(dx=5000.0, dz=2500.0), TerrainProfile(h0=3000.0))
    names = [p.name for p in m.patches]
    assert names == ["inlet", "outlet", "ground", "top"]
    kinds = {p.name: p.kind for p in m.patches}
    assert kinds == {"inlet": "fixedValue", "outlet": "zeroNormalGradient", "ground": "noNormalFlow",
                     "top": "noNormalFlow"}


def _surface_polygons(m):
    return [m.faces[f] for f in m.patch("outer").faces]


def test_hexicos_counts():
    assert len(_surface_polygons(gen_hex_icosahedral(0))) == 12
    m = gen_hex_icosahedral(3)
    polys = _surface_polygons(m)
    assert m.n_cells == 10 * 4 ** 3 + 2
    assert sum(len(p) == 5 for p in polys) == 12
    assert all(len(p) in (5, 6) for p in polys)
    v = len({i for p in polys for i in p})
    e = sum(len(p) for p in polys) // 2
    assert v - e + len(polys) == 2


def test_icosahedral_triangulation_counts():
    verts, tris = icosahedral_triangulation(2)
    assert len(verts) == 10 * 4 ** 2 + 2
    assert len(tris) == 20 * 4 ** 2
    np.testing.assert_allclose(np.linalg.norm(verts, axis=1), 1.0)


def test_cubed_sphere_cube():
    m = gen_cubed_sphere(1)
    assert m.n_cells == 6
    assert len({i for p in _surface_polygons(m) for i in p}) == 8
    m = gen_cubed_sphere(6)
    assert m.n_cells == 216
    assert m.volumes.min() > 0.0


def test_equatorial_spacing():
    m = gen_hex_icosahedral(3)
    assert equatorial_spacing(m) == pytest.approx(8.61, abs=0.02)
    ni = m.n_internal
    d = np.linalg.norm(m.cell_centres[m.owner[:ni]] - m.cell_centres[m.neighbour[:ni]], axis=1).mean()
    assert equatorial_spacing(m) == pytest.approx(d / (2 * math.pi * m.shell.radius / 360.0), rel=1e-14)
    assert equatorial_spacing(gen_hex_icosahedral(4)) == pytest.approx(4.3, abs=0.03)
    with pytest.raises(MeshError):
        equatorial_spacing(gen_uniform(DomainSpec(dx=50_000.0, dz=5000.0)))


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(dx=0.0)
    assert DomainSpec(dx=1000.0, dz=500.0).nx == 301
