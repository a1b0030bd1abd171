"""Idealised transport test cases: flows, tracers, analytic solutions and error norms."""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import brentq

from .mesh import FIXED_VALUE, RADIUS_RTOL, Mesh, courant_field
from .meshgen import (EARTH_RADIUS, DomainSpec, TerrainProfile, gen_cubed_sphere, gen_hex_icosahedral,
                      generate_planar, terrain_height)

U0 = 10.0
SCHAER_Z1, SCHAER_Z2 = 7_000.0, 8_000.0
SCHAER_H0 = 6_000.0
MOUNTAIN_H1 = 10_000.0
T_END_PLANAR = 10_000.0
DEFORMATION_PERIOD = 12 * 86_400.0
TARGET_COURANT = 0.4
L2_MINIMAL = 0.033


# ------------------------------------------------------------- streamfunctions


def schaer_streamfunction(z, u0=U0, z1=SCHAER_Z1, z2=SCHAER_Z2):
    """``Psi(z) = -int_0^z u dz`` for the sin^2 shear layer between z1 and z2."""
    z = np.asarray(z, dtype=float)
    dz = z2 - z1
    mid = -u0 * (0.5 * (z - z1) - dz / (2 * math.pi) * np.sin(math.pi * (z - z1) / dz))
    top = -u0 * (0.5 * dz + (z - z2))
    return np.where(z <= z1, 0.0, np.where(z < z2, mid, top))


def schaer_velocity(z, u0=U0, z1=SCHAER_Z1, z2=SCHAER_Z2):
    z = np.asarray(z, dtype=float)
    mid = u0 * np.sin(0.5 * math.pi * (z - z1) / (z2 - z1)) ** 2
    return np.where(z >= z2, u0, np.where(z > z1, mid, 0.0))


def mountain_streamfunction(x, z, terrain: Callable, u0=U0, h1=MOUNTAIN_H1):
    """Terrain-following below ``h1`` and uniform aloft."""
    x, z = np.asarray(x, dtype=float), np.asarray(z, dtype=float)
    h = terrain(x)
    low = -u0 * h1 * (z - h) / (h1 - h)
    return np.where(z < h1, low, -u0 * z)


def mountain_velocity(x, z, profile: TerrainProfile, u0=U0, h1=MOUNTAIN_H1):
    from .meshgen import terrain_slope

    h = terrain_height(x, profile)
    u = u0 * h1 / (h1 - h)
    w = u0 * h1 * terrain_slope(x, profile) * (h1 - z) / (h1 - h) ** 2
    low = np.asarray(z) < h1
    return np.where(low, u, u0), np.where(low, w, 0.0)


def lonlat(x):
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    return np.arctan2(x[..., 1], x[..., 0]), np.arcsin(np.clip(x[..., 2] / r, -1.0, 1.0))


def deformational_streamfunction(x, t, radius=EARTH_RADIUS, period=DEFORMATION_PERIOD):
    lam, th = lonlat(x)
    lp = lam - 2 * math.pi * t / period
    return (10 * radius / period * np.sin(lp) ** 2 * np.cos(th) ** 2 * math.cos(math.pi * t / period)
            - 2 * math.pi * radius / period * np.sin(th))


# ------------------------------------------------------------------- fluxes


def flux_from_vertex_values(mesh: Mesh, psi_v: np.ndarray) -> np.ndarray:
    """Planar face flux ``Psi(v1) - Psi(v2)`` for a face running from v1 to v2."""
    faces = np.array(mesh.faces)
    return psi_v[faces[:, 0]] - psi_v[faces[:, 1]]


def shell_edge_terms(mesh: Mesh):
    """Per-face radial edge data: (face index, edge midpoint, e . x_e) for radial edges only."""
    pts = mesh.points
    rad = np.linalg.norm(pts, axis=1)
    face_idx, mids, ex = [], [], []
    for f, verts in enumerate(mesh.faces):
        k = len(verts)
        for i in range(k):
            p, q = verts[i], verts[(i + 1) % k]
            # surface edges are tangent to the sphere and carry no flux
            if abs(rad[p] - rad[q]) <= RADIUS_RTOL * max(rad[p], rad[q]):
                continue
            face_idx.append(f)
            mids.append(0.5 * (pts[p] + pts[q]))
            ex.append(float((pts[q] - pts[p]) @ (0.5 * (pts[p] + pts[q]))))
    return np.array(face_idx, dtype=np.int64), np.array(mids), np.array(ex)


def flux_from_streamfunction(mesh: Mesh, psi: Callable, t: float = 0.0, edge_terms=None) -> np.ndarray:
    """Discretely non-divergent face fluxes from a streamfunction.

    Planar meshes: ``psi(x, z)`` at vertices.  Shell meshes: ``psi(x, t)`` at
    radial-edge midpoints, summed as ``-sum_e (e . x_e) Psi(x_e)`` with edges
    traversed in face-vertex order (right-handed about ``S_f``).
    """
    if mesh.shell is None:
        return flux_from_vertex_values(mesh, psi(mesh.points[:, 0], mesh.points[:, 1]))
    f_idx, mids, ex = edge_terms if edge_terms is not None else shell_edge_terms(mesh)
    return -np.bincount(f_idx, ex * psi(mids, t), mesh.n_faces)


# ------------------------------------------------------------------- tracers


def cosine_squared_tracer(x, z, x0, z0, ax, az, phi0=1.0):
    r = np.sqrt(((np.asarray(x) - x0) / ax) ** 2 + ((np.asarray(z) - z0) / az) ** 2)
    return np.where(r <= 1.0, phi0 * np.cos(0.5 * math.pi * r) ** 2, 0.0)


HILL_CENTRES = ((5 * math.pi / 6, 0.0), (7 * math.pi / 6, 0.0))


def _cartesian(lam, th, radius):
    return radius * np.array([math.cos(th) * math.cos(lam), math.cos(th) * math.sin(lam), math.sin(th)])


def gaussian_hills(x, radius=EARTH_RADIUS, phi0=0.95, b=5.0):
    x = np.asarray(x, dtype=float)
    x = radius * x / np.linalg.norm(x, axis=-1, keepdims=True)
    out = np.zeros(x.shape[:-1])
    for lam, th in HILL_CENTRES:
        d = np.linalg.norm(x - _cartesian(lam, th, radius), axis=-1) / radius
        out += phi0 * np.exp(-b * d ** 2)
    return out


def cosine_bells(x, radius=EARTH_RADIUS, background=0.1, amplitude=0.9):
    lam, th = lonlat(x)
    rb = 0.5 * radius
    out = np.full(np.shape(lam), background)
    for lc, tc in HILL_CENTRES:
        cosd = np.sin(tc) * np.sin(th) + np.cos(tc) * np.cos(th) * np.cos(lam - lc)
        ri = radius * np.arccos(np.clip(cosd, -1.0, 1.0))
        bell = 0.5 * (1.0 + np.cos(math.pi * ri / rb))
        out = np.where(ri < rb, background + amplitude * bell, out)
    return out


# ------------------------------------------------------------------- analytic


def _terrain_integral(x, p: TerrainProfile):
    """Antiderivative of the terrain height on ``|x| <= a`` (clipped outside)."""
    x = np.clip(x, -p.a, p.a)
    al, be = p.alpha, p.beta
    return p.h0 / 16.0 * (4 * x + np.sin(2 * (al + be) * x) / (al + be) + np.sin(2 * (al - be) * x) / (al - be)
                          + 2 * (np.sin(2 * al * x) / al + np.sin(2 * be * x) / be))


def trajectory_time(x, h0, x0=-50_000.0, u0=U0, depth=MOUNTAIN_H1, profile=None):
    """Travel time of a ground parcel from ``x0`` to ``x``."""
    p = profile or TerrainProfile(h0=h0)
    return (x - x0) / u0 - (_terrain_integral(x, p) - _terrain_integral(x0, p)) / (u0 * depth)


def trajectory_arrival(h0, t, x0=-50_000.0, u0=U0, depth=MOUNTAIN_H1):
    """Position reached at time ``t`` by a ground parcel released at ``x0``."""
    if not h0 < depth:
        raise ValueError(f"mountain height {h0} must be below the flow depth {depth}")
    if t == 0:
        return x0
    if h0 == 0:
        return x0 + u0 * t
    hi = x0 + u0 * t * depth / (depth - h0) + 1.0
    return brentq(lambda x: trajectory_time(x, h0, x0, u0, depth) - t, x0, hi, xtol=1e-7, rtol=1e-15)


# --------------------------------------------------------------------- norms


@dataclass(frozen=True)
class ErrorReport:
    l2: float
    linf: float


def error_norms(numerical, analytic, volumes) -> ErrorReport:
    numerical, analytic, volumes = (np.asarray(a, dtype=float) for a in (numerical, analytic, volumes))
    denom2 = float(np.sum(analytic ** 2 * volumes))
    peak = float(np.max(np.abs(analytic)))
    if denom2 == 0.0 or peak == 0.0:
        raise ValueError("analytic solution is identically zero")
    err = numerical - analytic
    return ErrorReport(math.sqrt(float(np.sum(err ** 2 * volumes)) / denom2), float(np.max(np.abs(err))) / peak)


def minimal_resolution(table, target=L2_MINIMAL, order=2.0) -> tuple[float, bool]:
    """Spacing at which l2 reaches ``target``; returns (spacing, extrapolated).

    Interpolates log-log between bracketing entries, otherwise extrapolates
    from the nearest entry assuming ``l2 ~ spacing**order``.
    """
    rows = sorted((float(d), float(e)) for d, e in table)
    if not rows:
        raise ValueError("empty error table")
    for (d1, e1), (d2, e2) in zip(rows, rows[1:]):
        if min(e1, e2) <= target <= max(e1, e2) and e1 != e2:
            s = math.log(target / e1) / math.log(e2 / e1)
            return math.exp(math.log(d1) + s * math.log(d2 / d1)), False
    d, e = min(rows, key=lambda r: abs(math.log(r[1] / target)))
    return d * (target / e) ** (1.0 / order), True


def loglog_slope(spacings, errors) -> float:
    return float(np.polyfit(np.log(spacings), np.log(errors), 1)[0])


# ---------------------------------------------------------------------- cases


@dataclass
class CaseSetup:
    name: str
    mesh: Mesh
    flux: np.ndarray | Callable[[float], np.ndarray]
    phi0: np.ndarray
    phi_exact: np.ndarray
    t_end: float
    spacing: float
    info: dict = dataclasses.field(default_factory=dict)

    def max_courant(self, dt: float, samples: int = 9) -> float:
        if callable(self.flux):
            times = np.linspace(0.0, self.t_end, samples)
            return max(float(courant_field(self.mesh, self.flux(t), dt).max()) for t in times)
        return float(courant_field(self.mesh, self.flux, dt).max())

    def timestep_for_courant(self, target: float = TARGET_COURANT) -> float:
        """Largest ``t_end / n`` whose maximum Courant number is at most ``target``."""
        co1 = self.max_courant(1.0)
        n = max(1, math.ceil(self.t_end * co1 / target * (1 - 1e-12)))
        return self.t_end / n


def schaer_case(dx: float = 1000.0, h0: float = SCHAER_H0, dz: float | None = None, mesh_kind: str = "btf",
                t_end: float = T_END_PLANAR) -> CaseSetup:
    spec = DomainSpec(dx=dx, dz=dz if dz is not None else dx / 2)
    mesh = generate_planar(mesh_kind, spec, TerrainProfile(h0=h0))
    flux = flux_from_vertex_values(mesh, schaer_streamfunction(mesh.points[:, 1]))
    xc, zc = mesh.cell_centres[:, 0], mesh.cell_centres[:, 1]
    phi0 = cosine_squared_tracer(xc, zc, -50_000.0, 12_000.0, 25_000.0, 3_000.0)
    shift = U0 * t_end
    exact = cosine_squared_tracer(xc, zc, -50_000.0 + shift, 12_000.0, 25_000.0, 3_000.0)
    return CaseSetup("schaer", mesh, flux, phi0, exact, t_end, dx, {"meshKind": mesh_kind, "h0": h0})


def _piecewise_linear_terrain(spec: DomainSpec, profile: TerrainProfile):
    xe = spec.x_edges()
    he = terrain_height(xe, profile)
    return lambda x: np.interp(x, xe, he)


def mountain_case(mesh_kind: str = "btf", h0: float = 5000.0, dx: float = 1000.0, dz: float = 500.0,
                  t_end: float = T_END_PLANAR, inlet_value: float = 0.0) -> CaseSetup:
    if not h0 < MOUNTAIN_H1:
        raise ValueError(f"mountain height must be below {MOUNTAIN_H1} m")
    spec = DomainSpec(dx=dx, dz=dz)
    profile = TerrainProfile(h0=h0)
    mesh = generate_planar(mesh_kind, spec, profile)
    if inlet_value != 0.0:
        patches = tuple(dataclasses.replace(p, value=inlet_value) if p.kind == FIXED_VALUE else p
                        for p in mesh.patches)
        mesh = dataclasses.replace(mesh, patches=patches)
    terrain = _piecewise_linear_terrain(spec, profile)
    psi_v = mountain_streamfunction(mesh.points[:, 0], mesh.points[:, 1], terrain)
    ground = mesh.patch("ground")
    gverts = np.unique(np.array([mesh.faces[f] for f in ground.faces]).ravel()) if ground.size else []
    psi_v[gverts] = 0.0
    flux = flux_from_vertex_values(mesh, psi_v)
    xc, zc = mesh.cell_centres[:, 0], mesh.cell_centres[:, 1]
    phi0 = cosine_squared_tracer(xc, zc, -50_000.0, 0.0, 25_000.0, 10_000.0)
    x_end = trajectory_arrival(h0, t_end)
    exact = cosine_squared_tracer(xc, zc, x_end, 0.0, 25_000.0, 10_000.0)
    return CaseSetup("mountain", mesh, flux, phi0, exact, t_end, dx,
                     {"meshKind": mesh_kind, "h0": h0, "arrival": x_end})


def deformational_case(mesh_kind: str = "hexicos", level: int = 3, panel_n: int = 16,
                       tracer: str = "gaussianHills", t_end: float = DEFORMATION_PERIOD) -> CaseSetup:
    from .meshgen import equatorial_spacing

    if mesh_kind == "hexicos":
        mesh = gen_hex_icosahedral(level)
    elif mesh_kind == "cubedsphere":
        mesh = gen_cubed_sphere(panel_n)
    else:
        raise ValueError(f"unknown sphere mesh kind {mesh_kind!r}")
    shape = {"gaussianHills": gaussian_hills, "cosineBells": cosine_bells}[tracer]
    terms = shell_edge_terms(mesh)
    radius = mesh.shell.radius

    def flux(t):
        return flux_from_streamfunction(mesh, lambda x, tt: deformational_streamfunction(x, tt, radius), t, terms)

    phi0 = shape(mesh.cell_centres)
    return CaseSetup("deformational", mesh, flux, phi0, phi0.copy(), t_end, equatorial_spacing(mesh),
                     {"meshKind": mesh_kind, "tracer": tracer})


# -------------------------------------------------------------------- config


CONFIG_KEYS = {
    "case": str, "meshKind": str, "h0": float, "dx": float, "dz": float, "level": int, "panelN": int,
    "scheme": str, "dt": float, "tEnd": float, "outputEvery": int, "tracer": str,
}


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    cfg = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ValueError(f"line {n}: unknown key {key!r}")
        try:
            cfg[key] = CONFIG_KEYS[key](value)
        except ValueError:
            raise ValueError(f"line {n}: bad value {value!r} for {key}") from None
    if "case" not in cfg:
        raise ValueError("config must set 'case'")
    return cfg


def load_config(path) -> dict:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def case_from_config(cfg: dict) -> CaseSetup:
    name = cfg["case"]
    t_end = cfg.get("tEnd")
    if name == "schaer":
        kw = {"dx": cfg.get("dx", 1000.0), "h0": cfg.get("h0", SCHAER_H0), "dz": cfg.get("dz"),
              "mesh_kind": cfg.get("meshKind", "btf")}
        return schaer_case(**kw, t_end=t_end or T_END_PLANAR)
    if name == "mountain":
        return mountain_case(cfg.get("meshKind", "btf"), cfg.get("h0", 5000.0), cfg.get("dx", 1000.0),
                             cfg.get("dz", 500.0), t_end or T_END_PLANAR)
    if name == "deformational":
        return deformational_case(cfg.get("meshKind", "hexicos"), cfg.get("level", 3), cfg.get("panelN", 16),
                                  cfg.get("tracer", "gaussianHills"), t_end or DEFORMATION_PERIOD)
    raise ValueError(f"unknown case {name!r}")
