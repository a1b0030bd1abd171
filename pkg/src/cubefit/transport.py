"""Face reconstruction, Gauss divergence and Heun time stepping."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Union

import numpy as np

from .fit import CANDIDATES_2D, scaled_coordinates, stabilise_batch
from .mesh import FIXED_VALUE, NO_NORMAL_FLOW, Mesh, courant_field
from .stencil import StencilBuilder

log = logging.getLogger(__name__)

CUBIC_FIT = "cubicFit"
LINEAR_UPWIND = "linearUpwind"
SCHEMES = (CUBIC_FIT, LINEAR_UPWIND)

FluxLike = Union[np.ndarray, Callable[[float], np.ndarray]]


class BlowUpError(RuntimeError):
    def __init__(self, message, time=None, cell=None):
        super().__init__(message)
        self.time = time
        self.cell = cell


@dataclass
class WeightTable:
    """Padded stencil indices and weights for both flow directions of every interior face.

    Direction 0 has the owner upwind (flux >= 0), direction 1 the neighbour.
    Indices refer to the extended vector ``[phi, boundary values]``.
    """

    idx: np.ndarray        # (n_internal, 2, P) int
    w: np.ndarray          # (n_internal, 2, P) float, zero padded
    size: np.ndarray       # (n_internal, 2)
    candidate: np.ndarray  # (n_internal, 2) index into CANDIDATES_2D, -1 for fallback
    m_d: np.ndarray        # (n_internal, 2)

    @property
    def fallback(self) -> np.ndarray:
        return self.candidate < 0

    def terms(self, face: int, direction: int) -> tuple:
        c = self.candidate[face, direction]
        return () if c < 0 else CANDIDATES_2D[c]

    def weights(self, face: int, direction: int) -> np.ndarray:
        return self.w[face, direction, :self.size[face, direction]]

    def points(self, face: int, direction: int) -> np.ndarray:
        return self.idx[face, direction, :self.size[face, direction]]

    def save(self, path) -> None:
        np.savez(path, idx=self.idx, w=self.w, size=self.size, candidate=self.candidate, m_d=self.m_d)

    @classmethod
    def load(cls, path) -> "WeightTable":
        with np.load(path) as z:
            return cls(z["idx"], z["w"], z["size"], z["candidate"], z["m_d"])

    def dump_lines(self) -> list[str]:
        """Text dump: ``face dir nPoints w1 .. wN polyTerms m_d fallback``."""
        lines = []
        for f in range(len(self.idx)):
            for d in range(2):
                w = self.weights(f, d)
                terms = "".join(f"x{i}y{j}" if (i or j) else "1" for i, j in self.terms(f, d)) or "upwind"
                lines.append(f"{f} {d} {len(w)} " + " ".join(f"{v:.17g}" for v in w)
                             + f" {terms} {self.m_d[f, d]:g} {int(self.fallback[f, d])}")
        return lines


def compute_weight_table(mesh: Mesh) -> WeightTable:
    """Build both stencils of every interior face and run the stabilised fits."""
    builder = StencilBuilder(mesh)
    ni = mesh.n_internal
    stencils = [builder.build(f, int(c)) for f in range(ni) for c in (mesh.owner[f], mesh.neighbour[f])]
    sizes = np.array([s.size for s in stencils])
    pmax = int(sizes.max())
    idx = np.zeros((2 * ni, pmax), dtype=np.int64)
    w = np.zeros((2 * ni, pmax))
    cand = np.full(2 * ni, -1)
    m_d = np.zeros(2 * ni)
    coords = [scaled_coordinates(s, mesh) for s in stencils]
    for p in np.unique(sizes):
        sel = np.nonzero(sizes == p)[0]
        xy = np.stack([coords[i] for i in sel])
        wp, cp, mp, _ = stabilise_batch(xy)
        w[sel, :p] = wp
        cand[sel] = cp
        m_d[sel] = mp
        for i in sel:
            idx[i, :p] = stencils[i].points
    n_fb = int((cand < 0).sum())
    if n_fb:
        log.warning("%d stencils fell back to upwind", n_fb)
    return WeightTable(idx.reshape(ni, 2, pmax), w.reshape(ni, 2, pmax), sizes.reshape(ni, 2),
                       cand.reshape(ni, 2), m_d.reshape(ni, 2))


def cached_weight_table(mesh: Mesh, cache_dir=None) -> WeightTable:
    """Weight table keyed by the mesh content hash, stored under ``CUBEFIT_CACHE_DIR``."""
    cache_dir = cache_dir or os.environ.get("CUBEFIT_CACHE_DIR")
    if not cache_dir:
        return compute_weight_table(mesh)
    path = Path(cache_dir) / f"weights-{mesh.fingerprint()}.npz"
    if path.exists():
        return WeightTable.load(path)
    table = compute_weight_table(mesh)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + f".{os.getpid()}.tmp.npz")
    table.save(tmp)
    os.replace(tmp, path)
    return table


# ------------------------------------------------------------------ face values


def extended_values(mesh: Mesh, phi: np.ndarray) -> np.ndarray:
    """Cell values followed by one value per boundary face."""
    ni = mesh.n_internal
    bvals = phi[mesh.owner[ni:]]
    fixed = mesh.boundary_kind == FIXED_VALUE
    bvals = np.where(fixed, mesh.boundary_value, bvals)
    return np.concatenate([phi, bvals])


def select_stencils(table: WeightTable, flux: np.ndarray):
    """Per-face index and weight rows for the current flux direction."""
    ni = len(table.idx)
    direction = (flux[:ni] < 0.0).astype(np.int64)
    rows = np.arange(ni)
    return table.idx[rows, direction], table.w[rows, direction]


def face_values_cubic_fit(mesh: Mesh, table: WeightTable, flux: np.ndarray, phi: np.ndarray,
                          selection=None) -> np.ndarray:
    ext = extended_values(mesh, phi)
    idx, w = selection if selection is not None else select_stencils(table, flux)
    interior = np.einsum("fp,fp->f", w, ext[idx])
    return np.concatenate([interior, ext[mesh.n_cells:]])


def interpolation_weights(mesh: Mesh) -> np.ndarray:
    """Owner-side linear interpolation weights based on normal distances."""
    ni = mesh.n_internal
    s = mesh.face_areas[:ni]
    cf = mesh.face_centres[:ni]
    do = np.abs(np.einsum("fd,fd->f", s, cf - mesh.cell_centres[mesh.owner[:ni]]))
    dn = np.abs(np.einsum("fd,fd->f", s, mesh.cell_centres[mesh.neighbour[:ni]] - cf))
    return dn / (do + dn)


def gauss_gradient(mesh: Mesh, phi: np.ndarray, lam: np.ndarray | None = None) -> np.ndarray:
    """Cell gradients from linearly interpolated face values.

    Written as ``sum S_f (phi_f - phi_c) / V_c``, which equals the plain Gauss
    sum on closed cells; walls and zero-gradient faces then contribute nothing.
    """
    ni, nc = mesh.n_internal, mesh.n_cells
    lam = interpolation_weights(mesh) if lam is None else lam
    own, nei = mesh.owner, mesh.neighbour[:ni]
    phif = lam * phi[own[:ni]] + (1.0 - lam) * phi[nei]
    s = mesh.face_areas
    grad = np.zeros((nc, mesh.dim))
    bnd = extended_values(mesh, phi)[nc:] - phi[own[ni:]]
    for k in range(mesh.dim):
        grad[:, k] = (np.bincount(own[:ni], s[:ni, k] * (phif - phi[own[:ni]]), nc)
                      - np.bincount(nei, s[:ni, k] * (phif - phi[nei]), nc)
                      + np.bincount(own[ni:], s[ni:, k] * bnd, nc))
    return grad / mesh.volumes[:, None]


def face_values_linear_upwind(mesh: Mesh, flux: np.ndarray, phi: np.ndarray, lam=None) -> np.ndarray:
    ni = mesh.n_internal
    grad = gauss_gradient(mesh, phi, lam)
    up = np.where(flux[:ni] >= 0.0, mesh.owner[:ni], mesh.neighbour[:ni])
    d = mesh.face_centres[:ni] - mesh.cell_centres[up]
    interior = phi[up] + np.einsum("fd,fd->f", grad[up], d)
    return np.concatenate([interior, extended_values(mesh, phi)[mesh.n_cells:]])


def divergence_rhs(mesh: Mesh, flux: np.ndarray, phi_f: np.ndarray) -> np.ndarray:
    """``g = -(1/V) sum_f flux_f phi_f`` with owner-to-neighbour flux sign."""
    ni, nc = mesh.n_internal, mesh.n_cells
    q = flux * phi_f
    net = np.bincount(mesh.owner, q, nc) - np.bincount(mesh.neighbour[:ni], q[:ni], nc)
    return -net / mesh.volumes


def wall_masked(mesh: Mesh, flux: np.ndarray) -> np.ndarray:
    """Copy of ``flux`` with no-normal-flow boundary faces set to zero."""
    out = np.array(flux, dtype=float)
    ni = mesh.n_internal
    out[ni:][mesh.boundary_kind == NO_NORMAL_FLOW] = 0.0
    return out


# --------------------------------------------------------------- time stepping


class Transport:
    """Right-hand side evaluator for one mesh, scheme and flux field."""

    def __init__(self, mesh: Mesh, scheme: str, flux: FluxLike, table: WeightTable | None = None):
        if scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {scheme!r}; choose from {SCHEMES}")
        self.mesh = mesh
        self.scheme = scheme
        self.steady = not callable(flux)
        self._flux = flux
        if scheme == CUBIC_FIT:
            self.table = table if table is not None else cached_weight_table(mesh)
        else:
            self.table = None
            self._lam = interpolation_weights(mesh)
        if self.steady:
            self._steady_flux = wall_masked(mesh, flux)
            if self.table is not None:
                self._selection = select_stencils(self.table, self._steady_flux)

    def flux(self, t: float) -> np.ndarray:
        return self._steady_flux if self.steady else wall_masked(self.mesh, self._flux(t))

    def rhs(self, phi: np.ndarray, t: float) -> np.ndarray:
        flux = self.flux(t)
        if self.scheme == CUBIC_FIT:
            sel = self._selection if self.steady else None
            phi_f = face_values_cubic_fit(self.mesh, self.table, flux, phi, sel)
        else:
            phi_f = face_values_linear_upwind(self.mesh, flux, phi, self._lam)
        return divergence_rhs(self.mesh, flux, phi_f)

    def heun_step(self, phi: np.ndarray, t: float, dt: float) -> np.ndarray:
        return heun_step(phi, t, dt, self.rhs)


def heun_step(phi: np.ndarray, t: float, dt: float, rhs: Callable[[np.ndarray, float], np.ndarray]) -> np.ndarray:
    """Two-stage Heun: predictor at ``t``, corrector at ``t + dt``."""
    if not dt > 0:
        raise ValueError("time step must be positive")
    g0 = rhs(phi, t)
    star = phi + dt * g0
    new = phi + 0.5 * dt * (g0 + rhs(star, t + dt))
    bad = np.nonzero(~np.isfinite(new))[0]
    if bad.size:
        raise BlowUpError(f"non-finite value in cell {int(bad[0])} at t = {t + dt:g}", t + dt, int(bad[0]))
    return new


@dataclass
class RunResult:
    phi: np.ndarray
    time: float
    steps: int
    diagnostics: list
    max_courant: float


def run_simulation(mesh: Mesh, scheme: str, flux: FluxLike, phi0: np.ndarray, t_end: float, dt: float, *,
                   table: WeightTable | None = None, output_every: int | None = None,
                   growth_limit: float | None = 10.0, dumps: dict | None = None) -> RunResult:
    """Integrate to ``t_end`` with a final partial step if ``dt`` does not divide it.

    ``growth_limit`` aborts once ``max|phi|`` exceeds that multiple of the
    initial maximum.  ``dumps`` maps requested times to ``None`` and is filled
    with the field at the first step reaching each time.
    """
    if not dt > 0:
        raise ValueError("time step must be positive")
    model = Transport(mesh, scheme, flux, table)
    phi = np.array(phi0, dtype=float)
    limit = None
    if growth_limit is not None:
        limit = growth_limit * max(float(np.max(np.abs(phi))), np.finfo(float).tiny)
    vol = mesh.volumes
    n_full = int(np.floor(t_end / dt * (1 + 1e-12)))
    times = [k * dt for k in range(n_full + 1)]
    if t_end - times[-1] > 1e-9 * dt:
        times.append(t_end)
    else:
        times[-1] = t_end
    max_co = 0.0
    diags = []

    def record(t, phi, co):
        diags.append((t, float(vol @ phi), float(phi.min()), float(phi.max()), co))

    co_unit = float(courant_field(mesh, model.flux(0.0), 1.0).max()) if model.steady else None

    def courant(t, step):
        if co_unit is not None:
            return co_unit * step
        return float(courant_field(mesh, model.flux(t), step).max())

    dumps = dumps if dumps is not None else {}
    pending = sorted(k for k, v in dumps.items() if v is None)
    for n in range(len(times) - 1):
        t, step = times[n], times[n + 1] - times[n]
        while pending and pending[0] <= t + 1e-9 * dt:
            dumps[pending.pop(0)] = phi.copy()
        co = courant(t, step)
        max_co = max(max_co, co)
        if output_every and n % output_every == 0:
            record(t, phi, co)
        phi = model.heun_step(phi, t, step)
        if limit is not None and float(np.max(np.abs(phi))) > limit:
            cell = int(np.argmax(np.abs(phi)))
            raise BlowUpError(f"tracer grew beyond {growth_limit:g}x its initial maximum in cell {cell} "
                              f"at t = {times[n + 1]:g}", times[n + 1], cell)
    for k in pending:
        dumps[k] = phi.copy()
    if output_every:
        record(t_end, phi, courant(t_end, dt))
    return RunResult(phi, t_end, len(times) - 1, diags, max_co)


def find_max_stable_timestep(is_stable: Callable[[float], bool], dt0: float, *, cap: float = 1e6,
                             rel_width: float = 0.05) -> tuple[float, bool]:
    """Largest stable time step by doubling then bisection.

    Returns ``(dt_max, capped)``; ``capped`` is true if no instability was
    found below ``cap``.
    """
    lo = dt0
    while not is_stable(lo):
        lo /= 2.0
        if lo < dt0 * 1e-6:
            raise BlowUpError("no stable time step found")
    hi = lo * 2.0
    while is_stable(hi):
        lo = hi
        hi *= 2.0
        if hi > cap:
            return lo, True
    while (hi - lo) / hi > rel_width:
        mid = 0.5 * (lo + hi)
        if is_stable(mid):
            lo = mid
        else:
            hi = mid
    return lo, False
