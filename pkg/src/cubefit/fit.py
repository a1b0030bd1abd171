"""Stabilised least-squares polynomial fits on upwind-biased stencils.

For each stencil a sequence of candidate polynomials (dense subsets of a
bicubic-in-x, quadratic-in-y monomial set) is tried.  The weighted
least-squares fit ``M B a = M phi`` gives the face value ``a_1 = w . phi`` with
``w`` the first row of ``pinv(M B)`` times the multipliers.  A candidate is
accepted once ``w`` satisfies three von Neumann derived bounds; the downwind
multiplier is halved between attempts.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np

from .mesh import Mesh
from .stencil import Stencil

MONOMIALS_2D: tuple[tuple[int, int], ...] = (
    (0, 0), (1, 0), (0, 1), (2, 0), (1, 1), (0, 2), (3, 0), (2, 1), (1, 2),
)
MONOMIALS_3D: tuple[tuple[int, int, int], ...] = tuple(
    sorted(
        (e for e in product(range(4), range(3), range(3)) if sum(e) <= 3),
        key=lambda e: (sum(e), tuple(-v for v in e)),
    )
)

RANK_TOL = 1e-9          # absolute minimum singular value of B
PINV_RCOND = 1e-9        # relative SVD cutoff in the pseudo-inverse
UPWIND_MULTIPLIER = 1024.0
DOWNWIND_MULTIPLIER = 1024.0
SIGMA_TIE_DIGITS = 12    # significant digits compared when ordering by sigma_min


class RankDeficient(np.linalg.LinAlgError):
    pass


@dataclass
class FitWeights:
    weights: np.ndarray
    terms: tuple = ()
    m_d: float = 0.0
    fallback: bool = False
    trace: list = field(default_factory=list)


def is_dense(subset) -> bool:
    s = set(subset)
    for e in s:
        for axis in range(len(e)):
            if e[axis] > 0:
                lower = e[:axis] + (e[axis] - 1,) + e[axis + 1:]
                if lower not in s:
                    return False
    return True


def dense_subsets(dim: int = 2) -> list[tuple]:
    """All dense monomial subsets with more than one term."""
    monos = {2: MONOMIALS_2D, 3: MONOMIALS_3D}[dim]
    out = []
    chosen: list = []

    def visit(i):
        if i == len(monos):
            if len(chosen) > 1:
                out.append(tuple(chosen))
            return
        visit(i + 1)
        e = monos[i]
        # monos is graded, so every lower neighbour has already been decided
        if all(e[a] == 0 or (e[:a] + (e[a] - 1,) + e[a + 1:]) in chosen for a in range(dim)):
            chosen.append(e)
            visit(i + 1)
            chosen.pop()

    visit(0)
    out.sort(key=lambda s: (-len(s), s))
    return out


CANDIDATES_2D = dense_subsets(2)
_COLUMNS = [np.array([MONOMIALS_2D.index(e) for e in s]) for s in CANDIDATES_2D]
_NTERMS = np.array([len(s) for s in CANDIDATES_2D])


def monomial_matrix(xy: np.ndarray) -> np.ndarray:
    """All nine monomials at each point; broadcasts over leading axes."""
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([x ** i * y ** j for i, j in MONOMIALS_2D], axis=-1)


def stencil_matrix(xy, terms) -> np.ndarray:
    xy = np.asarray(xy, dtype=float)
    x, y = xy[..., 0], xy[..., 1]
    return np.stack([x ** i * y ** j for i, j in terms], axis=-1)


def local_coordinates(stencil: Stencil, mesh: Mesh) -> np.ndarray:
    """Stencil positions in metres in the face frame: x along the upwind-to-downwind normal."""
    cf = mesh.face_centres[stencil.face]
    s = mesh.face_areas[stencil.face]
    if mesh.owner[stencil.face] != stencil.upwind:
        s = -s
    p = stencil.positions
    if mesh.shell is None:
        xh = s / np.linalg.norm(s)
        yh = np.array([-xh[1], xh[0]])
        d = p - cf
    else:
        r = cf / np.linalg.norm(cf)
        if np.any(p @ r <= 0.0):
            raise ValueError(f"stencil of face {stencil.face} reaches beyond the tangent-plane hemisphere")
        xh = s - (s @ r) * r
        xh /= np.linalg.norm(xh)
        yh = np.cross(r, xh)
        d = p - cf
        d = d - np.outer(d @ r, r)
    return np.column_stack([d @ xh, d @ yh])


def scaled_coordinates(stencil: Stencil, mesh: Mesh) -> np.ndarray:
    xy = local_coordinates(stencil, mesh)
    return xy / np.linalg.norm(xy[1] - xy[0])


def pinv_first_row(b: np.ndarray, m: np.ndarray, strict: bool = True) -> np.ndarray:
    """Weights ``w = first row of pinv(diag(m) B) * m``; broadcasts over leading axes.

    Rank-deficient systems raise, or yield NaN rows when ``strict`` is false.
    """
    mb = b * m[..., :, None]
    u, s, vt = np.linalg.svd(mb, full_matrices=False)
    keep = s > PINV_RCOND * s[..., :1]
    deficient = ~np.all(keep, axis=-1)
    if strict and np.any(deficient):
        raise RankDeficient("weighted stencil matrix is rank deficient")
    row = np.einsum("...k,...ik->...i", vt[..., :, 0] / s, u) * m
    row[deficient] = np.nan
    return row


def check_stability_conditions(w) -> tuple[bool, bool, bool]:
    w = np.asarray(w)
    wu, wd = w[0], w[1]
    wp = np.max(np.abs(w[2:])) if len(w) > 2 else 0.0
    return bool(0.5 <= wu <= 1.0), bool(0.0 <= wd <= 0.5), bool(wu - wd >= wp)


def _conditions_batch(w):
    wu, wd = w[:, 0], w[:, 1]
    wp = np.max(np.abs(w[:, 2:]), axis=1) if w.shape[1] > 2 else np.zeros(len(w))
    return (wu >= 0.5) & (wu <= 1.0) & (wd >= 0.0) & (wd <= 0.5) & (wu - wd >= wp)


def _sigma_key(sig):
    """Round to SIGMA_TIE_DIGITS significant digits so near-equal values tie."""
    out = np.zeros_like(sig)
    pos = sig > 0
    e = np.floor(np.log10(sig[pos]))
    out[pos] = np.round(sig[pos] / 10.0 ** e, SIGMA_TIE_DIGITS - 1) * 10.0 ** e
    return out


def candidate_order(xy: np.ndarray, candidates=None):
    """Ranked valid candidates per stencil for a batch ``xy`` of shape (n, P, 2).

    ``candidates`` restricts the ranking to a subset of ``CANDIDATES_2D``
    indices (default all).  Returns ``(order, n_valid, sigma)``:
    ``order[i, :n_valid[i]]`` indexes ``CANDIDATES_2D`` in preference order
    and ``sigma`` holds the minimum singular values of the candidates.
    """
    cands = np.arange(len(CANDIDATES_2D)) if candidates is None else np.asarray(candidates)
    n, npts = xy.shape[:2]
    full = monomial_matrix(xy)
    sigma = np.zeros((n, len(cands)))
    for k, c in enumerate(cands):
        cols = _COLUMNS[c]
        if len(cols) <= npts:
            sigma[:, k] = np.linalg.svd(full[:, :, cols], compute_uv=False)[:, -1]
    valid = sigma > RANK_TOL
    nterms = np.broadcast_to(-_NTERMS[cands], sigma.shape)
    # CANDIDATES_2D is sorted by (-len, exponents), so the index is the lexicographic rank
    lexrank = np.broadcast_to(cands, sigma.shape)
    local = np.lexsort((lexrank, -_sigma_key(sigma), nterms, ~valid), axis=-1)
    return cands[local], valid.sum(axis=1), sigma


def _multipliers(npts, m_d):
    m = np.ones(npts)
    m[0] = UPWIND_MULTIPLIER
    m[1] = m_d
    return m


def stabilise(xy, trace: bool = False) -> FitWeights:
    """Stabilisation procedure for one stencil given scaled local coordinates."""
    xy = np.asarray(xy, dtype=float)
    npts = len(xy)
    order, n_valid, sigma = candidate_order(xy[None])
    log = []
    for c in order[0, :n_valid[0]]:
        terms = CANDIDATES_2D[c]
        b = stencil_matrix(xy, terms)
        m_d = DOWNWIND_MULTIPLIER
        while m_d >= 1.0:
            w = pinv_first_row(b, _multipliers(npts, m_d), strict=False)
            cond = check_stability_conditions(w)
            if trace:
                log.append({"terms": terms, "m_d": m_d, "weights": w.copy(), "conditions": cond,
                            "sigma_min": float(sigma[0, c])})
            if all(cond):
                return FitWeights(w, terms, m_d, False, log)
            m_d /= 2.0
    w = np.zeros(npts)
    w[0] = 1.0
    return FitWeights(w, (), 0.0, True, log)


def stabilise_batch(xy: np.ndarray):
    """Vectorised stabilisation of equally sized stencils, ``xy`` of shape (n, P, 2).

    Candidates are ranked one term count at a time: a stencil only pays for
    the singular values of smaller polynomials once all larger ones failed.
    Returns ``(weights, candidate, m_d, fallback)``; ``candidate`` is -1 for
    fallback.
    """
    n, npts = xy.shape[:2]
    full = monomial_matrix(xy)
    weights = np.zeros((n, npts))
    chosen = np.full(n, -1)
    m_d = np.full(n, DOWNWIND_MULTIPLIER)
    pending = np.arange(n)
    for level in sorted(set(_NTERMS.tolist()), reverse=True):
        if pending.size == 0:
            break
        cands = np.nonzero(_NTERMS == level)[0]
        order, n_valid, _ = candidate_order(xy[pending], cands)
        rank = np.zeros(len(pending), dtype=np.int64)
        m_d[pending] = DOWNWIND_MULTIPLIER
        active = rank < n_valid
        solved = np.zeros(len(pending), dtype=bool)
        while active.any():
            loc = np.nonzero(active)[0]
            cand = order[loc, rank[loc]]
            for c in np.unique(cand):
                sl = loc[cand == c]
                sel = pending[sl]
                b = full[sel][:, :, _COLUMNS[c]]
                m = np.ones((len(sel), npts))
                m[:, 0] = UPWIND_MULTIPLIER
                m[:, 1] = m_d[sel]
                w = pinv_first_row(b, m, strict=False)
                ok = _conditions_batch(w)
                weights[sel[ok]] = w[ok]
                chosen[sel[ok]] = c
                solved[sl[ok]] = True
                active[sl[ok]] = False
                bad_l, bad = sl[~ok], sel[~ok]
                m_d[bad] /= 2.0
                step = m_d[bad] < 1.0
                rank[bad_l[step]] += 1
                m_d[bad[step]] = DOWNWIND_MULTIPLIER
                active[bad_l[step]] = rank[bad_l[step]] < n_valid[bad_l[step]]
        pending = pending[~solved]
    fallback = chosen < 0
    weights[fallback] = 0.0
    weights[fallback, 0] = 1.0
    m_d[fallback] = 0.0
    return weights, chosen, m_d, fallback


def amplification_modulus(weights, c, kdx):
    """Semi-discrete 1-D von Neumann modulus for face weights (..., uu, u, d).

    The last two entries are the upwind and downwind cell weights and the
    preceding ones lie successively further upwind.
    """
    a = np.asarray(weights, dtype=float)
    offsets = np.arange(len(a)) - (len(a) - 2)
    kdx = np.asarray(kdx, dtype=float)
    phase = np.exp(1j * np.multiply.outer(kdx, offsets))
    symbol = (phase @ a) * (1.0 - np.exp(-1j * kdx))
    return np.exp(-np.asarray(c) * symbol.real)
