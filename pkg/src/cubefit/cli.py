"""Command-line harness: mesh generation, runs, convergence and time-step sweeps."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import cases
from .fit import scaled_coordinates, stabilise
from .mesh import MeshError, read_mesh, write_mesh
from .meshgen import DomainSpec, TerrainProfile, equatorial_spacing, gen_cubed_sphere, gen_hex_icosahedral, \
    generate_planar
from .stencil import StencilBuilder
from .transport import SCHEMES, BlowUpError, cached_weight_table, find_max_stable_timestep, run_simulation

EXIT_OK, EXIT_USAGE, EXIT_BLOWUP, EXIT_IO = 0, 1, 2, 3

CONVERGENCE_HEADER = ["meshKind", "scheme", "dx_or_dlambda", "dt", "maxCo", "l2", "linf", "status"]
MAXDT_HEADER = ["meshKind", "dx", "dtMax", "maxCoAtDtMax"]
DIAGNOSTICS_HEADER = ["t", "mass", "min", "max", "maxCo"]
MESH_KINDS = ("uniform", "btf", "cutcell", "slanted", "hexicos", "cubedsphere")

log = logging.getLogger("cubefit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + f".{os.getpid()}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_field(path: Path, phi) -> None:
    _write_atomic(path, f"field {len(phi)}\n" + "".join(f"{float(v)!r}\n" for v in phi))


# ------------------------------------------------------------------ meshgen


def mesh_report(mesh) -> dict:
    builder = StencilBuilder(mesh)
    n_opp = [len(builder.opposing(f, int(c))) for f in range(mesh.n_internal)
             for c in (mesh.owner[f], mesh.neighbour[f])]
    vol = mesh.volumes
    report = {
        "cells": mesh.n_cells, "faces": mesh.n_faces, "vertices": len(mesh.points),
        "minVolume": float(vol.min()), "maxVolume": float(vol.max()),
        "volumeRatio": float(vol.max() / vol.min()), "maxOpposingFaces": max(n_opp, default=0),
    }
    if mesh.shell is not None:
        report["dlambda"] = equatorial_spacing(mesh)
    if "small_cells" in mesh.info:
        report["smallCells"] = len(mesh.info["small_cells"])
    return report


def build_mesh(args):
    if args.kind == "hexicos":
        return gen_hex_icosahedral(args.level)
    if args.kind == "cubedsphere":
        return gen_cubed_sphere(args.panel_n)
    dz = args.dz if args.dz is not None else args.dx / 2
    return generate_planar(args.kind, DomainSpec(dx=args.dx, dz=dz), TerrainProfile(h0=args.h0))


def cmd_meshgen(args) -> int:
    try:
        mesh = build_mesh(args)
    except (MeshError, ValueError) as exc:
        raise UsageError(str(exc)) from exc
    write_mesh(mesh, args.out)
    print(json.dumps(mesh_report(mesh), indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------- run


def _load_case(path):
    try:
        cfg = cases.load_config(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if cfg.get("scheme", "cubicFit") not in SCHEMES:
        raise UsageError(f"unknown scheme {cfg['scheme']!r}")
    return cfg


def _setup(cfg):
    try:
        return cases.case_from_config(cfg)
    except (MeshError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def run_case(setup, scheme, dt=None, **kw):
    """One run; returns a convergence-schema row plus the result (None if unstable)."""
    dt = dt or setup.timestep_for_courant()
    table = cached_weight_table(setup.mesh) if scheme == "cubicFit" else None
    kind = setup.info.get("meshKind", "")
    try:
        res = run_simulation(setup.mesh, scheme, setup.flux, setup.phi0, setup.t_end, dt, table=table, **kw)
    except BlowUpError as exc:
        log.warning("%s %s spacing %g: %s", kind, scheme, setup.spacing, exc)
        return [kind, scheme, setup.spacing, dt, setup.max_courant(dt), math.nan, math.nan, "unstable"], None
    err = cases.error_norms(res.phi, setup.phi_exact, setup.mesh.volumes)
    return [kind, scheme, setup.spacing, dt, res.max_courant, err.l2, err.linf, "ok"], res


def cmd_run(args) -> int:
    cfg = _load_case(args.config)
    setup = _setup(cfg)
    scheme = cfg.get("scheme", "cubicFit")
    out = Path(args.out)
    half = 0.5 * setup.t_end
    dumps = {0.0: None, half: None, setup.t_end: None} if args.dumps else None
    row, res = run_case(setup, scheme, cfg.get("dt"), output_every=cfg.get("outputEvery", 0) or None,
                        dumps=dumps)
    _write_atomic(out / "errors.csv", _csv_text(CONVERGENCE_HEADER, [[_fmt(v) for v in row]]))
    print(f"{row[0]} {scheme} spacing={row[2]:g} dt={row[3]:g} maxCo={row[4]:.4g} "
          f"l2={row[5]:.6g} linf={row[6]:.6g} {row[7]}")
    if res is None:
        return EXIT_BLOWUP
    if res.diagnostics:
        _write_atomic(out / "diagnostics.csv", _csv_text(DIAGNOSTICS_HEADER, [[_fmt(v) for v in r]
                                                                              for r in res.diagnostics]))
    if dumps:
        for label, t in (("initial", 0.0), ("half", half), ("final", setup.t_end)):
            write_field(out / f"field_{label}.txt", dumps[t])
        write_field(out / "field_analytic.txt", setup.phi_exact)
    return EXIT_OK


# ----------------------------------------------------------------- converge


def cmd_converge(args) -> int:
    cfg = _load_case(args.config)
    schemes = args.schemes or [cfg.get("scheme", "cubicFit")]
    if cfg["case"] == "deformational":
        key = "panelN" if cfg.get("meshKind") == "cubedsphere" else "level"
        values = args.levels
        if not values:
            raise UsageError("deformational sweeps need --levels (hexicos levels or cubed-sphere panel sizes)")
    else:
        key, values = "dx", args.spacings
        if not values:
            raise UsageError("planar sweeps need --spacings")
    if len(values) < 3:
        raise UsageError("a convergence sweep needs at least three resolutions")
    rows = []
    for v in values:
        setup = _setup({**cfg, key: v})
        for scheme in schemes:
            row, _ = run_case(setup, scheme)
            rows.append(row)
    rows.sort(key=lambda r: (r[2], r[1], r[0]))
    text = _csv_text(CONVERGENCE_HEADER, [[_fmt(v) for v in r] for r in rows])
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    status = EXIT_OK
    for scheme in schemes:
        ok = [r for r in rows if r[1] == scheme and r[7] == "ok"]
        if len(ok) < len([r for r in rows if r[1] == scheme]):
            status = EXIT_BLOWUP
        if len(ok) >= 2:
            slope = cases.loglog_slope([r[2] for r in ok], [r[5] for r in ok])
            print(f"# {scheme}: l2 slope {slope:.3f} over {len(ok)} stable runs", file=sys.stderr)
    return status


# -------------------------------------------------------------------- maxdt


def max_stable_dt(setup, scheme="cubicFit", t_end=None, rel_width=0.05):
    """Largest stable time step of a case and the maximum Courant number it implies."""
    table = cached_weight_table(setup.mesh) if scheme == "cubicFit" else None
    t_end = t_end or setup.t_end

    def stable(dt):
        try:
            run_simulation(setup.mesh, scheme, setup.flux, setup.phi0, t_end, dt, table=table)
        except BlowUpError:
            return False
        return True

    dt0 = setup.timestep_for_courant()
    dt_max, _ = find_max_stable_timestep(stable, dt0, rel_width=rel_width)
    return dt_max, setup.max_courant(dt_max)


def cmd_maxdt(args) -> int:
    cfg = _load_case(args.config)
    if cfg["case"] == "deformational":
        raise UsageError("maxdt sweeps are defined for the planar cases")
    kinds = args.mesh_kinds or [cfg.get("meshKind", "btf")]
    scheme = cfg.get("scheme", "cubicFit")
    rows = []
    for dx in args.spacings:
        for kind in kinds:
            setup = _setup({**cfg, "dx": dx, "dz": dx / 2, "meshKind": kind})
            dt_max, co = max_stable_dt(setup, scheme, args.t_end)
            rows.append([kind, dx, dt_max, co])
    rows.sort(key=lambda r: (r[1], r[0]))
    text = _csv_text(MAXDT_HEADER, [[_fmt(v) for v in r] for r in rows])
    if args.out:
        _write_atomic(Path(args.out), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------- inspect-stencil


def cmd_inspect_stencil(args) -> int:
    mesh = read_mesh(args.mesh)
    if not 0 <= args.face < mesh.n_internal:
        raise UsageError(f"face {args.face} is not an interior face (0..{mesh.n_internal - 1})")
    cu = int(mesh.owner[args.face] if args.direction == "own" else mesh.neighbour[args.face])
    st = StencilBuilder(mesh).build(args.face, cu)
    xy = scaled_coordinates(st, mesh)
    fw = stabilise(xy)
    print(f"face {st.face} upwind {st.upwind} downwind {st.downwind} points {st.size}")
    terms = " ".join(f"x^{i}y^{j}" for i, j in fw.terms) or "upwind"
    print(f"polynomial {terms} m_d {fw.m_d:g} fallback {int(fw.fallback)}")
    for p, role, pos, loc, w in zip(st.points, st.roles, st.positions, xy, fw.weights):
        kind = "cell" if p < mesh.n_cells else "bface"
        ident = p if p < mesh.n_cells else mesh.n_internal + (p - mesh.n_cells)
        print(f"{kind} {ident} {role} " + " ".join(f"{c:.6f}" for c in pos)
              + f" local {loc[0]:.6f} {loc[1]:.6f} w {w:.12f}")
    return EXIT_OK


def cmd_dump_weights(args) -> int:
    mesh = read_mesh(args.mesh)
    table = cached_weight_table(mesh)
    _write_atomic(Path(args.out), "\n".join(table.dump_lines()) + "\n")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cubefit", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("meshgen", help="generate a mesh file")
    g.add_argument("--kind", choices=MESH_KINDS, required=True)
    g.add_argument("--h0", type=float, default=0.0, help="peak mountain height (m)")
    g.add_argument("--dx", type=float, default=1000.0)
    g.add_argument("--dz", type=float, default=None, help="vertical spacing (default dx/2)")
    g.add_argument("--level", type=int, default=3, help="icosahedral refinement level")
    g.add_argument("--panel-n", type=int, default=16, help="cubed-sphere cells per panel edge")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_meshgen)

    r = sub.add_parser("run", help="run one configured case")
    r.add_argument("config")
    r.add_argument("--out", default="out")
    r.add_argument("--dumps", action="store_true", help="write fields at t = 0, T/2 and T")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("converge", help="error norms over a resolution sweep")
    c.add_argument("config")
    c.add_argument("--spacings", type=_floats, help="planar spacings dx (m)")
    c.add_argument("--levels", type=_ints, help="sphere levels or panel sizes")
    c.add_argument("--schemes", type=lambda s: s.split(","), help="comma-separated schemes")
    c.add_argument("--out")
    c.set_defaults(func=cmd_converge)

    m = sub.add_parser("maxdt", help="longest stable time step per spacing")
    m.add_argument("config")
    m.add_argument("--spacings", type=_floats, required=True)
    m.add_argument("--mesh-kinds", type=lambda s: s.split(","))
    m.add_argument("--t-end", type=float, default=None, help="override the trial integration length")
    m.add_argument("--out")
    m.set_defaults(func=cmd_maxdt)

    s = sub.add_parser("inspect-stencil", help="print one stencil with its weights")
    s.add_argument("--mesh", required=True)
    s.add_argument("--face", type=int, required=True)
    s.add_argument("--direction", choices=("own", "nei"), default="own")
    s.set_defaults(func=cmd_inspect_stencil)

    d = sub.add_parser("dump-weights", help="write the weight table of a mesh")
    d.add_argument("--mesh", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dump_weights)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"cubefit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"cubefit: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
