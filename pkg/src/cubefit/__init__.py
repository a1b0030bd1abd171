"""Finite-volume tracer transport with stabilised cubic least-squares face reconstruction."""
from .cases import error_norms, minimal_resolution, trajectory_arrival
from .fit import dense_subsets, stabilise
from .mesh import Mesh, Patch, read_mesh, write_mesh
from .transport import BlowUpError, compute_weight_table, run_simulation

__all__ = [
    "BlowUpError", "Mesh", "Patch", "compute_weight_table", "dense_subsets", "error_norms",
    "minimal_resolution", "read_mesh", "run_simulation", "stabilise", "trajectory_arrival", "write_mesh",
]
__version__ = "0.1.0"
