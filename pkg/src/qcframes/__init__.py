"""Numerical toolkit for quasiconformal differential frames on grids."""

from .grid import Annulus, Ball, Grid, WholeGrid, region_volume, region_weights
from .forms import (
    FormField,
    FormTuple,
    Frame,
    distortion,
    exterior_derivative,
    frame_derivative,
    hodge_star,
    hs_norm,
    is_K_qc,
    jacobian,
    lp_average,
    lp_norm,
    multi_indices,
    operator_norm,
    wedge,
)

__version__ = "0.1.0"
