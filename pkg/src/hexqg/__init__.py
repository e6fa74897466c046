"""Forward and inverse problems for Schrodinger operators on hexagonal quantum graphs."""

from .errors import (CoverageError, HexqgError, InvalidArgument, NumericFailure,
                     ValidationError)
from .hexlattice import HexDomain
from .inverse_engine import InverseConfig, LiveOracle, DatasetOracle, reconstruct
from .sturm1d import Potential, borg_reconstruct, dirichlet_spectrum, transfer
from .vertex_system import dn_map, convert_dn

__version__ = "0.1.0"

__all__ = [
    "CoverageError", "HexqgError", "InvalidArgument", "NumericFailure", "ValidationError",
    "HexDomain", "InverseConfig", "LiveOracle", "DatasetOracle", "reconstruct",
    "Potential", "borg_reconstruct", "dirichlet_spectrum", "transfer", "dn_map", "convert_dn",
]
