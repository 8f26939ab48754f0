"""Fully-dense 3D segmentation network in numpy with hand-written backpropagation."""

from .errors import FDFCNError
from .network import Network, NetworkConfig, build, param_count, shape_audit
from .spectral import SpectralCoordinates, solve_spectral
from .volume_io import read_volume, write_volume

__all__ = ["FDFCNError", "Network", "NetworkConfig", "build", "param_count", "shape_audit",
           "SpectralCoordinates", "solve_spectral", "read_volume", "write_volume"]
__version__ = "0.1.0"
