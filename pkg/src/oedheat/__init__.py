"""A-optimal sensor placement for source inversion in a transient heat equation."""
from .config import RunConfig, load_config
from .mesh import Circle, DomainSpec, GeometryError, Mesh, Rectangle, build_mesh

__all__ = ["Circle", "DomainSpec", "GeometryError", "Mesh", "Rectangle", "RunConfig",
           "build_mesh", "load_config"]
__version__ = "0.1.0"
