"""plastic_shell: landmark-driven surface modeling with plastic
rotation-strain fields on discrete thin shells."""

__version__ = "0.1.0"

from .mesh import TriangleMesh, MeshError, load_obj, save_obj, mid_edge_normals

__all__ = [
    "TriangleMesh",
    "MeshError",
    "load_obj",
    "save_obj",
    "mid_edge_normals",
    "__version__",
]
