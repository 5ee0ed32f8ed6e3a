"""Exception hierarchy shared by the mesh, residual, training and solver layers."""


class GCFDMError(Exception):
    """Base class for all package errors"""


class MeshError(GCFDMError, ValueError):
    """Invalid or inconsistent mesh data"""


class MeshParseError(MeshError):
    pass


class InterfaceMismatchError(MeshError):
    pass


class CoverageError(MeshError):
    pass


class GeometryError(MeshError):
    """Generator inputs that cannot produce a valid mesh"""


class DegenerateMeshError(MeshError):
    """A node with non-positive inverse Jacobian"""


class ConfigurationError(GCFDMError, ValueError):
    pass


class AutodiffError(GCFDMError, RuntimeError):
    pass


class ShapeError(AutodiffError, ValueError):
    pass


class NumericalError(GCFDMError, RuntimeError):
    pass


class NonFiniteError(NumericalError):
    pass


class DivergenceError(NumericalError):
    pass


class OpenLoopError(GCFDMError, ValueError):
    pass


class StorageError(GCFDMError, OSError):
    pass
