"""Exception types shared across the package."""


class MeshStructureError(ValueError):
    """Raised when mesh connectivity is malformed (bad ids, edge over-sharing)."""


class MeshInvalidError(ValueError):
    """Raised when an operation requires a non-inverted mesh and gets one."""


class MeshFileError(ValueError):
    """Raised on malformed mesh files or format violations."""


class PointLocationError(ValueError):
    """Raised when a query point cannot be located in a search mesh."""
