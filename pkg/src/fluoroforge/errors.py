"""Exception types shared across the package."""


class FluoroforgeError(Exception):
    """Base class for all package-specific errors."""


class VolumeFormatError(FluoroforgeError):
    """Volume header/raw file is missing, malformed, or inconsistent."""


class MeshFormatError(FluoroforgeError):
    """Mesh file is malformed or empty."""


class WatertightnessError(MeshFormatError):
    """Mesh has boundary edges or edges shared by more than two triangles."""


class CatalogError(FluoroforgeError):
    """Object catalog is malformed or referenced entries are missing."""


class ProjectionError(FluoroforgeError):
    """Point cannot be projected (at or behind the source plane)."""


class GeometryError(FluoroforgeError):
    """Ray-mesh intersection produced an inconsistent crossing count."""


class ViewUnavailableError(FluoroforgeError):
    """A standard view's target group has no meshes in this anatomy."""


class ArchiveAlignmentError(FluoroforgeError):
    """Prediction and ground-truth archives do not share the same ids."""


class TrainingDiverged(FluoroforgeError):
    """Toy encoder training produced a non-finite loss."""

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
