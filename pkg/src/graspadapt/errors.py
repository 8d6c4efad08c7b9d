"""Exception types raised across the package."""


class GraspAdaptError(Exception):
    """Base class for all package errors."""


class EmptyObservation(GraspAdaptError):
    """Every object point was removed by occlusion or dropout."""


class WorkspaceLimit(GraspAdaptError):
    """A commanded EEF pose leaves the workspace bounds."""


class DivergedFromWorkspace(WorkspaceLimit):
    """Visual servoing drove the EEF out of the workspace."""


class CollectionFailed(GraspAdaptError):
    """Data collection could not gather enough non-empty observations."""


class EmptySubset(GraspAdaptError):
    pass


class EmptyDataset(GraspAdaptError):
    pass


class FormatError(GraspAdaptError):
    """A serialized file has the wrong version, a bad checksum or is malformed."""


class DegenerateConfiguration(GraspAdaptError):
    """Correspondences are collinear or coincident; rotation is not determined."""


class EmptyCloud(GraspAdaptError):
    pass


class RefinementDiverged(GraspAdaptError):
    """ICP refinement ended with a residual above the acceptance threshold."""


class ProtocolViolation(GraspAdaptError):
    """Ground truth was read by a method that must not see it."""
