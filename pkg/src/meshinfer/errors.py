"""Exception types raised across the package."""


class MeshInferError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(MeshInferError, ValueError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(MeshInferError, ValueError):
    """A model/deployment configuration violates a structural constraint."""


class DegenerateInputError(MeshInferError, ValueError):
    """An input is structurally valid but degenerate (e.g. empty column set)."""


class ProtocolError(MeshInferError, RuntimeError):
    """The all-to-all round contract was violated (e.g. overlapping ownership)."""


class AssemblyError(MeshInferError, ValueError):
    """Column blocks cannot be assembled into a full matrix (gap or overlap)."""


class PruneError(MeshInferError, ValueError):
    """A pruning request is invalid (ratio out of range, nestedness violated)."""


class BundleError(MeshInferError):
    """Base class for model-bundle serialization failures."""


class BundleMagicError(BundleError):
    """Stream does not start with the bundle magic."""


class BundleVersionError(BundleError):
    """Bundle format version is unsupported."""


class BundleTruncatedError(BundleError):
    """Stream ended before the declared content was read."""


class BundleFormatError(BundleError):
    """Bundle content is inconsistent (dimensions, mask values, trailing data)."""
