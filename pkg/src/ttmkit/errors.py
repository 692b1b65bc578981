"""Exception hierarchy for ttmkit.

All library errors derive from TTMKitError so the CLI can map any of them
to a data-error exit code.
"""


class TTMKitError(Exception):
    """Base class for all ttmkit errors."""


class GeometryError(TTMKitError):
    """Invalid template/mask/block geometry (even size, non-cubic, bad radii)."""


class ShapeError(TTMKitError):
    """Array dimension mismatch between operands."""


class DegenerateTemplateError(TTMKitError):
    """Template has zero variance under the mask; it cannot be normalized."""


class DegenerateSignalError(TTMKitError):
    """Signal has zero variance; SNR-scaled noise is undefined."""


class LayoutError(TTMKitError):
    """Synthetic scene layout is infeasible (overlapping instances)."""


class RotationSetError(TTMKitError):
    """Invalid rotation-set request (empty or negative count)."""


class IntegrationCountError(TTMKitError):
    """Too few rotation samples requested for tensor template integration."""


class BlockGeometryError(GeometryError):
    """Block core region is smaller than the template."""


class NoMatchesError(TTMKitError):
    """Statistics requested over an empty match set."""


class FormatError(TTMKitError):
    """Malformed file content (bad magic, mode, truncation, parse failure)."""


class IntegrityError(TTMKitError):
    """Tensorial template container is incomplete or version-incompatible."""


class ValidationError(TTMKitError):
    """Semantic validation failure in parsed data (e.g. non-unit quaternion)."""


class ConfigError(TTMKitError):
    """Run configuration is malformed or out of range."""
