"""Exception hierarchy shared across the package.

The CLI maps these onto its documented exit codes: scene/file problems are
input errors (exit 3), simulation aborts are simulator errors (exit 5),
recovery divergence is exit 4.
"""

from __future__ import annotations


class ForcelensError(Exception):
    """Base class for all package-specific errors."""


class SceneError(ForcelensError):
    """Problems with scene data or scene files."""


class SceneParseError(SceneError):
    """A scene/trajectory/track file failed to parse."""


class SceneVersionError(SceneError):
    """A file declared a schema version this build does not understand."""


class InvariantViolation(SceneError):
    """A validated invariant failed; message names the offending field."""


class UnknownMaterialError(SceneError):
    """Catalog lookup miss; message lists the nearest catalog names."""


class SimulationError(ForcelensError):
    """Forward simulation aborted (CFL, degeneracies, non-finite values)."""


class CflViolationError(SimulationError):
    """A particle would cross more than one grid cell in a single substep."""


class DegenerateDeformationError(SimulationError):
    """det(D) fell at or below the configured determinant floor."""


class FieldError(ForcelensError):
    """Force-field representation misuse (missing snapshots, bad shapes)."""


class QueryError(FieldError):
    """A field query needed a time-encoder snapshot that does not exist."""


class ShapeMismatchError(FieldError):
    """Parameter vector or gradient buffer has the wrong shape."""


class DivergenceError(ForcelensError):
    """An optimization loop diverged; diagnostics carried in the message."""


class ProjectionError(ForcelensError):
    """Camera projection misuse (point behind camera, nonpositive depth)."""
