"""
Exception hierarchy for periscope.
Every error carries a stable `code` so the CLI and the HTTP service can
report failures in a machine-readable form.
"""

from __future__ import annotations


class PeriscopeError(Exception):
    """Base class for all expected failures."""

    code = "periscope_error"


class ShapeError(PeriscopeError):
    code = "shape_error"


class ConfigError(PeriscopeError):
    code = "config_error"


class GradientError(PeriscopeError):
    """Backward called on a non-scalar, or a non-finite gradient reached the optimizer."""

    code = "gradient_error"


class DatasetError(PeriscopeError):
    code = "dataset_error"


class CheckpointError(PeriscopeError):
    code = "checkpoint_error"


class RenderError(PeriscopeError):
    code = "render_error"


class CalibrationError(PeriscopeError):
    code = "calibration_error"


class GateError(PeriscopeError):
    code = "gate_error"


class AggregationError(PeriscopeError):
    code = "aggregation_error"


class MeasurementError(PeriscopeError):
    code = "measurement_error"


class RefractionError(PeriscopeError):
    code = "refraction_error"
