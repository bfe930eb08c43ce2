"""Exception types raised by the calibration toolkit."""


class LidarReflectError(Exception):
    """Base class for all toolkit errors."""


class FileUnreadable(LidarReflectError):
    """Input file is missing or cannot be opened for reading."""


class FileUnwritable(LidarReflectError):
    """Output file cannot be created or written."""


class MalformedScan(LidarReflectError):
    """Scan file size is not a whole number of 16-byte point records."""


class MalformedLabels(LidarReflectError):
    """Label file size is not a whole number of 4-byte records."""


class MalformedTable(LidarReflectError):
    """A tabular text file (eta table, class stats, cross map) failed to parse."""


class LengthMismatch(LidarReflectError):
    """Per-point arrays that must be parallel have different lengths."""


class MissingField(LidarReflectError):
    """A required configuration field is absent."""


class InvalidValue(LidarReflectError):
    """A configuration or constructor value violates a type invariant."""


class MissingChannel(LidarReflectError):
    """A channel layout demands a channel the range image does not carry."""


class DegeneratePoint(LidarReflectError):
    """Geometric operation on a point coincident with the sensor origin."""


class NoSamples(LidarReflectError):
    """Statistics requested over an empty sample set."""


class InsufficientData(LidarReflectError):
    """Not enough samples to populate any estimation bin."""


class FitDiverged(LidarReflectError):
    """Parametric curve fit failed to converge to a finite minimum."""


class NonPositiveRange(LidarReflectError):
    """Range argument must be strictly positive."""


class EmptyScene(LidarReflectError):
    """Synthetic scene generation produced no ray hits."""


class UnknownClass(LidarReflectError):
    """A label has no entry in the class statistics."""
