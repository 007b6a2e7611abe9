class ExportError(Exception):
    """Base class for exporter failures."""


class ManifestError(ExportError):
    """The manifest file is malformed or inconsistent."""


class EncoderError(ExportError):
    """The requested encoder is unavailable or misconfigured."""
