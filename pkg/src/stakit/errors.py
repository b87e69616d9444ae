"""Exception and warning types shared across the package."""


class StaError(Exception):
    """Base class for all package errors."""


class InvalidBox(StaError):
    """Bounding box has degenerate or out-of-range coordinates."""


class NegativeTtc(StaError):
    """Time-to-contact must be strictly positive."""


class ClipOrder(StaError):
    """Clip span or frame time violates temporal ordering."""


class InvalidConfig(StaError):
    """A configuration value is out of its valid range."""


class ShapeMismatch(StaError):
    """Tensor or grid shapes do not satisfy an operation's contract."""


class ScaleMismatch(StaError):
    """Feature pyramids passed to a fusion op have different scales."""


class MTooLarge(StaError):
    """Requested more object queries than encoder tokens available."""


class EmptyInput(StaError):
    """Operation requires at least one input element."""


class KTooLarge(StaError):
    """Requested more neighbors than zones in the database."""


class AllZero(StaError):
    """A product of distributions vanished everywhere."""


class AllZeroMap(StaError):
    """Hotspot map has no positive entry to normalize."""


class VersionMismatch(StaError):
    """Persisted file was written with an unsupported format version."""


class CorruptFile(StaError):
    """Persisted file failed magic, size, or integrity checks."""


class SchemaError(StaError):
    """Structured-text file does not carry the expected schema tag."""


class TaxonomyMismatch(StaError):
    """Predictions and ground truth use different class taxonomies."""


class DivergenceDetected(StaError):
    """Training loss became non-finite."""


class MissingTextDescriptors(UserWarning):
    """Zone database has no text descriptors; retrieval fell back to visual-only."""
