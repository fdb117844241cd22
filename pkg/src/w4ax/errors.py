"""Exception types shared across the package."""


class W4AxError(Exception):
    """Base class for all package errors."""


class DimensionError(W4AxError, ValueError):
    """Shapes or channel counts do not line up."""


class QuantInputError(W4AxError, ValueError):
    """Input values cannot be quantized (NaN/inf)."""


class NibbleRangeError(W4AxError, ValueError):
    """A value does not fit in a 4-bit field."""


class LayoutError(W4AxError, ValueError):
    """A packed buffer has the wrong nibble order or interleave for the operation."""


class GemmConsistencyError(W4AxError, RuntimeError):
    """A reduction group is missing partial results."""


class CacheOverflowError(W4AxError, IndexError):
    """A KV cache append would exceed its configured capacity."""


class FormatError(W4AxError, ValueError):
    """A serialized file is malformed or has an unknown version."""
