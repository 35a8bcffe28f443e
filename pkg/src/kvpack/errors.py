"""Exception types shared across the package."""


class KvpackError(Exception):
    """Base class for all package errors."""


class ConfigError(KvpackError, ValueError):
    """Invalid quantization or pipeline configuration."""


class TensorFormatError(KvpackError, ValueError):
    """Malformed KVTN tensor file or invalid tensor contents."""


class CodebookError(KvpackError, ValueError):
    """Histogram or code-length table cannot produce a valid codebook."""


class CodecError(KvpackError, ValueError):
    """Encode/decode failure: corrupt stream, overflow, or codebook misuse."""


class ArenaFullError(CodecError):
    """Append rejected because the arena capacity limit was reached."""


class ContainerFormatError(KvpackError, ValueError):
    """Malformed KVCZ container file."""
