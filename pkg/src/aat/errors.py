"""Exception types shared across the package."""


class AATError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(AATError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(AATError, ValueError):
    """A model, strategy or experiment configuration is inconsistent."""


class ContractError(AATError, ValueError):
    """A call violated an operation precondition."""


class FormatError(AATError, ValueError):
    """A tensor container file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
