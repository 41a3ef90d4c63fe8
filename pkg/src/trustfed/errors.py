"""Exception types shared across the simulator."""


class ConfigurationError(ValueError):
    """A parameter is outside its allowed range or the setup is unusable."""


class RangeError(ValueError):
    """A plaintext or ciphertext value is outside its legal domain."""


class EncodingError(ValueError):
    """Incompatible fixed-point scales or a malformed encoding."""


class CapacityError(OverflowError):
    """A tracked plaintext magnitude would exceed the key's safe capacity."""


class ShapeError(ValueError):
    """Inconsistent tensor/layer dimensions."""


class FormatError(ValueError):
    """A persisted file does not match its expected format."""


class IntegrityError(RuntimeError):
    """A hash check, chain linkage or blob consistency check failed."""


class DegenerateInputError(ValueError):
    """An input is empty where content is required."""


class ConsistencyError(ValueError):
    """Cross-referenced inputs disagree (missing projection, accuracy, ...)."""
