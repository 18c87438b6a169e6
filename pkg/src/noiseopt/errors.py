"""Exception types shared across the package."""


class NoiseOptError(Exception):
    """Base class for all package errors."""


class DimensionError(NoiseOptError):
    """Shapes or sizes violate an operation's contract."""


class ArityError(NoiseOptError):
    """Too few items for a set-level operation (e.g. B < 2)."""


class ContractViolation(NoiseOptError):
    """A caller-side precondition failed (asymmetry, non-PSD, cycles...)."""


class DegenerateInputError(NoiseOptError):
    """Input is in the domain but numerically degenerate (zero norm, zero std)."""


class ConfigError(NoiseOptError):
    """Invalid run configuration; message names the offending field."""


class BridgeError(NoiseOptError):
    """Failure talking to an external bridge peer."""


class BridgeTimeout(BridgeError):
    """No response from the bridge peer within the deadline."""


class BridgeProtocolError(BridgeError):
    """Malformed frame or contract violation on the wire."""
