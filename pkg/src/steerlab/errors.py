"""Exception hierarchy shared by every subsystem.

The harness maps these onto process exit codes (see ``steerlab.harness.cli``).
"""


class SteerlabError(Exception):
    """Base class for all library errors."""


class ConfigurationError(SteerlabError, ValueError):
    """Invalid configuration (bad sizes, unknown names, indivisible groups)."""


class ShapeError(SteerlabError, ValueError):
    """Operand shapes do not agree."""


class ContractError(SteerlabError, RuntimeError):
    """A pre- or post-condition of an operation was violated."""


class NumericError(SteerlabError, FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class AcceptanceGateError(SteerlabError, RuntimeError):
    """A quality gate failed (e.g. feature-extractor accuracy below threshold)."""
