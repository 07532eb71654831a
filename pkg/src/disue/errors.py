"""Exception types shared across the simulator."""


class DisueError(Exception):
    """Base class for all simulator errors."""


class InvalidInputError(DisueError, ValueError):
    """An operation received an argument it rejects (shape, range, dtype)."""


class InvalidStateError(DisueError, RuntimeError):
    """An operation was called in a state it rejects (empty group, detached graph)."""


class ConfigError(DisueError, ValueError):
    """A configuration document or override is malformed or out of range."""


class PairingError(DisueError, ValueError):
    """Masked uploads from different rounds (or shapes) were paired."""


class DivergenceError(DisueError, RuntimeError):
    """Training produced a non-finite gradient or loss."""
