"""Exception types shared across the package."""


class DomainError(ValueError):
    """Input violates an operation's precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ContractViolation(RuntimeError):
    """Internal state broke a contract (e.g. mutation of frozen parameters)."""


class IdxParseError(ValueError):
    """Malformed IDX file; message names the failing byte offset."""
