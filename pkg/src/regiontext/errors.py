"""Shared exception types.

Exit-code mapping used by the CLI: ContractError and its subclasses are
"caller broke the contract" (exit 1), IntegrityError covers file corruption
and hash mismatches (exit 2).
"""


class ContractError(ValueError):
    """A precondition or shape rule was violated by the caller."""


class ConfigError(ContractError):
    """A configuration value is inconsistent or out of range."""


class NumericError(ContractError):
    """A numeric-domain failure: non-finite values where finite ones are required."""


class IntegrityError(RuntimeError):
    """A file failed an integrity check (corrupt, truncated, or hash mismatch)."""
