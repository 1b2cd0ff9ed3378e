"""Exception hierarchy shared across the package."""


class CMLError(Exception):
    """Base class for all package errors."""


class ContractViolation(CMLError):
    """A caller broke an operation's precondition."""


class NumericFault(CMLError):
    """A NaN or infinity appeared in a forward value or gradient."""


class ConfigError(CMLError, ValueError):
    """Invalid configuration; the message lists the violated constraints."""


class InputError(CMLError, ValueError):
    """Invalid argument values (bad ids, coordinates, duplicates, ...)."""


class IncompatibleSnapshot(CMLError):
    """Snapshot names/shapes do not match the store."""


class IncompatibleUpdates(CMLError):
    """Sparse updates taken against different base fingerprints."""


class StaleBaseError(CMLError):
    """Sparse update applied to a store that no longer matches its base."""


class MissingAdapter(CMLError, KeyError):
    """Requested adapter stack does not exist."""


class DependencyError(CMLError):
    """A strategy step requires an artifact that has not been produced."""


class CoverageError(CMLError):
    """Language sets do not line up (data, matrices, records)."""


class UndefinedBase(CMLError, ZeroDivisionError):
    """Percent change against a non-positive base score."""


class EndOfEpoch(CMLError):
    """All per-language iterators are exhausted."""
