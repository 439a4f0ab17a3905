"""Exception hierarchy shared across the toolkit.

The command line maps these onto exit codes: usage errors exit 1,
data/contract errors exit 2, numeric failures exit 3.
"""


class ConceptDistilError(Exception):
    exit_code = 2


class UsageError(ConceptDistilError):
    """Bad flags, malformed config values, unknown commands."""

    exit_code = 1


class DataError(ConceptDistilError):
    """Contract violations in datasets, files or shapes."""

    exit_code = 2


class NumericError(ConceptDistilError):
    """Non-finite values or diverging computations."""

    exit_code = 3
