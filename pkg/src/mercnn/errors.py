"""Exception hierarchy shared by the library and the command line.

Each class carries the process exit code the CLI maps it to.
"""


class MercnnError(Exception):
    exit_code = 3


class UsageError(MercnnError):
    """Bad arguments or an operation requested outside its contract."""

    exit_code = 1


class DataError(MercnnError):
    """Malformed, missing or inconsistent input files."""

    exit_code = 2


class InvariantError(MercnnError):
    """An internal consistency check failed."""

    exit_code = 3
