"""Exception types shared across the package (and mapped to CLI exit codes)."""


class CorpusError(Exception):
    """Raw-data / bundle problem (missing file, malformed record, empty result)."""


class CheckpointError(Exception):
    """Checkpoint integrity problem (manifest mismatch, truncated tensor blob)."""


class NumericalError(Exception):
    """Non-finite value where the math requires a finite one."""
