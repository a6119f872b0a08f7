"""Exceptions that the CLI maps to exit codes (input errors exit 2, runtime errors exit 1)."""


class DataError(Exception):
    """Bad or missing input data: malformed CSV, unknown label, absent file."""


class TrainingDiverged(Exception):
    """Loss became non-finite mid-stage; a diagnostic checkpoint is written first."""
