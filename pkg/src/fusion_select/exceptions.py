"""
Exception hierarchy for Fusion Select.
"""


class FusionSelectError(Exception):
    """Base class for all package errors."""


class DataError(FusionSelectError, ValueError):
    """
    Input data violates the observation schema.

    Args:
        message (str): Human readable description
        row (int, optional): Zero-based data row the problem was found in
        column (str, optional): Offending column name
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column

    def to_dict(self):
        return {"error": "data", "message": str(self), "row": self.row, "column": self.column}


class ConfigError(FusionSelectError, ValueError):
    """Invalid configuration value or unknown method name."""

    def to_dict(self):
        return {"error": "config", "message": str(self)}


class EstimationError(FusionSelectError, RuntimeError):
    """A fit or an estimator could not produce a finite result."""

    def to_dict(self):
        return {"error": "estimation", "message": str(self)}
