"""Exception types shared across the pipeline.

Everything a caller can fix by changing inputs is a ``ValueError`` so generic
handlers keep working; the CLI maps these to exit code 1. A missing upstream
stage is a ``PrerequisiteError`` (exit code 2).
"""


class ConfigError(ValueError):
    """Invalid experiment/generator configuration."""


class ShapeError(ValueError):
    """Tensor or head dimensions do not line up."""


class MissingModalityError(ValueError):
    """An operation needed a modality that is absent for this sample."""


class AbsentOutputError(KeyError):
    """A predictor output was requested that the configured model never produces."""

    def __str__(self) -> str:
        # KeyError repr-quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class IngestionError(ValueError):
    """Malformed embedding file. ``line`` is 1-based; None for whole-file problems."""

    def __init__(self, message: str, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class PrerequisiteError(RuntimeError):
    """A stage ran before the stage whose artifacts it consumes."""

    def __init__(self, stage: str, missing: str, detail: str = ""):
        self.stage = stage
        self.missing = missing
        msg = f"stage '{stage}' needs '{missing}' to run first"
        if detail:
            msg = f"{msg} ({detail})"
        super().__init__(msg)
