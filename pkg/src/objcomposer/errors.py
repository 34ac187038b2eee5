"""Exception hierarchy shared by the library and the CLI."""


class ComposerError(Exception):
    """Base class for pipeline failures."""


class ConfigError(ComposerError):
    """Invalid scene configuration or missing referenced file (CLI exit code 1)."""


class PipelineError(ComposerError):
    """A pipeline stage failed (CLI exit code 2).

    ``stage`` names the failing step, e.g. ``"masks"`` or ``"compose step 12"``.
    """

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class DegenerateHistogramError(ComposerError, ValueError):
    """Otsu thresholding was asked to split a constant map."""
