"""Exception hierarchy shared across the package."""


class PPEError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PPEError, ValueError):
    """Invalid rotary/pipeline configuration."""


class ContractError(PPEError, ValueError):
    """Arguments violate an operation's preconditions (shapes, counts)."""


class ParameterError(PPEError, ValueError):
    """A numeric parameter is out of its admissible range."""


class DataError(PPEError):
    """Input data is malformed or inconsistent with its declared layout."""


class PipelineError(PPEError, RuntimeError):
    def __init__(self, stage: int, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage
