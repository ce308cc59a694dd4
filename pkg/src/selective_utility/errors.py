"""Exception hierarchy shared by every module.

The CLI prints ``error: <ClassName>: <message>`` for any of these, so the
class name doubles as a machine-parsable error code.
"""


class SelutilError(Exception):
    pass


class ConfigError(SelutilError, ValueError):
    """Schema or validation failure in a run configuration."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class DataError(SelutilError):
    pass


class ContractError(SelutilError, ValueError):
    """A caller violated a documented precondition (shape, label range...)."""


class CheckpointError(SelutilError):
    pass


class NumericError(SelutilError, FloatingPointError):
    def __init__(self, layer: str, message: str = "non-finite activations"):
        self.layer = layer
        super().__init__(f"{message} after layer '{layer}'")


class SchedulingError(SelutilError):
    """Mask recomputation requested at an epoch the schedule does not allow."""


class TrainingAborted(SelutilError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class ResumeError(SelutilError):
    pass


class RunDirectoryError(SelutilError):
    pass
