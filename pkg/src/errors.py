from typing import Optional


class LecomhError(Exception):
    """Base class for every error raised by the package. `exit_code` is what the CLI returns."""

    exit_code = 1


class ConfigError(LecomhError, ValueError):
    exit_code = 2

    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class ShapeError(LecomhError, ValueError):
    exit_code = 2


class StateError(LecomhError, RuntimeError):
    exit_code = 2


class ContractError(LecomhError, ValueError):
    exit_code = 2


class RangeError(LecomhError, ValueError):
    exit_code = 2


class NumericError(LecomhError, ArithmeticError):
    exit_code = 3

    def __init__(self, message: str, layer: Optional[int] = None, epoch: Optional[int] = None):
        self.layer = layer
        self.epoch = epoch
        where = []
        if layer is not None:
            where.append(f"layer {layer}")
        if epoch is not None:
            where.append(f"epoch {epoch}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DataParseError(LecomhError, ValueError):
    exit_code = 4

    def __init__(self, path, line: int, message: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{self.path}:{line}: {message}")


class OutputExistsError(LecomhError, FileExistsError):
    exit_code = 4


class StageError(LecomhError):
    """A pipeline stage failed; carries the stage name and keeps the cause's exit code."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 4 if isinstance(cause, OSError) else 1)
        super().__init__(f"stage '{stage}' failed: {cause}")
