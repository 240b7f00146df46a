"""
Exception hierarchy shared by every module and mapped to CLI exit codes
"""
from __future__ import annotations


class MulmonError(Exception):
    exit_code = 1


class ConfigError(MulmonError, ValueError):
    exit_code = 2


class ShapeMismatchError(MulmonError, ValueError):
    exit_code = 2


class DataError(MulmonError):
    exit_code = 3


class GenerationError(DataError):
    pass


class DatasetFormatError(DataError):
    def __init__(self, message: str, scene_id: str | None = None) -> None:
        self.scene_id = scene_id
        if scene_id is not None:
            message = f"scene {scene_id}: {message}"
        super().__init__(message)


class CheckpointError(DataError):
    pass


class NumericError(MulmonError):
    exit_code = 4

    def __init__(
        self,
        message: str,
        *,
        scene_id: str | None = None,
        view_index: int | None = None,
        iteration: int | None = None,
    ) -> None:
        self.reason = message
        self.scene_id = scene_id
        self.view_index = view_index
        self.iteration = iteration
        where = [
            f"{name}={value}"
            for name, value in (("scene", scene_id), ("view", view_index), ("iteration", iteration))
            if value is not None
        ]
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)


class MissingGradientError(MulmonError, RuntimeError):
    pass
