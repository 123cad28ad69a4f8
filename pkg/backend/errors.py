"""
Error Types Module

This module defines the exception hierarchy shared by the backend. Library
code raises these; the action layer maps them to process exit codes.
"""

from typing import Optional, Sequence


class ClipNetError(Exception):
    """Base class for every error raised by the backend"""

    exit_code = 1


class ConfigError(ClipNetError):
    """Invalid configuration value, unknown key or architecture mismatch"""

    exit_code = 1


class UsageError(ClipNetError):
    """Bad command-line usage"""

    exit_code = 1


class ShapeError(ValueError, ClipNetError):
    """Tensor shapes do not satisfy an operation's contract"""

    exit_code = 1

    def __init__(self, message: str, *shapes: Sequence[int]):
        """
        Initialize shape error

        Args:
            message: What went wrong
            shapes: The offending shapes, reported verbatim
        """
        self.shapes = tuple(tuple(s) for s in shapes)
        if self.shapes:
            rendered = " vs ".join(str(list(s)) for s in self.shapes)
            message = f"{message}: {rendered}"
        super().__init__(message)


class DataContractError(ClipNetError):
    """Dataset layout or content violates the on-disk contract"""

    exit_code = 2


class AnnotationError(DataContractError):
    """Annotation file is malformed or disagrees with its frames"""

    def __init__(self, video_id: str, reason: str):
        self.video_id = video_id
        self.reason = reason
        super().__init__(f"video {video_id}: {reason}")


class CheckpointError(ClipNetError):
    """Checkpoint file is truncated, corrupt or of another format version"""

    exit_code = 2


class NumericError(ClipNetError):
    """Non-finite values where finite ones are required"""

    exit_code = 3

    def __init__(self, message: str, iteration: Optional[int] = None,
                 video_ids: Optional[Sequence[str]] = None):
        self.iteration = iteration
        self.video_ids = list(video_ids or [])
        details = []
        if iteration is not None:
            details.append(f"iteration={iteration}")
        if self.video_ids:
            details.append(f"videos={','.join(self.video_ids)}")
        if details:
            message = f"{message} ({' '.join(details)})"
        super().__init__(message)


class GradCheckError(NumericError):
    """Gradient check produced a non-finite analytic or numeric value"""

    def __init__(self, message: str, input_index: int, element_index: int):
        self.input_index = input_index
        self.element_index = element_index
        super().__init__(f"{message} at input {input_index}, element {element_index}")
