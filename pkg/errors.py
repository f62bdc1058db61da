"""
Errors Module
Exception hierarchy shared by the flow-matching lab

Library code raises these; the harnesses in eval_bench.py and the CLI in
main.py catch them, log them and turn them into recorded outcomes or exit
codes.
"""

from typing import Optional, Sequence


class GFFMError(Exception):
    """Base class for every error raised by this project"""


class ShapeError(GFFMError, ValueError):
    """Operands of a differentiable operation do not conform"""

    def __init__(self, op: str, shape_a: Sequence[int], shape_b: Sequence[int]):
        self.op = op
        self.shape_a = tuple(shape_a)
        self.shape_b = tuple(shape_b)
        super().__init__(f"{op}: shape mismatch {self.shape_a} vs {self.shape_b}")


class NonFiniteError(GFFMError, ValueError):
    """A NaN or infinity showed up where finite values are required"""

    def __init__(self, message: str, step: Optional[int] = None):
        self.step = step
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)


class CheckpointError(GFFMError):
    """Checkpoint file could not be read or does not match"""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


class CheckpointArchError(CheckpointError):
    pass


class ConfigError(GFFMError, ValueError):
    """Run-config validation failure, pinned to section.key and source line"""

    def __init__(self, section: str, key: Optional[str], reason: str, line: Optional[int] = None):
        self.section = section
        self.key = key
        self.line = line
        self.reason = reason
        where = f"{section}.{key}" if key else section
        if line is not None:
            where = f"{where} (line {line})"
        super().__init__(f"{where}: {reason}")


class TrainingDivergedError(GFFMError):
    """Training produced a non-finite loss or gradient and was aborted"""

    def __init__(self, last_finite_step: int, record=None, cause: Optional[BaseException] = None):
        self.last_finite_step = last_finite_step
        self.record = record
        self.cause = cause
        detail = f": {cause}" if cause is not None else ""
        super().__init__(f"training diverged after step {last_finite_step}{detail}")
