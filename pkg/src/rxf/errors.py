"""Exception hierarchy. The CLI maps these onto exit codes."""


class RxfError(Exception):
    """Base class for all rxf errors."""


class ShapeError(RxfError):
    """Tensor/layer shape mismatch."""


class NumericsError(RxfError):
    """Non-finite value produced; message names the producing operation."""


class TapeError(RxfError):
    """Tape misuse: reuse after backward, backward on non-scalar, no recording."""


class GradError(RxfError):
    """Gradient unavailable where one is required."""


class ConfigError(RxfError):
    """Experiment config failed schema validation (CLI exit code 2)."""


class DataError(RxfError):
    """Dataset file malformed or dataset constraints violated (CLI exit code 3)."""


class CheckpointError(RxfError):
    """Checkpoint container malformed: magic/version/shape/CRC."""


class PolicyError(RxfError):
    """Disallowed batch-norm freeze policy combination."""
