"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Tensor shape does not match what an operation requires."""


class FormatError(ValueError):
    """Malformed binary file (bad magic, truncation, count mismatch)."""


class TrainingError(RuntimeError):
    """Training diverged; carries the epoch at which loss became non-finite."""

    def __init__(self, message, epoch):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class NumericError(RuntimeError):
    """A numeric procedure hit a non-finite value; carries the step index."""

    def __init__(self, message, step):
        super().__init__(f"{message} (step {step})")
        self.step = step
