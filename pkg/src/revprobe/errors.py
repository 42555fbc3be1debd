"""Exception and warning types shared across the toolkit."""


class RevprobeError(Exception):
    """Base class for validation failures (CLI exit code 2)."""


class FormatError(RevprobeError):
    """File header, magic bytes or group table is malformed."""


class DataError(RevprobeError):
    """Payload values violate a data invariant (non-finite, non-binary, ragged)."""


class ConstructionError(RevprobeError, ValueError):
    """A domain object was built with invalid fields."""


class ArgumentError(RevprobeError, ValueError):
    """An operation received incompatible arguments."""


class DivergenceError(Exception):
    """Probe training produced a non-finite loss (CLI exit code 3)."""

    def __init__(self, epoch, lr, message=None):
        self.epoch = epoch
        self.lr = lr
        super().__init__(
            message or f"training diverged at epoch {epoch} (effective lr={lr:g})"
        )


class SplitWarning(UserWarning):
    """A cluster was too small to stratify and went wholly to train."""


class DegenerateAttribute(UserWarning):
    """A forward-probe attribute is constant on the train split."""
