class DBDHError(Exception):
    """Base class for library errors."""


class ConfigurationError(DBDHError, ValueError):
    pass


class ShapeError(DBDHError, ValueError):
    pass


class OutOfFrameError(DBDHError, ValueError):
    pass


class DegenerateRegionError(DBDHError, ValueError):
    pass


class SampleRejected(DBDHError):
    """A warped vertex left the frame; the caller should draw a new homography."""


class NumericError(DBDHError, ArithmeticError):
    pass


class TrainingDiverged(DBDHError, RuntimeError):
    def __init__(self, step: int, terms: dict):
        self.step = step
        self.terms = terms
        super().__init__(f"non-finite loss at step {step}: {terms}")


class CheckpointMismatch(DBDHError, ValueError):
    pass
