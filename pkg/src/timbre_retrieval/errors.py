"""Exception types shared across the pipeline."""


class InvalidArgumentError(ValueError):
    pass


class SilentAudioError(ValueError):
    """Raised when a buffer is below the silence threshold."""

    def __init__(self, message, instrument_id=None):
        super().__init__(message)
        self.instrument_id = instrument_id


class DivergenceError(FloatingPointError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None, losses=None):
        super().__init__(message)
        self.step = step
        self.losses = losses or []
