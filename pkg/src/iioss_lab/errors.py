"""Exception types shared across the toolkit."""


class IIOSSLabError(Exception):
    pass


class ArgumentError(IIOSSLabError, ValueError):
    pass


class EvaluationError(IIOSSLabError):
    """A gain produced a non-finite value at a grid point."""

    def __init__(self, message: str, location: float | None = None):
        self.location = location
        super().__init__(message if location is None else f"{message} (at {location!r})")


class SaturationError(IIOSSLabError):
    """Inversion target lies above the gain's value at its domain cap."""

    def __init__(self, message: str, gain: str | None = None):
        self.gain = gain
        super().__init__(message)


class KindError(IIOSSLabError):
    pass


class HorizonError(IIOSSLabError):
    pass


class IntegrationError(IIOSSLabError):
    def __init__(self, message: str, time: float):
        self.time = time
        super().__init__(f"{message} (t={time!r})")


class ModelError(IIOSSLabError, ValueError):
    """A system or candidate definition violates its structural requirements."""
