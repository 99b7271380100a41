class McaError(Exception):
    """Base class for domain errors (CLI exit code 1)."""


class ShapeError(McaError, ValueError):
    pass


class PolicyError(McaError, ValueError):
    pass


class ConfigError(McaError, ValueError):
    pass


class ScheduleSyntaxError(McaError, ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ScheduleOverlapError(McaError, ValueError):
    def __init__(self, first, second):
        super().__init__(f"overlapping rules: [{first}] and [{second}]")
        self.rules = (first, second)


class NonFiniteError(McaError, ValueError):
    """NaN or Inf where finite values are required."""


class DivergenceError(McaError, RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step


class BackendError(McaError, RuntimeError):
    """A backend call failed for one record."""


class BackendUnavailable(BackendError):
    """A backend is unreachable after all retries; the run cannot continue."""
