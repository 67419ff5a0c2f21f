"""Exception hierarchy shared by every stage of the toolkit."""


class DOPFError(Exception):
    """Base class for all toolkit errors."""


class ParseError(DOPFError):
    """Malformed model or scenario document."""

    def __init__(self, message, line=None, field=None, path=None):
        self.line = line
        self.field = field
        self.path = path
        self.reason = message
        where = []
        if path is not None:
            where.append(str(path))
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ValidationError(DOPFError):
    """Document parsed but violates a model invariant."""

    def __init__(self, message, line=None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class SingularMatrix(DOPFError):
    pass


class NonRadialTopology(DOPFError):
    pass


class NoConvergence(DOPFError):
    """Power flow did not converge.

    A failing sweep also sets ``multiplier`` and ``partial`` (the report
    rows computed before the failure).
    """

    def __init__(self, message, iterations, residual, multiplier=None, partial=None):
        self.iterations = iterations
        self.residual = residual
        self.multiplier = multiplier
        self.partial = partial
        super().__init__(f"{message} (iterations={iterations}, residual={residual:.3e})")


class BoxViolation(DOPFError):
    pass


class ShapeMismatch(DOPFError, ValueError):
    pass


class NonConvex(DOPFError):
    pass


class Infeasible(DOPFError):
    def __init__(self, message, row=None):
        self.row = row
        super().__init__(message)


class MaxIterations(DOPFError):
    def __init__(self, message, iterations, trace=None):
        self.iterations = iterations
        self.trace = trace
        super().__init__(message)


class Diverged(DOPFError):
    def __init__(self, message, iterations, trace=None):
        self.iterations = iterations
        self.trace = trace
        super().__init__(message)


class RankDeficient(DOPFError):
    pass


class TopicUnbound(DOPFError):
    def __init__(self, topic, subscriber=None, publisher=None):
        self.topic = topic
        self.subscriber = subscriber
        self.publisher = publisher
        detail = f"topic '{topic}'"
        if subscriber is not None:
            detail += f" subscribed by '{subscriber}'"
        detail += " has no publisher" if publisher is None else f" published by '{publisher}'"
        super().__init__(detail)


class DeadlockDetected(DOPFError):
    pass


class ScenarioFault(DOPFError):
    """A federate reported a fault; the broker halted the run."""

    def __init__(self, message, time, recording=None):
        self.time = time
        self.recording = recording
        super().__init__(f"t={time:g}: {message}")
