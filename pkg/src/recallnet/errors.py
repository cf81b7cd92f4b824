"""Exception types shared across recallnet."""


class RecallnetError(Exception):
    pass


class DimensionError(RecallnetError, ValueError):
    """Operand shapes do not conform."""


class DomainError(RecallnetError, ValueError):
    """An argument is outside the operation's domain."""


class ContractError(RecallnetError, RuntimeError):
    """A precondition on call order or graph structure was violated."""


class ConfigError(RecallnetError, ValueError):
    pass


class ParseError(RecallnetError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)
        self.path = path
        self.line = line


class FormatError(RecallnetError, ValueError):
    """Binary payload is truncated or carries the wrong magic/version."""


class GradientCheckError(RecallnetError, AssertionError):
    def __init__(self, report):
        names = ", ".join(f"{k} ({v:.3e})" for k, v in report.failures.items())
        super().__init__(f"gradient check failed for: {names}")
        self.report = report


class TrainingDiverged(RecallnetError, FloatingPointError):
    pass
