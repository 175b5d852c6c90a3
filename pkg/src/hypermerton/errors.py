"""Exception hierarchy shared by all solver modules."""


class HypermertonError(Exception):
    pass


class DomainError(HypermertonError, ValueError):
    """Argument outside the domain where a formula is defined."""


class IllConditionedMarketError(HypermertonError, ValueError):
    pass


class SingularBetaError(HypermertonError, ArithmeticError):
    def __init__(self, message, blowup_time=None):
        super().__init__(message)
        self.blowup_time = blowup_time


class BoundarySingularityError(DomainError):
    """Zero bequest with an empty remaining horizon (consumption is unbounded)."""


class SolverError(HypermertonError, RuntimeError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class NonConvergenceError(SolverError):
    def __init__(self, message, residuals=(), diagnostics=None):
        super().__init__(message, diagnostics)
        self.residuals = list(residuals)


class PositivityViolationError(SolverError):
    pass


class UnsupportedTerminalError(DomainError):
    pass


class UnsupportedPolicyError(HypermertonError, TypeError):
    pass


class TransversalityError(DomainError):
    pass


class ConfigError(HypermertonError, ValueError):
    pass
