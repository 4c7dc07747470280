"""Exception hierarchy shared by all bimpc modules."""


class BimpcError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatch(BimpcError, ValueError):
    pass


class NotPositiveDefinite(BimpcError, ValueError):
    pass


class NotSymmetric(BimpcError, ValueError):
    pass


class EmptyOrUnboundedSet(BimpcError, ValueError):
    def __init__(self, name, reason=""):
        self.name = name
        super().__init__(f"set {name!r} is empty or unbounded{': ' + reason if reason else ''}")


class OriginExcluded(BimpcError, ValueError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"set {name!r} does not contain the origin")


class EmptyPolytope(BimpcError):
    pass


class Unbounded(BimpcError):
    pass


class NotConverged(BimpcError):
    pass


class SingularTheta(BimpcError):
    pass


class NotStabilizable(BimpcError):
    def __init__(self, msg, A_Z=None, B_Z=None):
        self.A_Z = A_Z
        self.B_Z = B_Z
        super().__init__(msg)


class NotSchurStable(BimpcError):
    pass


class Infeasible(BimpcError):
    pass


class IterLimit(BimpcError):
    pass


class NoFeasiblePoint(BimpcError):
    pass


class BudgetExhausted(BimpcError):
    def __init__(self, msg, result=None):
        self.result = result
        super().__init__(msg)


class KappaExhausted(BimpcError):
    pass


class StepInfeasible(BimpcError):
    def __init__(self, msg, diagnostics=None):
        self.diagnostics = diagnostics or {}
        super().__init__(msg)


class NonlinearityDetected(BimpcError):
    pass


class UnknownScenario(BimpcError, KeyError):
    pass


class MalformedCsv(BimpcError, ValueError):
    pass


class CadenceGap(BimpcError, ValueError):
    pass
