"""Exception hierarchy shared by the library modules and the command line.

Each exception carries the process exit code the CLI reports for it:
2 for configuration errors, 3 for solver failures, 4 for diagnostics failures.
The CLI exits with 1 on interruption and on errors outside this hierarchy.
"""


class LabError(Exception):
    exit_code = 1


class ConfigError(LabError, ValueError):
    exit_code = 2


class GeometryError(LabError, ValueError):
    exit_code = 2


class MeshingError(LabError):
    exit_code = 3

    def __init__(self, message, region=None):
        super().__init__(message)
        self.region = region


class AssemblyError(LabError):
    exit_code = 3

    def __init__(self, message, element=None):
        super().__init__(message)
        self.element = element


class PositivityError(LabError):
    exit_code = 3


class OutsideDomainError(LabError, ValueError):
    exit_code = 3


class SolverError(LabError):
    exit_code = 3

    def __init__(self, message, p=None):
        super().__init__(message)
        self.p = p


class ConvergenceError(SolverError):
    def __init__(self, message, last_residual, iterations, p=None):
        super().__init__(message, p=p)
        self.last_residual = last_residual
        self.iterations = iterations


class ZeroSolutionError(SolverError):
    def __init__(self, message="converged to zero solution", iterations=0, p=None):
        super().__init__(message, p=p)
        self.iterations = iterations


class PeakCountError(SolverError):
    def __init__(self, message, found=0, expected=0, p=None):
        super().__init__(message, p=p)
        self.found = found
        self.expected = expected


class PeakCollapseError(PeakCountError):
    pass


class DeflationError(SolverError):
    pass


class DiagnosticsError(LabError):
    exit_code = 4


class GreenError(DiagnosticsError):
    pass


class SingularPointError(GreenError, ValueError):
    pass


class NoConcentrationError(DiagnosticsError):
    def __init__(self, message="no concentration detected"):
        super().__init__(message)


class UnresolvedPeakError(DiagnosticsError):
    pass


class ChartError(DiagnosticsError, ValueError):
    pass
