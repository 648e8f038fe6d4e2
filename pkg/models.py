import enum
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from fem_core import EnergyRecord, NodalField

SQRT_E = math.sqrt(math.e)
TWO_PI_E = 2.0 * math.pi * math.e


class SolveStatus(enum.Enum):
    CONVERGED = "converged"
    FAILED = "failed"
    ZERO = "zero"
    COLLAPSED = "collapsed"
    DRIFTED = "drifted"


class CheckStatus(enum.Enum):
    PASSED = "passed"
    FAILED = "failed"
    SKIPPED = "skipped"
    ERROR = "error"


@dataclass
class BoundarySolution:
    """Solved nodal field u_p with its exponent and Newton metadata."""
    field: NodalField
    p: float
    iterations: int
    residual_history: List[float] = field(default_factory=list)
    status: SolveStatus = SolveStatus.CONVERGED
    ansatz: str = ''
    sites: List[float] = field(default_factory=list)

    @property
    def residual(self):
        return self.residual_history[-1] if self.residual_history else math.nan

    @property
    def sup_norm(self):
        return self.field.sup_norm

    @property
    def mesh(self):
        return self.field.mesh

    def to_dict(self):
        return {
            'p': self.p,
            'iterations': self.iterations,
            'residual': self.residual,
            'residual_history': list(self.residual_history),
            'status': self.status.value,
            'ansatz': self.ansatz,
            'sites': list(self.sites),
            'sup_norm': self.sup_norm,
        }


@dataclass
class BranchEntry:
    p: float
    solution: BoundarySolution
    energy: EnergyRecord

    @property
    def iterations(self):
        return self.solution.iterations

    def to_dict(self):
        return {
            'p': self.p,
            'iterations': self.iterations,
            'solution': self.solution.to_dict(),
            'energy': self.energy.to_dict(),
            'field_file': field_file_name(self.p),
        }


def field_file_name(p):
    return f"u_p{p:.6g}.txt"


@dataclass
class SolutionBranch:
    """Ordered family (p, u_p) produced by continuation."""
    entries: List[BranchEntry] = field(default_factory=list)
    provenance: Dict = field(default_factory=dict)

    def add(self, entry: BranchEntry):
        if self.entries and entry.p <= self.entries[-1].p:
            raise ValueError(f"branch exponents must increase: {entry.p} after {self.entries[-1].p}")
        self.entries.append(entry)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def schedule(self):
        return [entry.p for entry in self.entries]

    def solution_at(self, p) -> BoundarySolution:
        for entry in self.entries:
            if entry.p == p:
                return entry.solution
        raise KeyError(f"no solution stored for p={p}")

    def to_dict(self):
        return {
            'schedule': self.schedule,
            'provenance': self.provenance,
            'entries': [entry.to_dict() for entry in self.entries],
        }


def epsilon_scale(p, amplitude):
    """Peak width (p * amplitude^(p-1))^(-1), evaluated in log form."""
    if not amplitude > 0:
        return math.inf
    return math.exp(-(p - 1.0) * math.log(amplitude) - math.log(p))


@dataclass
class PeakRecord:
    index: int
    s: float
    point: List[float]
    amplitude: float
    p: float
    chart_radius: Optional[float] = None
    profile_error: Optional[float] = None
    beta: Optional[float] = None
    c: Optional[float] = None

    @property
    def epsilon(self):
        return epsilon_scale(self.p, self.amplitude)

    @property
    def log_epsilon(self):
        return -(self.p - 1.0) * math.log(self.amplitude) - math.log(self.p)

    def to_dict(self):
        return {
            'index': self.index,
            's': self.s,
            'point': list(self.point),
            'amplitude': self.amplitude,
            'epsilon': self.epsilon,
            'chart_radius': self.chart_radius,
            'profile_error': self.profile_error,
            'beta': self.beta,
            'c': self.c,
        }


@dataclass
class CheckResult:
    """Outcome of one diagnostic check; failures are recorded, never raised."""
    name: str
    status: CheckStatus
    value: Optional[float] = None
    target: Optional[float] = None
    message: str = ''
    details: Dict = field(default_factory=dict)

    @property
    def passed(self):
        return self.status == CheckStatus.PASSED

    def to_dict(self):
        return {
            'name': self.name,
            'status': self.status.value,
            'value': self.value,
            'target': self.target,
            'message': self.message,
            'details': self.details,
        }


@dataclass
class ConcentrationReport:
    p: float
    sup_norm: float
    dirichlet: float
    peaks: List[PeakRecord] = field(default_factory=list)
    checks: Dict[str, CheckResult] = field(default_factory=dict)
    pohozaev_residual: Optional[float] = None
    p4_sup: Optional[float] = None
    phi_grad_norm: Optional[float] = None
    green_terms: List[Dict] = field(default_factory=list)
    message: str = ''

    @property
    def m(self):
        return len(self.peaks)

    @property
    def p_energy(self):
        return self.p * self.dirichlet

    @property
    def target_energy(self):
        return self.m * TWO_PI_E

    def add_check(self, result: CheckResult):
        self.checks[result.name] = result

    def csv_row(self, max_peaks):
        betas = [peak.beta for peak in self.peaks] + [None] * (max_peaks - self.m)
        cs = [peak.c for peak in self.peaks] + [None] * (max_peaks - self.m)
        return [self.p, self.m, self.sup_norm, self.p_energy, *betas[:max_peaks], *cs[:max_peaks],
                self.pohozaev_residual, self.p4_sup, self.phi_grad_norm]

    def to_dict(self):
        return {
            'p': self.p,
            'm': self.m,
            'sup_norm': self.sup_norm,
            'sup_norm_target': SQRT_E,
            'dirichlet': self.dirichlet,
            'p_energy': self.p_energy,
            'p_energy_target': self.target_energy,
            'peaks': [peak.to_dict() for peak in self.peaks],
            'checks': {name: check.to_dict() for name, check in self.checks.items()},
            'pohozaev_residual': self.pohozaev_residual,
            'p4_sup': self.p4_sup,
            'phi_grad_norm': self.phi_grad_norm,
            'green_terms': self.green_terms,
            'message': self.message,
        }


def format_number(value):
    """CSV cell text: integers as is, floats with 12 significant digits, None empty."""
    if value is None:
        return ''
    if isinstance(value, (bool, np.bool_)):
        return str(bool(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.12g}"
