"""
Positive solutions of the discrete problem

    F(u) = (K + M) u - b_p(u) = 0,   b_p(u)_i = int_dOmega (u_+)^p phi_i dsigma,

by damped Newton from bubble ansatz fields, continuation in p and deflation.
"""

import json
import logging
import math
import os
import traceback
from datetime import datetime
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import shapely
from pydantic import BaseModel, ConfigDict, field_validator, model_validator
from scipy import sparse as sp
from scipy.sparse.linalg import spsolve

from config import Config
from diagnostics import detect_peaks
from errors import ConvergenceError, DeflationError, OutsideDomainError, PeakCollapseError, PeakCountError, \
    SolverError, ZeroSolutionError
from fem_core import DEFAULT_RULE, EnergyRecord, LinearSystem, NodalField, QuadratureRule, assemble_volume, energy, \
    nonlinear_boundary_jacobian, nonlinear_boundary_residual, probe, read_field, write_field
from geometry import BoundaryCurve, DomainMesh, FlatChart, make_curve, read_mesh, write_mesh
from liouville import CANONICAL, bubble_value
from models import SQRT_E, BoundarySolution, BranchEntry, SolutionBranch, SolveStatus, epsilon_scale, field_file_name

logger = logging.getLogger(__name__)


class SolveConfig(BaseModel):
    model_config = ConfigDict(extra='forbid')

    tolerance: float = Config.NEWTON_TOLERANCE
    max_iterations: int = Config.NEWTON_MAX_ITERATIONS
    max_halvings: int = Config.NEWTON_MAX_HALVINGS
    schedule: List[float] = [10.0]
    max_bisections: int = Config.CONTINUATION_MAX_BISECTIONS
    deflation_shift: float = Config.DEFLATION_SHIFT
    deflation_power: float = Config.DEFLATION_POWER
    zero_threshold: float = Config.ZERO_SOLUTION_THRESHOLD

    @field_validator('tolerance')
    @classmethod
    def _positive_tolerance(cls, value):
        if not value > 0:
            raise ValueError('tolerance must be positive')
        return value

    @model_validator(mode='after')
    def _increasing_schedule(self):
        if not self.schedule:
            raise ValueError('schedule must not be empty')
        if any(b <= a for a, b in zip(self.schedule, self.schedule[1:])):
            raise ValueError('schedule must be strictly increasing')
        return self

    @classmethod
    def from_run_config(cls, run_config) -> 'SolveConfig':
        section = run_config.solver
        return cls(tolerance=section.tolerance, max_iterations=section.max_iterations,
                   max_halvings=section.max_halvings, schedule=section.p_list,
                   deflation_shift=section.deflation_shift)


def geometric_schedule(p_start, p_end, steps):
    """`steps` exponents from p_start to p_end in geometric progression."""
    if steps < 1 or not 0 < p_start <= p_end:
        raise ValueError(f"invalid schedule request {p_start} -> {p_end} in {steps} steps")
    if steps == 1:
        return [float(p_start)]
    return [float(v) for v in np.geomspace(p_start, p_end, steps)]


class PowerNonlinearity:
    """Boundary term (u_+)^p."""

    def __init__(self, p, rule: QuadratureRule = DEFAULT_RULE):
        self.p = float(p)
        self.rule = rule

    def residual(self, u: NodalField):
        return nonlinear_boundary_residual(u, self.p, self.rule, positive_part=True)

    def jacobian(self, u: NodalField):
        return nonlinear_boundary_jacobian(u, self.p, self.rule, positive_part=True)

    def describe(self):
        return f"u^{self.p:g}"


class PrescribedFlux:
    """Boundary term replaced by a fixed load vector int g phi_i (manufactured data)."""

    def __init__(self, load):
        self.load = np.asarray(load, dtype=float)

    def residual(self, u: NodalField):
        return self.load

    def jacobian(self, u: NodalField):
        n = u.mesh.num_vertices
        return sp.csr_matrix((n, n))

    def describe(self):
        return "prescribed flux"


def _ansatz_scale(p, amplitude, mesh: DomainMesh, s0):
    epsilon = epsilon_scale(p, amplitude)
    local_h = float(mesh.local_boundary_size(s0))
    if epsilon < 1e-3 * local_h:
        logger.warning(f"peak unresolved by mesh - p: {p}, epsilon: {epsilon:.3e}, local h: {local_h:.3e}")
    return epsilon


def ansatz_floor(p, amplitude):
    log_inverse_epsilon = (p - 1.0) * math.log(amplitude) + math.log(p)
    return amplitude * max(0.1, 1.0 - 2.0 * log_inverse_epsilon / p)


def _bubble_values(mesh: DomainMesh, chart: FlatChart, p, amplitude, epsilon):
    floor = ansatz_floor(p, amplitude)
    values = np.full(mesh.num_vertices, floor)
    y, mask = chart.flatten_masked(mesh.vertices)
    if np.any(mask):
        t = y[mask] / epsilon
        t[:, 1] = np.maximum(t[:, 1], 0.0)
        values[mask] = np.maximum(amplitude * (1.0 + bubble_value(CANONICAL, t) / p), floor)
    return values


def bubble_ansatz(mesh: DomainMesh, curve: BoundaryCurve, s0, p, amplitude=SQRT_E, chart=None) -> NodalField:
    """
    amplitude * (1 + U(Psi(x) / eps) / p) near gamma(s0), clipped below at the floor
    amplitude * max(0.1, 1 - 2 log(1/eps) / p); eps = (p amplitude^(p-1))^(-1).
    """
    if p < 2:
        raise ValueError(f"bubble ansatz needs p >= 2, got {p}")
    chart = chart if chart is not None else FlatChart(curve, s0)
    epsilon = _ansatz_scale(p, amplitude, mesh, s0)
    values = _bubble_values(mesh, chart, p, amplitude, epsilon)
    return NodalField(mesh, values, label=f"bubble_s{chart.s0:.6g}", p=p)


def constant_ansatz(mesh: DomainMesh, value=Config.CONSTANT_ANSATZ_LEVEL, p=None) -> NodalField:
    return NodalField(mesh, np.full(mesh.num_vertices, float(value)), label='constant', p=p)


def summed_ansatz(mesh: DomainMesh, curve: BoundaryCurve, sites: Sequence[float], p, amplitude=SQRT_E) -> NodalField:
    """floor + sum_j max(bubble_j - floor, 0)."""
    if p < 2:
        raise ValueError(f"bubble ansatz needs p >= 2, got {p}")
    floor = ansatz_floor(p, amplitude)
    values = np.full(mesh.num_vertices, floor)
    for s0 in sites:
        epsilon = _ansatz_scale(p, amplitude, mesh, s0)
        values += np.maximum(_bubble_values(mesh, FlatChart(curve, s0), p, amplitude, epsilon) - floor, 0.0)
    return NodalField(mesh, values, label=f"bubbles_{len(sites)}", p=p)


def _l2_norm(system: LinearSystem, e):
    return math.sqrt(max(float(e @ (system.mass @ e)), 0.0))


def _deflation_factor(system, u, deflated, shift, power):
    factor = 1.0
    for other in deflated:
        norm = _l2_norm(system, u - other)
        if norm == 0.0:
            return math.inf
        factor *= norm ** (-power) + shift
    return factor


def _deflated_step(system, u, step, deflated, shift, power):
    """Newton step of the deflated residual M(u) F(u), M = prod_k (1/|u - u_k|^q + shift)."""
    correction = 0.0
    for other in deflated:
        e = u - other
        norm = _l2_norm(system, e)
        if norm == 0.0:
            raise DeflationError("iterate coincides with a deflated solution")
        factor = norm ** (-power) + shift
        gradient = -power * norm ** (-power - 2) * (system.mass @ e)
        correction += float(gradient @ step) / factor
    denominator = 1.0 - correction
    if abs(denominator) < 1e-12:
        return step
    return step / denominator


def newton_solve(initial: NodalField, p, config: Optional[SolveConfig] = None, boundary=None,
                 system: Optional[LinearSystem] = None, deflated: Sequence[NodalField] = (),
                 rule: QuadratureRule = DEFAULT_RULE, ansatz: str = '', sites: Sequence[float] = ()) -> BoundarySolution:
    """
    Damped Newton on F(u) = (K + M) u - b(u), b(u)_i = int (u_+)^p phi_i.

    The step is halved while the merit D(u) |F(u)| fails to drop by the
    factor 1 - 1e-4 l (D is the deflation factor, 1 without deflation).
    ConvergenceError is raised when config.max_halvings halvings do not
    suffice. Convergence is the absolute test |F| <= config.tolerance.

    Parameters
    ----------
        initial : NodalField
            start, positive on the boundary
        p : float
        boundary : object with residual(u) and jacobian(u), default PowerNonlinearity(p)
        deflated : sequence of NodalField
            solutions excluded by deflation

    Returns
    -------
        BoundarySolution
    """
    config = config or SolveConfig()
    mesh = initial.mesh
    system = system if system is not None else assemble_volume(mesh)
    boundary = boundary if boundary is not None else PowerNonlinearity(p, rule)
    operator = system.operator
    deflated_values = [d.values for d in deflated]
    start_time = datetime.now()

    if np.any(initial.boundary_values <= 0):
        raise SolverError(f"initial field must be positive on the boundary (min {initial.boundary_values.min():.3e})", p=p)

    def residual(values):
        field = NodalField(mesh, values, p=p)
        return operator @ values - boundary.residual(field)

    def merit(values, norm):
        if not deflated_values:
            return norm
        return _deflation_factor(system, values, deflated_values, config.deflation_shift,
                                 config.deflation_power) * norm

    u = initial.values.copy()
    F = residual(u)
    norm = float(np.linalg.norm(F))
    history = [norm]
    iteration = 0
    while norm > config.tolerance:
        if iteration >= config.max_iterations:
            raise ConvergenceError(f"Newton did not converge at p={p} after {iteration} iterations "
                                   f"(residual {norm:.3e})", last_residual=norm, iterations=iteration, p=p)
        iteration += 1
        J = (operator - boundary.jacobian(NodalField(mesh, u, p=p))).tocsc()
        step = spsolve(J, -F)
        if not np.all(np.isfinite(step)):
            raise ConvergenceError(f"singular Newton system at p={p}", last_residual=norm, iterations=iteration, p=p)
        if deflated_values:
            step = _deflated_step(system, u, step, deflated_values, config.deflation_shift, config.deflation_power)

        current = merit(u, norm)
        lam = 1.0
        for _ in range(config.max_halvings + 1):
            trial = u + lam * step
            trial_F = residual(trial)
            trial_norm = float(np.linalg.norm(trial_F))
            if merit(trial, trial_norm) < (1.0 - 1e-4 * lam) * current:
                break
            lam *= 0.5
        else:
            raise ConvergenceError(f"line search failed at p={p} after {config.max_halvings} halvings "
                                   f"(residual {norm:.3e})", last_residual=norm, iterations=iteration, p=p)
        u, F, norm = trial, trial_F, trial_norm
        history.append(norm)
        logger.debug(f"Newton iteration - p: {p}, Iteration: {iteration}, Residual: {norm:.3e}, Step: {lam:.3g}")

    sup_norm = float(np.max(np.abs(u)))
    if sup_norm < config.zero_threshold:
        raise ZeroSolutionError(iterations=iteration, p=p)
    boundary_min = float(np.min(u[mesh.boundary_vertices]))
    if boundary_min <= 0:
        raise SolverError(f"Newton converged to a field that is not positive on the boundary at p={p} "
                          f"(min {boundary_min:.3e})", p=p)
    for other in deflated:
        if _l2_norm(system, u - other.values) < 1e-3:
            raise DeflationError(f"Newton returned a deflated solution at p={p}", p=p)

    duration = (datetime.now() - start_time).total_seconds()
    logger.info(f"Newton solve completed - p: {p}, Iterations: {iteration}, Residual: {norm:.3e}, "
                f"Sup norm: {sup_norm:.6f}, Duration: {duration:.2f}s")
    return BoundarySolution(field=NodalField(mesh, u, label=f"u_p{p:g}", p=p), p=float(p), iterations=iteration,
                            residual_history=history, status=SolveStatus.CONVERGED,
                            ansatz=ansatz or boundary.describe(), sites=list(sites))


def rescale_seed(u: NodalField, p_old, p_new) -> NodalField:
    """u <- A (u / A)^(p_old / p_new), A = |u|_inf; keeps the sup norm and the rescaled profile."""
    amplitude = u.sup_norm
    ratio = np.maximum(u.values, 1e-300) / amplitude
    return u.copy(values=amplitude * ratio ** (p_old / p_new), p=p_new)


def continue_in_p(seed: BoundarySolution, schedule: Sequence[float], config: Optional[SolveConfig] = None,
                  system: Optional[LinearSystem] = None, rule: QuadratureRule = DEFAULT_RULE,
                  provenance: Optional[dict] = None) -> SolutionBranch:
    """
    Follow the seed along increasing p. A failed step is bisected (at most
    config.max_bisections times) before the failure is raised.
    """
    config = config or SolveConfig(schedule=list(schedule))
    schedule = [float(p) for p in schedule]
    if abs(seed.p - schedule[0]) > 1e-12:
        raise ValueError(f"seed is solved at p={seed.p}, schedule starts at {schedule[0]}")
    mesh = seed.mesh
    system = system if system is not None else assemble_volume(mesh)
    start_time = datetime.now()
    logger.info("=" * 60)
    logger.info(f"Starting continuation - Schedule: {schedule}")

    branch = SolutionBranch(provenance=dict(provenance or {}))
    branch.provenance.setdefault('ansatz', seed.ansatz)
    branch.add(BranchEntry(p=seed.p, solution=seed, energy=energy(seed.field, seed.p, system, rule)))

    current = seed
    for target in schedule[1:]:
        bisections = 0
        step = target - current.p
        while current.p < target - 1e-12:
            p_next = target if current.p + step >= target - 1e-12 else current.p + step
            try:
                start = rescale_seed(current.field, current.p, p_next)
                solved = newton_solve(start, p_next, config, system=system, rule=rule,
                                      ansatz=seed.ansatz, sites=seed.sites)
            except SolverError as e:
                bisections += 1
                if bisections > config.max_bisections:
                    logger.error(f"Continuation failed - p: {p_next}, Error: {str(e)}")
                    logger.error(f"Full traceback: {traceback.format_exc()}")
                    e.p = p_next
                    raise
                step *= 0.5
                logger.warning(f"Bisecting continuation step - From p: {current.p}, To p: {current.p + step}, "
                               f"Bisection: {bisections}")
                continue
            current = solved
            step = target - current.p
        branch.add(BranchEntry(p=current.p, solution=current, energy=energy(current.field, current.p, system, rule)))

    duration = (datetime.now() - start_time).total_seconds()
    logger.info(f"Continuation completed - Solutions: {len(branch)}, Duration: {duration:.2f}s")
    return branch


def transport_field(u: NodalField, s_from, s_to, fill) -> np.ndarray:
    """
    Nodal values of u moved along the boundary from s_from to s_to.

    Each vertex x with nearest boundary parameter sigma and depth d takes the
    value of u at gamma(sigma + s_from - s_to) - d nu. Source points off the
    mesh take `fill`.
    """
    mesh = u.mesh
    curve = mesh.curve
    if curve is None:
        raise SolverError("moving a field along the boundary needs the boundary curve of the mesh")
    x = mesh.vertices
    sigma = curve.project(x)
    depth = np.maximum(np.sum((curve.point(sigma) - x) * curve.normal(sigma), axis=1), 0.0)
    source_s = sigma + (s_from - s_to)
    source = curve.point(source_s) - depth[:, None] * curve.normal(source_s)

    values = np.full(mesh.num_vertices, float(fill))
    polygon = shapely.Polygon(mesh.vertices[mesh.boundary_vertices]).buffer(0.25 * mesh.h)
    inside = np.nonzero(shapely.contains_xy(polygon, source[:, 0], source[:, 1]))[0]
    if not len(inside):
        return values
    try:
        values[inside], _ = probe(u, source[inside])
    except OutsideDomainError:
        for k in inside:
            try:
                values[k], _ = probe(u, source[k])
            except OutsideDomainError:
                continue
    return values


def peak_radius(curve: BoundaryCurve, sites: Sequence[float]):
    m_max = max(Config.PEAK_MAX_COUNT, len(sites))
    spacing = min((float(curve.arc_distance(a, b)) for i, a in enumerate(sites) for b in sites[i + 1:]),
                  default=curve.period)
    return min(0.2 * curve.period / m_max, 0.5 * spacing)


def check_peak_sites(solution: BoundarySolution, sites: Sequence[float]):
    """
    Detected peaks must number exactly len(sites). A site whose nearest peak
    lies further than 5h marks the solution DRIFTED.

    Returns
    -------
        list of PeakRecord
    """
    mesh = solution.mesh
    curve = mesh.curve
    p = solution.p
    peaks = detect_peaks(solution, radius=peak_radius(curve, sites), max_peaks=max(Config.PEAK_MAX_COUNT, len(sites)))
    if len(peaks) < len(sites):
        solution.status = SolveStatus.COLLAPSED
        raise PeakCollapseError(f"branch collapsed to fewer peaks: {len(peaks)} of {len(sites)} at p={p}",
                                found=len(peaks), expected=len(sites), p=p)
    if len(peaks) > len(sites):
        solution.status = SolveStatus.FAILED
        raise PeakCountError(f"solution has more peaks than sites: {len(peaks)} for {len(sites)} at p={p}",
                             found=len(peaks), expected=len(sites), p=p)
    for s in sites:
        drift = min(float(curve.arc_distance(s, peak.s)) for peak in peaks)
        if drift > 5.0 * mesh.h:
            solution.status = SolveStatus.DRIFTED
            logger.warning(f"Peak drifted from requested site - Site: {s:.6g}, Drift: {drift:.3e}, p: {p}")
    return peaks


def continuation_schedule(p_start, p_end, ratio=Config.CONTINUATION_RATIO):
    """Geometric schedule from p_start to p_end with steps of at most `ratio`."""
    if p_end <= p_start:
        return [float(p_start)]
    steps = int(math.ceil(math.log(p_end / p_start) / math.log(ratio))) + 1
    return geometric_schedule(p_start, p_end, steps)


def multi_peak_solve(mesh: DomainMesh, curve: BoundaryCurve, sites: Sequence[float], p,
                     config: Optional[SolveConfig] = None, deflated: Sequence[NodalField] = (),
                     amplitude=SQRT_E, system: Optional[LinearSystem] = None,
                     rule: QuadratureRule = DEFAULT_RULE, p_seed=None) -> BoundarySolution:
    """
    m-peak solution with peaks near `sites`.

    The single bubble at sites[0] is solved at p_seed (default
    min(p, Config.MULTI_PEAK_SEED_P)). Its copies moved to the other sites,
    each taken above the floor min(u_1), are summed into the start of the
    m-peak Newton solve, which is then continued in p up to p. Deflation
    applies to the Newton solve when p_seed == p; otherwise the continued
    solution is compared with the deflated fields.

    Raises
    ------
        PeakCollapseError, PeakCountError
            detected peak count differs from len(sites)
    """
    sites = [float(np.mod(s, curve.period)) for s in sites]
    epsilon = epsilon_scale(p, amplitude)
    for i in range(len(sites)):
        for j in range(i + 1, len(sites)):
            if curve.arc_distance(sites[i], sites[j]) <= 10.0 * epsilon:
                raise ValueError(f"peak sites {sites[i]:.6g} and {sites[j]:.6g} are closer than 10 epsilon")
    p_seed = float(min(p, Config.MULTI_PEAK_SEED_P) if p_seed is None else p_seed)
    if p_seed > p:
        raise ValueError(f"seed exponent {p_seed} exceeds target p={p}")
    system = system if system is not None else assemble_volume(mesh)
    config = config or SolveConfig()
    start_time = datetime.now()
    logger.info(f"Starting multi-peak solve - Sites: {sites}, p: {p}, Seed p: {p_seed}")

    single = newton_solve(bubble_ansatz(mesh, curve, sites[0], p_seed, amplitude), p_seed, config, system=system,
                          rule=rule, ansatz='bubble', sites=sites[:1])
    floor = float(single.field.values.min())
    values = single.field.values.copy()
    for s in sites[1:]:
        values += transport_field(single.field, sites[0], s, fill=floor) - floor
    initial = NodalField(mesh, values, label=f"bubbles_{len(sites)}", p=p_seed)

    ansatz = f"moved bubbles x{len(sites)}"
    at_target = abs(p_seed - p) < 1e-12
    solution = newton_solve(initial, p_seed, config, system=system, deflated=deflated if at_target else (),
                            rule=rule, ansatz=ansatz, sites=sites)
    if not at_target:
        branch = continue_in_p(solution, continuation_schedule(p_seed, p), config, system=system, rule=rule)
        solution = branch.entries[-1].solution
        for other in deflated:
            if _l2_norm(system, solution.field.values - other.values) < 1e-3:
                raise DeflationError(f"multi-peak solve returned a deflated solution at p={p}", p=p)

    peaks = check_peak_sites(solution, sites)
    duration = (datetime.now() - start_time).total_seconds()
    logger.info(f"Multi-peak solve completed - Peaks: {len(peaks)}, Status: {solution.status.value}, "
                f"Sup norm: {solution.sup_norm:.6f}, Duration: {duration:.2f}s")
    return solution


def write_branch(branch: SolutionBranch, directory) -> Path:
    """Directory with mesh.txt, one field file per p and branch.json."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    if not len(branch):
        raise ValueError("cannot write an empty branch")
    mesh = branch.entries[0].solution.mesh
    write_mesh(mesh, directory / 'mesh.txt')
    for entry in branch:
        write_field(entry.solution.field, directory / field_file_name(entry.p))
    meta = branch.to_dict()
    meta['mesh'] = {'h': mesh.h, 'file': 'mesh.txt'}
    if mesh.curve is not None:
        meta['curve'] = mesh.curve.to_dict()
    with open(directory / 'branch.json', 'w', encoding='utf-8') as handle:
        json.dump(meta, handle, indent=2, sort_keys=True)
    logger.info(f"Branch written - Directory: {directory}, Solutions: {len(branch)}")
    return directory


def read_branch(directory) -> SolutionBranch:
    directory = Path(directory)
    meta_path = directory / 'branch.json'
    if not meta_path.exists():
        raise FileNotFoundError(f"no branch.json in {directory}")
    with open(meta_path, 'r', encoding='utf-8') as handle:
        meta = json.load(handle)
    curve = None
    if 'curve' in meta:
        curve = make_curve(meta['curve']['name'], **meta['curve']['params'])
    mesh = read_mesh(directory / meta['mesh']['file'], curve=curve, h=meta['mesh']['h'])
    branch = SolutionBranch(provenance=meta.get('provenance', {}))
    for item in meta['entries']:
        field = read_field(directory / item['field_file'], mesh)
        sol = item['solution']
        solution = BoundarySolution(field=field, p=float(item['p']), iterations=int(item['iterations']),
                                    residual_history=list(sol.get('residual_history', [])),
                                    status=SolveStatus(sol.get('status', 'converged')),
                                    ansatz=sol.get('ansatz', ''), sites=list(sol.get('sites', [])))
        record = item['energy']
        branch.add(BranchEntry(p=solution.p, solution=solution,
                               energy=EnergyRecord(dirichlet=record['dirichlet'], boundary_lp=record['boundary_lp'],
                                                   free_energy=record['free_energy'], p=record['p'])))
    return branch
