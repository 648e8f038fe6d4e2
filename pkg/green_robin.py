"""
Neumann Green function of Delta G = G with dG/dnu = delta_y for boundary sources y.

G(x, y) = (1/pi) log(1/|x - y|) + H(x, y). The regular part H solves

    int (grad H . grad v + H v) dx = int_dOmega g v dsigma - int_Omega S v dx,

S = (1/pi) log(1/|x - y|), g = (1/pi) <x - y, nu(x)> / |x - y|^2, and is
computed once per source with a factorization of K + M shared by all sources.
"""

import csv
import logging
import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import special
from scipy.sparse.linalg import splu
from tqdm import tqdm

from config import Config
from errors import GreenError, SingularPointError
from fem_core import DEFAULT_RULE, NodalField, QuadratureRule, assemble_volume, boundary_integral, boundary_load, \
    boundary_trace, probe, volume_load
from geometry import BoundaryCurve, DomainMesh
from models import format_number

logger = logging.getLogger(__name__)

INV_PI = 1.0 / math.pi
_LIMIT_DISTANCE = 1e-6


@dataclass
class GreenField:
    """Regular part H(., y) as a nodal field plus the log kernel (1/pi) log(1/|x - y|)."""
    s_y: float
    source: np.ndarray
    regular: NodalField
    coefficient: float = INV_PI

    def _offsets(self, x):
        x = np.asarray(x, dtype=float)
        d = x - self.source
        r = np.linalg.norm(np.atleast_2d(d), axis=1)
        if np.any(r < 1e-14):
            raise SingularPointError(f"singular point: G(., y) evaluated at its source {self.source.tolist()}")
        return d, r

    def value(self, x):
        """G(x, y) at interior or boundary points (P1 probe of H)."""
        _, r = self._offsets(x)
        h_value, _ = probe(self.regular, np.atleast_2d(x))
        values = self.coefficient * np.log(1.0 / r) + h_value
        return float(values[0]) if np.ndim(x) == 1 else values

    def gradient(self, x):
        d, r = self._offsets(x)
        _, h_grad = probe(self.regular, np.atleast_2d(x))
        grads = -self.coefficient * np.atleast_2d(d) / r[:, None] ** 2 + h_grad
        return grads[0] if np.ndim(x) == 1 else grads

    def boundary_value(self, s, curve: BoundaryCurve):
        """G(gamma(s), y) using the boundary trace of H pulled back to the curve."""
        s = np.asarray(s, dtype=float)
        _, r = self._offsets(np.atleast_2d(curve.point(s)))
        h_value, _ = boundary_trace(self.regular, np.atleast_1d(s))
        values = self.coefficient * np.log(1.0 / r) + h_value
        return float(values[0]) if s.ndim == 0 else values

    @property
    def robin(self):
        """R(y) = H(y, y)."""
        values, _ = boundary_trace(self.regular, np.array([self.s_y]))
        return float(values[0])

    def to_dict(self):
        return {'s_y': self.s_y, 'source': self.source.tolist(), 'coefficient': self.coefficient,
                'robin': self.robin}


def boundary_datum(curve: BoundaryCurve, s_y):
    """Neumann datum g(s) of the regular part with its curvature limit kappa(s_y)/(2 pi) at the source."""
    y = curve.point(s_y)
    limit = INV_PI * 0.5 * float(curve.curvature(s_y))

    def flux(s):
        x = curve.point(s)
        d = x - y
        r2 = np.sum(d * d, axis=-1)
        near = r2 < _LIMIT_DISTANCE ** 2
        ratio = np.sum(d * curve.normal(s), axis=-1) / np.where(near, 1.0, r2)
        return np.where(near, limit, INV_PI * ratio)
    return flux


def singular_part(y):
    y = np.asarray(y, dtype=float)

    def evaluate(points):
        return INV_PI * np.log(1.0 / np.linalg.norm(points - y, axis=-1))
    return evaluate


class GreenFunctionSolver:
    """
    Regular parts H(., y) on one mesh.

    K + M is factorized once; fields are cached per source parameter and
    independent sources can be solved by a thread pool.
    """

    def __init__(self, mesh: DomainMesh, curve: Optional[BoundaryCurve] = None,
                 rule: QuadratureRule = DEFAULT_RULE, workers: int = Config.GREEN_WORKERS):
        logger.info("Initializing GreenFunctionSolver...")
        self.mesh = mesh
        self.curve = curve if curve is not None else mesh.curve
        if self.curve is None:
            raise GreenError("Green function solver needs the boundary curve of the mesh")
        self.rule = rule
        self.workers = max(1, int(workers))
        self.system = assemble_volume(mesh)
        self._factor = splu(self.system.operator.tocsc())
        self._cache: Dict[float, GreenField] = {}
        self._lock = threading.Lock()
        logger.info(f"GreenFunctionSolver initialization completed - Vertices: {mesh.num_vertices}, "
                    f"Workers: {self.workers}")

    def _key(self, s):
        return round(float(np.mod(s, self.curve.period)), 12)

    def _solve(self, s_y) -> GreenField:
        y = self.curve.point(s_y)
        try:
            rhs = boundary_load(self.mesh, boundary_datum(self.curve, s_y), rule=self.rule, singular_at=s_y)
            rhs -= volume_load(self.mesh, singular_part(y), rule=self.rule, singular_point=y)
        except ValueError as e:
            raise GreenError(f"Quadrature of the Green data failed near s_y={s_y:.6g}; "
                             f"refine the mesh near the source. Error: {str(e)}")
        with self._lock:
            values = self._factor.solve(rhs)
        if not np.all(np.isfinite(values)):
            raise GreenError(f"Regular part is not finite for s_y={s_y:.6g}; refine the mesh near the source")
        regular = NodalField(self.mesh, values, label=f"H_s{s_y:.6g}")
        return GreenField(s_y=s_y, source=np.asarray(y, dtype=float), regular=regular)

    def field(self, s_y) -> GreenField:
        key = self._key(s_y)
        with self._lock:
            cached = self._cache.get(key)
        if cached is not None:
            return cached
        result = self._solve(key)
        with self._lock:
            self._cache.setdefault(key, result)
        return result

    def fields(self, s_values: Sequence[float]) -> List[GreenField]:
        missing = sorted({self._key(s) for s in s_values} - set(self._cache))
        if missing and self.workers > 1:
            with ThreadPoolExecutor(max_workers=self.workers) as executor:
                list(executor.map(self.field, missing))
        return [self.field(s) for s in s_values]

    def robin(self, s) -> float:
        return self.field(s).robin

    def green(self, s_x, s_y) -> float:
        """G(gamma(s_x), gamma(s_y)) for a boundary source at s_y."""
        return float(self.field(s_y).boundary_value(s_x, self.curve))

    def symmetric_green(self, s_i, s_h) -> float:
        return 0.5 * (self.green(s_i, s_h) + self.green(s_h, s_i))

    @property
    def cached_sources(self):
        return len(self._cache)


def get_solver(mesh: DomainMesh, curve: Optional[BoundaryCurve] = None) -> GreenFunctionSolver:
    solver = mesh.__dict__.get('_green_solver')
    if solver is None:
        solver = GreenFunctionSolver(mesh, curve)
        mesh.__dict__['_green_solver'] = solver
    return solver


def solve_regular_part(mesh: DomainMesh, curve: BoundaryCurve, s_y, solver=None) -> GreenField:
    solver = solver or get_solver(mesh, curve)
    return solver.field(s_y)


def eval_green(green: GreenField, x):
    """G(x, y) and its gradient at x != y."""
    return green.value(x), green.gradient(x)


def robin(mesh: DomainMesh, curve: BoundaryCurve, s, solver=None) -> float:
    solver = solver or get_solver(mesh, curve)
    return solver.robin(s)


def robin_table(mesh: DomainMesh, curve: BoundaryCurve, samples, solver=None):
    """R at `samples` equally spaced boundary parameters; returns (s, R) arrays."""
    solver = solver or get_solver(mesh, curve)
    s = np.arange(samples) * (curve.period / samples)
    solver.fields(s)
    values = np.array([solver.robin(value) for value in tqdm(s, desc='Robin', disable=not Config.SHOW_PROGRESS)])
    return s, values


@dataclass
class PhiConfiguration:
    """m boundary points with their Robin values, pairwise G values and phi_m."""
    s: List[float]
    robin_values: List[float]
    pair_values: List[List[float]]
    value: float
    gradient: Optional[List[float]] = None
    step: Optional[float] = None
    iterations: int = 0
    converged: bool = True

    @property
    def m(self):
        return len(self.s)

    @property
    def gradient_norm(self):
        return float(np.linalg.norm(self.gradient)) if self.gradient is not None else math.nan

    def csv_row(self):
        return [self.m, *self.s, self.value, self.gradient_norm, self.iterations]

    def to_dict(self):
        return {
            'm': self.m,
            's': list(self.s),
            'robin_values': list(self.robin_values),
            'pair_values': self.pair_values,
            'value': self.value,
            'gradient': self.gradient,
            'gradient_norm': self.gradient_norm,
            'step': self.step,
            'iterations': self.iterations,
            'converged': self.converged,
        }


def _check_distinct(curve, s):
    s = np.asarray(s, dtype=float)
    for i in range(len(s)):
        for j in range(i + 1, len(s)):
            if curve.arc_distance(s[i], s[j]) <= 1e-6 * curve.period:
                raise SingularPointError(f"coincident points s_{i}={s[i]:.6g} and s_{j}={s[j]:.6g}")


def phi_configuration(solver: GreenFunctionSolver, s) -> PhiConfiguration:
    curve = solver.curve
    s = [float(np.mod(value, curve.period)) for value in s]
    _check_distinct(curve, s)
    solver.fields(s)
    robin_values = [solver.robin(value) for value in s]
    m = len(s)
    pairs = [[0.0] * m for _ in range(m)]
    for i in range(m):
        for h in range(i + 1, m):
            pairs[i][h] = pairs[h][i] = solver.symmetric_green(s[i], s[h])
    value = float(sum(robin_values) + sum(pairs[i][h] for i in range(m) for h in range(m) if i != h))
    return PhiConfiguration(s=s, robin_values=robin_values, pair_values=pairs, value=value)


def phi_value(mesh: DomainMesh, curve: BoundaryCurve, s, solver=None) -> float:
    """phi_m = sum R(x_i) + sum_{i != h} G(x_i, x_h), G symmetrized."""
    solver = solver or get_solver(mesh, curve)
    return phi_configuration(solver, s).value


def gradient_step(mesh: DomainMesh, curve: BoundaryCurve):
    return max(1e-3 * curve.period, 2.0 * mesh.h)


def _collides(curve, s, i, moved, step):
    return any(curve.arc_distance(moved, s[j]) < 0.5 * step for j in range(len(s)) if j != i)


def phi_gradient(mesh: DomainMesh, curve: BoundaryCurve, s, solver=None, step=None):
    """
    Central differences of phi_m in each s_i.

    Returns
    -------
        gradient, step : (m,) array and the step actually used
    """
    solver = solver or get_solver(mesh, curve)
    step = gradient_step(mesh, curve) if step is None else step
    s = [float(value) for value in s]
    _check_distinct(curve, s)
    for i in range(len(s)):
        if _collides(curve, s, i, s[i] + step, step) or _collides(curve, s, i, s[i] - step, step):
            reduced = 0.25 * step
            if any(_collides(curve, s, k, s[k] + sign * reduced, reduced)
                   for k in range(len(s)) for sign in (1.0, -1.0)):
                raise GreenError(f"finite-difference step {step:.3g} collides with another point even after reduction")
            logger.warning(f"Reducing phi gradient step from {step:.3g} to {reduced:.3g} - Points too close")
            step = reduced
            break
    gradient = np.zeros(len(s))
    for i in range(len(s)):
        forward = list(s)
        backward = list(s)
        forward[i] += step
        backward[i] -= step
        gradient[i] = (phi_value(mesh, curve, forward, solver) - phi_value(mesh, curve, backward, solver)) / (2 * step)
    return gradient, step


def _start_configurations(curve, m, starts, seed):
    rng = np.random.default_rng(seed)
    L = curve.period
    configs = []
    for k in range(starts):
        offset = k * L / (m * max(starts, 1))
        jitter = rng.uniform(-0.25, 0.25, size=m) * (L / m) if m > 1 else np.zeros(m)
        configs.append(np.mod(offset + np.arange(m) * L / m + jitter, L))
    return configs


def _same_configuration(curve, a, b, tolerance, rotational):
    a = np.sort(np.mod(a, curve.period))
    b = np.sort(np.mod(b, curve.period))
    if rotational:
        gaps_a = np.diff(np.concatenate([a, [a[0] + curve.period]]))
        gaps_b = np.diff(np.concatenate([b, [b[0] + curve.period]]))
        return any(np.max(np.abs(np.roll(gaps_b, k) - gaps_a)) < tolerance for k in range(len(a)))
    return any(np.max(curve.arc_distance(a, np.roll(b, k))) < tolerance for k in range(len(a)))


def phi_descent(mesh: DomainMesh, curve: BoundaryCurve, start, solver=None, tolerance=Config.PHI_GRADIENT_TOLERANCE,
                noise_floor=Config.PHI_NOISE_FLOOR, max_steps=Config.PHI_MAX_STEPS) -> PhiConfiguration:
    """
    Armijo projected gradient descent on the boundary torus from one start.

    Stops when |grad| < tolerance, or when no decrease is possible and
    |grad| is below the noise floor. Otherwise the result is flagged as not
    converged.
    """
    solver = solver or get_solver(mesh, curve)
    L = curve.period
    s = np.mod(np.asarray(start, dtype=float), L)
    value = phi_value(mesh, curve, s, solver)
    gradient, step = phi_gradient(mesh, curve, s, solver)
    alpha = 0.1 * L
    converged = False
    iteration = 0
    for iteration in range(1, max_steps + 1):
        norm = float(np.linalg.norm(gradient))
        if norm < tolerance:
            converged = True
            break
        trial_alpha = min(2.0 * alpha, 0.1 * L / norm)
        accepted = False
        for _ in range(30):
            trial = np.mod(s - trial_alpha * gradient, L)
            try:
                trial_value = phi_value(mesh, curve, trial, solver)
            except SingularPointError:
                trial_alpha *= 0.5
                continue
            if trial_value <= value - 1e-4 * trial_alpha * norm ** 2:
                accepted = True
                break
            trial_alpha *= 0.5
        if not accepted:
            converged = norm < noise_floor
            break
        s, value, alpha = trial, trial_value, trial_alpha
        gradient, step = phi_gradient(mesh, curve, s, solver)
    else:
        converged = float(np.linalg.norm(gradient)) < max(tolerance, noise_floor)

    config = phi_configuration(solver, s)
    config.gradient = gradient.tolist()
    config.step = step
    config.iterations = iteration
    config.converged = converged
    if not converged:
        logger.warning(f"phi search did not converge - m: {len(s)}, |grad|: {config.gradient_norm:.3e}, "
                       f"Iterations: {iteration}")
    return config


def phi_critical_search(mesh: DomainMesh, curve: BoundaryCurve, m, starts=4, solver=None, seed=0,
                        tolerance=Config.PHI_GRADIENT_TOLERANCE, noise_floor=Config.PHI_NOISE_FLOOR,
                        max_steps=Config.PHI_MAX_STEPS) -> List[PhiConfiguration]:
    """
    Critical configurations of phi_m from several starts.

    Results closer than 1e-2 L are merged; on the disk configurations are
    compared modulo rotation.
    """
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    start_time = datetime.now()
    solver = solver or get_solver(mesh, curve)
    rotational = curve.name == 'disk'
    found: List[PhiConfiguration] = []
    for start in _start_configurations(curve, m, starts, seed):
        config = phi_descent(mesh, curve, start, solver, tolerance, noise_floor, max_steps)
        if any(_same_configuration(curve, config.s, other.s, 1e-2 * curve.period, rotational) for other in found):
            continue
        found.append(config)
    found.sort(key=lambda c: (not c.converged, c.value))
    duration = (datetime.now() - start_time).total_seconds()
    logger.info(f"phi critical search completed - m: {m}, Starts: {starts}, Distinct: {len(found)}, "
                f"Duration: {duration:.2f}s")
    return found


def write_phi_rows(path, configurations: Sequence[PhiConfiguration]) -> None:
    """CSV rows m, s_1..s_m, phi, |gradient|, iterations."""
    width = max((c.m for c in configurations), default=0)
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(['m', *[f"s_{i + 1}" for i in range(width)], 'phi', 'grad_norm', 'iterations'])
        for config in configurations:
            row = config.csv_row()
            writer.writerow([format_number(v) for v in row])


def disk_regular_exact(x, s_y=0.0, terms=100):
    """
    H(x, y) on the unit disk for y = (cos s_y, sin s_y) from the Bessel series

        G = I0(r) / (2 pi I1(1)) + (1/pi) sum_n In(r) / In'(1) cos(n theta),

    with the log kernel sum_n r^n cos(n theta) / n subtracted termwise.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    r = np.linalg.norm(x, axis=1)
    theta = np.arctan2(x[:, 1], x[:, 0]) - s_y
    n = np.arange(1, terms + 1)
    coefficients = special.iv(n[None, :], r[:, None]) / special.ivp(n, 1.0)[None, :] - r[:, None] ** n[None, :] / n[None, :]
    series = np.sum(coefficients * np.cos(n[None, :] * theta[:, None]), axis=1)
    return special.iv(0, r) / (2 * math.pi * special.iv(1, 1.0)) + INV_PI * series


def disk_green_exact(x, s_y=0.0, terms=100):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.array([math.cos(s_y), math.sin(s_y)])
    return INV_PI * np.log(1.0 / np.linalg.norm(x - y, axis=1)) + disk_regular_exact(x, s_y, terms)


def log_coefficient_fit(fields: Sequence[GreenField], weights=None, center: int = 0, radii=None):
    """
    Least-squares slope a of sum_j c_j G(x, x_j) ~ a log(1/r) + b along the
    inward normal at source `center`; the expansion predicts a = c_center / pi.
    """
    fields = list(fields)
    weights = np.ones(len(fields)) if weights is None else np.asarray(weights, dtype=float)
    radii = np.geomspace(1e-4, 1e-2, 20) if radii is None else np.asarray(radii, dtype=float)
    base = fields[center]
    curve = base.regular.mesh.curve
    normal = curve.normal(base.s_y)
    points = base.source[None, :] - radii[:, None] * normal[None, :]
    total = sum(c * np.atleast_1d(f.value(points)) for c, f in zip(weights, fields))
    design = np.stack([np.log(1.0 / radii), np.ones_like(radii)], axis=1)
    (slope, intercept), *_ = np.linalg.lstsq(design, total, rcond=None)
    return float(slope), float(intercept)


def green_bounds(green: GreenField, points):
    """
    Observed constants of 0 < G <= C1 (|log|x-y|| + 1) and |grad G| <= C2 / |x-y|.
    """
    points = np.atleast_2d(np.asarray(points, dtype=float))
    r = np.linalg.norm(points - green.source, axis=1)
    values = np.atleast_1d(green.value(points))
    grads = np.atleast_2d(green.gradient(points))
    return {
        'min_value': float(np.min(values)),
        'log_constant': float(np.max(values / (np.abs(np.log(r)) + 1.0))),
        'gradient_constant': float(np.max(np.linalg.norm(grads, axis=1) * r)),
    }


def gradient_bound_fit(green: GreenField, points) -> float:
    return green_bounds(green, points)['gradient_constant']


def green_representation(solver: GreenFunctionSolver, flux, s_y, rule: QuadratureRule = DEFAULT_RULE) -> float:
    """
    u(y) = int_dOmega G(x, y) du/dnu(x) dsigma(x) for u with Delta u = u, y = gamma(s_y).

    `flux` maps curve parameters to du/dnu.
    """
    green = solver.field(s_y)
    curve = solver.curve
    zeros = np.zeros(solver.mesh.num_vertices)
    return boundary_integral(solver.mesh, zeros, lambda t, s: green.boundary_value(s, curve) * flux(s),
                             rule=rule, singular_at=s_y)
