"""
Blow-up diagnostics of solved fields: boundary peaks, rescaled profiles,
flux masses, local Pohozaev identities, energy and Green-representation
checks, and the per-p report with its trend summary.
"""

import csv
import json
import logging
import math
import os
import traceback
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from scipy import optimize

from config import Config
from errors import ChartError, DiagnosticsError, LabError, NoConcentrationError, UnresolvedPeakError
from fem_core import DEFAULT_RULE, NodalField, QuadratureRule, boundary_integral, boundary_trace, probe
from geometry import BoundaryCurve, FlatChart
from green_robin import GreenFunctionSolver, phi_gradient
from liouville import CANONICAL, bubble_value, decay_bound_check
from models import SQRT_E, TWO_PI_E, BoundarySolution, CheckResult, CheckStatus, ConcentrationReport, PeakRecord, \
    SolutionBranch, format_number

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * math.pi
_GL_OUTER = np.polynomial.legendre.leggauss(64)
_GL_INNER = np.polynomial.legendre.leggauss(24)


def _field_and_p(u, p=None):
    if isinstance(u, BoundarySolution):
        return u.field, u.p
    p = p if p is not None else u.p
    return u, p


def _log_power_scale(values, p):
    """log(p * v^(p-1)) with -inf for non-positive v."""
    with np.errstate(divide='ignore'):
        return np.where(values > 0, math.log(p) + (p - 1.0) * np.log(np.maximum(values, 1e-300)), -np.inf)


def detect_peaks(u, radius=None, threshold=Config.PEAK_THRESHOLD, max_peaks=Config.PEAK_MAX_COUNT,
                 p=None) -> List[PeakRecord]:
    """
    Boundary local maxima with p u^(p-1) above threshold, greedily separated by
    `radius` in arc length (largest first, ties by curve parameter).

    Parameters
    ----------
        u : BoundarySolution or NodalField
        radius : float, optional
            minimum arc separation, default 0.2 L / max_peaks

    Returns
    -------
        list of PeakRecord ordered by curve parameter
    """
    field_, p = _field_and_p(u, p)
    if p is None:
        raise ValueError("peak detection needs the exponent p")
    mesh = field_.mesh
    curve = mesh.curve
    period = curve.period if curve is not None else mesh.boundary_params[-1, 1] - mesh.boundary_params[0, 0]
    radius = 0.2 * period / max_peaks if radius is None else radius

    values = field_.values[mesh.boundary_vertices]
    params = np.mod(mesh.boundary_vertex_params, period)
    previous = np.roll(values, 1)
    following = np.roll(values, -1)
    is_max = (values > previous) & (values >= following)
    strong = _log_power_scale(values, p) > math.log(threshold)
    candidates = np.nonzero(is_max & strong)[0]
    if not len(candidates):
        raise NoConcentrationError()

    order = sorted(candidates.tolist(), key=lambda k: (-values[k], params[k]))
    chosen = []
    for k in order:
        if len(chosen) >= max_peaks:
            break
        distance = [min(abs(params[k] - params[j]), period - abs(params[k] - params[j])) for j in chosen]
        if all(d >= radius for d in distance):
            chosen.append(k)

    chosen.sort(key=lambda k: params[k])
    peaks = []
    for index, k in enumerate(chosen):
        vertex = mesh.boundary_vertices[k]
        peaks.append(PeakRecord(index=index, s=float(params[k]), point=mesh.vertices[vertex].tolist(),
                                amplitude=float(values[k]), p=float(p)))
    return peaks


@dataclass
class ProfileSamples:
    """Rescaled field w on a half-disk polar grid with the canonical bubble for comparison."""
    t: np.ndarray
    w: np.ndarray
    bubble: np.ndarray
    window: float

    @property
    def error(self):
        return float(np.max(np.abs(self.w - self.bubble)))

    @property
    def max_value(self):
        return float(np.max(self.w))

    def to_dict(self):
        return {'window': self.window, 'error': self.error, 'max_value': self.max_value, 'samples': len(self.w)}


def _peak_chart(field_: NodalField, peak: PeakRecord):
    curve = field_.mesh.curve
    if curve is None:
        raise DiagnosticsError("rescaling needs the boundary curve of the mesh")
    chart = FlatChart(curve, peak.s)
    peak.chart_radius = chart.radius
    return chart


def _check_resolution(field_: NodalField, peak: PeakRecord):
    local_h = float(field_.mesh.local_boundary_size(peak.s))
    if peak.epsilon < 0.25 * local_h:
        raise UnresolvedPeakError(f"peak at s={peak.s:.6g} unresolved (epsilon {peak.epsilon:.3e}, local h "
                                  f"{local_h:.3e}): increase grading or lower p")


def rescaled_values(field_: NodalField, peak: PeakRecord, chart: FlatChart, t):
    """w(t) = (p / u0) (u(Psi^-1(eps t)) - u0) for half-plane points t."""
    t = np.atleast_2d(np.asarray(t, dtype=float))
    eps = peak.epsilon
    values = np.empty(len(t))
    on_boundary = t[:, 1] <= 1e-14
    if np.any(on_boundary):
        s = chart.boundary_parameter(eps * t[on_boundary, 0])
        values[on_boundary], _ = boundary_trace(field_, s)
    if np.any(~on_boundary):
        x = chart.pullback(eps * t[~on_boundary])
        values[~on_boundary], _ = probe(field_, x)
    return (peak.p / peak.amplitude) * (values - peak.amplitude)


def rescale_profile(u, peak: PeakRecord, window=Config.PROFILE_WINDOW, n_radii=17, n_angles=17) -> ProfileSamples:
    """
    Sample the rescaled field on {|t| <= window, t2 >= 0} through the flattening chart.
    """
    field_, _ = _field_and_p(u, peak.p)
    chart = _peak_chart(field_, peak)
    _check_resolution(field_, peak)
    if peak.epsilon * window > chart.radius:
        raise ChartError(f"rescaling window {window} leaves the chart (eps*R={peak.epsilon * window:.3e}, "
                         f"radius {chart.radius:.3e})")
    radii = np.linspace(0.0, window, n_radii)
    angles = np.linspace(0.0, math.pi, n_angles)
    rr, aa = np.meshgrid(radii[1:], angles, indexing='ij')
    t = np.concatenate([[[0.0, 0.0]], np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)])
    t[:, 1] = np.where(np.abs(t[:, 1]) < 1e-14, 0.0, t[:, 1])
    w = rescaled_values(field_, peak, chart, t)
    samples = ProfileSamples(t=t, w=w, bubble=bubble_value(CANONICAL, t), window=window)
    peak.profile_error = samples.error
    return samples


def arc_window(curve: BoundaryCurve, s, r):
    """Parameters (s_lo, s_hi) of D_r(gamma(s)) = {x on the boundary : |x - gamma(s)| < r}."""
    center = curve.point(s)
    sigma = np.linspace(0.0, 0.5 * curve.period, 1025)[1:]
    limits = []
    for sign in (1.0, -1.0):
        distance = np.linalg.norm(curve.point(s + sign * sigma) - center, axis=1) - r
        crossing = np.nonzero(distance >= 0)[0]
        if not len(crossing):
            raise DiagnosticsError(f"radius {r} covers the whole boundary")
        k = crossing[0]
        lo = sigma[k - 1] if k > 0 else 0.0
        root = optimize.brentq(lambda x: float(np.linalg.norm(curve.point(s + sign * x) - center)) - r,
                               lo, sigma[k], xtol=1e-14)
        limits.append(root)
    return s - limits[1], s + limits[0]


@dataclass
class BetaResult:
    beta: float
    c: float
    radius: float
    s_lo: float
    s_hi: float

    def to_dict(self):
        return {'beta': self.beta, 'c': self.c, 'radius': self.radius, 's_lo': self.s_lo, 's_hi': self.s_hi}


def _boundary_power_integral(field_: NodalField, p, s_lo, s_hi, rule):
    return boundary_integral(field_.mesh, field_.values, lambda t, s: np.power(np.maximum(t, 0.0), p),
                             rule=rule, p=p, s_lo=s_lo, s_hi=s_hi)


def default_beta_radius(curve: BoundaryCurve, peak: PeakRecord, peaks: Sequence[PeakRecord] = ()):
    r = Config.BETA_RADIUS_FRACTION * curve.period
    others = [curve.arc_distance(peak.s, other.s) for other in peaks if other.index != peak.index]
    if others:
        r = min(r, 0.45 * min(others))
    return r


def beta_integral(u, peak: PeakRecord, r=None, peaks: Sequence[PeakRecord] = (),
                  rule: QuadratureRule = DEFAULT_RULE) -> BetaResult:
    """
    beta = (p / u0) int_{D_r(y)} u^p dsigma and c = beta u0.

    Raises DiagnosticsError when D_r reaches another peak.
    """
    field_, p = _field_and_p(u, peak.p)
    curve = field_.mesh.curve
    r = default_beta_radius(curve, peak, peaks) if r is None else r
    for other in peaks:
        if other.index == peak.index:
            continue
        if np.linalg.norm(np.asarray(other.point) - np.asarray(peak.point)) < 2.0 * r:
            raise DiagnosticsError(f"radius {r:.4g} around peak {peak.index} overlaps peak {other.index}")
    s_lo, s_hi = arc_window(curve, peak.s, r)
    mass = _boundary_power_integral(field_, p, s_lo, s_hi, rule)
    beta = p / peak.amplitude * mass
    peak.beta = beta
    peak.c = beta * peak.amplitude
    return BetaResult(beta=beta, c=peak.c, radius=r, s_lo=s_lo, s_hi=s_hi)


def c_delta(u, peak: PeakRecord, delta, rule: QuadratureRule = DEFAULT_RULE) -> float:
    """p int_{D_delta(y)} u^p dsigma."""
    field_, p = _field_and_p(u, peak.p)
    s_lo, s_hi = arc_window(field_.mesh.curve, peak.s, delta)
    return p * _boundary_power_integral(field_, p, s_lo, s_hi, rule)


@dataclass
class AnalyticField:
    """Closed-form field: value(points), gradient(points) and optional flux(points, normals)."""
    value: Callable
    gradient: Callable
    flux: Optional[Callable] = None
    curve: Optional[BoundaryCurve] = None


@dataclass
class PohozaevResult:
    lhs: float
    rhs: float
    delta: float

    @property
    def residual(self):
        scale = abs(self.lhs) + abs(self.rhs)
        if scale < 1e-300:
            return 0.0
        return abs(self.lhs - self.rhs) / scale

    def to_dict(self):
        return {'lhs': self.lhs, 'rhs': self.rhs, 'delta': self.delta, 'residual': self.residual}


def _half_ball_limits(chart: FlatChart, delta):
    def gap(y1):
        return math.sqrt(max(delta ** 2 - y1 ** 2, 0.0)) - float(chart.rho(y1))

    limits = []
    for sign in (1.0, -1.0):
        end = sign * delta
        if gap(end) >= 0.0:
            limits.append(end)
        else:
            limits.append(optimize.brentq(gap, 0.0, end, xtol=1e-14))
    return limits[1], limits[0]


def _sine_nodes(lo, hi, rule):
    """Gauss nodes and weights for int_lo^hi f(y) dy with y = m + w sin(theta)."""
    nodes, weights = rule
    theta = 0.5 * math.pi * nodes
    mid, half = 0.5 * (hi + lo), 0.5 * (hi - lo)
    return mid + half * np.sin(theta), 0.5 * math.pi * weights * half * np.cos(theta)


def pohozaev_residual(u, center_s, delta=Config.POHOZAEV_DELTA, p=None, flux: Optional[Callable] = None) -> PohozaevResult:
    """
    Local Pohozaev identity on B = B_delta(x0) intersected with the domain, x0 = gamma(center_s):

        int_B u^2 = int_dB [ (1/2) <x - x0, nu> (|grad u|^2 + u^2) - <x - x0, grad u> du/dnu ].

    The half ball is integrated in flattened coordinates (unit Jacobian).
    On the boundary arc du/dnu is u^p for nodal fields (or `flux`), on the
    circular arc it is the radial derivative.

    Parameters
    ----------
        u : BoundarySolution, NodalField or AnalyticField
        center_s : float
            curve parameter of x0
        delta : float
            ball radius, at most the chart radius
        flux : callable, optional
            (points, normals) -> du/dnu on the boundary arc
    """
    if isinstance(u, AnalyticField):
        analytic, mesh_curve, field_ = u, None, None
    else:
        field_, p = _field_and_p(u, p)
        analytic, mesh_curve = None, field_.mesh.curve
    curve = mesh_curve if analytic is None else analytic.curve
    if curve is None:
        raise DiagnosticsError("Pohozaev check needs the boundary curve")
    chart = FlatChart(curve, center_s)
    if delta > chart.radius:
        raise ChartError(f"delta {delta} exceeds the chart radius {chart.radius:.4g}")
    frame = chart.frame

    def values_and_gradients(points):
        if analytic is not None:
            return np.asarray(analytic.value(points), dtype=float), np.asarray(analytic.gradient(points), dtype=float)
        return probe(field_, points)

    a_lo, a_hi = _half_ball_limits(chart, delta)

    # volume term
    y1, w1 = _sine_nodes(a_lo, a_hi, _GL_OUTER)
    rho = np.asarray(chart.rho(y1), dtype=float)
    top = np.sqrt(np.maximum(delta ** 2 - y1 ** 2, 0.0)) - rho
    inner_nodes, inner_weights = _GL_INNER
    y2 = 0.5 * (inner_nodes[None, :] + 1.0) * top[:, None]
    w2 = 0.5 * inner_weights[None, :] * top[:, None]
    local = np.stack([np.broadcast_to(y1[:, None], y2.shape), y2 + rho[:, None]], axis=-1).reshape(-1, 2)
    vol_values, _ = values_and_gradients(chart.to_global(local))
    lhs = float(np.sum((w1[:, None] * w2).ravel() * vol_values ** 2))

    # boundary arc of the domain
    y1, w1 = _sine_nodes(a_lo, a_hi, _GL_OUTER)
    rho, drho, _ = chart.rho_derivatives(y1)
    stretch = np.sqrt(1.0 + drho ** 2)
    position = np.stack([y1, rho], axis=1)
    normal = np.stack([drho, -np.ones_like(drho)], axis=1) / stretch[:, None]
    tangent = np.stack([np.ones_like(drho), drho], axis=1) / stretch[:, None]
    global_points = chart.to_global(position)
    global_normals = normal @ frame
    if analytic is not None:
        value, grad_global = values_and_gradients(global_points)
        grad = grad_global @ frame.T
        if analytic.flux is not None:
            normal_derivative = np.asarray(analytic.flux(global_points, global_normals), dtype=float)
        elif flux is not None:
            normal_derivative = np.asarray(flux(global_points, global_normals), dtype=float)
        else:
            normal_derivative = np.sum(grad * normal, axis=1)
        tangential = np.sum(grad * tangent, axis=1)
    else:
        s = chart.boundary_parameter(y1)
        value, slope = boundary_trace(field_, s)
        if flux is not None:
            normal_derivative = np.asarray(flux(global_points, global_normals), dtype=float)
        elif p is not None:
            normal_derivative = np.power(np.maximum(value, 0.0), p)
        else:
            raise ValueError("nodal Pohozaev check needs p or an explicit flux")
        tangential = slope
    grad = tangential[:, None] * tangent + normal_derivative[:, None] * normal
    integrand = (0.5 * np.sum(position * normal, axis=1) * (np.sum(grad ** 2, axis=1) + value ** 2)
                 - np.sum(position * grad, axis=1) * normal_derivative)
    rhs = float(np.sum(w1 * stretch * integrand))

    # circular arc inside the domain
    rho_hi = float(chart.rho(a_hi))
    rho_lo = float(chart.rho(a_lo))
    alpha_lo = math.atan2(rho_hi, a_hi)
    alpha_hi = math.atan2(rho_lo, a_lo)
    nodes, weights = _GL_OUTER
    alpha = 0.5 * (alpha_hi + alpha_lo) + 0.5 * (alpha_hi - alpha_lo) * nodes
    wa = 0.5 * (alpha_hi - alpha_lo) * weights
    radial = np.stack([np.cos(alpha), np.sin(alpha)], axis=1)
    value, grad_global = values_and_gradients(chart.to_global(delta * radial))
    grad = np.atleast_2d(grad_global) @ frame.T
    radial_derivative = np.sum(grad * radial, axis=1)
    integrand = 0.5 * delta * (np.sum(grad ** 2, axis=1) + value ** 2) - delta * radial_derivative ** 2
    rhs += float(np.sum(wa * delta * integrand))
    return PohozaevResult(lhs=lhs, rhs=rhs, delta=delta)


def property_checks(u, peaks: Sequence[PeakRecord]) -> Dict:
    """
    separation_ratio: min_{i != j} |y_i - y_j| / eps_i (inf for one peak)
    boundary_ratio:   max_j dist(y_j, boundary) / eps_j
    p4_sup:           sup over vertices of p R(x) u^(p-1)(x), R the distance to the nearest peak
    """
    if not peaks:
        raise NoConcentrationError()
    field_, p = _field_and_p(u, peaks[0].p)
    mesh = field_.mesh
    points = np.array([peak.point for peak in peaks], dtype=float)
    separation = math.inf
    for i, peak in enumerate(peaks):
        for j in range(len(peaks)):
            if i != j:
                separation = min(separation, float(np.linalg.norm(points[i] - points[j])) / peak.epsilon)
    boundary_ratio = 0.0
    if mesh.curve is not None:
        s = mesh.curve.project(points)
        distance = np.linalg.norm(mesh.curve.point(s) - points, axis=1)
        boundary_ratio = float(max(d / peak.epsilon for d, peak in zip(distance, peaks)))
    R = np.min(np.linalg.norm(mesh.vertices[:, None, :] - points[None, :, :], axis=2), axis=1)
    with np.errstate(divide='ignore'):
        log_terms = _log_power_scale(field_.values, p) + np.log(np.maximum(R, 1e-300))
    log_terms = np.where(R > 0, log_terms, -np.inf)
    p4 = float(np.exp(np.max(log_terms)))
    return {'separation_ratio': separation, 'boundary_ratio': boundary_ratio, 'p4_sup': p4}


def energy_check(dirichlet, p, peaks: Sequence[PeakRecord], slack=0.02) -> Dict:
    """p * dirichlet against m 2 pi e and the lower bound 2 pi sum u(y_j)^2."""
    p_energy = p * dirichlet
    target = len(peaks) * TWO_PI_E
    lower = TWO_PI * sum(peak.amplitude ** 2 for peak in peaks)
    return {
        'p_energy': p_energy,
        'target': target,
        'deviation': (p_energy - target) / target if target else math.nan,
        'lower_bound': lower,
        'lower_bound_holds': bool(p_energy >= (1.0 - slack) * lower),
    }


def green_representation_check(u, peak: PeakRecord, solver: GreenFunctionSolver, r=None,
                               peaks: Sequence[PeakRecord] = (), rule: QuadratureRule = DEFAULT_RULE) -> Dict:
    """
    u(y) = int_dOmega G(x, y) u^p(x) dsigma(x) split on D_r(y) into

        A = int H u^p,  B = -(1/pi) int log(|x - y| / eps) u^p,  C = -(1/pi) log(eps) int u^p,

    plus the remainder outside D_r. log(eps) = -(p - 1) log u(y) - log p gives the
    implied log m = (pi p (u - A - B - outside) / (beta u) - log p) / (p - 1).
    """
    field_, p = _field_and_p(u, peak.p)
    mesh, curve = field_.mesh, field_.mesh.curve
    r = default_beta_radius(curve, peak, peaks) if r is None else r
    s_lo, s_hi = arc_window(curve, peak.s, r)
    green = solver.field(peak.s)
    y = np.asarray(peak.point, dtype=float)
    log_eps = peak.log_epsilon

    def power(t):
        return np.power(np.maximum(t, 0.0), p)

    def regular(s):
        values, _ = boundary_trace(green.regular, s)
        return values

    A = boundary_integral(mesh, field_.values, lambda t, s: regular(s) * power(t), rule=rule, p=p,
                          s_lo=s_lo, s_hi=s_hi)
    B = -boundary_integral(mesh, field_.values,
                           lambda t, s: (np.log(np.linalg.norm(curve.point(s) - y, axis=-1)) - log_eps) * power(t),
                           rule=rule, p=p, s_lo=s_lo, s_hi=s_hi, singular_at=peak.s) / math.pi
    mass = _boundary_power_integral(field_, p, s_lo, s_hi, rule)
    C = -log_eps * mass / math.pi
    outside = boundary_integral(mesh, field_.values, lambda t, s: green.boundary_value(s, curve) * power(t),
                                rule=rule, p=p, s_lo=s_hi, s_hi=s_lo + curve.period)
    beta = p * mass / peak.amplitude
    total = A + B + C + outside
    log_m = (math.pi * p * (peak.amplitude - A - B - outside) / (beta * peak.amplitude) - math.log(p)) / (p - 1.0) \
        if beta > 0 and p > 1 else math.nan
    return {
        'index': peak.index,
        'A': A,
        'B': B,
        'C': C,
        'outside': outside,
        'value': peak.amplitude,
        'reconstruction': total,
        'local_error': abs(peak.amplitude - (A + B + C)) / peak.amplitude,
        'error': abs(peak.amplitude - total) / peak.amplitude,
        'log_m': log_m,
    }


def far_field_check(u, peaks: Sequence[PeakRecord], solver: GreenFunctionSolver, delta=Config.FAR_FIELD_DELTA,
                    rule: QuadratureRule = DEFAULT_RULE) -> Dict:
    """
    p u against sum_j c_j G(., y_j) away from the peaks, c_j = p int_{D_delta(y_j)} u^p.

    Values are compared at the vertices and gradients at the triangle
    centroids with |x - y_j| >= delta for every j; delta is capped at 0.45 of
    the smallest peak spacing. Errors are relative to the sup of the limit.
    """
    if not peaks:
        raise NoConcentrationError()
    field_, p = _field_and_p(u, peaks[0].p)
    mesh, curve = field_.mesh, field_.mesh.curve
    points = np.array([peak.point for peak in peaks], dtype=float)
    spacing = [float(np.linalg.norm(a - b)) for i, a in enumerate(points) for b in points[i + 1:]]
    if spacing:
        delta = min(delta, 0.45 * min(spacing))

    def outside(x):
        return np.min(np.linalg.norm(x[:, None, :] - points[None, :, :], axis=2), axis=1) >= delta

    vertices = np.nonzero(outside(mesh.vertices))[0]
    centroids = mesh.centroids()
    triangles = np.nonzero(outside(centroids))[0]
    if not len(vertices) or not len(triangles):
        raise DiagnosticsError(f"no mesh points at distance {delta:.4g} from the peaks")

    masses = [c_delta(field_, peak, delta, rule) for peak in peaks]
    limit = np.zeros(len(vertices))
    limit_gradient = np.zeros((len(triangles), 2))
    for peak, c in zip(peaks, masses):
        green = solver.field(peak.s)
        limit += c * green.value(mesh.vertices[vertices])
        limit_gradient += c * green.gradient(centroids[triangles])
    scaled = p * field_.values[vertices]
    _, gradient = probe(field_, centroids[triangles])
    scale = max(float(np.max(np.abs(limit))), 1e-300)
    gradient_scale = max(float(np.max(np.linalg.norm(limit_gradient, axis=1))), 1e-300)
    return {
        'delta': delta,
        'c': masses,
        'vertices': int(len(vertices)),
        'error': float(np.max(np.abs(scaled - limit))) / scale,
        'gradient_error': float(np.max(np.linalg.norm(p * gradient - limit_gradient, axis=1))) / gradient_scale,
        'sup_far': float(np.max(field_.values[vertices])),
    }


@dataclass
class Extrapolation:
    limit: float
    coefficients: List[float]
    ps: List[float]

    def to_dict(self):
        return {'limit': self.limit, 'coefficients': self.coefficients, 'ps': self.ps}


def extrapolate(ps: Sequence[float], values: Sequence[float]) -> Extrapolation:
    """
    Least-squares fit of a + b/p + c log(p)/p on the three largest p; the
    limit is a. Fewer points drop the log term, then the 1/p term.
    """
    pairs = sorted((float(p), float(v)) for p, v in zip(ps, values) if v is not None and np.isfinite(v))
    if not pairs:
        raise ValueError("nothing to extrapolate")
    pairs = pairs[-3:]
    p = np.array([a for a, _ in pairs])
    v = np.array([b for _, b in pairs])
    columns = [np.ones_like(p), 1.0 / p, np.log(p) / p][:len(p)]
    design = np.stack(columns, axis=1)
    coefficients, *_ = np.linalg.lstsq(design, v, rcond=None)
    return Extrapolation(limit=float(coefficients[0]), coefficients=coefficients.tolist(), ps=p.tolist())


class GoldenStore:
    """Pinned regression values: the first run records, later runs compare."""

    def __init__(self, path):
        self.path = Path(path)
        self.values: Dict[str, float] = {}
        self.dirty = False
        if self.path.exists():
            with open(self.path, 'r', encoding='utf-8') as handle:
                self.values = json.load(handle)

    def check(self, name, value, rel_tol=1e-6) -> CheckResult:
        if value is None or not np.isfinite(value):
            return CheckResult(name=f"golden:{name}", status=CheckStatus.SKIPPED, value=value,
                               message='value not available')
        if name not in self.values:
            self.values[name] = float(value)
            self.dirty = True
            return CheckResult(name=f"golden:{name}", status=CheckStatus.PASSED, value=value, target=value,
                               message='recorded')
        pinned = self.values[name]
        ok = abs(value - pinned) <= rel_tol * max(abs(pinned), 1e-300)
        return CheckResult(name=f"golden:{name}", status=CheckStatus.PASSED if ok else CheckStatus.FAILED,
                           value=value, target=pinned, message='' if ok else 'differs from pinned value')

    def save(self):
        if not self.dirty:
            return
        os.makedirs(self.path.parent or Path('.'), exist_ok=True)
        with open(self.path, 'w', encoding='utf-8') as handle:
            json.dump(self.values, handle, indent=2, sort_keys=True)
        self.dirty = False


def _verdict(name, value, target, rel_tol, message=''):
    if value is None or not np.isfinite(value):
        return CheckResult(name=name, status=CheckStatus.SKIPPED, value=value, target=target, message='not available')
    ok = abs(value - target) <= rel_tol * abs(target)
    return CheckResult(name=name, status=CheckStatus.PASSED if ok else CheckStatus.FAILED, value=value,
                       target=target, message=message, details={'rel_tol': rel_tol})


@dataclass
class BranchReport:
    reports: List[ConcentrationReport] = field(default_factory=list)
    trend: Dict = field(default_factory=dict)
    verdicts: Dict[str, CheckResult] = field(default_factory=dict)

    @property
    def max_peaks(self):
        return max((report.m for report in self.reports), default=0)

    def to_dict(self):
        return {
            'reports': [report.to_dict() for report in self.reports],
            'trend': self.trend,
            'verdicts': {name: verdict.to_dict() for name, verdict in self.verdicts.items()},
        }


class ReportBuilder:
    """Runs every diagnostic per p; a failing check is recorded on the report and never aborts it."""

    def __init__(self, threshold=Config.PEAK_THRESHOLD, max_peaks=Config.PEAK_MAX_COUNT, beta_radius=None,
                 profile_window=Config.PROFILE_WINDOW, pohozaev_delta=Config.POHOZAEV_DELTA, decay_gamma=1.0,
                 green_solver: Optional[GreenFunctionSolver] = None, golden: Optional[GoldenStore] = None,
                 rule: QuadratureRule = DEFAULT_RULE):
        logger.info("Initializing ReportBuilder...")
        self.threshold = threshold
        self.max_peaks = max_peaks
        self.beta_radius = beta_radius
        self.profile_window = profile_window
        self.pohozaev_delta = pohozaev_delta
        self.decay_gamma = decay_gamma
        self.green_solver = green_solver
        self.golden = golden
        self.rule = rule
        logger.info("ReportBuilder initialization completed")

    @classmethod
    def from_run_config(cls, run_config, green_solver=None) -> 'ReportBuilder':
        section = run_config.diagnostics
        golden = GoldenStore(section.golden) if section.golden else None
        return cls(threshold=section.threshold, max_peaks=section.max_peaks, beta_radius=section.beta_radius,
                   profile_window=section.profile_window, pohozaev_delta=section.pohozaev_delta,
                   decay_gamma=section.decay_gamma, green_solver=green_solver, golden=golden)

    def _guarded(self, report: ConcentrationReport, name, action):
        try:
            return action()
        except (LabError, ValueError, ArithmeticError) as e:
            logger.error(f"Diagnostic '{name}' failed at p={report.p} - Error: {str(e)}")
            logger.error(f"Full traceback: {traceback.format_exc()}")
            report.add_check(CheckResult(name=name, status=CheckStatus.ERROR, message=str(e)))
            return None

    def report(self, solution: BoundarySolution, dirichlet: float) -> ConcentrationReport:
        p = solution.p
        field_ = solution.field
        curve = field_.mesh.curve
        report = ConcentrationReport(p=p, sup_norm=solution.sup_norm, dirichlet=dirichlet)
        try:
            peaks = detect_peaks(solution, radius=0.2 * curve.period / self.max_peaks,
                                 threshold=self.threshold, max_peaks=self.max_peaks)
        except NoConcentrationError as e:
            report.message = str(e)
            report.add_check(CheckResult(name='peaks', status=CheckStatus.FAILED, value=0, message=str(e)))
            logger.warning(f"No concentration detected - p: {p}")
            return report
        report.peaks = peaks
        report.add_check(CheckResult(name='peaks', status=CheckStatus.PASSED, value=len(peaks)))
        report.add_check(_verdict('sup_norm', report.sup_norm, SQRT_E, 0.15))

        pohozaev = []
        for peak in peaks:
            beta = self._guarded(report, f"beta_{peak.index + 1}",
                                 lambda: beta_integral(solution, peak, self.beta_radius, peaks, self.rule))
            if beta is not None:
                report.add_check(_verdict(f"beta_{peak.index + 1}", beta.beta, TWO_PI, Config.BETA_TOLERANCE))
            samples = self._guarded(report, f"profile_{peak.index + 1}",
                                    lambda: rescale_profile(solution, peak, self.profile_window))
            if samples is not None:
                report.add_check(CheckResult(name=f"maximality_{peak.index + 1}",
                                             status=CheckStatus.PASSED if samples.max_value <= 1e-8
                                             else CheckStatus.FAILED, value=samples.max_value, target=0.0))
                self._guarded(report, f"decay_{peak.index + 1}", lambda: self._decay(report, solution, peak))
            result = self._guarded(report, f"pohozaev_{peak.index + 1}",
                                   lambda: pohozaev_residual(solution, peak.s, self._pohozaev_delta(curve, peak, peaks)))
            if result is not None:
                pohozaev.append(result.residual)
                report.add_check(CheckResult(name=f"pohozaev_{peak.index + 1}",
                                             status=CheckStatus.PASSED if result.residual <= Config.POHOZAEV_TOLERANCE
                                             else CheckStatus.FAILED, value=result.residual, target=0.0,
                                             details=result.to_dict()))
            if self.green_solver is not None:
                terms = self._guarded(report, f"green_{peak.index + 1}",
                                      lambda: green_representation_check(solution, peak, self.green_solver,
                                                                         self.beta_radius, peaks, self.rule))
                if terms is not None:
                    report.green_terms.append(terms)
        if pohozaev:
            report.pohozaev_residual = max(pohozaev)

        properties = self._guarded(report, 'properties', lambda: property_checks(solution, peaks))
        if properties is not None:
            report.p4_sup = properties['p4_sup']
            report.add_check(CheckResult(name='properties', status=CheckStatus.PASSED,
                                         value=properties['p4_sup'], details=properties))
        energy = energy_check(dirichlet, p, peaks)
        report.add_check(CheckResult(name='energy_lower_bound',
                                     status=CheckStatus.PASSED if energy['lower_bound_holds'] else CheckStatus.FAILED,
                                     value=energy['p_energy'], target=energy['lower_bound'], details=energy))
        report.add_check(_verdict('energy_quantization', energy['p_energy'], energy['target'], 0.15))

        if self.green_solver is not None:
            def phi_norm():
                gradient, _ = phi_gradient(field_.mesh, curve, [peak.s for peak in peaks], self.green_solver)
                return float(np.linalg.norm(gradient))
            report.phi_grad_norm = self._guarded(report, 'phi_gradient', phi_norm)
            far = self._guarded(report, 'far_field',
                                lambda: far_field_check(solution, peaks, self.green_solver, rule=self.rule))
            if far is not None:
                report.add_check(CheckResult(name='far_field',
                                             status=CheckStatus.PASSED if far['error'] <= Config.FAR_FIELD_TOLERANCE
                                             else CheckStatus.FAILED, value=far['error'], target=0.0, details=far))

        if self.golden is not None:
            for name, value in (('sup_norm', report.sup_norm), ('p_energy', report.p_energy),
                                ('p4_sup', report.p4_sup), ('pohozaev', report.pohozaev_residual)):
                report.add_check(self.golden.check(f"p{p:g}:{name}", value))
        return report

    def _pohozaev_delta(self, curve, peak, peaks):
        delta = min(self.pohozaev_delta, FlatChart(curve, peak.s).radius)
        others = [curve.arc_distance(peak.s, other.s) for other in peaks if other.index != peak.index]
        if others:
            delta = min(delta, 0.45 * min(others))
        return delta

    def _decay(self, report, solution, peak):
        chart = FlatChart(solution.field.mesh.curve, peak.s)
        r_max = min(chart.radius, Config.BETA_RADIUS_FRACTION * chart.curve.period) / peak.epsilon
        r_min = min(4.0, 0.5 * r_max)
        verdict = decay_bound_check(self.decay_gamma, r_min, r_max,
                                    sampler=lambda z: rescaled_values(solution.field, peak, chart, z))
        report.add_check(CheckResult(name=f"decay_{peak.index + 1}",
                                     status=CheckStatus.PASSED if verdict.holds else CheckStatus.FAILED,
                                     value=verdict.constant, details=verdict.to_dict()))
        return verdict

    def build(self, branch: SolutionBranch) -> BranchReport:
        if not len(branch):
            raise DiagnosticsError("cannot report on an empty branch")
        start_time = datetime.now()
        logger.info("=" * 60)
        logger.info(f"Building concentration report - Schedule: {branch.schedule}")
        result = BranchReport()
        for entry in branch:
            result.reports.append(self.report(entry.solution, entry.energy.dirichlet))
        result.trend, result.verdicts = trend_summary(result.reports)
        if self.golden is not None:
            self.golden.save()
        duration = (datetime.now() - start_time).total_seconds()
        logger.info(f"Concentration report completed - Reports: {len(result.reports)}, Duration: {duration:.2f}s")
        return result


def trend_summary(reports: Sequence[ConcentrationReport]):
    """Extrapolated limits in 1/p of the sup norm, p * energy, beta_1 and c_1 with their verdicts."""
    concentrated = [report for report in reports if report.m > 0]
    trend, verdicts = {}, {}
    if not concentrated:
        return trend, verdicts
    m = concentrated[-1].m
    series = {
        'sup_norm': [(r.p, r.sup_norm) for r in concentrated],
        'p_energy': [(r.p, r.p_energy) for r in concentrated if r.m == m],
        'beta_1': [(r.p, r.peaks[0].beta) for r in concentrated],
        'c_1': [(r.p, r.peaks[0].c) for r in concentrated],
    }
    targets = {'sup_norm': (SQRT_E, 0.03), 'p_energy': (m * TWO_PI_E, 0.05), 'beta_1': (TWO_PI, 0.10),
               'c_1': (TWO_PI * SQRT_E, 0.08)}
    for name, pairs in series.items():
        pairs = [(p, v) for p, v in pairs if v is not None]
        if not pairs:
            continue
        fit = extrapolate([p for p, _ in pairs], [v for _, v in pairs])
        trend[name] = fit.to_dict()
        target, tol = targets[name]
        verdicts[name] = _verdict(f"limit:{name}", fit.limit, target, tol)
    return trend, verdicts


def build_report(branch: SolutionBranch, run_config=None, green_solver=None) -> BranchReport:
    builder = ReportBuilder.from_run_config(run_config, green_solver) if run_config is not None \
        else ReportBuilder(green_solver=green_solver)
    return builder.build(branch)


def report_header(max_peaks):
    return (['p', 'm', 'sup_norm', 'p_energy'] + [f"beta_{i + 1}" for i in range(max_peaks)]
            + [f"c_{i + 1}" for i in range(max_peaks)] + ['pohozaev_res', 'p4_sup', 'phi_grad_norm'])


def write_report_csv(result: BranchReport, path) -> None:
    width = max(result.max_peaks, 1)
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        writer = csv.writer(handle, lineterminator='\n')
        writer.writerow(report_header(width))
        for report in result.reports:
            writer.writerow([format_number(v) for v in report.csv_row(width)])


def write_report_json(result: BranchReport, path) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        json.dump(result.to_dict(), handle, indent=2, sort_keys=True)


def write_plot_columns(result: BranchReport, directory) -> List[Path]:
    """Whitespace-separated column files for gnuplot with the limit constants as extra columns."""
    directory = Path(directory)
    os.makedirs(directory, exist_ok=True)
    files = []
    sup_path = directory / 'sup_norm.dat'
    with open(sup_path, 'w', encoding='utf-8') as handle:
        handle.write("# p sup_norm sqrt_e\n")
        for report in result.reports:
            handle.write(f"{format_number(report.p)} {format_number(report.sup_norm)} {format_number(SQRT_E)}\n")
    files.append(sup_path)
    energy_path = directory / 'p_energy.dat'
    with open(energy_path, 'w', encoding='utf-8') as handle:
        handle.write("# p p_energy m_two_pi_e\n")
        for report in result.reports:
            handle.write(f"{format_number(report.p)} {format_number(report.p_energy)} "
                         f"{format_number(report.target_energy)}\n")
    files.append(energy_path)
    return files
