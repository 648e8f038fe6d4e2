"""
Half-plane Liouville bubbles

    U(t) = log(2 eta2 / ((t1 - eta1)^2 + (t2 + eta2)^2)),   t2 >= 0,

harmonic in the upper half-plane with dU/dnu = e^U on {t2 = 0} (outer normal
-e2) and boundary mass 2 pi. The canonical bubble is (eta1, eta2) = (0, 2).
"""

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class BubbleProfile:
    eta1: float = 0.0
    eta2: float = 2.0

    def __post_init__(self):
        if not self.eta2 > 0:
            raise ValueError(f"eta2 must be positive, got {self.eta2}")

    def to_dict(self):
        return {'eta1': self.eta1, 'eta2': self.eta2}


CANONICAL = BubbleProfile()


def _denominator(profile, t):
    return (t[..., 0] - profile.eta1) ** 2 + (t[..., 1] + profile.eta2) ** 2


def bubble_value(profile: BubbleProfile, t):
    t = np.asarray(t, dtype=float)
    return np.log(2.0 * profile.eta2 / _denominator(profile, t))


def bubble_eval(profile: BubbleProfile, t):
    """
    Value and gradient of U at t (a point or an array of points with t2 >= 0).

    Returns
    -------
        value, gradient
    """
    t = np.asarray(t, dtype=float)
    if np.any(t[..., 1] < 0):
        raise ValueError("bubble is evaluated on the closed upper half-plane only")
    d = _denominator(profile, t)
    value = np.log(2.0 * profile.eta2 / d)
    gradient = np.stack([-2.0 * (t[..., 0] - profile.eta1) / d,
                         -2.0 * (t[..., 1] + profile.eta2) / d], axis=-1)
    if t.ndim == 1:
        return float(value), gradient
    return value, gradient


def boundary_mass(profile: BubbleProfile, R=math.inf):
    """Closed form of int_{-R}^{R} e^{U(t, 0)} dt; R = inf gives 2 pi."""
    if math.isinf(R):
        return 2.0 * math.pi
    if not R > 0:
        raise ValueError(f"truncation radius must be positive, got {R}")
    e1, e2 = profile.eta1, profile.eta2
    return 2.0 * (math.atan((R - e1) / e2) - math.atan((-R - e1) / e2))


def boundary_mass_numeric(profile: BubbleProfile, R=math.inf):
    """Adaptive quadrature of the same integral."""
    def density(t):
        return math.exp(float(bubble_value(profile, np.array([t, 0.0]))))
    if math.isinf(R):
        value, _ = integrate.quad(density, -math.inf, math.inf, epsabs=1e-13, epsrel=1e-13, limit=400)
        return value
    points = [profile.eta1] if -R < profile.eta1 < R else None
    value, _ = integrate.quad(density, -R, R, epsabs=1e-13, epsrel=1e-13, limit=400, points=points)
    return value


def radial_profile(profile: BubbleProfile, radii, angles=65):
    """Maximum and minimum of U over half-circles |t| = r, one row per radius."""
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    theta = np.linspace(0.0, math.pi, angles)
    t = radii[:, None, None] * np.stack([np.cos(theta), np.sin(theta)], axis=-1)[None, :, :]
    values = bubble_value(profile, t)
    return values.max(axis=1), values.min(axis=1)


def boundary_log_moment(profile: BubbleProfile, R=math.inf):
    """
    int_{-R}^{R} log|t| e^{U(t, 0)} dt.

    For eta1 = 0 the full-line value is 2 pi log(eta2).
    """
    if math.isinf(R) and profile.eta1 == 0.0:
        return 2.0 * math.pi * math.log(profile.eta2)

    def density(t):
        return math.log(abs(t)) * math.exp(float(bubble_value(profile, np.array([t, 0.0]))))
    return sum(_half_line_integral(density, sign, R, profile) for sign in (1.0, -1.0))


def _half_line_integral(density, sign, R, profile):
    """int_0^R density(sign t) dt, split at decades and at |eta1|."""
    def mirrored(t):
        return density(sign * t)
    if math.isinf(R):
        value, _ = integrate.quad(mirrored, 0.0, math.inf, limit=400)
        return value
    breaks = {0.0, float(R)} | {float(b) for b in 10.0 ** np.arange(-2, 16) if b < R}
    if 0.0 < abs(profile.eta1) < R:
        breaks.add(abs(profile.eta1))
    breaks = sorted(breaks)
    return sum(integrate.quad(mirrored, a, b, limit=400)[0] for a, b in zip(breaks[:-1], breaks[1:]))


@dataclass
class LiouvilleResidual:
    interior_max: float
    boundary_max: float

    def to_dict(self):
        return {'interior_max': self.interior_max, 'boundary_max': self.boundary_max}


def liouville_residual(profile: BubbleProfile, interior_points=None, boundary_points=None, step=1e-4):
    """
    Residuals of Delta U = 0 (five-point Laplacian with the given step) at
    interior samples and of -dU/dt2 = e^U (exact derivative) at boundary
    abscissae.
    """
    interior_max = 0.0
    if interior_points is not None and len(np.atleast_2d(interior_points)):
        t = np.atleast_2d(np.asarray(interior_points, dtype=float))
        if np.any(t[:, 1] < 0):
            raise ValueError("interior samples must satisfy t2 >= 0")
        e1 = np.array([step, 0.0])
        e2 = np.array([0.0, step])
        laplacian = (bubble_value(profile, t + e1) + bubble_value(profile, t - e1)
                     + bubble_value(profile, t + e2) + bubble_value(profile, t - e2)
                     - 4.0 * bubble_value(profile, t)) / step ** 2
        interior_max = float(np.max(np.abs(laplacian)))

    boundary_max = 0.0
    if boundary_points is not None and len(np.atleast_1d(boundary_points)):
        t1 = np.atleast_1d(np.asarray(boundary_points, dtype=float))
        t = np.stack([t1, np.zeros_like(t1)], axis=1)
        value, gradient = bubble_eval(profile, t)
        boundary_max = float(np.max(np.abs(-gradient[:, 1] - np.exp(value))))
    return LiouvilleResidual(interior_max=interior_max, boundary_max=boundary_max)


@dataclass
class DecayVerdict:
    holds: bool
    constant: float
    gamma: float
    r_min: float
    r_max: float
    inner_excess: float
    outer_excess: float

    def to_dict(self):
        return {
            'holds': self.holds,
            'constant': self.constant,
            'gamma': self.gamma,
            'r_min': self.r_min,
            'r_max': self.r_max,
            'inner_excess': self.inner_excess,
            'outer_excess': self.outer_excess,
        }


def half_plane_polar_grid(r_min, r_max, n_radii=64, n_angles=33):
    radii = np.geomspace(r_min, r_max, n_radii)
    angles = np.linspace(0.0, math.pi, n_angles)
    rr, aa = np.meshgrid(radii, angles, indexing='ij')
    return np.stack([rr * np.cos(aa), rr * np.sin(aa)], axis=-1).reshape(-1, 2)


def decay_bound_check(gamma, r_min, r_max, profile: Optional[BubbleProfile] = CANONICAL,
                      sampler: Optional[Callable] = None, samples=None, tolerance=1e-10) -> DecayVerdict:
    """
    Compare a half-plane function f with (2 - gamma) log(1/|z|) for r_min <= |z| <= r_max.

    The smallest admissible constant C = sup (f(z) - (2 - gamma) log(1/|z|))
    is reported. The bound holds when the excess on the outer half of the
    range (|z| >= sqrt(r_min r_max)) never exceeds the excess on the inner
    part, so the estimate does not deteriorate as |z| grows.

    Parameters
    ----------
        gamma : float in (0, 2)
        r_min, r_max : float
            radial window
        profile : BubbleProfile
            used when sampler is None
        sampler : callable, optional
            z -> f(z) for an (n, 2) array, e.g. a rescaled finite-element field
        samples : array, optional
            sample points; defaults to a polar grid on the half-annulus
    """
    if not 0 < gamma < 2:
        raise ValueError(f"gamma must lie in (0, 2), got {gamma}")
    if not 0 < r_min < r_max:
        raise ValueError(f"radial window must satisfy 0 < r_min < r_max, got {r_min}, {r_max}")
    z = half_plane_polar_grid(r_min, r_max) if samples is None else np.atleast_2d(samples)
    radius = np.linalg.norm(z, axis=1)
    keep = (radius >= r_min * (1 - 1e-12)) & (radius <= r_max * (1 + 1e-12))
    z, radius = z[keep], radius[keep]
    values = sampler(z) if sampler is not None else bubble_value(profile, z)
    excess = values - (2.0 - gamma) * np.log(1.0 / radius)
    split = math.sqrt(r_min * r_max)
    inner = excess[radius < split]
    outer = excess[radius >= split]
    inner_max = float(np.max(inner)) if len(inner) else -math.inf
    outer_max = float(np.max(outer)) if len(outer) else -math.inf
    constant = float(np.max(excess))
    return DecayVerdict(holds=bool(np.isfinite(constant) and outer_max <= inner_max + tolerance),
                        constant=constant, gamma=gamma, r_min=r_min, r_max=r_max,
                        inner_excess=inner_max, outer_excess=outer_max)
