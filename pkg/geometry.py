"""
Smooth planar domains described by their boundary curve.

BoundaryCurve gives an arc-length parametrization s -> gamma(s) of a closed
counterclockwise curve, DomainMesh is a boundary-conforming P1 triangulation
whose boundary edges keep their curve parameters, and FlatChart is the local
map Psi(x) = (x1, x2 - rho(x1)) that straightens the boundary near a point.
"""

import logging
import math
from dataclasses import dataclass, field
from datetime import datetime
from typing import List, Optional, Tuple

import numpy as np
import shapely
from scipy import integrate
from scipy.spatial import Delaunay, cKDTree

from config import Config
from errors import ChartError, GeometryError, MeshingError

logger = logging.getLogger(__name__)

_TABLE_PANELS = 2048
_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(10)


def _disk_theta(radius):
    def evaluate(theta):
        c, s = np.cos(theta), np.sin(theta)
        xy = radius * np.stack([c, s], axis=-1)
        d1 = radius * np.stack([-s, c], axis=-1)
        d2 = radius * np.stack([-c, -s], axis=-1)
        return xy, d1, d2
    return evaluate


def _ellipse_theta(a, b):
    def evaluate(theta):
        c, s = np.cos(theta), np.sin(theta)
        xy = np.stack([a * c, b * s], axis=-1)
        d1 = np.stack([-a * s, b * c], axis=-1)
        d2 = np.stack([-a * c, -b * s], axis=-1)
        return xy, d1, d2
    return evaluate


def _star_theta(radius, amplitude, lobes):
    def evaluate(theta):
        c, s = np.cos(theta), np.sin(theta)
        r = radius * (1.0 + amplitude * np.cos(lobes * theta))
        r1 = -radius * amplitude * lobes * np.sin(lobes * theta)
        r2 = -radius * amplitude * lobes ** 2 * np.cos(lobes * theta)
        xy = np.stack([r * c, r * s], axis=-1)
        d1 = np.stack([r1 * c - r * s, r1 * s + r * c], axis=-1)
        d2 = np.stack([r2 * c - 2 * r1 * s - r * c, r2 * s + 2 * r1 * c - r * s], axis=-1)
        return xy, d1, d2
    return evaluate


class BoundaryCurve:
    """
    Closed counterclockwise C2 curve parametrized by arc length.

    Parameters
    ----------
        name : str
            preset name used for serialization
        params : dict
            shape parameters of the preset
        theta_map : callable
            theta -> (point, first derivative, second derivative) on [0, 2 pi)
        exact_arclength : float, optional
            radius of a circle; when given theta = s / radius is used directly
    """

    def __init__(self, name, params, theta_map, exact_arclength=None):
        self.name = name
        self.params = dict(params)
        self._theta_map = theta_map
        self._radius = exact_arclength

        if exact_arclength is not None:
            self.period = 2.0 * math.pi * exact_arclength
            self._theta_grid = None
            self._cumulative = None
            return

        length, abserr = integrate.quad(self._speed, 0.0, 2.0 * math.pi,
                                        epsabs=1e-13, epsrel=1e-13, limit=400)
        if abserr > 1e-10:
            raise GeometryError(f"Arc length quadrature did not reach 1e-10 for {name}: error {abserr:.2e}")

        grid = np.linspace(0.0, 2.0 * math.pi, _TABLE_PANELS + 1)
        cumulative = np.zeros_like(grid)
        cumulative[1:] = np.cumsum(self._panel_lengths(grid[:-1], grid[1:]))
        self._theta_grid = grid
        self._cumulative = cumulative
        self.period = float(length)

        if abs(cumulative[-1] - length) > 1e-9:
            raise GeometryError(f"Arc length table inconsistent for {name}: {cumulative[-1]} vs {length}")

    def _speed(self, theta):
        _, d1, _ = self._theta_map(np.asarray(theta, dtype=float))
        return np.linalg.norm(d1, axis=-1)

    def _panel_lengths(self, lo, hi):
        half = 0.5 * (hi - lo)
        mid = 0.5 * (hi + lo)
        nodes = mid[:, None] + half[:, None] * _GL_NODES[None, :]
        return half * (self._speed(nodes) @ _GL_WEIGHTS)

    def theta_of(self, s):
        """Curve parameter theta for arc length s (any real s, taken modulo the period)."""
        s = np.mod(np.asarray(s, dtype=float), self.period)
        if self._radius is not None:
            return s / self._radius

        k = np.clip(np.searchsorted(self._cumulative, s, side='right') - 1, 0, _TABLE_PANELS - 1)
        base_theta = self._theta_grid[k]
        base_s = self._cumulative[k]
        theta = base_theta + (s - base_s) / self._speed(base_theta)
        for _ in range(6):
            partial = self._panel_lengths(np.atleast_1d(base_theta), np.atleast_1d(theta)).reshape(np.shape(theta))
            step = (base_s + partial - s) / self._speed(theta)
            theta = theta - step
            if np.max(np.abs(step)) < 1e-15:
                break
        return theta

    def _evaluate(self, s):
        return self._theta_map(self.theta_of(s))

    def point(self, s):
        xy, _, _ = self._evaluate(s)
        return xy

    def tangent(self, s):
        _, d1, _ = self._evaluate(s)
        return d1 / np.linalg.norm(d1, axis=-1)[..., None]

    def normal(self, s):
        """Outward unit normal (tangent rotated clockwise)."""
        t = self.tangent(s)
        return np.stack([t[..., 1], -t[..., 0]], axis=-1)

    def curvature(self, s):
        _, d1, d2 = self._evaluate(s)
        speed = np.linalg.norm(d1, axis=-1)
        return (d1[..., 0] * d2[..., 1] - d1[..., 1] * d2[..., 0]) / speed ** 3

    def speed(self, s, step=1e-5):
        """|gamma'(s)| by central differences; 1 for an arc-length parametrization."""
        s = np.asarray(s, dtype=float)
        return np.linalg.norm(self.point(s + step) - self.point(s - step), axis=-1) / (2 * step)

    def arc_distance(self, s1, s2):
        d = np.mod(np.abs(np.asarray(s1, dtype=float) - np.asarray(s2, dtype=float)), self.period)
        return np.minimum(d, self.period - d)

    def sample(self, n):
        s = np.arange(n) * (self.period / n)
        return s, self.point(s)

    def signed_area(self, n=2048):
        _, xy = self.sample(n)
        x, y = xy[:, 0], xy[:, 1]
        return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))

    def project(self, points, samples=4096):
        """Arc-length parameter of the nearest curve point for each row of points."""
        points = np.atleast_2d(np.asarray(points, dtype=float))
        grid_s, grid_xy = self.sample(samples)
        tree = cKDTree(grid_xy)
        _, idx = tree.query(points)
        s = grid_s[idx]
        for _ in range(20):
            offset = self.point(s) - points
            tau = self.tangent(s)
            nu = self.normal(s)
            f = np.sum(offset * tau, axis=1)
            df = 1.0 - self.curvature(s) * np.sum(offset * nu, axis=1)
            df = np.where(np.abs(df) < 1e-3, 1.0, df)
            step = np.clip(f / df, -self.period / samples, self.period / samples)
            s = s - step
            if np.max(np.abs(step)) < 1e-14:
                break
        return np.mod(s, self.period)

    def to_dict(self):
        return {'name': self.name, 'params': self.params, 'period': self.period}


def make_curve(name: str, **params) -> BoundaryCurve:
    """
    Build a preset boundary curve.

    Parameters
    ----------
        name : str
            'disk' (radius), 'ellipse' (a, b) or 'star' (radius, amplitude, lobes)

    Returns
    -------
        BoundaryCurve
    """
    if name == 'disk':
        radius = float(params.get('radius', 1.0))
        if radius <= 0:
            raise GeometryError(f"disk radius must be positive, got {radius}")
        return BoundaryCurve('disk', {'radius': radius}, _disk_theta(radius), exact_arclength=radius)

    if name == 'ellipse':
        a = float(params.get('a', 1.0))
        b = float(params.get('b', 1.0))
        if a <= 0 or b <= 0:
            raise GeometryError(f"ellipse semi-axes must be positive, got a={a}, b={b}")
        return BoundaryCurve('ellipse', {'a': a, 'b': b}, _ellipse_theta(a, b))

    if name == 'star':
        radius = float(params.get('radius', 1.0))
        amplitude = float(params.get('amplitude', 0.2))
        lobes = params.get('lobes', 5)
        if radius <= 0:
            raise GeometryError(f"star radius must be positive, got {radius}")
        if abs(amplitude) >= 1.0:
            raise GeometryError(f"star amplitude must satisfy |amplitude| < 1 for a simple curve, got {amplitude}")
        if int(lobes) != lobes or lobes < 1:
            raise GeometryError(f"star lobes must be a positive integer, got {lobes}")
        lobes = int(lobes)
        return BoundaryCurve('star', {'radius': radius, 'amplitude': amplitude, 'lobes': lobes},
                             _star_theta(radius, amplitude, lobes))

    raise GeometryError(f"Unknown curve preset '{name}'")


@dataclass
class GradingSpec:
    """Marked boundary points around which the mesh is refined."""
    points: List[Tuple[float, float]] = field(default_factory=list)
    factor: float = Config.GRADING_FACTOR
    core_size: Optional[float] = None

    def __post_init__(self):
        if self.factor < 1:
            raise GeometryError(f"grading factor must be >= 1, got {self.factor}")
        if self.core_size is not None and self.core_size <= 0:
            raise GeometryError(f"grading core size must be positive, got {self.core_size}")


class DomainMesh:
    """
    Triangulation of a domain bounded by a BoundaryCurve.

    Attributes
    ----------
        vertices : (V, 2) array
        triangles : (T, 3) int array, counterclockwise
        boundary_edges : (B, 2) int array, ordered along the curve
        boundary_params : (B, 2) array of curve parameters (s_i, s_j) with s_i < s_j
        h : float
            target mesh size
    """

    def __init__(self, vertices, triangles, boundary_edges, boundary_params, h, grading=None, curve=None):
        self.vertices = np.asarray(vertices, dtype=float)
        self.triangles = np.asarray(triangles, dtype=np.int64)
        self.boundary_edges = np.asarray(boundary_edges, dtype=np.int64)
        self.boundary_params = np.asarray(boundary_params, dtype=float)
        self.h = float(h)
        self.grading = grading
        self.curve = curve

    @property
    def num_vertices(self):
        return len(self.vertices)

    @property
    def num_triangles(self):
        return len(self.triangles)

    @property
    def boundary_vertices(self):
        return self.boundary_edges[:, 0]

    @property
    def boundary_vertex_params(self):
        return self.boundary_params[:, 0]

    def edges(self):
        tri = self.triangles
        all_edges = np.concatenate([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        return np.unique(np.sort(all_edges, axis=1), axis=0)

    def euler_characteristic(self):
        return self.num_vertices - len(self.edges()) + self.num_triangles

    def areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def centroids(self):
        return self.vertices[self.triangles].mean(axis=1)

    def diameters(self):
        p = self.vertices[self.triangles]
        lengths = np.stack([np.linalg.norm(p[:, 1] - p[:, 0], axis=1),
                            np.linalg.norm(p[:, 2] - p[:, 1], axis=1),
                            np.linalg.norm(p[:, 0] - p[:, 2], axis=1)], axis=1)
        return lengths.max(axis=1)

    def boundary_edge_lengths(self):
        return self.boundary_params[:, 1] - self.boundary_params[:, 0]

    def local_boundary_size(self, s):
        """Arc length of the boundary edge containing parameter s."""
        period = self.boundary_params[-1, 1] - self.boundary_params[0, 0]
        s = self.boundary_params[0, 0] + np.mod(s - self.boundary_params[0, 0], period)
        k = np.clip(np.searchsorted(self.boundary_params[:, 0], s, side='right') - 1, 0, len(self.boundary_params) - 1)
        return self.boundary_edge_lengths()[k]

    def quality_stats(self):
        p = self.vertices[self.triangles]
        a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        cos_a = np.clip((b ** 2 + c ** 2 - a ** 2) / (2 * b * c), -1, 1)
        cos_b = np.clip((a ** 2 + c ** 2 - b ** 2) / (2 * a * c), -1, 1)
        cos_c = np.clip((a ** 2 + b ** 2 - c ** 2) / (2 * a * b), -1, 1)
        min_angle = np.degrees(np.arccos(np.max(np.stack([cos_a, cos_b, cos_c]), axis=0)))
        edge_lengths = np.linalg.norm(np.diff(self.vertices[self.edges()], axis=1)[:, 0], axis=1)
        return {
            'vertices': self.num_vertices,
            'edges': int(len(self.edges())),
            'triangles': self.num_triangles,
            'euler_characteristic': int(self.euler_characteristic()),
            'min_angle_deg': float(min_angle.min()),
            'min_edge': float(edge_lengths.min()),
            'max_edge': float(edge_lengths.max()),
            'max_diameter': float(self.diameters().max()),
            'min_area': float(self.areas().min()),
            'boundary_edges': int(len(self.boundary_edges)),
            'min_boundary_edge': float(self.boundary_edge_lengths().min()),
        }


def _size_field(points, centers, h, core, rate):
    if len(centers) == 0:
        return np.full(len(points), h)
    d = np.min(np.linalg.norm(points[:, None, :] - centers[None, :, :], axis=2), axis=1)
    return np.minimum(h, core + rate * np.maximum(0.0, d - core))


def _boundary_parameters(curve, h, centers, mark_params, core, rate):
    period = curve.period
    base = np.linspace(0.0, period, max(4096, int(math.ceil(16 * period / h))) + 1)
    clusters = [base]
    if len(mark_params):
        reach = (h - core) / rate + h
        offsets = core * np.geomspace(1e-3, max(2.0, 2 * reach / core), 600)
        for s_mark in mark_params:
            clusters.append(np.mod(s_mark + offsets, period))
            clusters.append(np.mod(s_mark - offsets, period))
            clusters.append(np.array([s_mark]))
    grid = np.unique(np.concatenate(clusters))
    grid = grid[(grid >= 0.0) & (grid < period)]
    grid = np.concatenate([grid, [period]])

    density = 1.0 / _size_field(curve.point(grid), centers, h, core, rate)
    cumulative = np.concatenate([[0.0], np.cumsum(0.5 * (density[1:] + density[:-1]) * np.diff(grid))])
    total = cumulative[-1]
    count = max(8, int(math.ceil(total)))

    phase = np.interp(mark_params[0], grid, cumulative) if len(mark_params) else 0.0
    targets = np.mod(phase + np.arange(count) * (total / count), total)
    params = np.sort(np.interp(targets, cumulative, grid))
    if len(mark_params):
        nearest = np.argmin(np.abs(params - mark_params[0]))
        params[nearest] = mark_params[0]
    return params


def _hex_lattice(bounds, spacing):
    xmin, ymin, xmax, ymax = bounds
    dy = spacing * math.sqrt(3.0) / 2.0
    rows = np.arange(ymin - dy, ymax + dy, dy)
    pts = []
    for i, y in enumerate(rows):
        shift = 0.5 * spacing if i % 2 else 0.0
        xs = np.arange(xmin - spacing + shift, xmax + spacing, spacing)
        pts.append(np.stack([xs, np.full_like(xs, y)], axis=1))
    return np.concatenate(pts)


def _ring_points(center, core, rate, h):
    pts = []
    r = core
    while True:
        size = core + rate * max(0.0, r - core)
        if size >= h:
            break
        n = max(6, int(math.ceil(2 * math.pi * r / size)))
        alpha = 2 * math.pi * np.arange(n) / n
        pts.append(center + r * np.stack([np.cos(alpha), np.sin(alpha)], axis=1))
        r = r + size
    outer = r
    if not pts:
        return np.zeros((0, 2)), 0.0
    return np.concatenate(pts), outer


def _interior_points(polygon, boundary_xy, centers, h, core, rate):
    ring = polygon.exterior
    candidates = []
    exclusion = []
    for c in centers:
        pts, outer = _ring_points(c, core, rate, h)
        candidates.append(pts)
        exclusion.append((c, outer + 0.25 * h))

    lattice = _hex_lattice(polygon.bounds, h)
    keep = np.ones(len(lattice), dtype=bool)
    for c, radius in exclusion:
        keep &= np.linalg.norm(lattice - c, axis=1) >= radius
    candidates.append(lattice[keep])

    pts = np.concatenate(candidates) if candidates else np.zeros((0, 2))
    if len(pts) == 0:
        return pts
    inside = shapely.contains_xy(polygon, pts[:, 0], pts[:, 1])
    pts = pts[inside]
    local = _size_field(pts, np.asarray(centers).reshape(-1, 2), h, core, rate)
    clearance = shapely.distance(shapely.points(pts), ring)
    return pts[clearance >= 0.5 * local]


def _triangulate(boundary_xy, interior, polygon):
    points = np.concatenate([boundary_xy, interior])
    tri = Delaunay(points)
    simplices = tri.simplices
    centroids = points[simplices].mean(axis=1)
    inside = shapely.contains_xy(polygon, centroids[:, 0], centroids[:, 1])
    return points, simplices[inside]


def _missing_boundary_edges(triangles, n_boundary):
    tri_edges = np.concatenate([triangles[:, [0, 1]], triangles[:, [1, 2]], triangles[:, [2, 0]]])
    keys = np.sort(tri_edges, axis=1)
    edge_set = set(map(tuple, keys.tolist()))
    missing = []
    for k in range(n_boundary):
        edge = (min(k, (k + 1) % n_boundary), max(k, (k + 1) % n_boundary))
        if edge not in edge_set:
            missing.append(k)
    return missing


def generate_mesh(curve: BoundaryCurve, h: float, grading: Optional[GradingSpec] = None) -> DomainMesh:
    """
    Mesh the interior of a curve with straight-edged triangles of size about h.

    Boundary vertices are placed on the exact curve with spacing driven by the
    size field min(h, s0 + rate * d), d the distance to the marked points and
    s0 = h / factor (or the grading core size). Interior points come from a
    hexagonal lattice plus concentric rings around marked points, and the
    point cloud is triangulated by Delaunay.

    Parameters
    ----------
        curve : BoundaryCurve
        h : float
            target mesh size
        grading : GradingSpec, optional
            marked points and refinement factor

    Returns
    -------
        DomainMesh
    """
    if not h > 0:
        raise GeometryError(f"mesh size h must be positive, got {h}")
    start_time = datetime.now()
    grading = grading or GradingSpec(points=[], factor=1.0)
    rate = Config.GRADING_RATE

    if grading.points:
        mark_params = curve.project(np.asarray(grading.points, dtype=float))
        centers = curve.point(mark_params).reshape(-1, 2)
        core = grading.core_size if grading.core_size is not None else h / grading.factor
        core = min(core, h)
    else:
        mark_params = np.zeros(0)
        centers = np.zeros((0, 2))
        core = h

    params = _boundary_parameters(curve, h, centers, mark_params, core, rate)
    interior = None
    for attempt in range(Config.MESH_REPAIR_ATTEMPTS + 1):
        boundary_xy = curve.point(params)
        polygon = shapely.Polygon(boundary_xy)
        if not polygon.is_valid:
            raise MeshingError(f"Boundary polygon of {curve.name} is not simple at h={h}",
                               region=boundary_xy[0].tolist())
        if interior is None:
            interior = _interior_points(polygon, boundary_xy, centers, h, core, rate)
        points, triangles = _triangulate(boundary_xy, interior, polygon)
        missing = _missing_boundary_edges(triangles, len(params))
        if not missing:
            break
        if attempt == Config.MESH_REPAIR_ATTEMPTS:
            k = missing[0]
            raise MeshingError(f"Boundary edge {k} could not be recovered after {attempt} repairs",
                               region=boundary_xy[k].tolist())
        logger.warning(f"Recovering {len(missing)} boundary edges by splitting - Attempt: {attempt + 1}")
        extended = np.concatenate([params, [params[0] + curve.period]])
        midpoints = 0.5 * (extended[np.array(missing)] + extended[np.array(missing) + 1])
        mid_xy = curve.point(midpoints).reshape(-1, 2)
        lengths = extended[np.array(missing) + 1] - extended[np.array(missing)]
        keep = np.ones(len(interior), dtype=bool)
        for xy, length in zip(mid_xy, lengths):
            keep &= np.linalg.norm(interior - xy, axis=1) >= 0.75 * length
        interior = interior[keep]
        params = np.sort(np.concatenate([params, np.mod(midpoints, curve.period)]))

    n_b = len(params)
    used = np.unique(triangles)
    if len(used) != len(points):
        remap = -np.ones(len(points), dtype=np.int64)
        remap[used] = np.arange(len(used))
        if np.any(remap[:n_b] != np.arange(n_b)):
            raise MeshingError("Boundary vertex left out of the triangulation", region=boundary_xy[0].tolist())
        points = points[used]
        triangles = remap[triangles]

    p = points[triangles]
    signed = 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                    - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0]))
    flip = signed < 0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]
    tiny = 1e-12 * core ** 2
    bad = np.nonzero(np.abs(signed) <= tiny)[0]
    if len(bad):
        region = p[bad[0]].mean(axis=0).tolist()
        raise MeshingError(f"Degenerate triangle {int(bad[0])} near {region}", region=region)

    boundary_edges = np.stack([np.arange(n_b), np.roll(np.arange(n_b), -1)], axis=1)
    boundary_params = np.stack([params, np.concatenate([params[1:], [params[0] + curve.period]])], axis=1)
    mesh = DomainMesh(points, triangles, boundary_edges, boundary_params, h, grading=grading, curve=curve)

    stats = mesh.quality_stats()
    if stats['euler_characteristic'] != 1:
        raise MeshingError(f"Mesh is not disk-like: Euler characteristic {stats['euler_characteristic']}")
    duration = (datetime.now() - start_time).total_seconds()
    logger.info(f"Mesh generated - Domain: {curve.name}, h: {h}, Vertices: {stats['vertices']}, "
                f"Triangles: {stats['triangles']}, Min angle: {stats['min_angle_deg']:.1f}, Duration: {duration:.2f}s")
    return mesh


def write_mesh(mesh: DomainMesh, path) -> None:
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"vertices {mesh.num_vertices}\n")
        for x, y in mesh.vertices:
            handle.write(f"{x:.17g} {y:.17g}\n")
        handle.write(f"triangles {mesh.num_triangles}\n")
        for i, j, k in mesh.triangles:
            handle.write(f"{i} {j} {k}\n")
        handle.write(f"boundary_edges {len(mesh.boundary_edges)}\n")
        for (i, j), (si, sj) in zip(mesh.boundary_edges, mesh.boundary_params):
            handle.write(f"{i} {j} {si:.17g} {sj:.17g}\n")


def read_mesh(path, curve: Optional[BoundaryCurve] = None, h: Optional[float] = None) -> DomainMesh:
    with open(path, 'r', encoding='utf-8') as handle:
        lines = [line.split() for line in handle if line.strip()]

    def block(position, keyword):
        if lines[position][0] != keyword:
            raise GeometryError(f"Malformed mesh file {path}: expected '{keyword}' at record {position}")
        count = int(lines[position][1])
        return lines[position + 1:position + 1 + count], position + 1 + count

    vertex_rows, pos = block(0, 'vertices')
    triangle_rows, pos = block(pos, 'triangles')
    edge_rows, _ = block(pos, 'boundary_edges')
    vertices = np.array(vertex_rows, dtype=float)
    triangles = np.array(triangle_rows, dtype=np.int64)
    edges = np.array([row[:2] for row in edge_rows], dtype=np.int64)
    params = np.array([row[2:4] for row in edge_rows], dtype=float)
    if h is None:
        h = float(np.max(params[:, 1] - params[:, 0]))
    return DomainMesh(vertices, triangles, edges, params, h, curve=curve)


class FlatChart:
    """
    Local chart at Q = gamma(s0) in which the boundary is the graph x2 = rho(x1).

    Local coordinates put Q at the origin, tau(s0) along e1 and the inward
    normal along e2. Psi(x) = (x1, x2 - rho(x1)) flattens the boundary.
    """

    def __init__(self, curve: BoundaryCurve, s0: float):
        self.curve = curve
        self.s0 = float(np.mod(s0, curve.period))
        self.origin = curve.point(self.s0)
        tau0 = curve.tangent(self.s0)
        nu0 = curve.normal(self.s0)
        self.frame = np.stack([tau0, -nu0])
        self.curvature = float(curve.curvature(self.s0))
        self.sigma_minus, self.sigma_plus = self._graph_range()
        self.x1_min = float(self._a(self.sigma_minus))
        self.x1_max = float(self._a(self.sigma_plus))
        self.radius = self._validity_radius()

    def _a(self, sigma):
        return (self.curve.point(self.s0 + sigma) - self.origin) @ self.frame[0]

    def _graph_range(self):
        period = self.curve.period
        sigma = np.linspace(0.0, 0.5 * period, 2001)[1:]
        limits = []
        for sign in (1.0, -1.0):
            slope = self.curve.tangent(self.s0 + sign * sigma) @ self.frame[0]
            bad = np.nonzero(slope < 0.2)[0]
            stop = sigma[bad[0] - 1] if len(bad) and bad[0] > 0 else (sigma[0] if len(bad) else sigma[-1])
            limits.append(sign * stop)
        return limits[1], limits[0]

    def _validity_radius(self):
        period = self.curve.period
        s = self.s0 + np.linspace(self.sigma_plus, period + self.sigma_minus, 2000)
        far = np.min(np.linalg.norm(self.curve.point(s) - self.origin, axis=1))
        return float(min(period / 8.0, self.x1_max, -self.x1_min, far))

    def to_local(self, x):
        return (np.asarray(x, dtype=float) - self.origin) @ self.frame.T

    def to_global(self, xl):
        return self.origin + np.asarray(xl, dtype=float) @ self.frame

    def sigma_of(self, x1):
        """Arc-length offset sigma with gamma(s0 + sigma) having local abscissa x1."""
        x1 = np.asarray(x1, dtype=float)
        if np.any(x1 < self.x1_min - 1e-12) or np.any(x1 > self.x1_max + 1e-12):
            raise ChartError(f"abscissa outside the chart graph range [{self.x1_min:.4g}, {self.x1_max:.4g}]")
        sigma = x1.copy()
        for _ in range(50):
            a = self._a(sigma)
            slope = self.curve.tangent(self.s0 + sigma) @ self.frame[0]
            step = (a - x1) / slope
            sigma = np.clip(sigma - step, self.sigma_minus, self.sigma_plus)
            if np.max(np.abs(step)) < 1e-15:
                break
        return sigma

    def boundary_parameter(self, x1):
        return np.mod(self.s0 + self.sigma_of(x1), self.curve.period)

    def rho(self, x1):
        sigma = self.sigma_of(x1)
        return (self.curve.point(self.s0 + sigma) - self.origin) @ self.frame[1]

    def rho_derivatives(self, x1):
        """(rho, rho', rho'') at x1."""
        sigma = self.sigma_of(x1)
        s = self.s0 + sigma
        point = self.curve.point(s)
        tau = self.curve.tangent(s)
        nu = self.curve.normal(s)
        kappa = self.curve.curvature(s)
        a1 = tau @ self.frame[0]
        b1 = tau @ self.frame[1]
        a2 = -kappa * (nu @ self.frame[0])
        b2 = -kappa * (nu @ self.frame[1])
        rho = (point - self.origin) @ self.frame[1]
        return rho, b1 / a1, (b2 * a1 - a2 * b1) / a1 ** 3

    def flatten(self, x):
        """Psi(x) for global points x."""
        xl = self.to_local(x)
        return np.stack([xl[..., 0], xl[..., 1] - self.rho(xl[..., 0])], axis=-1)

    def flatten_masked(self, x):
        """Psi on the points inside the validity ball; returns (y, mask) with NaN rows outside."""
        xl = np.atleast_2d(self.to_local(x))
        mask = np.linalg.norm(xl, axis=1) < self.radius
        y = np.full_like(xl, np.nan)
        if np.any(mask):
            y[mask, 0] = xl[mask, 0]
            y[mask, 1] = xl[mask, 1] - self.rho(xl[mask, 0])
        return y, mask

    def pullback(self, y):
        y = np.asarray(y, dtype=float)
        if np.any(np.linalg.norm(np.atleast_2d(y), axis=1) > self.radius * (1 + 1e-12)):
            raise ChartError(f"point outside chart validity radius {self.radius:.4g}")
        x1 = y[..., 0]
        xl = np.stack([x1, y[..., 1] + self.rho(x1)], axis=-1)
        return self.to_global(xl)

    def to_dict(self):
        return {'s0': self.s0, 'origin': self.origin.tolist(), 'radius': self.radius,
                'curvature': self.curvature}


def local_chart(curve: BoundaryCurve, s0: float) -> FlatChart:
    return FlatChart(curve, s0)


def chart_pullback(chart: FlatChart, y) -> np.ndarray:
    """Inverse of Psi: a half-plane point y mapped back into the domain."""
    return chart.pullback(y)


def parse_marked_points(text: str) -> Tuple[List[Tuple[float, float]], Optional[float]]:
    """Parse '(x,y):factor;(x,y):factor' into points and a common factor."""
    points = []
    factor = None
    for item in filter(None, (part.strip() for part in text.split(';'))):
        try:
            coords, _, value = item.partition(':')
            x, y = (float(v) for v in coords.strip().strip('()').split(','))
        except ValueError:
            raise GeometryError(f"Cannot parse grading item '{item}', expected (x,y):factor")
        points.append((x, y))
        if value:
            factor = float(value)
    return points, factor
