"""
P1 finite elements for the weak form

    int_Omega (grad u . grad v + u v) dx = int_dOmega u^p v dsigma

on a DomainMesh. Boundary integrals are taken on the exact curve: every
boundary edge is pulled back to its arc [s_i, s_j] and the P1 edge trace is
linear in the arc-length fraction.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np
from scipy import sparse as sp
from scipy.sparse.linalg import eigsh
from scipy.spatial import cKDTree

from config import Config
from errors import AssemblyError, OutsideDomainError, PositivityError
from geometry import DomainMesh

logger = logging.getLogger(__name__)

# Degree 5 seven-point rule on triangles (barycentric coordinates, weights sum to 1)
_A1, _B1, _W1 = 0.0597158717897698, 0.4701420641051151, 0.1323941527885062
_A2, _B2, _W2 = 0.7974269853530873, 0.1012865073234563, 0.1259391805448271
_TRIANGLE_POINTS = np.array([
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
    [_A1, _B1, _B1], [_B1, _A1, _B1], [_B1, _B1, _A1],
    [_A2, _B2, _B2], [_B2, _A2, _B2], [_B2, _B2, _A2],
])
_TRIANGLE_WEIGHTS = np.array([0.225, _W1, _W1, _W1, _W2, _W2, _W2])

_CHILDREN = np.array([
    [[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.5, 0.0, 0.5]],
    [[0.5, 0.5, 0.0], [0.0, 1.0, 0.0], [0.0, 0.5, 0.5]],
    [[0.5, 0.0, 0.5], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]],
    [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]],
])


@dataclass
class QuadratureRule:
    """
    Interior and boundary quadrature.

    The triangle rule is the seven-point degree 5 rule. The boundary rule is
    Gauss-Legendre on [0, 1] with ceil((degree + 1) / 2) points, applied per
    boundary edge on the exact curve arc, with dyadic subdivision (at most
    max_depth levels) where u^p varies by more than a factor 10 across a piece.
    """
    degree: int = Config.BOUNDARY_QUADRATURE_DEGREE
    max_depth: int = Config.MAX_SUBDIVISION_DEPTH
    singular_depth: int = Config.SINGULAR_SUBDIVISION_DEPTH
    triangle_points: np.ndarray = field(default_factory=lambda: _TRIANGLE_POINTS.copy())
    triangle_weights: np.ndarray = field(default_factory=lambda: _TRIANGLE_WEIGHTS.copy())
    triangle_degree: int = 5

    def __post_init__(self):
        if self.degree < 1:
            raise ValueError(f"boundary quadrature degree must be >= 1, got {self.degree}")
        n = int(math.ceil((self.degree + 1) / 2))
        nodes, weights = np.polynomial.legendre.leggauss(n)
        self.boundary_nodes = 0.5 * (nodes + 1.0)
        self.boundary_weights = 0.5 * weights

    @property
    def boundary_exact_degree(self):
        return 2 * len(self.boundary_nodes) - 1


DEFAULT_RULE = QuadratureRule()


@dataclass
class NodalField:
    """One real coefficient per mesh vertex."""
    mesh: DomainMesh
    values: np.ndarray
    label: str = ''
    p: Optional[float] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.num_vertices,):
            raise ValueError(f"field has {self.values.shape} coefficients for {self.mesh.num_vertices} vertices")
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"field '{self.label}' contains non-finite values")

    def copy(self, values=None, label=None, p=None):
        return NodalField(self.mesh, self.values.copy() if values is None else values,
                          label=self.label if label is None else label,
                          p=self.p if p is None else p)

    @property
    def sup_norm(self):
        return float(np.max(np.abs(self.values)))

    @property
    def boundary_values(self):
        return self.values[self.mesh.boundary_vertices]


@dataclass
class LinearSystem:
    """Assembled operators of the volume form and the boundary mass."""
    stiffness: sp.csr_matrix
    mass: sp.csr_matrix
    boundary_mass: Optional[sp.csr_matrix] = None
    rhs: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.operator = (self.stiffness + self.mass).tocsr()

    def asymmetry(self):
        worst = 0.0
        for matrix in (self.stiffness, self.mass, self.boundary_mass):
            if matrix is None:
                continue
            diff = abs(matrix - matrix.T)
            worst = max(worst, float(diff.max()) if diff.nnz else 0.0)
        return worst

    def smallest_eigenvalue(self):
        """Eigenvalue of K + M closest to zero (shift-invert Lanczos)."""
        value = eigsh(self.operator.tocsc(), k=1, sigma=0.0, which='LM', return_eigenvectors=False)
        return float(value[0])


def element_matrices(corners):
    """Stiffness and mass matrices of one P1 triangle with the given (3, 2) corners."""
    stiffness, mass, _ = _element_data(np.asarray(corners, dtype=float)[None, :, :])
    return stiffness[0], mass[0]


def _element_data(p):
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    grads = _element_gradients(p)
    stiffness = area[:, None, None] * np.einsum('tia,tja->tij', grads, grads)
    local_mass = (np.ones((3, 3)) + np.eye(3)) / 12.0
    mass = area[:, None, None] * local_mass[None, :, :]
    return stiffness, mass, area


def assemble_volume(mesh: DomainMesh) -> LinearSystem:
    """
    Assemble stiffness and mass matrices.

    Parameters
    ----------
        mesh : DomainMesh

    Returns
    -------
        LinearSystem
            operators in CSR format; duplicates summed in element order
    """
    p = mesh.vertices[mesh.triangles]
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    bad = np.nonzero(~(area > 0))[0]
    if len(bad):
        raise AssemblyError(f"Degenerate or inverted element {int(bad[0])} (area {area[bad[0]]:.3e})",
                            element=int(bad[0]))

    stiffness, mass, _ = _element_data(p)
    rows = np.repeat(mesh.triangles, 3, axis=1).ravel()
    cols = np.tile(mesh.triangles, (1, 3)).ravel()
    n = mesh.num_vertices
    K = sp.coo_matrix((stiffness.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    M = sp.coo_matrix((mass.ravel(), (rows, cols)), shape=(n, n)).tocsr()
    return LinearSystem(stiffness=K, mass=M)


def edge_mass_matrix(length):
    return (length / 6.0) * np.array([[2.0, 1.0], [1.0, 2.0]])


def _check_boundary_links(mesh, curve):
    lengths = mesh.boundary_edge_lengths()
    bad = np.nonzero(~(lengths > 0) | ~np.isfinite(lengths))[0]
    if len(bad):
        raise AssemblyError(f"Boundary edge {int(bad[0])} is not linked to a curve arc", element=int(bad[0]))
    if curve is not None:
        offsets = np.linalg.norm(curve.point(mesh.boundary_params[:, 0]) - mesh.vertices[mesh.boundary_edges[:, 0]], axis=1)
        worst = int(np.argmax(offsets))
        if offsets[worst] > 1e-8:
            raise AssemblyError(f"Boundary edge {worst} does not start on the curve (offset {offsets[worst]:.2e})",
                                element=worst)


def assemble_boundary_mass(mesh: DomainMesh, curve=None) -> sp.csr_matrix:
    """Boundary mass on the exact curve: each edge contributes (l/6)[[2,1],[1,2]] with l its arc length."""
    curve = curve if curve is not None else mesh.curve
    _check_boundary_links(mesh, curve)
    lengths = mesh.boundary_edge_lengths()
    local = lengths[:, None, None] * edge_mass_matrix(1.0)[None, :, :]
    edges = mesh.boundary_edges
    rows = np.repeat(edges, 2, axis=1).ravel()
    cols = np.tile(edges, (1, 2)).ravel()
    n = mesh.num_vertices
    return sp.coo_matrix((local.ravel(), (rows, cols)), shape=(n, n)).tocsr()


def assemble_system(mesh: DomainMesh, curve=None) -> LinearSystem:
    system = assemble_volume(mesh)
    system.boundary_mass = assemble_boundary_mass(mesh, curve)
    return system


def _boundary_period(mesh):
    return mesh.boundary_params[-1, 1] - mesh.boundary_params[0, 0]


def _arc_pieces(mesh, s_lo, s_hi):
    """Edge pieces (edge, lam_a, lam_b) covering the arc [s_lo, s_hi] (whole boundary when None)."""
    n = len(mesh.boundary_edges)
    if s_lo is None:
        return np.arange(n), np.zeros(n), np.ones(n)
    a, b = mesh.boundary_params[:, 0], mesh.boundary_params[:, 1]
    length = b - a
    period = _boundary_period(mesh)
    if s_hi - s_lo > period:
        raise ValueError(f"arc [{s_lo}, {s_hi}] is longer than the boundary")
    edges, lam_a, lam_b = [], [], []
    k0 = int(np.floor((a[0] - s_hi) / period))
    k1 = int(np.ceil((a[0] + period - s_lo) / period))
    for k in range(k0, k1 + 1):
        lo = np.maximum(a, s_lo + k * period)
        hi = np.minimum(b, s_hi + k * period)
        mask = hi > lo
        idx = np.nonzero(mask)[0]
        edges.append(idx)
        lam_a.append((lo[idx] - a[idx]) / length[idx])
        lam_b.append((hi[idx] - a[idx]) / length[idx])
    edges = np.concatenate(edges)
    order = np.lexsort((np.concatenate(lam_a), edges))
    return edges[order], np.concatenate(lam_a)[order], np.concatenate(lam_b)[order]


def _graded_pieces(lam_a, lam_b, lam_c, depth):
    """Split [lam_a, lam_b] into pieces shrinking geometrically toward lam_c."""
    pieces = []
    for lo, hi in ((lam_a, lam_c), (lam_c, lam_b)):
        if hi - lo <= 0:
            continue
        anchor_left = lo == lam_c
        width = hi - lo
        cuts = [width * 0.5 ** k for k in range(depth + 1)] + [0.0]
        for outer, inner in zip(cuts[:-1], cuts[1:]):
            if anchor_left:
                pieces.append((lo + inner, lo + outer))
            else:
                pieces.append((hi - outer, hi - inner))
    return pieces


@dataclass
class BoundarySamples:
    """Quadrature samples along the boundary: edge id, trace fraction, weight, parameter, trace value."""
    edge: np.ndarray
    lam: np.ndarray
    weight: np.ndarray
    s: np.ndarray
    trace: np.ndarray


def boundary_samples(mesh: DomainMesh, values, rule: QuadratureRule = DEFAULT_RULE, p=None,
                     s_lo=None, s_hi=None, singular_at=None) -> BoundarySamples:
    """
    Gauss-Legendre samples of the P1 boundary trace on an arc of the exact curve.

    Pieces where the trace varies so that trace^p changes by more than a
    factor 10 are split dyadically (at most rule.max_depth levels). When
    singular_at is given, the edge holding that parameter is split
    geometrically toward it (rule.singular_depth levels).
    """
    values = np.asarray(values, dtype=float)
    edges, lam_a, lam_b = _arc_pieces(mesh, s_lo, s_hi)
    vi = mesh.boundary_edges[edges, 0]
    vj = mesh.boundary_edges[edges, 1]
    a = mesh.boundary_params[edges, 0]
    length = mesh.boundary_params[edges, 1] - a

    piece_edge, piece_lo, piece_hi, piece_depth = [], [], [], []
    singular_mask = np.zeros(len(edges), dtype=bool)
    if singular_at is not None:
        period = _boundary_period(mesh)
        rel = np.mod(singular_at - a, period) / length
        singular_mask = (rel >= lam_a - 1e-12) & (rel <= lam_b + 1e-12)
        for k in np.nonzero(singular_mask)[0]:
            lam_c = min(max(rel[k], lam_a[k]), lam_b[k])
            for lo, hi in _graded_pieces(lam_a[k], lam_b[k], lam_c, rule.singular_depth):
                piece_edge.append(k)
                piece_lo.append(lo)
                piece_hi.append(hi)
                piece_depth.append(0)

    regular = np.nonzero(~singular_mask)[0]
    depth = np.zeros(len(regular), dtype=int)
    if p is not None and p > 1 and len(regular):
        ua = (1 - lam_a[regular]) * values[vi[regular]] + lam_a[regular] * values[vj[regular]]
        ub = (1 - lam_b[regular]) * values[vi[regular]] + lam_b[regular] * values[vj[regular]]
        low = np.minimum(ua, ub)
        high = np.maximum(ua, ub)
        with np.errstate(divide='ignore', invalid='ignore'):
            variation = np.where(low > 0, p * np.log(high / np.where(low > 0, low, 1.0)) / math.log(10.0), np.inf)
        depth = np.where(variation > 1.0, np.ceil(np.log2(np.maximum(variation, 1.0))), 0)
        depth = np.where(high <= 0, 0, depth)
        depth = np.minimum(depth, rule.max_depth).astype(int)
    piece_edge.extend(regular.tolist())
    piece_lo.extend(lam_a[regular].tolist())
    piece_hi.extend(lam_b[regular].tolist())
    piece_depth.extend(depth.tolist())

    piece_edge = np.asarray(piece_edge, dtype=np.int64)
    piece_lo = np.asarray(piece_lo, dtype=float)
    piece_hi = np.asarray(piece_hi, dtype=float)
    piece_depth = np.asarray(piece_depth, dtype=int)

    sample_edge, sample_lam, sample_weight = [], [], []
    nodes, weights = rule.boundary_nodes, rule.boundary_weights
    for d in np.unique(piece_depth):
        sel = np.nonzero(piece_depth == d)[0]
        parts = 2 ** int(d)
        width = (piece_hi[sel] - piece_lo[sel]) / parts
        starts = piece_lo[sel][:, None] + width[:, None] * np.arange(parts)[None, :]
        lam = starts[:, :, None] + width[:, None, None] * nodes[None, None, :]
        w = np.broadcast_to(width[:, None, None] * weights[None, None, :], lam.shape)
        sample_edge.append(np.broadcast_to(piece_edge[sel][:, None, None], lam.shape).ravel())
        sample_lam.append(lam.ravel())
        sample_weight.append(w.ravel())

    if not sample_edge:
        empty = np.zeros(0)
        return BoundarySamples(np.zeros(0, dtype=np.int64), empty, empty, empty, empty)
    local = np.concatenate(sample_edge)
    lam = np.concatenate(sample_lam)
    weight = np.concatenate(sample_weight) * length[local]
    edge = edges[local]
    trace = (1 - lam) * values[mesh.boundary_edges[edge, 0]] + lam * values[mesh.boundary_edges[edge, 1]]
    s = mesh.boundary_params[edge, 0] + lam * (mesh.boundary_params[edge, 1] - mesh.boundary_params[edge, 0])
    return BoundarySamples(edge, lam, weight, s, trace)


def boundary_integral(mesh: DomainMesh, values, integrand: Callable, rule: QuadratureRule = DEFAULT_RULE,
                      p=None, s_lo=None, s_hi=None, singular_at=None, basis=False):
    """
    Integral of integrand(trace, s) over an arc of the boundary.

    With basis=True returns the vector of integrals against each P1 basis
    function (zero for interior vertices); otherwise a scalar.
    """
    samples = boundary_samples(mesh, values, rule, p=p, s_lo=s_lo, s_hi=s_hi, singular_at=singular_at)
    contribution = samples.weight * integrand(samples.trace, samples.s)
    if not basis:
        return float(np.sum(contribution))
    n = mesh.num_vertices
    vi = mesh.boundary_edges[samples.edge, 0]
    vj = mesh.boundary_edges[samples.edge, 1]
    return (np.bincount(vi, weights=contribution * (1 - samples.lam), minlength=n)
            + np.bincount(vj, weights=contribution * samples.lam, minlength=n))


def _check_exponent(u: NodalField, p):
    if not p >= 1:
        raise ValueError(f"exponent p must be >= 1, got {p}")
    boundary = u.boundary_values
    if float(p) != int(p) and np.any(boundary < 0):
        worst = int(u.mesh.boundary_vertices[np.argmin(boundary)])
        raise PositivityError(f"Negative boundary value {boundary.min():.3e} at vertex {worst} with non-integer p={p}")


def nonlinear_boundary_residual(u: NodalField, p, rule: QuadratureRule = DEFAULT_RULE, positive_part=False):
    """
    Vector of int_dOmega u^p phi_i dsigma with the P1 trace of u.

    With positive_part=True the integrand is (u_+)^p, defined for any sign of the trace.
    """
    if positive_part:
        return boundary_integral(u.mesh, u.values, lambda t, s: np.power(np.maximum(t, 0.0), p),
                                 rule=rule, p=p, basis=True)
    _check_exponent(u, p)
    return boundary_integral(u.mesh, u.values, lambda t, s: np.power(t, p), rule=rule, p=p, basis=True)


def nonlinear_boundary_jacobian(u: NodalField, p, rule: QuadratureRule = DEFAULT_RULE, positive_part=False):
    """Sparse matrix of int_dOmega p u^(p-1) phi_i phi_j dsigma (p (u_+)^(p-1) with positive_part)."""
    if not positive_part:
        _check_exponent(u, p)
    mesh = u.mesh
    samples = boundary_samples(mesh, u.values, rule, p=p)
    trace = np.maximum(samples.trace, 0.0) if positive_part else samples.trace
    f = samples.weight * p * np.power(trace, p - 1)
    lam = samples.lam
    vi = mesh.boundary_edges[samples.edge, 0]
    vj = mesh.boundary_edges[samples.edge, 1]
    rows = np.concatenate([vi, vi, vj, vj])
    cols = np.concatenate([vi, vj, vi, vj])
    data = np.concatenate([f * (1 - lam) ** 2, f * lam * (1 - lam), f * lam * (1 - lam), f * lam ** 2])
    n = mesh.num_vertices
    return sp.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()


@dataclass
class EnergyRecord:
    dirichlet: float
    boundary_lp: float
    free_energy: float
    p: float

    def to_dict(self):
        return {
            'p': self.p,
            'dirichlet': self.dirichlet,
            'boundary_lp': self.boundary_lp,
            'free_energy': self.free_energy,
        }


def energy(u: NodalField, p, system: Optional[LinearSystem] = None, rule: QuadratureRule = DEFAULT_RULE) -> EnergyRecord:
    """Dirichlet integral, boundary L^(p+1) integral and E_p(u) = dirichlet/2 - boundary_lp/(p+1)."""
    system = system if system is not None else assemble_volume(u.mesh)
    _check_exponent(u, p)
    dirichlet = float(u.values @ (system.operator @ u.values))
    boundary_lp = boundary_integral(u.mesh, u.values, lambda t, s: np.power(t, p + 1), rule=rule, p=p + 1)
    return EnergyRecord(dirichlet=dirichlet, boundary_lp=boundary_lp,
                        free_energy=0.5 * dirichlet - boundary_lp / (p + 1), p=float(p))


class MeshLocator:
    """Point location on a DomainMesh through a k-d tree of triangle centroids."""

    def __init__(self, mesh: DomainMesh):
        self.mesh = mesh
        p = mesh.vertices[mesh.triangles]
        self._origin = p[:, 0]
        jac = np.stack([p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]], axis=2)
        self._inverse = np.linalg.inv(jac)
        self.gradients = _element_gradients(p)
        self._tree = cKDTree(p.mean(axis=1))

    def barycentric(self, triangles, points):
        local = np.einsum('...ij,...j->...i', self._inverse[triangles], points - self._origin[triangles])
        return np.concatenate([(1.0 - local.sum(axis=-1))[..., None], local], axis=-1)

    def locate(self, points, outside_tolerance=0.25):
        """
        Containing triangle and barycentric coordinates for each point.

        Points slightly outside the polygonal mesh (between a boundary chord and
        the curve) are assigned to the nearest triangle when their most
        negative barycentric coordinate exceeds -outside_tolerance.
        """
        points = np.atleast_2d(np.asarray(points, dtype=float))
        k = min(16, self.mesh.num_triangles)
        _, candidates = self._tree.query(points, k=k)
        candidates = np.asarray(candidates).reshape(len(points), k)
        bary = self.barycentric(candidates, points[:, None, :])
        score = bary.min(axis=2)
        best = np.argmax(score, axis=1)
        rows = np.arange(len(points))
        triangle = candidates[rows, best]
        coords = bary[rows, best]
        best_score = score[rows, best]

        missing = np.nonzero(best_score < -1e-12)[0]
        for i in missing:
            all_bary = self.barycentric(np.arange(self.mesh.num_triangles), points[i][None, :])
            all_score = all_bary.min(axis=1)
            j = int(np.argmax(all_score))
            if all_score[j] > best_score[i]:
                triangle[i], coords[i], best_score[i] = j, all_bary[j], all_score[j]

        outside = np.nonzero(best_score < -outside_tolerance)[0]
        if len(outside):
            raise OutsideDomainError(f"Point {points[outside[0]].tolist()} lies outside the mesh")
        return triangle, coords


def _element_gradients(p):
    x, y = p[..., 0], p[..., 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    grads = np.empty(p.shape)
    for i in range(3):
        j, k = (i + 1) % 3, (i + 2) % 3
        grads[:, i, 0] = (y[:, j] - y[:, k]) / (2.0 * area)
        grads[:, i, 1] = (x[:, k] - x[:, j]) / (2.0 * area)
    return grads


def get_locator(mesh: DomainMesh) -> MeshLocator:
    locator = mesh.__dict__.get('_locator')
    if locator is None:
        locator = MeshLocator(mesh)
        mesh.__dict__['_locator'] = locator
    return locator


def probe(u: NodalField, point):
    """
    P1 value and piecewise-constant gradient at one point or an array of points.

    Returns
    -------
        (value, gradient) : float and (2,) array for a single point, (n,) and (n, 2) arrays otherwise
    """
    point = np.asarray(point, dtype=float)
    single = point.ndim == 1
    locator = get_locator(u.mesh)
    triangle, coords = locator.locate(point)
    nodal = u.values[u.mesh.triangles[triangle]]
    value = np.sum(coords * nodal, axis=1)
    gradient = np.einsum('ti,tia->ta', nodal, locator.gradients[triangle])
    if single:
        return float(value[0]), gradient[0]
    return value, gradient


def boundary_trace(u: NodalField, s):
    """P1 boundary trace at curve parameters s (pulled back to the curve)."""
    mesh = u.mesh
    a = mesh.boundary_params[:, 0]
    length = mesh.boundary_edge_lengths()
    period = _boundary_period(mesh)
    s = np.asarray(s, dtype=float)
    shifted = a[0] + np.mod(s - a[0], period)
    k = np.clip(np.searchsorted(a, shifted, side='right') - 1, 0, len(a) - 1)
    lam = (shifted - a[k]) / length[k]
    vi, vj = mesh.boundary_edges[k, 0], mesh.boundary_edges[k, 1]
    values = (1 - lam) * u.values[vi] + lam * u.values[vj]
    slope = (u.values[vj] - u.values[vi]) / length[k]
    return values, slope


def interpolate(mesh: DomainMesh, function: Callable, label='', p=None) -> NodalField:
    """Nodal interpolant of function(points) -> values."""
    return NodalField(mesh, np.asarray(function(mesh.vertices), dtype=float), label=label, p=p)


@dataclass
class VolumeSamples:
    triangle: np.ndarray
    bary: np.ndarray
    weight: np.ndarray
    points: np.ndarray


def volume_samples(mesh: DomainMesh, rule: QuadratureRule = DEFAULT_RULE, singular_point=None,
                   depth=None) -> VolumeSamples:
    """
    Seven-point samples on every triangle; triangles near singular_point are
    split recursively into four children while a child lies within two of its
    diameters of the point (at most depth levels).
    """
    depth = rule.singular_depth if depth is None else depth
    tri = mesh.triangles
    corners = mesh.vertices[tri]
    areas = mesh.areas()
    n_q = len(rule.triangle_weights)

    near = np.zeros(len(tri), dtype=bool)
    if singular_point is not None:
        c = np.asarray(singular_point, dtype=float)
        near = np.linalg.norm(corners.mean(axis=1) - c, axis=1) < 2.0 * mesh.diameters()

    regular = np.nonzero(~near)[0]
    out_tri = [np.repeat(regular, n_q)]
    out_bary = [np.tile(rule.triangle_points, (len(regular), 1))]
    out_weight = [np.repeat(areas[regular], n_q) * np.tile(rule.triangle_weights, len(regular))]

    for t in np.nonzero(near)[0]:
        stack = [(np.eye(3), 1.0, 0)]
        while stack:
            local, fraction, level = stack.pop()
            pts = local @ corners[t]
            diameter = max(np.linalg.norm(pts[0] - pts[1]), np.linalg.norm(pts[1] - pts[2]),
                           np.linalg.norm(pts[2] - pts[0]))
            if level < depth and np.linalg.norm(pts.mean(axis=0) - c) < 2.0 * diameter:
                for child in _CHILDREN:
                    stack.append((child @ local, 0.25 * fraction, level + 1))
                continue
            out_tri.append(np.full(n_q, t))
            out_bary.append(rule.triangle_points @ local)
            out_weight.append(areas[t] * fraction * rule.triangle_weights)

    triangle = np.concatenate(out_tri).astype(np.int64)
    bary = np.concatenate(out_bary)
    weight = np.concatenate(out_weight)
    points = np.einsum('qi,qia->qa', bary, corners[triangle])
    return VolumeSamples(triangle, bary, weight, points)


def volume_load(mesh: DomainMesh, function: Callable, rule: QuadratureRule = DEFAULT_RULE, singular_point=None):
    """Vector of int_Omega f phi_i dx."""
    samples = volume_samples(mesh, rule, singular_point=singular_point)
    values = samples.weight * function(samples.points)
    if not np.all(np.isfinite(values)):
        raise ValueError("volume integrand is not finite at a quadrature point")
    n = mesh.num_vertices
    load = np.zeros(n)
    for i in range(3):
        load += np.bincount(mesh.triangles[samples.triangle, i], weights=values * samples.bary[:, i], minlength=n)
    return load


def boundary_load(mesh: DomainMesh, flux: Callable, rule: QuadratureRule = DEFAULT_RULE, singular_at=None):
    """Vector of int_dOmega g phi_i dsigma for flux g(s) on the exact curve."""
    zeros = np.zeros(mesh.num_vertices)
    return boundary_integral(mesh, zeros, lambda t, s: flux(s), rule=rule, singular_at=singular_at, basis=True)


def l2_error(u: NodalField, exact: Callable, rule: QuadratureRule = DEFAULT_RULE):
    samples = volume_samples(u.mesh, rule)
    approx = np.sum(samples.bary * u.values[u.mesh.triangles[samples.triangle]], axis=1)
    return float(np.sqrt(np.sum(samples.weight * (approx - exact(samples.points)) ** 2)))


def h1_error(u: NodalField, exact_gradient: Callable, rule: QuadratureRule = DEFAULT_RULE):
    """Gradient (H1 seminorm) error against an analytic gradient."""
    samples = volume_samples(u.mesh, rule)
    locator = get_locator(u.mesh)
    nodal = u.values[u.mesh.triangles[samples.triangle]]
    approx = np.einsum('ti,tia->ta', nodal, locator.gradients[samples.triangle])
    diff = approx - exact_gradient(samples.points)
    return float(np.sqrt(np.sum(samples.weight * np.sum(diff ** 2, axis=1))))


def write_field(u: NodalField, path) -> None:
    label = u.label.replace(' ', '_') or 'field'
    with open(path, 'w', encoding='utf-8') as handle:
        handle.write(f"field {len(u.values)}\n")
        for value in u.values:
            handle.write(f"{value:.17g}\n")
        p = 'none' if u.p is None else f"{u.p:.17g}"
        handle.write(f"p {p} label {label}\n")


def read_field(path, mesh: DomainMesh) -> NodalField:
    with open(path, 'r', encoding='utf-8') as handle:
        lines = [line.strip() for line in handle if line.strip()]
    header = lines[0].split()
    if header[0] != 'field':
        raise ValueError(f"Malformed field file {path}: missing 'field' header")
    count = int(header[1])
    values = np.array([float(v) for v in lines[1:1 + count]])
    meta = lines[1 + count].split()
    p = None if meta[1] == 'none' else float(meta[1])
    label = meta[3] if len(meta) > 3 else ''
    return NodalField(mesh, values, label=label, p=p)
