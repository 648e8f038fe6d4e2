import math

import numpy as np
import pytest
from scipy.sparse.linalg import spsolve

from errors import AssemblyError, OutsideDomainError, PositivityError
from fem_core import DEFAULT_RULE, NodalField, QuadratureRule, assemble_boundary_mass, assemble_system, \
    assemble_volume, boundary_integral, boundary_load, boundary_trace, element_matrices, energy, h1_error, \
    interpolate, l2_error, nonlinear_boundary_jacobian, nonlinear_boundary_residual, probe, read_field, \
    volume_load, write_field
from geometry import DomainMesh, generate_mesh
from tests.helpers import constant_field, cosh_flux


def test_reference_element_matrices():
    stiffness, mass = element_matrices([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose(stiffness, [[1.0, -0.5, -0.5], [-0.5, 0.5, 0.0], [-0.5, 0.0, 0.5]], atol=1e-15)
    np.testing.assert_allclose(mass, np.array([[2, 1, 1], [1, 2, 1], [1, 1, 2]]) / 24.0, atol=1e-15)


def test_global_matrices(disk_mesh, disk_system):
    ones = np.ones(disk_mesh.num_vertices)
    np.testing.assert_allclose(disk_system.stiffness @ ones, 0.0, atol=1e-12)
    assert ones @ (disk_system.mass @ ones) == pytest.approx(disk_mesh.areas().sum(), rel=1e-12)
    assert disk_mesh.areas().sum() == pytest.approx(math.pi, rel=2e-2)
    assert disk_system.asymmetry() < 1e-14
    assert disk_system.smallest_eigenvalue() > 0


def test_boundary_mass_uses_arc_length(disk_mesh):
    boundary = assemble_boundary_mass(disk_mesh)
    ones = np.ones(disk_mesh.num_vertices)
    assert ones @ (boundary @ ones) == pytest.approx(2 * math.pi, rel=1e-12)
    system = assemble_system(disk_mesh)
    assert system.asymmetry() < 1e-14


def test_inverted_element_is_reported(coarse_disk_mesh):
    triangles = coarse_disk_mesh.triangles.copy()
    triangles[3] = triangles[3][[0, 2, 1]]
    broken = DomainMesh(coarse_disk_mesh.vertices, triangles, coarse_disk_mesh.boundary_edges,
                        coarse_disk_mesh.boundary_params, coarse_disk_mesh.h, curve=coarse_disk_mesh.curve)
    with pytest.raises(AssemblyError) as info:
        assemble_volume(broken)
    assert info.value.element == 3


def test_gauss_rule_degree():
    rule = QuadratureRule(degree=8)
    assert rule.boundary_exact_degree >= 8
    assert np.sum(rule.boundary_weights * rule.boundary_nodes ** 7) == pytest.approx(1.0 / 8.0, rel=1e-14)
    assert np.sum(rule.triangle_weights) == pytest.approx(1.0, rel=1e-14)


def test_boundary_integral_of_constant_and_additivity(disk_mesh):
    values = np.full(disk_mesh.num_vertices, 2.0)
    whole = boundary_integral(disk_mesh, values, lambda t, s: t * np.cos(s) ** 2)
    assert whole == pytest.approx(2.0 * math.pi, rel=1e-10)
    left = boundary_integral(disk_mesh, values, lambda t, s: t * np.cos(s) ** 2, s_lo=0.0, s_hi=1.0)
    right = boundary_integral(disk_mesh, values, lambda t, s: t * np.cos(s) ** 2, s_lo=1.0, s_hi=2 * math.pi)
    assert left + right == pytest.approx(whole, rel=1e-12)
    assert left == pytest.approx(2.0 * (0.5 + 0.25 * math.sin(2.0)), rel=1e-10)


def test_nonlinear_residual_sums_and_scales(disk_mesh):
    u = constant_field(disk_mesh, 2.0)
    residual = nonlinear_boundary_residual(u, 3.0)
    assert residual.sum() == pytest.approx(8.0 * 2 * math.pi, rel=1e-10)
    interior = np.setdiff1d(np.arange(disk_mesh.num_vertices), disk_mesh.boundary_vertices)
    np.testing.assert_array_equal(residual[interior], 0.0)

    v = interpolate(disk_mesh, lambda x: 1.0 + 0.3 * x[:, 0] + 0.1 * x[:, 1] ** 2)
    scaled = v.copy(values=1.7 * v.values)
    np.testing.assert_allclose(nonlinear_boundary_residual(scaled, 5.0),
                               1.7 ** 5 * nonlinear_boundary_residual(v, 5.0), rtol=1e-10, atol=1e-14)


def test_jacobian_matches_finite_differences(disk_mesh):
    u = interpolate(disk_mesh, lambda x: 1.2 + 0.3 * x[:, 0])
    direction = interpolate(disk_mesh, lambda x: np.sin(3 * x[:, 1]))
    J = nonlinear_boundary_jacobian(u, 3.0)
    delta = 1e-6
    plus = nonlinear_boundary_residual(u.copy(values=u.values + delta * direction.values), 3.0)
    minus = nonlinear_boundary_residual(u.copy(values=u.values - delta * direction.values), 3.0)
    np.testing.assert_allclose(J @ direction.values, (plus - minus) / (2 * delta), atol=1e-7)


def test_non_integer_power_needs_positive_trace(disk_mesh):
    u = constant_field(disk_mesh, -1.0)
    with pytest.raises(PositivityError):
        nonlinear_boundary_residual(u, 2.5)
    with pytest.raises(ValueError):
        nonlinear_boundary_residual(constant_field(disk_mesh, 1.0), 0.5)


def test_energy_of_constant(disk_mesh, disk_system):
    record = energy(constant_field(disk_mesh, 1.0), 4.0, disk_system)
    area = disk_mesh.areas().sum()
    assert record.dirichlet == pytest.approx(area, rel=1e-12)
    assert record.boundary_lp == pytest.approx(2 * math.pi, rel=1e-10)
    assert record.free_energy == pytest.approx(0.5 * area - 2 * math.pi / 5.0, rel=1e-10)


def test_point_evaluation_is_exact_for_linear_fields(disk_mesh):
    u = interpolate(disk_mesh, lambda x: x[:, 0] + 2.0 * x[:, 1])
    value, gradient = probe(u, np.array([0.3, -0.2]))
    assert value == pytest.approx(-0.1, abs=1e-12)
    np.testing.assert_allclose(gradient, [1.0, 2.0], atol=1e-10)
    values, _ = probe(u, np.array([[0.0, 0.0], [0.5, 0.5]]))
    np.testing.assert_allclose(values, [0.0, 1.5], atol=1e-12)
    with pytest.raises(OutsideDomainError):
        probe(u, np.array([3.0, 0.0]))


def test_boundary_trace_at_vertices(disk_mesh):
    u = interpolate(disk_mesh, lambda x: x[:, 0] ** 2)
    s = disk_mesh.boundary_vertex_params[:5]
    values, _ = boundary_trace(u, s)
    np.testing.assert_allclose(values, u.values[disk_mesh.boundary_vertices[:5]], atol=1e-14)


def test_manufactured_cosh_solution(disk_mesh, disk_system, disk):
    load = boundary_load(disk_mesh, cosh_flux(disk))
    u = NodalField(disk_mesh, spsolve(disk_system.operator.tocsc(), load))
    assert l2_error(u, lambda x: np.cosh(x[:, 0])) < 2e-2
    assert h1_error(u, lambda x: np.stack([np.sinh(x[:, 0]), np.zeros(len(x))], axis=1)) < 0.2
    value, _ = probe(u, np.array([0.0, 0.0]))
    assert value == pytest.approx(1.0, abs=2e-2)


def test_volume_load_of_constant(disk_mesh):
    load = volume_load(disk_mesh, lambda x: np.ones(len(x)))
    assert load.sum() == pytest.approx(disk_mesh.areas().sum(), rel=1e-12)
    singular = volume_load(disk_mesh, lambda x: np.ones(len(x)), singular_point=np.array([1.0, 0.0]))
    assert singular.sum() == pytest.approx(disk_mesh.areas().sum(), rel=1e-12)


def test_field_file_round_trip(tmp_path, coarse_disk_mesh):
    u = interpolate(coarse_disk_mesh, lambda x: np.exp(x[:, 0]), label='exp field', p=7.0)
    path = tmp_path / 'u.txt'
    write_field(u, path)
    loaded = read_field(path, coarse_disk_mesh)
    np.testing.assert_array_equal(loaded.values, u.values)
    assert loaded.p == 7.0
    assert loaded.label == 'exp_field'


def test_default_rule_is_shared():
    assert DEFAULT_RULE.degree == 8


@pytest.mark.slow
def test_cosh_convergence_rates(disk):
    l2, h1 = [], []
    for h in (0.2, 0.1, 0.05):
        mesh = generate_mesh(disk, h)
        system = assemble_volume(mesh)
        u = NodalField(mesh, spsolve(system.operator.tocsc(), boundary_load(mesh, cosh_flux(disk))))
        l2.append(l2_error(u, lambda x: np.cosh(x[:, 0])))
        h1.append(h1_error(u, lambda x: np.stack([np.sinh(x[:, 0]), np.zeros(len(x))], axis=1)))
    l2_rate = math.log(l2[0] / l2[2]) / math.log(4.0)
    h1_rate = math.log(h1[0] / h1[2]) / math.log(4.0)
    assert 1.7 < l2_rate < 2.3
    assert 0.8 < h1_rate < 1.3
