import math

import numpy as np
import pytest
from scipy import special

from errors import ChartError, GeometryError
from geometry import FlatChart, GradingSpec, generate_mesh, local_chart, make_curve, parse_marked_points, \
    read_mesh, write_mesh


def test_disk_is_arc_length_parametrized(disk):
    assert disk.period == pytest.approx(2 * math.pi, rel=1e-14)
    s = np.linspace(0.0, disk.period, 13)
    np.testing.assert_allclose(disk.speed(s), 1.0, atol=1e-8)
    np.testing.assert_allclose(disk.curvature(s), 1.0, atol=1e-12)


def test_ellipse_perimeter_and_curvature(ellipse):
    assert ellipse.period == pytest.approx(8.0 * special.ellipe(0.75), rel=1e-10)
    np.testing.assert_allclose(ellipse.point(0.0), [2.0, 0.0], atol=1e-12)
    assert float(ellipse.curvature(0.0)) == pytest.approx(2.0, rel=1e-10)
    assert float(ellipse.curvature(0.25 * ellipse.period)) == pytest.approx(0.25, rel=1e-8)
    s = np.linspace(0.0, ellipse.period, 17)
    np.testing.assert_allclose(ellipse.speed(s), 1.0, atol=1e-7)


def test_round_ellipse_matches_disk(disk):
    round_ellipse = make_curve('ellipse', a=1.0, b=1.0)
    assert round_ellipse.period == pytest.approx(disk.period, rel=1e-12)
    s = np.linspace(0.0, 6.0, 7)
    np.testing.assert_allclose(round_ellipse.point(s), disk.point(s), atol=1e-10)


def test_normal_is_outward_and_curve_is_counterclockwise(ellipse):
    s = np.linspace(0.0, ellipse.period, 9)[:-1]
    points = ellipse.point(s)
    assert np.all(np.sum(points * ellipse.normal(s), axis=1) > 0)
    assert ellipse.signed_area() == pytest.approx(2 * math.pi, rel=1e-5)


def test_star_preset_and_projection():
    star = make_curve('star', radius=1.0, amplitude=0.2, lobes=5)
    s = np.array([0.3, 1.7, 4.0])
    np.testing.assert_allclose(star.project(star.point(s)), s, atol=1e-9)


@pytest.mark.parametrize('name, params', [
    ('disk', {'radius': -1.0}),
    ('ellipse', {'a': 1.0, 'b': 0.0}),
    ('star', {'amplitude': 1.5}),
    ('square', {}),
])
def test_invalid_presets(name, params):
    with pytest.raises(GeometryError):
        make_curve(name, **params)


def test_disk_mesh_is_disk_like(disk_mesh, disk):
    stats = disk_mesh.quality_stats()
    assert stats['euler_characteristic'] == 1
    assert stats['min_angle_deg'] > 10.0
    assert stats['max_edge'] < 0.25
    boundary = disk_mesh.vertices[disk_mesh.boundary_vertices]
    np.testing.assert_allclose(np.linalg.norm(boundary, axis=1), 1.0, atol=1e-12)
    assert np.all(disk_mesh.areas() > 0)
    assert disk_mesh.boundary_edge_lengths().sum() == pytest.approx(disk.period, rel=1e-12)


def test_grading_refines_near_marked_point(ellipse):
    h = 0.2
    mesh = generate_mesh(ellipse, h, GradingSpec(points=[(2.0, 0.0)], factor=8.0))
    assert mesh.quality_stats()['euler_characteristic'] == 1
    assert float(mesh.local_boundary_size(0.0)) <= h / 4
    assert float(mesh.local_boundary_size(0.5 * ellipse.period)) > h / 2


def test_invalid_h_is_rejected(disk):
    with pytest.raises(GeometryError):
        generate_mesh(disk, 0.0)


def test_mesh_file_round_trip(tmp_path, coarse_disk_mesh, disk):
    path = tmp_path / 'mesh.txt'
    write_mesh(coarse_disk_mesh, path)
    loaded = read_mesh(path, curve=disk, h=coarse_disk_mesh.h)
    np.testing.assert_array_equal(loaded.vertices, coarse_disk_mesh.vertices)
    np.testing.assert_array_equal(loaded.triangles, coarse_disk_mesh.triangles)
    np.testing.assert_array_equal(loaded.boundary_params, coarse_disk_mesh.boundary_params)


def test_parse_marked_points():
    points, factor = parse_marked_points('(2,0):8;(-2, 0):8')
    assert points == [(2.0, 0.0), (-2.0, 0.0)]
    assert factor == 8.0
    with pytest.raises(GeometryError):
        parse_marked_points('(2;0)')


def test_disk_chart_graph(disk):
    chart = FlatChart(disk, 0.0)
    x1 = np.linspace(-0.5, 0.5, 11)
    np.testing.assert_allclose(chart.rho(x1), 1.0 - np.sqrt(1.0 - x1 ** 2), atol=1e-12)
    rho, rho1, rho2 = chart.rho_derivatives(np.array([0.0, 0.3]))
    np.testing.assert_allclose(rho1, [0.0, 0.3 / math.sqrt(1 - 0.09)], atol=1e-10)
    assert rho2[0] == pytest.approx(1.0, rel=1e-10)
    assert chart.curvature == pytest.approx(1.0)


def test_chart_flattens_boundary_and_inverts(ellipse):
    chart = local_chart(ellipse, 0.0)
    s = np.array([-0.1, 0.0, 0.15])
    flat = chart.flatten(ellipse.point(s))
    np.testing.assert_allclose(flat[:, 1], 0.0, atol=1e-10)
    y = np.array([[0.05, 0.1], [-0.1, 0.02]])
    np.testing.assert_allclose(chart.flatten(chart.pullback(y)), y, atol=1e-10)
    np.testing.assert_allclose(chart.boundary_parameter(flat[:, 0]), np.mod(s, ellipse.period), atol=1e-10)


def test_chart_rejects_points_outside_radius(disk):
    chart = FlatChart(disk, 0.0)
    with pytest.raises(ChartError):
        chart.pullback(np.array([0.0, 2.0 * chart.radius]))
