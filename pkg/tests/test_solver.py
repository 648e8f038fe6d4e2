import math

import numpy as np
import pytest
from pydantic import ValidationError
from scipy.special import iv

from errors import ConvergenceError, DeflationError, PeakCollapseError, PeakCountError, SolverError, ZeroSolutionError
from fem_core import boundary_load, energy, l2_error, probe
from models import SQRT_E, BoundarySolution, BranchEntry, SolutionBranch, SolveStatus
from solver import PrescribedFlux, SolveConfig, ansatz_floor, bubble_ansatz, check_peak_sites, constant_ansatz, \
    continuation_schedule, continue_in_p, geometric_schedule, multi_peak_solve, newton_solve, read_branch, \
    rescale_seed, summed_ansatz, transport_field, write_branch
from tests.helpers import bump_field, constant_field, cosh_flux


def test_solve_config_validation():
    assert SolveConfig().schedule == [10.0]
    with pytest.raises(ValidationError):
        SolveConfig(schedule=[10.0, 5.0])
    with pytest.raises(ValidationError):
        SolveConfig(tolerance=0.0)
    with pytest.raises(ValidationError):
        SolveConfig(unknown=1)


def test_geometric_schedule():
    np.testing.assert_allclose(geometric_schedule(10, 40, 3), [10.0, 20.0, 40.0])
    assert geometric_schedule(5, 5, 1) == [5.0]
    with pytest.raises(ValueError):
        geometric_schedule(10, 5, 3)


@pytest.mark.parametrize('p', [4.0, 10.0, 40.0])
def test_ansatz_floor_is_a_tenth_of_amplitude(p):
    assert ansatz_floor(p, SQRT_E) == pytest.approx(0.1 * SQRT_E)


def test_bubble_ansatz_shape(graded_disk_mesh, disk):
    p = 6.0
    u = bubble_ansatz(graded_disk_mesh, disk, 0.0, p)
    assert u.sup_norm <= SQRT_E + 1e-12
    value, _ = probe(u, np.array([1.0, 0.0]))
    assert value == pytest.approx(SQRT_E, rel=1e-10)
    assert u.values.min() >= ansatz_floor(p, SQRT_E) - 1e-12
    far, _ = probe(u, np.array([-1.0, 0.0]))
    assert far == pytest.approx(ansatz_floor(p, SQRT_E))
    with pytest.raises(ValueError):
        bubble_ansatz(graded_disk_mesh, disk, 0.0, 1.5)


def test_summed_ansatz_has_one_bump_per_site(disk_mesh, disk):
    params = disk_mesh.boundary_vertex_params
    k = int(np.argmin(np.abs(params - math.pi)))
    u = summed_ansatz(disk_mesh, disk, [0.0, params[k]], 4.0)
    right, _ = probe(u, np.array([1.0, 0.0]))
    left, _ = probe(u, disk_mesh.vertices[disk_mesh.boundary_vertices[k]])
    middle, _ = probe(u, np.array([0.0, 0.0]))
    assert right == pytest.approx(SQRT_E, rel=1e-6)
    assert left == pytest.approx(SQRT_E, rel=1e-6)
    assert middle < 0.5 * SQRT_E


def test_initial_field_must_be_positive_on_boundary(disk_mesh):
    with pytest.raises(SolverError):
        newton_solve(constant_field(disk_mesh, 0.0), 3.0)


def test_linear_problem_converges_to_zero(disk_mesh, disk_system):
    with pytest.raises(ZeroSolutionError) as info:
        newton_solve(constant_field(disk_mesh, 1.0), 1.0, system=disk_system)
    assert info.value.iterations <= 3
    assert info.value.p == 1.0
    assert str(info.value) == 'converged to zero solution'


def test_constant_start_lands_on_zero(disk_mesh, disk_system):
    with pytest.raises(ZeroSolutionError):
        newton_solve(constant_ansatz(disk_mesh, p=10.0), 10.0, system=disk_system)


def test_prescribed_flux_reproduces_cosh(disk_mesh, disk_system, disk):
    flux = PrescribedFlux(boundary_load(disk_mesh, cosh_flux(disk)))
    solution = newton_solve(constant_field(disk_mesh, 1.0), 2.0, boundary=flux, system=disk_system)
    assert solution.iterations == 1
    assert solution.status == SolveStatus.CONVERGED
    assert solution.ansatz == 'prescribed flux'
    assert solution.residual_history[-1] <= SolveConfig().tolerance
    assert l2_error(solution.field, lambda x: np.cosh(x[:, 0])) < 2e-2


def test_rescale_seed_keeps_sup_norm(disk_mesh):
    u = constant_field(disk_mesh, 1.0).copy(values=1.0 + 0.5 * disk_mesh.vertices[:, 0] ** 2, p=10.0)
    rescaled = rescale_seed(u, 10.0, 20.0)
    assert rescaled.sup_norm == pytest.approx(u.sup_norm)
    assert rescaled.p == 20.0
    assert np.all(rescaled.values >= u.values - 1e-12)


def trivial_solution(mesh, p, value=0.5):
    field = constant_field(mesh, value, p=p)
    return BoundarySolution(field=field, p=p, iterations=0, residual_history=[0.0], ansatz='constant')


def test_continuation_rejects_mismatched_seed(coarse_disk_mesh):
    with pytest.raises(ValueError):
        continue_in_p(trivial_solution(coarse_disk_mesh, 6.0), [8.0, 10.0])


def test_multi_peak_sites_must_be_separated(disk_mesh, disk):
    with pytest.raises(ValueError):
        multi_peak_solve(disk_mesh, disk, [0.0, 1e-6], 10.0)


def test_branch_order_is_enforced(coarse_disk_mesh):
    branch = SolutionBranch()
    solution = trivial_solution(coarse_disk_mesh, 6.0)
    branch.add(BranchEntry(p=6.0, solution=solution, energy=energy(solution.field, 6.0)))
    with pytest.raises(ValueError):
        branch.add(BranchEntry(p=6.0, solution=solution, energy=energy(solution.field, 6.0)))


def test_branch_round_trip(tmp_path, coarse_disk_mesh):
    branch = SolutionBranch(provenance={'ansatz': 'constant'})
    for p in (6.0, 8.0):
        solution = trivial_solution(coarse_disk_mesh, p, value=0.5 + 0.01 * p)
        branch.add(BranchEntry(p=p, solution=solution, energy=energy(solution.field, p)))
    write_branch(branch, tmp_path / 'branch')
    loaded = read_branch(tmp_path / 'branch')
    assert loaded.schedule == [6.0, 8.0]
    assert loaded.provenance == {'ansatz': 'constant'}
    np.testing.assert_array_equal(loaded.solution_at(8.0).field.values, branch.solution_at(8.0).field.values)
    assert loaded.entries[0].energy.dirichlet == branch.entries[0].energy.dirichlet
    assert loaded.entries[0].solution.mesh.curve.name == 'disk'
    with pytest.raises(FileNotFoundError):
        read_branch(tmp_path / 'missing')


@pytest.mark.slow
def test_single_bubble_solution_on_graded_disk(graded_disk_mesh, disk):
    p = 6.0
    initial = bubble_ansatz(graded_disk_mesh, disk, 0.0, p)
    solution = newton_solve(initial, p, ansatz='bubble', sites=[0.0])
    assert solution.status == SolveStatus.CONVERGED
    assert 1.0 < solution.sup_norm < 3.0
    boundary = solution.field.boundary_values
    peak = graded_disk_mesh.boundary_vertex_params[int(np.argmax(boundary))]
    assert float(disk.arc_distance(peak, 0.0)) < 0.3
    residual = solution.residual_history
    assert residual[-1] < residual[0]


class UphillBoundary:
    """Zero boundary term whose Jacobian turns every Newton step uphill."""

    def __init__(self, system):
        self.system = system

    def residual(self, u):
        return np.zeros(u.mesh.num_vertices)

    def jacobian(self, u):
        return 2.0 * self.system.operator

    def describe(self):
        return 'uphill'


def test_exhausted_line_search_raises(disk_mesh, disk_system):
    config = SolveConfig(max_halvings=3)
    with pytest.raises(ConvergenceError) as info:
        newton_solve(constant_field(disk_mesh, 1.0), 2.0, config, boundary=UphillBoundary(disk_system),
                     system=disk_system)
    assert 'line search failed' in str(info.value)
    assert info.value.iterations == 1
    assert info.value.last_residual > config.tolerance


def test_transport_field_rotates_on_disk(disk_mesh):
    u = bump_field(disk_mesh, [(1.0, 0.0)], [1.0], width=0.5, base=0.2, p=6.0)
    moved = transport_field(u, 0.0, math.pi, fill=0.2)
    expected = bump_field(disk_mesh, [(-1.0, 0.0)], [1.0], width=0.5, base=0.2).values
    np.testing.assert_allclose(moved, expected, atol=5e-2)


def _bump_solution(mesh, centers, heights):
    field = bump_field(mesh, centers, heights, width=0.3, base=0.5, p=10.0)
    return BoundarySolution(field=field, p=10.0, iterations=0, residual_history=[0.0])


def test_peak_sites_match(disk_mesh):
    solution = _bump_solution(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [2.0, 2.0])
    peaks = check_peak_sites(solution, [0.0, math.pi])
    assert len(peaks) == 2
    assert solution.status == SolveStatus.CONVERGED


def test_far_peak_marks_drift(disk_mesh):
    solution = _bump_solution(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [2.0, 2.0])
    check_peak_sites(solution, [0.0, math.pi - 1.0])
    assert solution.status == SolveStatus.DRIFTED


def test_missing_peak_is_a_collapse(disk_mesh):
    solution = _bump_solution(disk_mesh, [(1.0, 0.0)], [2.0])
    with pytest.raises(PeakCollapseError) as info:
        check_peak_sites(solution, [0.0, math.pi])
    assert info.value.found == 1
    assert info.value.expected == 2
    assert solution.status == SolveStatus.COLLAPSED


def test_extra_peak_is_rejected(disk_mesh):
    angles = [0.0, 2.0 * math.pi / 3.0, 4.0 * math.pi / 3.0]
    solution = _bump_solution(disk_mesh, [(math.cos(a), math.sin(a)) for a in angles], [2.0, 2.0, 2.0])
    with pytest.raises(PeakCountError) as info:
        check_peak_sites(solution, angles[:2])
    assert not isinstance(info.value, PeakCollapseError)
    assert info.value.found == 3
    assert solution.status == SolveStatus.FAILED


def test_continuation_schedule():
    schedule = continuation_schedule(6.0, 10.0)
    assert schedule[0] == pytest.approx(6.0)
    assert schedule[-1] == pytest.approx(10.0)
    ratios = np.array(schedule[1:]) / np.array(schedule[:-1])
    assert np.all(ratios <= 1.25 + 1e-12)
    assert continuation_schedule(6.0, 6.0) == [6.0]


def test_multi_peak_seed_exponent_is_bounded(disk_mesh, disk):
    with pytest.raises(ValueError):
        multi_peak_solve(disk_mesh, disk, [0.0, math.pi], 6.0, p_seed=8.0)


@pytest.mark.slow
def test_continuation_follows_the_bubble(bubble_branch, disk):
    assert bubble_branch.schedule == [6.0, 8.0, 10.0]
    for entry in bubble_branch:
        solution = entry.solution
        assert solution.status == SolveStatus.CONVERGED
        assert solution.residual_history[-1] <= SolveConfig().tolerance
        assert 1.0 < solution.sup_norm < 3.0
        boundary = solution.field.boundary_values
        peak = solution.mesh.boundary_vertex_params[int(np.argmax(boundary))]
        assert float(disk.arc_distance(peak, 0.0)) < 0.1
        assert 5.0 < entry.p * entry.energy.dirichlet < 60.0
    assert bubble_branch.provenance['ansatz'] == 'bubble'


@pytest.mark.slow
def test_constant_one_reaches_radial_solution_and_deflation_excludes_it(bubble_branch, graded_disk_mesh,
                                                                        graded_disk_system):
    p = 6.0
    bubble = bubble_branch.solution_at(p)
    radial = newton_solve(constant_field(graded_disk_mesh, 1.0), p, system=graded_disk_system,
                          deflated=[bubble.field])
    level = (iv(1, 1.0) / iv(0, 1.0)) ** (1.0 / (p - 1.0))
    np.testing.assert_allclose(radial.field.boundary_values, level, rtol=1e-2)
    assert radial.sup_norm < bubble.sup_norm

    with pytest.raises(DeflationError):
        newton_solve(bubble.field, p, system=graded_disk_system, deflated=[bubble.field])


@pytest.mark.slow
def test_two_antipodal_peaks(antipodal_disk_mesh, disk):
    solution = multi_peak_solve(antipodal_disk_mesh, disk, [0.0, math.pi], 10.0)
    assert solution.status == SolveStatus.CONVERGED
    assert solution.p == pytest.approx(10.0)
    assert solution.sites == [0.0, math.pi]
    assert 1.0 < solution.sup_norm < 3.0
    peaks = check_peak_sites(solution, [0.0, math.pi])
    assert float(disk.arc_distance(peaks[0].s, 0.0)) < 0.1
    assert float(disk.arc_distance(peaks[1].s, math.pi)) < 0.1
    assert peaks[0].amplitude == pytest.approx(peaks[1].amplitude, rel=5e-2)
