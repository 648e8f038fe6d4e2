import pytest

from fem_core import assemble_volume
from geometry import GradingSpec, generate_mesh, make_curve
from green_robin import GreenFunctionSolver
from solver import bubble_ansatz, continue_in_p, newton_solve


@pytest.fixture(scope='session')
def disk():
    return make_curve('disk', radius=1.0)


@pytest.fixture(scope='session')
def ellipse():
    return make_curve('ellipse', a=2.0, b=1.0)


@pytest.fixture(scope='session')
def coarse_disk_mesh(disk):
    return generate_mesh(disk, 0.2)


@pytest.fixture(scope='session')
def disk_mesh(disk):
    return generate_mesh(disk, 0.1)


@pytest.fixture(scope='session')
def disk_system(disk_mesh):
    return assemble_volume(disk_mesh)


@pytest.fixture(scope='session')
def graded_disk_mesh(disk):
    grading = GradingSpec(points=[(1.0, 0.0)], factor=8.0, core_size=0.003)
    return generate_mesh(disk, 0.1, grading)


@pytest.fixture(scope='session')
def antipodal_disk_mesh(disk):
    grading = GradingSpec(points=[(1.0, 0.0), (-1.0, 0.0)], factor=8.0, core_size=0.003)
    return generate_mesh(disk, 0.1, grading)


@pytest.fixture(scope='session')
def graded_disk_system(graded_disk_mesh):
    return assemble_volume(graded_disk_mesh)


@pytest.fixture(scope='session')
def bubble_branch(graded_disk_mesh, graded_disk_system, disk):
    """Single boundary bubble at s = 0 followed from p = 6 to p = 10."""
    seed = newton_solve(bubble_ansatz(graded_disk_mesh, disk, 0.0, 6.0), 6.0, system=graded_disk_system,
                        ansatz='bubble', sites=[0.0])
    return continue_in_p(seed, [6.0, 8.0, 10.0], system=graded_disk_system)


@pytest.fixture(scope='session')
def graded_green_solver(graded_disk_mesh, disk):
    return GreenFunctionSolver(graded_disk_mesh, disk)
