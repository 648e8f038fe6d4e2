import math

import numpy as np
import pytest

from diagnostics import AnalyticField, GoldenStore, ReportBuilder, arc_window, beta_integral, c_delta, detect_peaks, \
    energy_check, extrapolate, far_field_check, green_representation_check, pohozaev_residual, property_checks, \
    report_header, rescale_profile, trend_summary, write_plot_columns, write_report_csv, write_report_json
from errors import DiagnosticsError, NoConcentrationError
from fem_core import energy, read_field, write_field
from models import SQRT_E, TWO_PI_E, BoundarySolution, BranchEntry, CheckStatus, ConcentrationReport, PeakRecord, \
    SolutionBranch, epsilon_scale, format_number
from tests.helpers import bump_field, constant_field


def test_detect_peaks_orders_by_curve_parameter(disk_mesh):
    u = bump_field(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [2.0, 1.5], width=0.3, base=0.5, p=10.0)
    peaks = detect_peaks(u)
    assert [peak.index for peak in peaks] == [0, 1]
    assert peaks[0].s == pytest.approx(0.0, abs=1e-12)
    assert peaks[0].amplitude == pytest.approx(2.5, rel=1e-6)
    assert peaks[1].s == pytest.approx(math.pi, abs=0.06)
    assert peaks[1].amplitude < peaks[0].amplitude

    strongest = detect_peaks(u, max_peaks=1)
    assert len(strongest) == 1
    assert strongest[0].s == pytest.approx(0.0, abs=1e-12)


def test_peak_order_does_not_depend_on_heights(disk_mesh):
    first = detect_peaks(bump_field(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [2.0, 1.5], width=0.3, base=0.5, p=10.0))
    second = detect_peaks(bump_field(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [1.5, 2.0], width=0.3, base=0.5, p=10.0))
    assert [peak.s for peak in first] == [peak.s for peak in second]
    assert first[0].amplitude == pytest.approx(second[1].amplitude, rel=1e-12)
    assert first[1].amplitude == pytest.approx(second[0].amplitude, rel=1e-12)


def test_epsilon_follows_stored_values(tmp_path, disk_mesh):
    u = bump_field(disk_mesh, [(1.0, 0.0)], [1.2], width=0.3, base=0.5, p=10.0)
    write_field(u, tmp_path / 'u.txt')
    loaded = read_field(tmp_path / 'u.txt', disk_mesh)
    peak = detect_peaks(loaded, p=10.0)[0]
    vertex = disk_mesh.boundary_vertices[int(np.argmin(np.abs(disk_mesh.boundary_vertex_params - peak.s)))]
    assert peak.amplitude == loaded.values[vertex]
    assert peak.epsilon == pytest.approx(epsilon_scale(10.0, loaded.values[vertex]), rel=1e-14)
    assert peak.epsilon == pytest.approx(detect_peaks(u)[0].epsilon, rel=1e-12)


def test_flat_field_has_no_peaks(disk_mesh):
    with pytest.raises(NoConcentrationError) as info:
        detect_peaks(constant_field(disk_mesh, 0.5, p=10.0))
    assert str(info.value) == 'no concentration detected'
    with pytest.raises(ValueError):
        detect_peaks(constant_field(disk_mesh, 0.5))


def test_arc_window_on_disk(disk):
    s_lo, s_hi = arc_window(disk, 0.0, 0.5)
    half = 2.0 * math.asin(0.25)
    assert s_lo == pytest.approx(-half, abs=1e-10)
    assert s_hi == pytest.approx(half, abs=1e-10)
    with pytest.raises(DiagnosticsError):
        arc_window(disk, 0.0, 3.0)


def test_beta_integral_of_constant_field(disk_mesh):
    u = constant_field(disk_mesh, 2.0, p=1.0)
    peak = PeakRecord(index=0, s=0.0, point=[1.0, 0.0], amplitude=2.0, p=1.0)
    result = beta_integral(u, peak, r=0.5)
    assert result.beta == pytest.approx(4.0 * math.asin(0.25), rel=1e-8)
    assert result.c == pytest.approx(2.0 * result.beta)
    assert peak.beta == result.beta
    assert c_delta(u, peak, 0.5) == pytest.approx(8.0 * math.asin(0.25), rel=1e-8)


def test_beta_radius_must_not_reach_another_peak(disk_mesh):
    u = constant_field(disk_mesh, 2.0, p=1.0)
    peaks = [PeakRecord(index=0, s=0.0, point=[1.0, 0.0], amplitude=2.0, p=1.0),
             PeakRecord(index=1, s=math.pi, point=[-1.0, 0.0], amplitude=2.0, p=1.0)]
    with pytest.raises(DiagnosticsError):
        beta_integral(u, peaks[0], r=1.5, peaks=peaks)


def test_pohozaev_identity_for_cosh(disk):
    field = AnalyticField(value=lambda x: np.cosh(x[:, 0]),
                          gradient=lambda x: np.stack([np.sinh(x[:, 0]), np.zeros(len(x))], axis=1),
                          curve=disk)
    result = pohozaev_residual(field, 0.0, delta=0.3)
    assert result.lhs > 0
    assert result.residual < 1e-4


def test_pohozaev_of_zero_field(disk):
    field = AnalyticField(value=lambda x: np.zeros(len(x)), gradient=lambda x: np.zeros((len(x), 2)), curve=disk)
    assert pohozaev_residual(field, 1.0, delta=0.2).residual == 0.0


def test_pohozaev_needs_a_curve():
    field = AnalyticField(value=lambda x: np.zeros(len(x)), gradient=lambda x: np.zeros((len(x), 2)))
    with pytest.raises(DiagnosticsError):
        pohozaev_residual(field, 0.0)


def test_property_checks_need_peaks(disk_mesh):
    with pytest.raises(NoConcentrationError):
        property_checks(constant_field(disk_mesh, 1.0, p=10.0), [])


def test_property_checks_of_two_bumps(disk_mesh):
    u = bump_field(disk_mesh, [(1.0, 0.0), (-1.0, 0.0)], [2.0, 1.5], width=0.3, base=0.5, p=10.0)
    peaks = detect_peaks(u)
    checks = property_checks(u, peaks)
    assert checks['separation_ratio'] > 1.0
    assert checks['boundary_ratio'] < 1e-2
    assert checks['p4_sup'] > 0


def test_extrapolation_is_exact_for_the_model():
    ps = [10.0, 20.0, 40.0]
    values = [2.0 + 3.0 / p + 5.0 * math.log(p) / p for p in ps]
    fit = extrapolate(ps, values)
    assert fit.limit == pytest.approx(2.0, rel=1e-9)
    np.testing.assert_allclose(fit.coefficients, [2.0, 3.0, 5.0], rtol=1e-8)

    fit = extrapolate([10.0, 20.0], [2.0 + 3.0 / 10.0, 2.0 + 3.0 / 20.0])
    assert fit.limit == pytest.approx(2.0, rel=1e-12)
    assert extrapolate([10.0], [1.5]).limit == pytest.approx(1.5)
    with pytest.raises(ValueError):
        extrapolate([], [])


def test_extrapolation_uses_the_largest_p():
    fit = extrapolate([4.0, 40.0, 10.0, 20.0], [100.0, 1.0, 1.0, 1.0])
    assert fit.ps == [10.0, 20.0, 40.0]
    assert fit.limit == pytest.approx(1.0, rel=1e-9)


def test_golden_store_records_then_compares(tmp_path):
    path = tmp_path / 'golden.json'
    store = GoldenStore(path)
    first = store.check('sup_norm', 1.65)
    assert first.passed
    assert first.message == 'recorded'
    store.save()
    assert path.exists()

    reloaded = GoldenStore(path)
    assert reloaded.check('sup_norm', 1.65 * (1 + 1e-9)).passed
    failed = reloaded.check('sup_norm', 1.7)
    assert failed.status == CheckStatus.FAILED
    assert failed.target == 1.65
    assert reloaded.check('sup_norm', math.nan).status == CheckStatus.SKIPPED


def test_energy_check_arithmetic():
    peaks = [PeakRecord(index=0, s=0.0, point=[1.0, 0.0], amplitude=SQRT_E, p=10.0)]
    result = energy_check(2.0, 10.0, peaks)
    assert result['p_energy'] == pytest.approx(20.0)
    assert result['target'] == pytest.approx(TWO_PI_E)
    assert result['lower_bound'] == pytest.approx(TWO_PI_E)
    assert result['deviation'] == pytest.approx((20.0 - TWO_PI_E) / TWO_PI_E)
    assert result['lower_bound_holds']
    assert not energy_check(1.0, 10.0, peaks)['lower_bound_holds']
    assert math.isnan(energy_check(1.0, 10.0, [])['deviation'])


def _peak_report(p, sup_norm, dirichlet):
    report = ConcentrationReport(p=p, sup_norm=sup_norm, dirichlet=dirichlet)
    report.peaks = [PeakRecord(index=0, s=0.0, point=[1.0, 0.0], amplitude=sup_norm, p=p,
                               beta=2 * math.pi, c=2 * math.pi * SQRT_E)]
    return report


def test_trend_summary_passes_on_limit_values():
    reports = [_peak_report(p, SQRT_E + 1.0 / p, TWO_PI_E / p) for p in (10.0, 20.0, 40.0)]
    trend, verdicts = trend_summary(reports)
    assert trend['sup_norm']['limit'] == pytest.approx(SQRT_E, rel=1e-8)
    assert set(verdicts) == {'sup_norm', 'p_energy', 'beta_1', 'c_1'}
    assert all(verdict.passed for verdict in verdicts.values())


def test_trend_summary_without_concentration():
    assert trend_summary([ConcentrationReport(p=10.0, sup_norm=0.5, dirichlet=0.1)]) == ({}, {})


def _flat_branch(mesh):
    branch = SolutionBranch(provenance={'ansatz': 'constant'})
    for p in (6.0, 8.0):
        field = constant_field(mesh, 0.5, p=p)
        solution = BoundarySolution(field=field, p=p, iterations=0, residual_history=[0.0], ansatz='constant')
        branch.add(BranchEntry(p=p, solution=solution, energy=energy(field, p)))
    return branch


def test_report_on_flat_branch_records_no_concentration(coarse_disk_mesh):
    result = ReportBuilder().build(_flat_branch(coarse_disk_mesh))
    assert [report.m for report in result.reports] == [0, 0]
    assert result.reports[0].message == 'no concentration detected'
    assert result.reports[0].checks['peaks'].status == CheckStatus.FAILED
    assert result.trend == {}
    assert result.max_peaks == 0


def test_report_rejects_empty_branch():
    with pytest.raises(DiagnosticsError):
        ReportBuilder().build(SolutionBranch())


def test_report_files(tmp_path, coarse_disk_mesh):
    result = ReportBuilder().build(_flat_branch(coarse_disk_mesh))
    csv_path = tmp_path / 'report.csv'
    write_report_csv(result, csv_path)
    lines = csv_path.read_text().splitlines()
    assert lines[0] == ','.join(report_header(1))
    assert lines[0] == 'p,m,sup_norm,p_energy,beta_1,c_1,pohozaev_res,p4_sup,phi_grad_norm'
    assert lines[1].startswith('6,0,0.5,')
    assert len(lines) == 3

    write_report_json(result, tmp_path / 'report.json')
    assert (tmp_path / 'report.json').exists()

    files = write_plot_columns(result, tmp_path / 'plots')
    sup_lines = files[0].read_text().splitlines()
    assert sup_lines[0] == '# p sup_norm sqrt_e'
    assert sup_lines[1] == f"6 0.5 {format_number(SQRT_E)}"
    energy_lines = files[1].read_text().splitlines()
    assert energy_lines[1].endswith(' 0')


def _solved_peak(branch, p):
    solution = branch.solution_at(p)
    peaks = detect_peaks(solution)
    assert len(peaks) == 1
    return solution, peaks[0]


@pytest.mark.slow
def test_rescaled_profile_of_solved_bubble(bubble_branch):
    solution, peak = _solved_peak(bubble_branch, 8.0)
    samples = rescale_profile(solution, peak, window=2.0)
    assert samples.w[0] == pytest.approx(0.0, abs=1e-9)
    assert samples.max_value <= 1e-8
    assert samples.error < 0.5
    assert peak.profile_error == samples.error


@pytest.mark.slow
def test_beta_and_pohozaev_of_solved_bubble(bubble_branch):
    solution, peak = _solved_peak(bubble_branch, 8.0)
    result = beta_integral(solution, peak)
    assert result.beta == pytest.approx(2 * math.pi, rel=0.25)
    assert peak.c == pytest.approx(result.beta * peak.amplitude)
    pohozaev = pohozaev_residual(solution, peak.s, delta=0.3)
    assert pohozaev.lhs > 0
    assert pohozaev.residual < 0.5


@pytest.mark.slow
def test_green_representation_of_solved_bubble(bubble_branch, graded_green_solver):
    solution, peak = _solved_peak(bubble_branch, 8.0)
    terms = green_representation_check(solution, peak, graded_green_solver)
    assert terms['value'] == peak.amplitude
    assert terms['error'] < 0.15
    assert terms['C'] > 0


@pytest.mark.slow
def test_far_field_approaches_green_limit(bubble_branch, graded_green_solver):
    low = far_field_check(bubble_branch.solution_at(6.0), detect_peaks(bubble_branch.solution_at(6.0)),
                          graded_green_solver)
    high = far_field_check(bubble_branch.solution_at(10.0), detect_peaks(bubble_branch.solution_at(10.0)),
                           graded_green_solver)
    assert high['error'] < low['error']
    assert high['sup_far'] < low['sup_far']
    assert high['delta'] == 0.5
    assert high['vertices'] > 0
    assert np.isfinite(high['gradient_error'])


def test_far_field_needs_peaks(disk_mesh):
    with pytest.raises(NoConcentrationError):
        far_field_check(constant_field(disk_mesh, 1.0, p=10.0), [], solver=None)


@pytest.mark.slow
def test_report_on_concentrated_branch(bubble_branch, graded_green_solver):
    result = ReportBuilder(green_solver=graded_green_solver).build(bubble_branch)
    assert [report.m for report in result.reports] == [1, 1, 1]
    for report in result.reports:
        for name in ('beta_1', 'pohozaev_1', 'far_field', 'energy_lower_bound'):
            assert report.checks[name].status in (CheckStatus.PASSED, CheckStatus.FAILED)
        assert report.checks['beta_1'].target == pytest.approx(2 * math.pi)
        assert report.peaks[0].c > 0
        assert report.green_terms
    far = [report.checks['far_field'].value for report in result.reports]
    assert far[-1] < far[0]
    assert 'sup_norm' in result.verdicts
    assert result.trend['sup_norm']['limit'] > 0
    assert result.max_peaks == 1
