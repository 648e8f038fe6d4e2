#!/usr/bin/env python3
"""
Command line front end of the blow-up lab.

Subcommands:
    mesh      mesh a preset domain and print its statistics
    solve     bubble ansatz, Newton and continuation over --p-list; writes a branch directory
    diagnose  concentration report of a branch directory (CSV, JSON and gnuplot columns)
    green     Robin function table and phi_m critical configurations

Usage:
    python cli.py mesh --domain disk --h 0.1
    python cli.py solve --domain disk --p-list 6,8 --peaks 0 --output runs/disk
    python cli.py diagnose runs/disk/branch
    python cli.py green --domain disk --robin-samples 16 --phi-crit 2

Exit codes: 0 success, 2 configuration, 3 solver, 4 diagnostics, 1 interruption
or any error outside the LabError hierarchy.
"""

import argparse
import json
import logging
import os
import sys
import traceback
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional

from config import Config, RunConfig
from diagnostics import ReportBuilder, write_plot_columns, write_report_csv, write_report_json
from errors import ConfigError, DiagnosticsError, LabError
from fem_core import assemble_volume
from geometry import GradingSpec, generate_mesh, make_curve, parse_marked_points, write_mesh
from green_robin import get_solver, phi_critical_search, robin_table, write_phi_rows
from models import format_number
from solver import SolveConfig, bubble_ansatz, constant_ansatz, continue_in_p, multi_peak_solve, newton_solve, \
    read_branch, write_branch

logger = logging.getLogger(__name__)


def setup_logging(directory: Path, level=Config.LOG_LEVEL):
    os.makedirs(directory, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, str(level).upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stdout),
            logging.FileHandler(directory / Config.LOG_FILE)
        ],
        force=True
    )


def parse_peaks(text: str) -> Optional[List[float]]:
    """'auto' -> None, otherwise comma separated curve parameters."""
    text = (text or '').strip()
    if text == 'auto':
        return None
    try:
        sites = [float(item) for item in text.split(',') if item.strip()]
    except ValueError:
        raise ConfigError(f"Cannot parse --peaks '{text}', expected 'auto' or s1,s2,...")
    if not sites:
        raise ConfigError("--peaks needs at least one site")
    return sites


class LabRunner:
    """Runs one subcommand against a RunConfig and keeps a stats dict for the summary."""

    def __init__(self, run_config: RunConfig, output: Path):
        self.run_config = run_config
        self.output = Path(output)
        self.stats: Dict = {}
        logger.info("=" * 60)
        logger.info("Blow-up lab starting")
        logger.info(f"Domain: {run_config.domain.name} {run_config.domain.curve_parameters()}")
        logger.info(f"Output: {self.output}")
        logger.info(f"Timestamp: {datetime.now()}")
        logger.info("=" * 60)

    def curve(self):
        domain = self.run_config.domain
        return make_curve(domain.name, **domain.curve_parameters())

    def grading(self, curve, sites=None) -> Optional[GradingSpec]:
        """Grading from the config text, else around the requested peak sites."""
        section = self.run_config.mesh
        if section.grade:
            points, factor = parse_marked_points(section.grade)
            return GradingSpec(points=points, factor=factor or Config.GRADING_FACTOR, core_size=section.core_size)
        if sites:
            return GradingSpec(points=[tuple(curve.point(s)) for s in sites], factor=Config.GRADING_FACTOR,
                               core_size=section.core_size)
        return None

    def mesh(self, curve, sites=None):
        return generate_mesh(curve, self.run_config.mesh.h, self.grading(curve, sites))

    def run_mesh(self) -> Dict:
        curve = self.curve()
        mesh = self.mesh(curve)
        os.makedirs(self.output, exist_ok=True)
        write_mesh(mesh, self.output / 'mesh.txt')
        stats = mesh.quality_stats()
        with open(self.output / 'mesh_stats.json', 'w', encoding='utf-8') as handle:
            json.dump(stats, handle, indent=2, sort_keys=True)
        self.stats.update(stats)
        return stats

    def choose_sites(self, curve) -> List[float]:
        solver_section = self.run_config.solver
        sites = parse_peaks(solver_section.peaks)
        if sites is not None:
            return sites
        coarse = self.mesh(curve)
        green = self.run_config.green
        found = phi_critical_search(coarse, curve, solver_section.m, starts=green.starts, seed=self.run_config.output.seed,
                                    tolerance=green.tolerance, noise_floor=green.noise_floor,
                                    max_steps=green.max_steps)
        best = found[0]
        logger.info(f"Peak sites from phi search - m: {best.m}, Sites: {best.s}, phi: {best.value:.6f}")
        self.stats['phi_value'] = best.value
        return list(best.s)

    def run_solve(self) -> Path:
        section = self.run_config.solver
        curve = self.curve()
        sites = self.choose_sites(curve)
        mesh = self.mesh(curve, sites if section.ansatz == 'bubble' else None)
        system = assemble_volume(mesh)
        config = SolveConfig.from_run_config(self.run_config)
        p0 = section.p_list[0]

        if section.ansatz == 'constant':
            seed = newton_solve(constant_ansatz(mesh, p=p0), p0, config, system=system, ansatz='constant')
        elif len(sites) == 1:
            initial = bubble_ansatz(mesh, curve, sites[0], p0, section.amplitude)
            seed = newton_solve(initial, p0, config, system=system, ansatz='bubble', sites=sites)
        else:
            seed = multi_peak_solve(mesh, curve, sites, p0, config, amplitude=section.amplitude, system=system)

        provenance = {'domain': self.run_config.domain.model_dump(), 'mesh': self.run_config.mesh.model_dump(),
                      'peaks': section.peaks, 'sites': sites, 'ansatz': section.ansatz}
        branch = continue_in_p(seed, section.p_list, config, system=system, provenance=provenance)
        directory = write_branch(branch, self.output / 'branch')
        self.stats.update({'solutions': len(branch), 'schedule': branch.schedule,
                           'sup_norms': [entry.solution.sup_norm for entry in branch]})
        return directory

    def run_diagnose(self, branch_directory, green_checks=True) -> Dict:
        try:
            branch = read_branch(branch_directory)
        except FileNotFoundError as e:
            raise DiagnosticsError(f"Missing branch: {str(e)}")
        mesh = branch.entries[0].solution.mesh
        solver = get_solver(mesh, mesh.curve) if green_checks and mesh.curve is not None else None
        result = ReportBuilder.from_run_config(self.run_config, green_solver=solver).build(branch)
        os.makedirs(self.output, exist_ok=True)
        write_report_csv(result, self.output / 'report.csv')
        write_report_json(result, self.output / 'report.json')
        write_plot_columns(result, self.output)
        self.stats.update({'reports': len(result.reports), 'peaks': [report.m for report in result.reports],
                           'verdicts': {name: v.status.value for name, v in result.verdicts.items()}})
        return self.stats

    def run_green(self) -> Dict:
        section = self.run_config.green
        curve = self.curve()
        mesh = self.mesh(curve)
        solver = get_solver(mesh, curve)
        os.makedirs(self.output, exist_ok=True)
        if section.robin_samples > 0:
            s, values = robin_table(mesh, curve, section.robin_samples, solver)
            with open(self.output / 'robin.csv', 'w', encoding='utf-8') as handle:
                handle.write("s,x,y,robin\n")
                for value, point, r in zip(s, curve.point(s), values):
                    handle.write(f"{format_number(value)},{format_number(point[0])},{format_number(point[1])},"
                                 f"{format_number(r)}\n")
            self.stats['robin_min'] = float(values.min())
            self.stats['robin_max'] = float(values.max())
        if section.phi_crit > 0:
            found = phi_critical_search(mesh, curve, section.phi_crit, starts=section.starts,
                                        solver=solver, seed=self.run_config.output.seed,
                                        tolerance=section.tolerance, noise_floor=section.noise_floor,
                                        max_steps=section.max_steps)
            write_phi_rows(self.output / 'phi_crit.csv', found)
            self.stats['phi_configurations'] = len(found)
            self.stats['phi_best'] = found[0].value if found else None
        return self.stats

    def summary(self, command, duration):
        self.stats['duration_seconds'] = round(duration, 2)
        logger.info("=" * 60)
        logger.info(f"{command.capitalize()} Summary:")
        for key, value in self.stats.items():
            logger.info(f"  {key}: {value}")
        logger.info("=" * 60)


def build_parser():
    parser = argparse.ArgumentParser(description='Boundary concentration laboratory for Delta u = u, du/dnu = u^p')
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='sectioned key = value run config file')
    common.add_argument('--output', help='output directory (default: BLOWUP_OUTPUT_ROOT or config)')
    common.add_argument('--domain', choices=['disk', 'ellipse', 'star'])
    common.add_argument('--radius', type=float)
    common.add_argument('--a', type=float)
    common.add_argument('--b', type=float)
    common.add_argument('--h', type=float, help='target mesh size')
    common.add_argument('--grade', help="marked points '(x,y):factor;...'")
    common.add_argument('--core-size', type=float, help='boundary mesh size at graded points')
    common.add_argument('--seed', type=int)

    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('mesh', parents=[common], help='mesh a domain')

    solve = commands.add_parser('solve', parents=[common], help='solve and continue in p')
    solve.add_argument('--p-list', help='increasing exponents, e.g. 6,8,10')
    solve.add_argument('--peaks', help="peak sites s1,s2,... or 'auto'")
    solve.add_argument('--m', type=int, help='peak count for --peaks auto')
    solve.add_argument('--ansatz', choices=['bubble', 'constant'])

    diagnose = commands.add_parser('diagnose', parents=[common], help='report on a branch directory')
    diagnose.add_argument('branch', help='branch directory written by solve')
    diagnose.add_argument('--no-green', action='store_true', help='skip Green representation and phi checks')

    green = commands.add_parser('green', parents=[common], help='Robin table and phi critical search')
    green.add_argument('--robin-samples', type=int)
    green.add_argument('--phi-crit', type=int, help='m for the phi_m critical search (0 skips)')
    return parser


def load_run_config(args) -> RunConfig:
    run_config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {
        'domain': {'name': args.domain, 'radius': args.radius, 'a': args.a, 'b': args.b},
        'mesh': {'h': args.h, 'grade': args.grade, 'core_size': args.core_size},
        'solver': {'p_list': getattr(args, 'p_list', None), 'peaks': getattr(args, 'peaks', None),
                   'm': getattr(args, 'm', None), 'ansatz': getattr(args, 'ansatz', None)},
        'green': {'robin_samples': getattr(args, 'robin_samples', None), 'phi_crit': getattr(args, 'phi_crit', None)},
        'output': {'directory': args.output, 'seed': args.seed},
    }
    return run_config.with_overrides(overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    start_time = datetime.now()
    try:
        run_config = load_run_config(args)
    except LabError as e:
        print(f"Configuration error: {str(e)}", file=sys.stderr)
        return e.exit_code

    output = run_config.output_directory()
    if args.command == 'diagnose' and not args.output and not run_config.output.directory:
        output = Path(args.branch) / 'report'
    setup_logging(output)

    try:
        runner = LabRunner(run_config, output)
        if args.command == 'mesh':
            stats = runner.run_mesh()
            print(f"V={stats['vertices']} E={stats['edges']} F={stats['triangles']} "
                  f"chi={stats['euler_characteristic']} min_angle={stats['min_angle_deg']:.2f} "
                  f"min_edge={stats['min_edge']:.4g} max_edge={stats['max_edge']:.4g}")
        elif args.command == 'solve':
            directory = runner.run_solve()
            print(f"Branch written to {directory}")
        elif args.command == 'diagnose':
            runner.run_diagnose(args.branch, green_checks=not args.no_green)
            print(f"Report written to {output}")
        else:
            runner.run_green()
            print(f"Green outputs written to {output}")
        runner.summary(args.command, (datetime.now() - start_time).total_seconds())
        return 0

    except KeyboardInterrupt:
        logger.info("Run interrupted by user")
        return 1
    except LabError as e:
        failing_p = getattr(e, 'p', None)
        where = f" at p={failing_p}" if failing_p is not None else ''
        logger.error(f"{args.command} failed{where} - {type(e).__name__}: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        print(f"Error{where}: {str(e)}", file=sys.stderr)
        return e.exit_code
    except Exception as e:
        logger.error(f"{args.command} failed with error: {str(e)}")
        logger.error(f"Full traceback: {traceback.format_exc()}")
        print(f"Error: {str(e)}", file=sys.stderr)
        return 1


if __name__ == '__main__':
    sys.exit(main())
