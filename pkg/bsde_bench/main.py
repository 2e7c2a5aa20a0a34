"""Config-driven benchmark runner: mesh ladder solves, error reports, rate fits and plots."""

import argparse
import csv
import json
import sys
import time
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

from .analysis import (
    TooFewLevelsError,
    error_report,
    fit_rate,
    generator_time_term,
    grid_reference,
    log_corrected_exponent,
    terminal_gap,
)
from .condexp import (
    RegressionSpec,
    UnsupportedEstimatorError,
    UnsupportedFunctionalError,
    make_estimator,
)
from .paths import mesh_stats, sample_ensemble, sub_partition, uniform_partition
from .plotting import NORM_LABELS, emit_plot
from .problems import ProblemError, UnsupportedProblemError, builtin
from .schema import RESULT_COLUMNS, ConfigError, ResultRow, RunConfig, load_config, resolved_document
from .schemes import PicardConfig, PicardDiverged, PreconditionViolated, SchemeKind, solve
from .utils import get_logger, resolve_threads

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_PICARD = 3

# raised when the configured problem, scheme and estimator do not fit together
COMPATIBILITY_ERRORS = (
    ProblemError,
    UnsupportedProblemError,
    UnsupportedEstimatorError,
    UnsupportedFunctionalError,
    PreconditionViolated,
)


class BenchmarkRunner:
    """Runs one configuration over its mesh ladder and writes the result files."""

    def __init__(self, config: RunConfig, out_dir: Path, threads: Optional[int] = None,
                 plot: bool = True, timings: bool = False):
        self.config = config
        self.out_dir = Path(out_dir)
        self.threads = resolve_threads(threads)
        self.plot = plot
        self.timings = timings
        self.level_ms: List[float] = []
        self.reference_ms: Optional[float] = None
        self.terminal_gaps: List[List[float]] = []
        self.time_terms: List[List[float]] = []
        self.picard_ratios: List[List[Any]] = []
        logger.info(f"Benchmark runner initialized (out={self.out_dir}, threads={self.threads})")

    def solve_ladder(self) -> List[ResultRow]:
        config = self.config
        problem = builtin(config.problem.name, {**config.problem.params, 'T': config.T})
        fine = uniform_partition(config.T, config.fine_n)
        ensemble = sample_ensemble(fine, config.n_paths, config.seed, self.threads)

        params = config.estimator.params
        estimator = make_estimator(
            config.estimator.kind, problem, ensemble,
            regression=RegressionSpec(degree=params.degree, ridge=params.ridge, basis=params.basis),
            n_inner=params.inner, seed=config.seed, threads=self.threads
        )
        picard = PicardConfig(tol=config.scheme.picard.tol, max_iter=config.scheme.picard.max_iter)

        def run_scheme(partition):
            return solve(
                config.scheme.kind, problem, partition, ensemble, estimator,
                picard=picard, weight_variant=config.scheme.weight_variant,
                l1_bound=config.scheme.l1_bound
            )

        scored = problem
        fine_solution = None
        if problem.reference is None:
            logger.info(f"No closed-form reference for {problem.name}; solving on the fine grid (n={fine.n}) as reference")
            started = time.perf_counter()
            fine_solution = run_scheme(fine)
            self.reference_ms = (time.perf_counter() - started) * 1000.0
            scored = replace(problem, reference=grid_reference(fine_solution, ensemble))

        rows = []
        for n in config.ladder:
            partition = sub_partition(fine, n)
            is_reference = fine_solution is not None and n == fine.n
            if is_reference:
                solution, wall_ms = fine_solution, self.reference_ms
            else:
                started = time.perf_counter()
                solution = run_scheme(partition)
                wall_ms = (time.perf_counter() - started) * 1000.0
            self.level_ms.append(wall_ms)
            self.terminal_gaps.append([n, terminal_gap(problem, ensemble, partition, config.p)])
            self.time_terms.append([n, generator_time_term(problem.generator, partition)])
            if solution.picard_ratios:
                self.picard_ratios.append([n, solution.picard_ratios[-1]])

            row = ResultRow(
                scheme=config.scheme.kind,
                problem=problem.name,
                n=n,
                mesh=mesh_stats(partition).mesh,
                picard_max_iters=int(solution.picard_iters.max()) if solution.picard_iters is not None else None,
                wall_ms=wall_ms if self.timings else None,
            )
            if is_reference:
                logger.info(f"n={n}: grid reference level, no errors reported, {wall_ms:.0f} ms")
            else:
                report = error_report(solution, scored, ensemble, config.p)
                row = row.model_copy(update={
                    'err_Y_max_p': report.err_Y_max_p,
                    'err_Y_stderr': report.err_Y_stderr,
                    'err_Z_int_L2': report.err_Z_int_L2,
                    'err_Z_stderr': report.err_Z_stderr,
                    'err_max_joint_p': report.err_max_joint_p,
                })
                logger.info(
                    f"n={n}: err_Y_max_p={report.err_Y_max_p:.4e} (±{report.err_Y_stderr:.1e}), "
                    f"err_Z_int_L2={report.err_Z_int_L2:.4e}, err_max_joint_p={report.err_max_joint_p:.4e}, "
                    f"{wall_ms:.0f} ms"
                )
            rows.append(row)
        return rows

    def rates(self, rows: Sequence[ResultRow]) -> Dict[str, Any]:
        rates: Dict[str, Any] = {}
        for norm in NORM_LABELS:
            levels = [(row.mesh, getattr(row, norm)) for row in rows if getattr(row, norm) is not None]
            try:
                fit = fit_rate(levels)
                rates[norm] = {
                    'slope': fit.slope,
                    'intercept': fit.intercept,
                    'r_squared': fit.r_squared,
                    'levels': [list(level) for level in fit.levels],
                    'excluded': [list(level) for level in fit.excluded],
                }
            except TooFewLevelsError as e:
                logger.warning(f"No rate for {norm}: {e}")
                rates[norm] = {'slope': None, 'intercept': None, 'r_squared': None,
                               'levels': [list(level) for level in levels]}
        rates['terminal_gap'] = self.terminal_gaps
        rates['generator_time_term'] = self.time_terms
        if self.config.scheme.kind == SchemeKind.IMPLICIT.value:
            rates['picard_last_ratios'] = self.picard_ratios
        if self.config.scheme.kind == SchemeKind.MALLIAVIN.value:
            rates['log_corrected_exponent'] = [
                [row.mesh, log_corrected_exponent(row.mesh, self.config.p)] for row in rows if row.mesh < 1.0
            ]
        return rates

    def write_outputs(self, rows: Sequence[ResultRow]) -> None:
        self.out_dir.mkdir(parents=True, exist_ok=True)

        results_path = self.out_dir / 'results.csv'
        with open(results_path, 'w', newline='', encoding='utf-8') as f:
            writer = csv.writer(f, lineterminator='\n')
            writer.writerow(RESULT_COLUMNS)
            for row in rows:
                writer.writerow(row.csv_values())

        self._write_json('rates.json', self.rates(rows))
        self._write_json('resolved-config.json', resolved_document(self.config))
        if self.timings:
            self._write_json('timings.json', {
                'levels': [{'n': n, 'wall_ms': ms} for n, ms in zip(self.config.ladder, self.level_ms)],
                'total_ms': sum(self.level_ms),
                'reference_ms': self.reference_ms,
            })
        if self.plot:
            emit_plot(rows, self.out_dir / 'plot.svg')
        logger.info(f"Results written to {self.out_dir}")

    def _write_json(self, name: str, document: Dict[str, Any]) -> None:
        with open(self.out_dir / name, 'w', encoding='utf-8') as f:
            json.dump(document, f, indent=2, sort_keys=True)
            f.write('\n')

    def run(self) -> List[ResultRow]:
        config = self.config
        logger.info("=" * 60)
        logger.info(f"BSDE benchmark: {config.scheme.kind} scheme on {config.problem.name}")
        logger.info(f"Ladder {config.ladder}, fine_n={config.fine_n}, paths={config.n_paths}, seed={config.seed}")
        logger.info("=" * 60)
        rows = self.solve_ladder()
        self.write_outputs(rows)
        return rows


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='BSDE scheme convergence benchmark')
    parser.add_argument('--config', type=Path, required=True, help='Run configuration (JSON)')
    parser.add_argument('--out', type=str, help='Output directory (overrides config "out")')
    parser.add_argument('--seed', type=int, help='Seed override (unsigned 64-bit)')
    parser.add_argument('--threads', type=int, help='Worker threads (default: BSDE_THREADS or CPU count)')
    parser.add_argument('--no-plot', action='store_true', help='Do not write plot.svg')
    parser.add_argument('--timings', action='store_true',
                        help='Record wall_ms in results.csv and write timings.json')
    return parser


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse flags, run the benchmark, return the exit code."""
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, {'seed': args.seed, 'out': args.out})
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        return EXIT_CONFIG

    runner = BenchmarkRunner(
        config, Path(config.out), threads=args.threads, plot=not args.no_plot, timings=args.timings
    )
    try:
        runner.run()
    except COMPATIBILITY_ERRORS as e:
        logger.error(f"Configuration cannot be run: {e}")
        return EXIT_CONFIG
    except PicardDiverged as e:
        logger.error(str(e))
        return EXIT_PICARD
    except Exception as e:
        logger.error(f"Benchmark failed: {e}")
        traceback.print_exc()
        return EXIT_FAILURE
    return EXIT_OK


def main():
    """Entry point for the benchmark."""
    sys.exit(run())


if __name__ == '__main__':
    main()
