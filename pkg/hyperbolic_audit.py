#!/usr/bin/env python3
"""
Hyperbolic DDC identification lab - command line front end.

Subcommands:
    solve      solve a model config, write CCPs and values
    simulate   simulate a panel and re-estimate (P, Pi) by cell frequencies
    audit      rank audits, solution counts and range probes
    identify   exclusion-restriction identified sets for delta (exponential case)
    examples   list the built-in systems

Exit status: 0 success, 1 numerical failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
import time
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from exclusion_ident import (
    ExclusionRestriction,
    all_restrictions,
    identify_all,
    intersect_sets,
)
from genericity_lab import (
    builtin_examples,
    count_solutions,
    range_probe,
    rank_at,
    regular_value_audit,
    wrap_ddc,
)
from hyperbolic_model import (
    DataSet,
    SolvedModel,
    ccp_frame,
    estimate_frequencies,
    load_dataset,
    load_model_config,
    simulate_panel,
    solve_fixed_point,
    value_frame,
)
from lab_config import SCHEMA_VERSION, load_settings, resolve_workers
from lab_errors import ConfigError, HyperbolicLabError, NumericalError
from system_builder import SystemDims, design_check, params_from_primitives, residual_frame

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_USAGE = 2


def _to_jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays (and nested containers) for json.dump."""
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    return obj


class ReportWriter:
    """Single writer for every file a run produces."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir
        self.outputs: List[str] = []
        os.makedirs(out_dir, exist_ok=True)

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    def json(self, name: str, doc: Dict[str, Any]) -> str:
        doc = {'schema_version': SCHEMA_VERSION, **doc}
        path = self.path(name)
        with open(path, 'w') as f:
            json.dump(_to_jsonable(doc), f, indent=2, sort_keys=True)
            f.write('\n')
        self.outputs.append(path)
        print(f"📄 {path}")
        return path

    def csv(self, name: str, frame) -> str:
        path = self.path(name)
        frame.to_csv(path, index=False, float_format='%.17g')
        self.outputs.append(path)
        print(f"📄 {path}")
        return path


def _settings(args) -> Dict[str, Any]:
    settings = load_settings(args.settings)
    for key in ('seed', 'workers', 'tol', 'res_tol', 'svd_tol', 'cluster_tol',
                'grid_size', 'root_tol'):
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    if args.out:
        settings['output_dir'] = args.out
    settings['workers'] = resolve_workers(settings['workers'])
    return settings


def _solve(primitives, kernel, settings) -> SolvedModel:
    return solve_fixed_point(primitives, kernel, tol=settings['tol'], max_iter=settings['max_iter'],
                             damping=settings['damping'], policy_steps=settings['policy_steps'])


def _load_data(args, settings) -> Tuple[DataSet, Optional[np.ndarray]]:
    """Data from --data, or generated from the --config model along with its parameters."""
    if getattr(args, 'data', None):
        return load_dataset(args.data), None
    if not args.config:
        raise ConfigError("either --config (model) or --data is required")
    primitives, kernel = load_model_config(args.config)
    solved = _solve(primitives, kernel, settings)
    return DataSet.from_solution(solved, kernel, primitives.state_space), params_from_primitives(primitives)


# -----------------------------
# Commands
# -----------------------------

def cmd_solve(args, settings, writer: ReportWriter) -> Dict[str, Any]:
    if not args.config:
        raise ConfigError("solve requires --config")
    primitives, kernel = load_model_config(args.config)
    print(f"🧮 Solving {args.config} (I={primitives.n_choices - 1}, X={primitives.state_space.n_states})")
    solved = _solve(primitives, kernel, settings)
    writer.csv('ccp.csv', ccp_frame(solved, primitives.state_space))
    writer.csv('value.csv', value_frame(solved, primitives.state_space))
    print(f"✅ Converged in {solved.iterations} iterations (residual {solved.residual:.2e})")
    return {'iterations': solved.iterations, 'residual': solved.residual}


def cmd_simulate(args, settings, writer: ReportWriter) -> Dict[str, Any]:
    if not args.config:
        raise ConfigError("simulate requires --config")
    primitives, kernel = load_model_config(args.config)
    state_space = primitives.state_space
    solved = _solve(primitives, kernel, settings)
    print(f"🎲 Simulating {args.agents} agents x {args.periods} periods (seed {settings['seed']})")
    panel = simulate_panel(solved, kernel, args.agents, args.periods, seed=settings['seed'],
                           workers=settings['workers'])
    writer.csv('panel.csv', panel)

    summary: Dict[str, Any] = {'n_agents': args.agents, 'n_periods': args.periods,
                               'n_observations': len(panel)}
    if len(panel) == 0:
        print("⚠️ Empty panel, nothing to estimate")
        return summary
    estimated = estimate_frequencies(panel, state_space, primitives.n_choices,
                                     smoothing=args.smoothing)
    writer.json('estimated_data.json', estimated.to_json_dict())
    summary['ccp_sup_error'] = float(np.max(np.abs(estimated.P - solved.P)))
    summary['kernel_sup_error'] = float(np.max(np.abs(estimated.kernel.probs - kernel.probs)))
    print(f"📊 sup |P_hat - P| = {summary['ccp_sup_error']:.4f}")
    return summary


def _parse_b(text: str) -> np.ndarray:
    try:
        return np.array([float(v) for v in text.split(',')])
    except ValueError as e:
        raise ConfigError(f"--b must be a comma-separated list of numbers, got {text!r}") from e


def cmd_audit(args, settings, writer: ReportWriter) -> Dict[str, Any]:
    workers = settings['workers']
    seed = settings['seed']
    if args.example:
        catalog = builtin_examples()
        if args.example not in catalog:
            raise ConfigError(f"unknown example {args.example!r}; choose from {', '.join(catalog)}")
        system = catalog[args.example]
        base_b = None
        reference = None
    else:
        data, truth = _load_data(args, settings)
        dims = SystemDims.from_data(data)
        if not design_check(dims):
            logger.warning("design has %d exclusion restrictions (< 4)", dims.n_exclusion)
        system = wrap_ddc(data, tol=settings['tol'], u_max=settings['u_max'],
                          max_iter=settings['inner_max_iter'])
        base_b = system.reference_b
        reference = (truth, base_b) if truth is not None else None
    print(f"🔍 Auditing {system.name}: n={system.n}, s={system.s}, m={system.m}")

    run_any = args.rank or args.count or args.probe
    doc: Dict[str, Any] = {'system': system.name, 'dims': system.dims, 'seed': seed}
    summary: Dict[str, Any] = {}

    if args.rank or not run_any:
        audit = regular_value_audit(system, n_samples=args.samples, seed=seed,
                                    svd_tol=settings['svd_tol'], step=settings['fd_step'],
                                    res_tol=settings['res_tol'], max_iter=settings['gn_max_iter'],
                                    workers=workers)
        doc['rank_audit'] = audit.to_dict()
        summary['regular_points'] = audit.regular_points
        print(f"📐 rank dF = m at {audit.regular_points}/{len(audit.ranks)} sampled points")

    if args.count:
        b = _parse_b(args.b) if args.b else base_b
        if b is None:
            raise ConfigError("--count on a built-in example needs --b")
        found = count_solutions(system, b, n_starts=args.starts or settings['n_starts'], seed=seed,
                                res_tol=settings['res_tol'], cluster_tol=settings['cluster_tol'],
                                max_iter=settings['gn_max_iter'], step=settings['fd_step'],
                                svd_tol=settings['svd_tol'], workers=workers)
        doc['solution_count'] = found.to_dict()
        if found.solutions and not found.non_isolated:
            # one-sided where a solution sits on the boundary of A
            doc['rank_at_solution'] = rank_at(system, np.asarray(found.solutions[0]), b,
                                              settings['svd_tol'], settings['fd_step'],
                                              strict=False).to_dict()
            if reference is None and not args.example:
                reference = (np.asarray(found.solutions[0]), b)
        summary['count'] = found.count
        summary['non_isolated'] = found.non_isolated
        print(f"🎯 {found.count} distinct solution(s), non_isolated={found.non_isolated}")

    if args.probe:
        probe = range_probe(system, n_data_draws=args.probe, seed=seed,
                            res_tol=settings['res_tol'],
                            n_starts=args.starts or settings['probe_starts'],
                            max_iter=settings['gn_max_iter'], step=settings['fd_step'],
                            on_range=args.on_range, anchor_truth=args.anchor, workers=workers)
        doc['range_probe'] = probe.to_dict()
        writer.csv('probe_minima.csv', probe.to_frame())
        summary['fraction_solvable'] = probe.fraction_solvable
        print(f"🧪 fraction solvable = {probe.fraction_solvable:.3f} over {probe.n_draws} draws")

    if reference is not None:
        g = system.evaluate(*reference)
        writer.csv('residuals.csv', residual_frame(g, SystemDims.from_data(data)))
        summary['reference_residual'] = float(np.max(np.abs(g)))

    writer.json('audit.json', doc)
    return summary


def cmd_identify(args, settings, writer: ReportWriter) -> Dict[str, Any]:
    data, _ = _load_data(args, settings)
    if args.config and not args.data:
        primitives, _ = load_model_config(args.config)
        if not primitives.disc.is_exponential:
            logger.warning("model is not exponential; identified sets assume beta = beta_tilde = 1")

    if args.restriction:
        restrictions = [ExclusionRestriction.parse(r) for r in args.restriction]
    else:
        restrictions = all_restrictions(data.state_space, data.n_choices)
    if not restrictions:
        raise ConfigError("design has no exclusion restrictions (n_e = 1)")

    print(f"🔎 Identifying delta from {len(restrictions)} restriction(s)")
    sets = identify_all(data, restrictions, grid_size=settings['grid_size'],
                        root_tol=settings['root_tol'], workers=settings['workers'])
    writer.json('identified_sets.json', {'sets': [s.to_dict() for s in sets]})
    if args.trace:
        for s in sets:
            if s.grid is not None:
                label = s.restriction.label.replace(':', '_')
                writer.csv(f"trace_{label}.csv", s.trace_frame())

    summary: Dict[str, Any] = {'n_restrictions': len(sets),
                               'degenerate': sum(s.degenerate for s in sets)}
    for s in sets:
        if s.degenerate:
            print(f"⚠️ {s.restriction.label}: degenerate (m vanishes on the grid)")
        else:
            print(f"   {s.restriction.label}: roots {[round(r, 8) for r in s.roots]}")
    if len(sets) >= 2:
        joint = intersect_sets(sets, match_tol=settings['match_tol'])
        writer.json('intersection.json', joint.to_dict())
        summary['intersection'] = joint.roots
        print(f"✅ Intersection: {[round(r, 8) for r in joint.roots]}")
    return summary


def cmd_examples(args, settings, writer: ReportWriter) -> Dict[str, Any]:
    catalog = builtin_examples()
    print("📚 Built-in systems:")
    for name, system in catalog.items():
        print(f"   {name:<10} n={system.n} s={system.s} m={system.m}  {system.description}")
    return {'examples': {name: {**s.dims, 'description': s.description}
                         for name, s in catalog.items()}}


COMMANDS = {
    'solve': cmd_solve,
    'simulate': cmd_simulate,
    'audit': cmd_audit,
    'identify': cmd_identify,
    'examples': cmd_examples,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='Model config JSON')
    common.add_argument('--settings', help='Lab settings JSON (default: config.json next to this script)')
    common.add_argument('--seed', type=int, help='Root random seed')
    common.add_argument('--workers', type=int, help='Parallel workers (default: all cores)')
    common.add_argument('--out', help='Output directory')
    common.add_argument('--tol', type=float, help='Fixed-point tolerance')
    common.add_argument('--verbose', '-v', action='store_true', help='Debug logging')

    parser = argparse.ArgumentParser(description='Hyperbolic DDC identification lab')
    sub = parser.add_subparsers(dest='command', required=True)

    sub.add_parser('solve', parents=[common], help='Solve a model config')

    p = sub.add_parser('simulate', parents=[common], help='Simulate a panel and estimate (P, Pi)')
    p.add_argument('--agents', type=int, default=1000)
    p.add_argument('--periods', type=int, default=50)
    p.add_argument('--smoothing', action='store_true', help='Add-one smoothing of empty cells')

    p = sub.add_parser('audit', parents=[common], help='Rank audits, solution counts, range probes')
    p.add_argument('--example', help='Built-in system name (see `examples`)')
    p.add_argument('--data', help='DataSet JSON for the DDC system')
    p.add_argument('--rank', action='store_true', help='Regular-value audit')
    p.add_argument('--samples', type=int, default=100, help='Points for the rank audit')
    p.add_argument('--count', action='store_true', help='Multistart solution count')
    p.add_argument('--b', help='Data vector for --count, comma separated')
    p.add_argument('--probe', type=int, default=0, help='Number of data draws for a range probe')
    p.add_argument('--on-range', action='store_true', help='Probe with model-generated data')
    p.add_argument('--anchor', action='store_true', help='Include the generating parameters as a start')
    p.add_argument('--starts', type=int, help='Multistart budget')
    p.add_argument('--res-tol', dest='res_tol', type=float)
    p.add_argument('--svd-tol', dest='svd_tol', type=float)
    p.add_argument('--cluster-tol', dest='cluster_tol', type=float)

    p = sub.add_parser('identify', parents=[common], help='Identified sets for delta')
    p.add_argument('--data', help='DataSet JSON')
    p.add_argument('--restriction', action='append', help='i:x_r:x_e:x_e2 (repeatable)')
    p.add_argument('--grid-size', dest='grid_size', type=int)
    p.add_argument('--root-tol', dest='root_tol', type=float)
    p.add_argument('--trace', action='store_true', help='Write grid traces as CSV')

    sub.add_parser('examples', parents=[common], help='List built-in systems')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK

    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    started = time.perf_counter()
    try:
        settings = _settings(args)
        writer = ReportWriter(settings['output_dir'])
        summary = COMMANDS[args.command](args, settings, writer)
        writer.json('run_report.json', {
            'command': args.command,
            'config': {k: v for k, v in vars(args).items() if k != 'command'},
            'settings': settings,
            'wall_time': time.perf_counter() - started,
            'outputs': list(writer.outputs),
            'summary': summary,
        })
    except ConfigError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE
    except HyperbolicLabError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
