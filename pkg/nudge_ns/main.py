"""Command-line entry point: `python -m nudge_ns.main <command> ...`."""
from __future__ import annotations
from typing import List, Optional
import argparse
import json
import logging
import sys

from dotenv import load_dotenv

from . import __version__
from .services.config import parse_config, parse_vary
from .services.errors import NudgeNSError
from .services.experiment import (
	RunResult, build_mesh, describe, mesh_info, reference_run, run_experiment, run_sweep,
)
from .services.mesh import load_mesh, save_mesh
from .services.storage import RunRegistry


logger = logging.getLogger("nudge_ns")


def _report(results: List[RunResult]) -> int:
	for r in results:
		err = f" final_l2_error={r.final_l2_error:.6e}" if r.final_l2_error is not None else ""
		msg = f" ({r.message})" if r.message else ""
		print(f"{r.status:9s} {r.output_dir}{err}{msg}")
	return 0 if all(r.ok for r in results) else 1


def cmd_run(args: argparse.Namespace) -> int:
	spec = parse_config(args.config)
	if args.dry_run:
		print(describe(spec), end="")
		return 0
	if spec.sweep:
		return _report(run_sweep(spec))
	return _report([run_experiment(spec, args.output)])


def cmd_sweep(args: argparse.Namespace) -> int:
	spec = parse_config(args.config)
	vary = parse_vary(args.vary or [])
	return _report(run_sweep(spec, vary, workers=args.workers))


def cmd_mesh_gen(args: argparse.Namespace) -> int:
	mesh = build_mesh(parse_config(args.config))
	save_mesh(mesh, args.output)
	logger.info("wrote %d cells to %s", mesh.num_cells, args.output)
	return 0


def cmd_mesh_info(args: argparse.Namespace) -> int:
	info = mesh_info(load_mesh(args.path, normalize_orientation=args.normalize_orientation))
	print(json.dumps(info, indent=2))
	return 0


def cmd_reference_gen(args: argparse.Namespace) -> int:
	archive, series = reference_run(parse_config(args.config))
	print(f"archive {archive}: {len(series)} steps")
	return 0


def cmd_runs_list(args: argparse.Namespace) -> int:
	registry = RunRegistry.for_output(args.output)
	try:
		for row in registry.list_runs(limit=args.limit):
			err = "" if row["final_l2_error"] is None else f"{row['final_l2_error']:.6e}"
			print(f"{row['id']:5d} {row['status']:9s} {row['scheme']:13s} mu={row['mu']:<10g} dt={row['dt']:<8g} "
				  f"{err:>13s} {row['output_dir']}")
	finally:
		registry.dispose()
	return 0


def build_parser() -> argparse.ArgumentParser:
	ap = argparse.ArgumentParser(prog="nudge_ns", description="Navier-Stokes projection/penalty solvers with nudging.")
	ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
	ap.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
	sub = ap.add_subparsers(dest="command", required=True)

	p = sub.add_parser("run", help="Solve one configured run (or its [sweep])")
	p.add_argument("config")
	p.add_argument("--dry-run", action="store_true", help="Validate and print the resolved config")
	p.add_argument("-o", "--output", default=None, help="Override [output] directory")
	p.set_defaults(func=cmd_run)

	p = sub.add_parser("sweep", help="Run the cartesian product of --vary values")
	p.add_argument("config")
	p.add_argument("--vary", action="append", metavar="KEY=V1,V2", help="Repeatable")
	p.add_argument("--workers", type=int, default=None, help="Defaults to NUDGE_NS_THREADS")
	p.set_defaults(func=cmd_sweep)

	mesh = sub.add_parser("mesh", help="Mesh utilities").add_subparsers(dest="mesh_command", required=True)
	p = mesh.add_parser("gen", help="Write the [mesh] of a config to a mesh file")
	p.add_argument("config")
	p.add_argument("-o", "--output", required=True)
	p.set_defaults(func=cmd_mesh_gen)
	p = mesh.add_parser("info", help="Summarize a mesh file")
	p.add_argument("path")
	p.add_argument("--normalize-orientation", action="store_true")
	p.set_defaults(func=cmd_mesh_info)

	ref = sub.add_parser("reference", help="Reference archives").add_subparsers(dest="ref_command", required=True)
	p = ref.add_parser("gen", help="Run a coupled scheme and archive its snapshots")
	p.add_argument("config")
	p.set_defaults(func=cmd_reference_gen)

	runs = sub.add_parser("runs", help="Run registry").add_subparsers(dest="runs_command", required=True)
	p = runs.add_parser("list", help="Recent runs")
	p.add_argument("--output", default="runs", help="Output root holding runs.db")
	p.add_argument("--limit", type=int, default=50)
	p.set_defaults(func=cmd_runs_list)
	return ap


def main(argv: Optional[List[str]] = None) -> int:
	load_dotenv()
	args = build_parser().parse_args(argv)
	logging.basicConfig(level=getattr(logging, args.log_level),
						format="%(asctime)s %(levelname)s %(name)s: %(message)s")
	try:
		return args.func(args)
	except NudgeNSError as exc:
		print(f"error: {exc}", file=sys.stderr)
		return 1


if __name__ == "__main__":
	sys.exit(main())
