"""
CLI Adapter - Bridge between the command line and the generators/metrics
Parses subcommands, resolves the run configuration and maps errors to exit codes
"""

import argparse
import logging
import os
import sys
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from app.config import GENERATOR_KINDS, RunConfig
from app.core.dataset import load_schema, load_table, save_schema, save_table
from app.core.geometry import load_geometry
from app.core.toy_city import make_toy_city
from app.errors import ConfigError, GeoSynthError
from app.generators.generator import fit, load_bundle, sample, save_bundle
from app.metrics.report import METRIC_FIELDS, RECOVERABLE_ERRORS, EvaluationReport, evaluate

logger = logging.getLogger("app")

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

# RunConfig fields that flags may override
OVERRIDABLE = ("dataset", "schema", "geometry", "kind", "n_synth", "seed", "out", "workers", "log_level")


def _require(config: RunConfig, *names: str):
    missing = [name for name in names if getattr(config, name) is None]
    if missing:
        raise ConfigError(f"Missing required input(s): {', '.join('--' + m for m in missing)}")


def _load_inputs(config: RunConfig):
    """Read the table, and the geometry when one is configured"""
    _require(config, "dataset", "schema")
    schema = load_schema(config.schema)
    table = load_table(config.dataset, schema)
    geom = load_geometry(config.geometry) if config.geometry is not None else None
    return schema, table, geom


def _in_out(config: RunConfig, name: str) -> str:
    """Path of an output file, always inside the output directory"""
    os.makedirs(config.out, exist_ok=True)
    return os.path.join(config.out, os.path.basename(name))


def run_benchmark_cell(config_data: Dict, kind: str, seed: int, cell_dir: str) -> Dict:
    """
    Evaluate one (kind, seed) cell, reusing a finished report when present

    Returns:
        The report's CSV row; failures come back as a row whose errors
        field names the problem
    """
    report_path = os.path.join(cell_dir, "report.json")
    if os.path.exists(report_path):
        try:
            return EvaluationReport.load_from_file(report_path).to_csv_row()
        except (OSError, ValueError, TypeError) as e:
            logger.warning("Recomputing %s seed %s: unreadable %s (%s)", kind, seed, report_path, e)
    config = RunConfig.from_dict({**config_data, "kind": kind, "seed": seed})
    try:
        _, table, geom = _load_inputs(config)
        if geom is None:
            raise ConfigError("Benchmark needs --geometry")
        report = evaluate(table, kind, geom, config)
        os.makedirs(cell_dir, exist_ok=True)
        report.save_to_file(report_path)
    except (*RECOVERABLE_ERRORS, OSError) as e:
        failed = EvaluationReport(kind=kind, seed=seed, config_hash=config.config_hash(),
                                  errors={"cell": f"{type(e).__name__}: {e}"})
        return failed.to_csv_row()
    return report.to_csv_row()


def median_rows(rows: List[Dict]) -> List[Dict]:
    """One summary row per kind holding the median of every metric over its seeds"""
    summary = []
    for kind in sorted({row["kind"] for row in rows if row["kind"] is not None}):
        out = {name: None for name in EvaluationReport.csv_header()}
        out.update({"kind": kind, "seed": "median"})
        for metric in METRIC_FIELDS:
            values = [row[metric] for row in rows if row["kind"] == kind and row[metric] is not None]
            out[metric] = float(np.median(values)) if values else None
        summary.append(out)
    return summary


class CLIAdapter:
    """
    Command-line interface for fitting, sampling and evaluating generators
    """

    def __init__(self):
        self.config: Optional[RunConfig] = None
        self._handlers: List[logging.Handler] = []

    # --- Parsing -------------------------------------------------------------

    def build_parser(self) -> argparse.ArgumentParser:
        parser = argparse.ArgumentParser(prog="geosynth", description="Geolocated synthetic population generator")
        parser.add_argument("--config", help="JSON run configuration")
        parser.add_argument("--seed", type=int, help="Master seed")
        parser.add_argument("--out", help="Output directory")
        parser.add_argument("--workers", type=int, help="Benchmark worker count")
        parser.add_argument("--log-level", dest="log_level", help="DEBUG, INFO, WARNING or ERROR")
        commands = parser.add_subparsers(dest="command", required=True)

        def inputs(sub, geometry=True):
            sub.add_argument("--dataset", help="CSV of real rows")
            sub.add_argument("--schema", help="Schema JSON")
            if geometry:
                sub.add_argument("--geometry", help="GeoJSON region and subregions")

        fit_cmd = commands.add_parser("fit", help="Fit a generator and write its bundle")
        inputs(fit_cmd)
        fit_cmd.add_argument("--kind", choices=GENERATOR_KINDS)
        fit_cmd.add_argument("--bundle", help="Bundle directory name (default: the kind)")

        generate = commands.add_parser("generate", help="Sample rows from a bundle")
        generate.add_argument("--bundle", required=True, help="Bundle directory")
        generate.add_argument("--n", dest="n_synth", type=int, help="Number of rows")
        generate.add_argument("--output", default="synthetic.csv", help="CSV file name")

        evaluate_cmd = commands.add_parser("evaluate", help="Score synthetic data against real data")
        inputs(evaluate_cmd)
        source = evaluate_cmd.add_mutually_exclusive_group(required=True)
        source.add_argument("--synth", help="Synthetic CSV (same schema)")
        source.add_argument("--bundle", help="Generator bundle to sample from")
        source.add_argument("--fit-kind", dest="fit_kind", choices=GENERATOR_KINDS,
                            help="Fit this kind on the real data first")
        evaluate_cmd.add_argument("--kind", choices=GENERATOR_KINDS,
                                  help="Generator kind for the privacy audit of a bare CSV")

        benchmark = commands.add_parser("benchmark", help="Evaluate several kinds over several seeds")
        inputs(benchmark)
        benchmark.add_argument("--kinds", default=",".join(GENERATOR_KINDS), help="Comma-separated kinds")
        benchmark.add_argument("--seeds", default="0", help="Comma-separated seeds")

        plot = commands.add_parser("plot", help="Real vs synthetic scatter map (SVG)")
        inputs(plot)
        plot.add_argument("--synth", required=True, help="Synthetic CSV")
        plot.add_argument("--feature", required=True, help="Column to color by")
        plot.add_argument("--output", default="map.svg", help="SVG file name")

        toy = commands.add_parser("make-toy", help="Write the bundled synthetic city")
        toy.add_argument("--n", dest="n_synth", type=int, help="Number of homes (default 5000)")
        return parser

    def resolve_config(self, args: argparse.Namespace) -> RunConfig:
        """flag > --config JSON > environment > default"""
        config = RunConfig.load_from_file(args.config) if args.config else RunConfig()
        data = config.to_dict()
        for name in OVERRIDABLE:
            value = getattr(args, name, None)
            if value is not None:
                data[name] = value
        return RunConfig.from_dict(data)

    # --- Logging ----------------------------------------------------------------

    def setup_logging(self, command: str):
        level = getattr(logging, str(self.config.log_level).upper(), None)
        if not isinstance(level, int):
            raise ConfigError(f"Unknown log level: {self.config.log_level}")
        os.makedirs(self.config.out, exist_ok=True)
        formatter = logging.Formatter(LOG_FORMAT)
        file_handler = logging.FileHandler(os.path.join(self.config.out, f"{command}.log"), mode="w", encoding="utf-8")
        stream_handler = logging.StreamHandler(sys.stderr)
        for handler in (file_handler, stream_handler):
            handler.setFormatter(formatter)
            handler.setLevel(level)
            logger.addHandler(handler)
            self._handlers.append(handler)
        logger.setLevel(level)

    def teardown_logging(self):
        for handler in self._handlers:
            logger.removeHandler(handler)
            handler.close()
        self._handlers = []

    # --- Entry point -----------------------------------------------------------

    def run(self, argv: Optional[List[str]] = None) -> int:
        """Parse, dispatch and return the process exit code"""
        args = self.build_parser().parse_args(argv)
        try:
            self.config = self.resolve_config(args)
            self.setup_logging(args.command)
            handler = {
                "fit": self.cmd_fit,
                "generate": self.cmd_generate,
                "evaluate": self.cmd_evaluate,
                "benchmark": self.cmd_benchmark,
                "plot": self.cmd_plot,
                "make-toy": self.cmd_make_toy,
            }[args.command]
            return handler(args)
        except GeoSynthError as e:
            print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
            return e.exit_code
        finally:
            self.teardown_logging()

    # --- Commands -------------------------------------------------------------------

    def cmd_fit(self, args) -> int:
        config = self.config
        _require(config, "geometry")
        _, table, geom = _load_inputs(config)
        print(f"🧭 Fitting {config.kind} on {table.N} rows (seed {config.seed})")
        gen = fit(config.kind, table, geom, config.generator, config.seed_for("fit"))
        directory = _in_out(config, args.bundle or config.kind)
        save_bundle(gen, directory)
        config.save_to_file(os.path.join(directory, "config.json"))
        print(f"💾 Bundle written to {directory}")
        return 0

    def cmd_generate(self, args) -> int:
        config = self.config
        gen = load_bundle(args.bundle)
        n = config.n_synth if config.n_synth is not None else (gen.source.N if gen.source is not None else 1000)
        synth = sample(gen, n, config.seed_for("sample"))
        path = _in_out(config, args.output)
        save_table(synth, path)
        print(f"✨ Wrote {synth.N} synthetic rows to {path}")
        return 0

    def cmd_evaluate(self, args) -> int:
        config = self.config
        schema, table, geom = _load_inputs(config)
        if args.synth:
            subject = load_table(args.synth, schema)
            kind = args.kind
        elif args.bundle:
            subject = load_bundle(args.bundle)
            kind = None
        else:
            subject = args.fit_kind
            kind = None
        report = evaluate(table, subject, geom, config, kind=kind)
        report.save_to_file(_in_out(config, "report.json"))
        pd.DataFrame([report.to_csv_row()], columns=EvaluationReport.csv_header()).to_csv(
            _in_out(config, "report.csv"), index=False, lineterminator="\n")
        print("📊 Evaluation report")
        for name in METRIC_FIELDS:
            value = getattr(report, name)
            print(f"   {name:12s} {'unavailable' if value is None else f'{value:.6g}'}")
        if report.all_failed:
            print("❌ Every metric failed", file=sys.stderr)
            return 3
        return 0

    def cmd_benchmark(self, args) -> int:
        config = self.config
        _require(config, "dataset", "schema", "geometry")
        kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
        unknown = [k for k in kinds if k not in GENERATOR_KINDS]
        if not kinds or unknown:
            raise ConfigError(f"Invalid kinds: {', '.join(unknown) or '(none)'}")
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"Seeds must be integers: {args.seeds}")
        if not seeds:
            raise ConfigError("At least one seed is needed")

        root = _in_out(config, "benchmark")
        cells = [(kind, seed, os.path.join(root, kind, f"seed_{seed}")) for kind in kinds for seed in seeds]
        print(f"🏁 Benchmark: {len(kinds)} kinds x {len(seeds)} seeds on {config.workers} worker(s)")
        rows = Parallel(n_jobs=config.workers)(
            delayed(run_benchmark_cell)(config.to_dict(), kind, seed, cell_dir) for kind, seed, cell_dir in cells
        )
        for row in rows:
            if row["errors"]:
                logger.warning("%s seed %s: %s", row["kind"], row["seed"], row["errors"])
        table = pd.DataFrame(rows + median_rows(rows), columns=EvaluationReport.csv_header())
        path = os.path.join(root, "comparison.csv")
        table.to_csv(path, index=False, lineterminator="\n")
        print(f"📋 Comparison table written to {path}")
        return 0

    def cmd_plot(self, args) -> int:
        from app.adapters.plotting import plot_comparison

        config = self.config
        _require(config, "geometry")
        schema, table, geom = _load_inputs(config)
        synth = load_table(args.synth, schema)
        path = _in_out(config, args.output)
        plot_comparison(table, synth, geom, args.feature, path, config.seed_for("sample"))
        print(f"🗺️  Map written to {path}")
        return 0

    def cmd_make_toy(self, args) -> int:
        config = self.config
        n = config.n_synth if config.n_synth is not None else 5000
        table, geom = make_toy_city(n, config.seed)
        save_table(table, _in_out(config, "toy_city.csv"))
        save_schema(table.schema, _in_out(config, "toy_city.schema.json"))
        geom.save_to_file(_in_out(config, "toy_city.geojson"))
        print(f"🏙️  Toy city with {table.N} homes written to {config.out}")
        return 0
