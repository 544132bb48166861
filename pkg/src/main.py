import argparse
import json
import logging
import os
import sys
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from config import RunConfig, load_config, validate_sweep_values
from datamodel import (
    Dataset,
    apply_split,
    read_csv_matrix,
    reorder_labeled_first,
    sample_labels_per_class,
    write_csv_dataset,
)
from errors import ConfigError, DataError, ExperimentError, LocdiscError, ParseError, StageError, pipeline_stage
from evaluation import ExperimentReport, fit_method, repeat_laplacians, run_experiment
from graph import write_matrix_csv
from kernels import (
    GramMatrix,
    KernelSpec,
    cross_gram,
    gram_matrix,
    kernel_block_by_index,
    load_precomputed_kernel,
    resolve_kernel,
)
from solver import eigendecompose_kernel, load_model, objective_value, save_model, transform_test, transform_train

# --- Version Configuration ---
__version__ = "0.1.0"

# --- Console Setup ---
# Summaries go to stdout; logs and errors go to stderr.
console = Console()
err_console = Console(stderr=True)

logger = logging.getLogger("locdisc")

LOG_LEVEL_ENV = "LOCDISC_LOG_LEVEL"
COMMANDS = ("gen", "fit", "transform", "eval", "sweep")


# --- Logging Configuration ---
def configure_logging(level: Optional[str] = None) -> int:
    """Route every logger through one RichHandler on stderr. Level: argument, then $LOCDISC_LOG_LEVEL, then INFO."""
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "INFO").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        raise ConfigError([f"unknown log level {name!r}"])

    root = logging.getLogger()
    for handler in [h for h in root.handlers if isinstance(h, RichHandler)]:
        root.removeHandler(handler)
    root.addHandler(RichHandler(console=Console(stderr=True), show_path=False, markup=False))
    root.setLevel(numeric)
    return numeric


# --- Error Reporting ---
def format_error(e: BaseException) -> Tuple[str, int]:
    """
    Format an exception into a user-facing message.

    Returns:
        tuple: (message, exit_code) with exit codes 2 config, 3 data, 4 numeric, 1 unexpected
    """
    if isinstance(e, ConfigError):
        return "Invalid configuration:\n" + "\n".join(f"  - {problem}" for problem in e.problems), e.exit_code
    if isinstance(e, ExperimentError):
        return f"Experiment aborted: {e}. Re-run with base_seed={e.seed} and repeats=1 to reproduce.", e.exit_code
    if isinstance(e, StageError):
        return f"Pipeline stage '{e.stage}' failed: {e.cause}", e.exit_code
    if isinstance(e, ParseError):
        return f"Could not parse input: {e}", e.exit_code
    if isinstance(e, LocdiscError):
        return str(e), e.exit_code
    if isinstance(e, OSError):
        return f"File error: {e}", DataError.exit_code
    return f"Unexpected error: {e}", 1


# --- Pipeline Helpers ---
def training_dataset(cfg: RunConfig) -> Dataset:
    """The semi-supervised training set: generated data get p labels per class drawn with base_seed."""
    ds = cfg.dataset()
    if cfg.generator is not None:
        ds = apply_split(ds, sample_labels_per_class(ds, cfg.labels_per_class[0], cfg.base_seed))
    return ds


@pipeline_stage("kernel")
def training_gram(spec: KernelSpec, train: Dataset, order: np.ndarray) -> GramMatrix:
    if spec.kind == "precomputed":
        full = load_precomputed_kernel(spec.path)
        if full.shape[0] != train.n:
            raise DataError(f"precomputed kernel covers {full.shape[0]} samples, dataset has {train.n}")
        return GramMatrix(values=kernel_block_by_index(full, order, order), spec=spec)
    return gram_matrix(train.samples, resolve_kernel(spec, train.samples))


def _write_csv_rows(path: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(format(v, ".17g") if isinstance(v, float) else str(v) for v in row) + "\n")


def _parse_values(text: str) -> List:
    try:
        values = json.loads(f"[{text}]")
    except json.JSONDecodeError as e:
        raise ConfigError([f"--values must be a comma-separated list of numbers: {e}"]) from e
    return values


# --- Commands ---
def cmd_gen(cfg: RunConfig, out_dir: str) -> Tuple[str, str]:
    if cfg.generator is None:
        raise ConfigError(["'gen' needs a 'generator' section in the config"])
    ds = cfg.generator.build()
    os.makedirs(out_dir, exist_ok=True)
    data_path = os.path.join(out_dir, "data.csv")
    labels_path = os.path.join(out_dir, "labels.csv")
    write_csv_dataset(ds, data_path, labels_path)
    console.print(f"Generated {cfg.generator.kind}: n={ds.n}, d={ds.d}, c={ds.class_count} -> {data_path}")
    return data_path, labels_path


def cmd_fit(cfg: RunConfig, out_dir: str, dump_laplacians: bool = False) -> str:
    method = cfg.methods[0]
    train, order = reorder_labeled_first(training_dataset(cfg))
    K = training_gram(cfg.kernel, train, order)
    laplacians = None if method == "kpca" else repeat_laplacians(train, cfg.theta, cfg.k, cfg.workers)
    r = cfg.r if cfg.r is not None else train.class_count
    model = replace(fit_method(method, K, laplacians, cfg.lambda_reg, r, cfg.drop_tolerance), order=order)

    eig = eigendecompose_kernel(K, cfg.drop_tolerance)
    logger.info(f"Kernel rank after dropping: {eig.rank} of {train.n}")
    logger.info(f"Eigenvalues ({'kernel PCA' if method == 'kpca' else 'M, ascending'}): {model.eigenvalues_of_M}")

    os.makedirs(out_dir, exist_ok=True)
    if laplacians is not None:
        L_w, L = laplacians
        if model.lambda_reg == 0 and L_w.is_zero:
            logger.warning(
                "lambda = 0 and L_w = 0 (one label per class): the objective is identically zero, "
                "so the learned basis is arbitrary"
            )
        objective, residual = objective_value(model.a, eig, L_w, L, model.lambda_reg)
        logger.info(f"Objective {objective:.10g}, constraint residual {residual:.3g}")
        if dump_laplacians:
            write_matrix_csv(L_w.L_w, os.path.join(out_dir, "L_w.csv"))
            write_matrix_csv(L.L, os.path.join(out_dir, "L.csv"))
            logger.info(f"Wrote L_w.csv and L.csv to {out_dir}")
    elif dump_laplacians:
        logger.warning("kpca builds no Laplacians; --dump-laplacians ignored")

    model_path = cfg.model_path or os.path.join(out_dir, "model.txt")
    save_model(model, model_path)
    console.print(f"Fitted {method}: n={model.n}, r={model.r}, rank={eig.rank} -> {model_path}")
    return model_path


def cmd_transform(cfg: RunConfig, out_dir: str) -> str:
    """Project the training samples, or the samples in transform_path, with a saved model."""
    model = load_model(cfg.model_path or os.path.join(out_dir, "model.txt"))
    ds = cfg.dataset()
    if ds.n != model.n:
        raise DataError(f"model was fit on {model.n} samples, the configured dataset has {ds.n}")
    order = model.order if model.order is not None else np.arange(model.n)
    precomputed = model.kernel.kind == "precomputed"

    if cfg.transform_path:
        new = read_csv_matrix(cfg.transform_path)
        if precomputed:
            if new.shape[1] != model.n:
                raise DataError(f"{cfg.transform_path} has {new.shape[1]} kernel columns, expected {model.n}")
            K_cross = new[:, order]
        else:
            K_cross = cross_gram(new.T, ds.samples[:, order], model.kernel)
        features = transform_test(K_cross, model)
    else:
        if precomputed:
            K = kernel_block_by_index(load_precomputed_kernel(model.kernel.path), order, order)
        else:
            K = gram_matrix(ds.samples[:, order], model.kernel).values
        # back to input file order
        features = transform_train(K, model)[:, np.argsort(order)]

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "features.csv")
    write_matrix_csv(features.T, path)
    console.print(f"Transformed {features.shape[1]} samples to r={features.shape[0]} features -> {path}")
    return path


def _print_results(reports: Sequence[ExperimentReport]) -> None:
    table = Table(title="Mean Average Precision", show_header=True, header_style="bold magenta")
    table.add_column("Method", style="cyan")
    table.add_column("p", justify="right")
    table.add_column("MAP ± std", justify="right")
    for report in reports:
        table.add_row(report.method, str(report.labels_per_class), f"{report.mean_map:.4f} ± {report.std_map:.4f}")
    console.print(table)


def cmd_eval(cfg: RunConfig, out_dir: str) -> List[str]:
    """One report JSON per (method, labels per class) plus results.csv in the layout method,p,mean_map,std_map."""
    ds = cfg.dataset()
    os.makedirs(out_dir, exist_ok=True)
    reports: List[ExperimentReport] = []
    paths: List[str] = []
    for method in cfg.methods:
        for p in cfg.labels_per_class:
            report = run_experiment(ds, cfg, method, labels_per_class=p)
            path = os.path.join(out_dir, f"report_{method}_p{p}.json")
            with open(path, "w", encoding="utf-8") as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
            reports.append(report)
            paths.append(path)

    rows = [(r.method, r.labels_per_class, r.mean_map, r.std_map) for r in reports]
    _write_csv_rows(os.path.join(out_dir, "results.csv"), ("method", "p", "mean_map", "std_map"), rows)
    _print_results(reports)
    return paths


def cmd_sweep(cfg: RunConfig, out_dir: str, axis: Optional[str] = None, values: Optional[Sequence] = None) -> str:
    """Evaluate the first configured method at every value of one axis; rows follow the input order."""
    if axis is None and cfg.sweep is not None:
        axis = cfg.sweep.axis
    if values is None and cfg.sweep is not None:
        values = cfg.sweep.values
    if axis is None or values is None:
        raise ConfigError(["sweep needs an axis and values, from --axis/--values or the config's 'sweep' section"])
    problems = validate_sweep_values(axis, list(values))
    if problems:
        raise ConfigError(problems)

    ds = cfg.dataset()
    method = cfg.methods[0]

    def evaluate(value) -> ExperimentReport:
        return run_experiment(ds, cfg.with_axis(axis, value), method)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            reports = list(pool.map(evaluate, values))
    else:
        reports = [evaluate(value) for value in values]

    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, f"sweep_{axis}.csv")
    rows = [(float(v), r.mean_map, r.std_map) for v, r in zip(values, reports)]
    _write_csv_rows(path, ("axis_value", "mean_map", "std_map"), rows)
    console.print(f"Swept {axis} over {len(rows)} values for {method} -> {path}")
    return path


# --- Argument Parsing ---
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="locdisc", description="Semi-supervised kernel feature learning with local discriminant cliques."
    )
    parser.add_argument("-v", "--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="Path to the run configuration JSON")
    common.add_argument("--out", help="Output directory (overrides output_dir in the config)")
    common.add_argument("--log-level", help=f"Logging level (default: ${LOG_LEVEL_ENV} or INFO)")

    commands = parser.add_subparsers(dest="command", required=True)
    commands.add_parser("gen", parents=[common], help="Write a synthetic dataset as data.csv + labels.csv")
    fit_parser = commands.add_parser("fit", parents=[common], help="Learn a transformation and save the model")
    fit_parser.add_argument("--dump-laplacians", action="store_true", help="Also write L_w.csv and L.csv")
    commands.add_parser("transform", parents=[common], help="Project samples with a saved model")
    commands.add_parser("eval", parents=[common], help="Run the repeated-split MAP evaluation")
    sweep_parser = commands.add_parser("sweep", parents=[common], help="Evaluate over one parameter axis")
    sweep_parser.add_argument("--axis", choices=["lambda", "r", "k", "theta"], help="Parameter to sweep")
    sweep_parser.add_argument("--values", help="Comma-separated values, e.g. 0,0.01,1")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        configure_logging(args.log_level)
        cfg = load_config(args.config)
        out_dir = args.out or cfg.output_dir

        if args.command == "gen":
            cmd_gen(cfg, out_dir)
        elif args.command == "fit":
            cmd_fit(cfg, out_dir, dump_laplacians=args.dump_laplacians)
        elif args.command == "transform":
            cmd_transform(cfg, out_dir)
        elif args.command == "eval":
            cmd_eval(cfg, out_dir)
        else:
            values = _parse_values(args.values) if args.values is not None else None
            cmd_sweep(cfg, out_dir, axis=args.axis, values=values)
    except KeyboardInterrupt:
        err_console.print("Interrupted.", style="yellow")
        return 130
    except Exception as e:
        message, code = format_error(e)
        if code == 1:
            logger.error(traceback.format_exc())
        err_console.print(message, style="bold red", markup=False, highlight=False, soft_wrap=True)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
