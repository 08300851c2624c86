"""
Module: cli.py

Command-line surface: fit, predict, diagnose, bootstrap, influence, simulate.

Usage:
    python -m src.cli fit --input data.csv --response y1,y2 --out results/
    python -m src.cli predict --model results/model.json --input new.csv --out results/
    python -m src.cli diagnose --model results/model.json --input data.csv --out results/
    python -m src.cli bootstrap --model results/model.json --input data.csv --B 1000 --H 50 --out results/
    python -m src.cli influence --out results/
    python -m src.cli simulate --scenario scenario.json --out results/

Exit codes: 0 success, 1 usage error, 2 data or model error.
"""

import argparse
import logging
import os
import sys

import numpy as np
import pandas as pd

from src import diagnostics, inference, sensitivity, simulation
from src.datamodel import read_csv, standardize
from src.estimators import fastcellcov
from src.exceptions import CellRegressionError
from src.regression import (
    RegressionFit,
    cross_validate,
    default_k_grid,
    default_lambda_grid,
    fit as cellmr_fit,
    predict_matrix,
)
from src.utils import content_hash, default_threads, load_config, write_json

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _names(text):
    return [c.strip() for c in text.split(",") if c.strip()]


def _ints(text):
    return [int(v) for v in _names(text)]


def _floats(text):
    return [float(v) for v in _names(text)]


def _level(text):
    value = float(text)
    if not 0 < value < 1:
        raise argparse.ArgumentTypeError(f"level must lie in (0, 1), got {text}")
    return value


def _positive(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def _parse_args(args):
    parser = _Parser(prog="python -m src.cli", description="Cellwise robust multivariate regression")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default="results", help="output directory")
    common.add_argument("--seed", type=int, default=0, help="top-level seed of every random stream")
    common.add_argument("--threads", type=_positive, default=default_threads(), help="worker threads")
    common.add_argument("--verbose", action="store_true", help="debug logging")
    common.add_argument("--progress", action="store_true", help="show progress bars")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = commands.add_parser("fit", parents=[common], help="fit cellMR, tuning (k, lambda) by robust CV")
    p.add_argument("--input", required=True, help="CSV with a header row")
    p.add_argument("--response", required=True, type=_names, help="comma-separated response columns")
    p.add_argument("--predictors", type=_names, help="comma-separated predictor columns (default: all others)")
    p.add_argument("--k", type=_ints, help="rank or comma-separated rank grid")
    p.add_argument("--lambda", dest="lam", type=_floats, help="penalty or comma-separated penalty grid")
    p.add_argument("--folds", type=int, default=10)

    p = commands.add_parser("predict", parents=[common], help="predict responses of new predictor rows")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)

    p = commands.add_parser("diagnose", parents=[common], help="outlier map and cellmap tables")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--n-sim", type=int, default=200, help="simulated total deviations for the shading cutoff")

    p = commands.add_parser("bootstrap", parents=[common], help="cellBoot percentile intervals of the slopes")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True, help="the data the model was fitted on")
    p.add_argument("--B", type=_positive, default=1000)
    p.add_argument("--H", type=_positive, default=50)
    p.add_argument("--level", type=_level, default=0.9)

    p = commands.add_parser("influence", parents=[common], help="empirical influence surfaces of the slope")
    p.add_argument("--input", help="bivariate CSV (x, y); drawn from y = 0.9x + e when omitted")
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--epsilon", type=float, default=0.02)
    p.add_argument("--draws", type=_positive, default=5)
    p.add_argument("--grid-limit", type=float, default=10.0)
    p.add_argument("--grid-points", type=_positive, default=21)

    p = commands.add_parser("simulate", parents=[common], help="run a Monte-Carlo scenario")
    p.add_argument("--scenario", required=True, help="scenario JSON")
    p.add_argument("--study", choices=["mse", "coverage"], default="mse")
    p.add_argument("--B", type=_positive, default=200)
    p.add_argument("--H", type=_positive, default=20)
    p.add_argument("--level", type=_level, default=0.9)
    return parser.parse_args(args)


def _require_file(path):
    if not os.path.isfile(path):
        raise UsageError(f"File not found: {path}")


def _load_model(path):
    _require_file(path)
    return RegressionFit.from_dict(load_config(path))


def _write_frame(frame, out, name):
    os.makedirs(out, exist_ok=True)
    path = os.path.join(out, name)
    frame.to_csv(path, index=False, na_rep="NA")
    logger.info("Wrote %s", path)
    return path


def cmd_fit(args):
    _require_file(args.input)
    header = list(pd.read_csv(args.input, nrows=0).columns)
    predictors = args.predictors or [c for c in header if c not in args.response]
    if set(predictors) & set(args.response):
        raise UsageError("Response columns must be disjoint from the predictors")
    if not predictors:
        raise UsageError("No predictor columns left")
    data = read_csv(args.input, columns=predictors + args.response)
    p = len(predictors)

    if args.k is not None and args.lam is not None and len(args.k) == 1 and len(args.lam) == 1:
        k, lam = args.k[0], args.lam[0]
    else:
        k_grid = args.k or default_k_grid(data.d)
        if args.lam:
            lambda_grid = args.lam
        else:
            _, standardizer = standardize(data.select_columns(range(p)))
            lambda_grid = default_lambda_grid(np.diag(standardizer.scales ** 2))
        report = cross_validate(data, p, k_grid, lambda_grid, folds=args.folds, seed=args.seed,
                                threads=args.threads, progress=args.progress)
        _write_frame(report.to_frame(), args.out, "cv.csv")
        k, lam = report.chosen

    model = cellmr_fit(data, p, k, lam)
    model = model.with_aux_model(fastcellcov.train(data, model.cov))
    write_json(model.to_dict(), os.path.join(args.out, "model.json"))
    fitted = predict_matrix(model, data.values[:, :p], data.mask[:, :p])
    _write_frame(pd.DataFrame(fitted, columns=args.response), args.out, "fitted.csv")
    logger.info("Fitted cellMR with k=%d, lambda=%.6g", k, lam)


def cmd_predict(args):
    model = _load_model(args.model)
    _require_file(args.input)
    names = list(model.column_names)
    data = read_csv(args.input, columns=names[:model.p])
    predictions = predict_matrix(model, data.values, data.mask)
    _write_frame(pd.DataFrame(predictions, columns=names[model.p:]), args.out, "predictions.csv")


def _training_data(model, path):
    _require_file(path)
    return read_csv(path, columns=list(model.column_names))


def cmd_diagnose(args):
    model = _load_model(args.model)
    data = _training_data(model, args.input)
    report = diagnostics.diagnose(model, data, n_sim=args.n_sim, seed=args.seed, threads=args.threads)
    _write_frame(report.outlier_frame(), args.out, "outlier_map.csv")
    _write_frame(diagnostics.cellmap_frame(report.cellmap_X), args.out, "cellmap_X.csv")
    _write_frame(diagnostics.cellmap_frame(report.cellmap_Y), args.out, "cellmap_Y.csv")


def cmd_bootstrap(args):
    model = _load_model(args.model)
    data = _training_data(model, args.input)
    contrasts, pairs = inference.slope_contrasts(model.p, model.q)
    names = model.column_names
    labels = [f"{names[j]}->{names[model.p + l]}" for j, l in pairs]
    result = inference.cellboot(data, model, contrasts, B=args.B, H=args.H, level=args.level,
                                seed=args.seed, threads=args.threads, progress=args.progress)
    write_json(result.summary(labels), os.path.join(args.out, "bootstrap_summary.json"))
    replicates = pd.DataFrame({
        "contrast": np.repeat(labels, result.B),
        "replicate": np.tile(np.arange(result.B), len(labels)),
        "value": result.coef_samples.T.ravel(),
    })
    _write_frame(replicates, args.out, "bootstrap_replicates.csv")


def cmd_influence(args):
    if args.input:
        _require_file(args.input)
        base = read_csv(args.input)
    else:
        base = sensitivity.bivariate_base_sample(args.n, args.seed)
    grid = np.linspace(-args.grid_limit, args.grid_limit, args.grid_points)
    functionals = {
        "cellmr": sensitivity.cellmr_slope_functional(args.k, args.lam),
        "ols": sensitivity.ols_slope_functional(args.lam),
    }
    frames = []
    for method, functional in functionals.items():
        for kind in sensitivity.KINDS:
            surface = sensitivity.if_surface(base, functional, kind, grid, args.epsilon, args.seed, args.draws,
                                             threads=args.threads, progress=args.progress)
            frames.append(surface.assign(method=method, kind=kind, label=sensitivity.SURROGATE_LABEL))
    table = pd.concat(frames, ignore_index=True)[["method", "kind", "c1", "c2", "if_value", "label"]]
    _write_frame(table, args.out, "influence.csv")


def cmd_simulate(args):
    _require_file(args.scenario)
    cfg = simulation.ScenarioConfig.from_dict(load_config(args.scenario))
    if args.study == "mse":
        table = simulation.run_mse(cfg, threads=args.threads, progress=args.progress)
    else:
        table = simulation.run_coverage(cfg, level=args.level, B=args.B, H=args.H,
                                        threads=args.threads, progress=args.progress)
    results = _write_frame(table, args.out, f"simulate_{args.study}.csv")
    manifest = {
        "config": cfg.to_dict(),
        "study": args.study,
        "input_hash": content_hash(args.scenario),
        "results_hash": content_hash(results),
    }
    if args.study == "coverage":
        manifest.update({"level": args.level, "B": args.B, "H": args.H})
    write_json(manifest, os.path.join(args.out, "manifest.json"))


COMMANDS = {
    "fit": cmd_fit,
    "predict": cmd_predict,
    "diagnose": cmd_diagnose,
    "bootstrap": cmd_bootstrap,
    "influence": cmd_influence,
    "simulate": cmd_simulate,
}


def main(args=None):
    """
    Run one command. Arguments default to the process command line.

    Returns:
        int: exit code.
    """
    args = _parse_args(args)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as err:
        logger.error("%s", err)
        return EXIT_USAGE
    except (CellRegressionError, ValueError, np.linalg.LinAlgError) as err:
        logger.error("%s: %s", type(err).__name__, err)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
