"""Command-line interface.

Exit status: 0 on success, 1 for a statistical or numerical failure of the
run itself (too many failed replications, a solver breakdown), 2 for usage
and validation errors.
"""

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .detection import DetectionResult, birs_detect, jaccard, mean_field_ate, post_detection_ate, stepdown_detect
from .estimation import DEFAULT_A, SCHEMA_VERSION, FitConfig, FitResult, fit_profiling
from .exceptions import InvalidInput, NonConvergence, NumericalFailure
from .inference import bootstrap_null_ensemble, global_test, load_ensemble, save_ensemble
from .panel import neighbor_order, read_panel_csv
from .simulation import SimConfig, format_metrics_csv, run_monte_carlo

logger = logging.getLogger("spatial_interference")

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
MAX_FAILURE_RATE = 0.10


class UsageError(Exception):
    pass


def _threads(value):
    if value == "auto":
        return os.cpu_count() or 1
    try:
        k = int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"threads must be a positive integer or 'auto', got {value!r}")
    if k < 1:
        raise argparse.ArgumentTypeError("threads must be at least 1")
    return k


def _lambda(value):
    if value == "cv":
        return value
    try:
        return float(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"--lambda takes a number or 'cv', got {value!r}")


def _write_json(doc, path):
    path = Path(path)
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise InvalidInput(f"{path}:{exc.lineno}: malformed JSON ({exc.msg})")


def _load_data(args):
    return read_panel_csv(args.data, args.meta)


def _load_fit(path, data):
    fit = FitResult.from_dict(_read_json(path))
    if fit.shape != data.shape or fit.n != data.n or fit.coeffs.beta.shape[2] != data.d:
        raise InvalidInput(f"{path}: fit was made on a {fit.shape.R}x{fit.shape.C} grid with n={fit.n}, "
                           f"d={fit.coeffs.beta.shape[2]}; data is {data.shape.R}x{data.shape.C}, "
                           f"n={data.n}, d={data.d}")
    return fit


def _ensemble(args, data, fit, order, default_path=None):
    """Load ``--ensemble`` if it exists, otherwise build one and persist it."""
    path = args.ensemble or default_path
    if path and Path(path).exists():
        ens = load_ensemble(path, lambda_rc=fit.lambda_rc_used)
        if ens.p != data.shape.p:
            raise InvalidInput(f"{path}: ensemble has {ens.p} coordinates, data needs {data.shape.p}")
        return ens
    if args.boot < 1:
        raise InvalidInput("--boot must be at least 1")
    ens = bootstrap_null_ensemble(data, fit.sigma_hat, fit.lambda_rc_used, args.boot, args.seed,
                                  order=order, n_jobs=args.threads)
    if path:
        save_ensemble(ens, path)
    return ens


def cmd_simulate(args):
    doc = _read_json(args.config)
    if not isinstance(doc, dict):
        raise InvalidInput(f"{args.config}: expected a JSON object")
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.replications is not None:
        doc["replications"] = args.replications
    try:
        cfg = SimConfig.from_dict(doc)
    except TypeError as exc:
        raise InvalidInput(f"{args.config}: {exc}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = run_monte_carlo(cfg, n_jobs=args.threads)
    (out / "metrics.csv").write_text(format_metrics_csv(rows))
    _write_json({"schema_version": SCHEMA_VERSION, "kind": "provenance", "tool": "spatial-interference",
                 "version": __version__, "seed": cfg.seed, "config": cfg.to_dict()}, out / "provenance.json")
    total = len(cfg.delta) * cfg.replications
    failed = sum(rows[i * len(cfg.methods)]["failures"] for i in range(len(cfg.delta)))
    if failed > MAX_FAILURE_RATE * total:
        logger.error("%d of %d replications failed", failed, total)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_fit(args):
    data = _load_data(args)
    cfg = FitConfig(lam=args.lam, A=args.A, tau=args.tau, max_outer_iter=args.max_iter, seed=args.seed,
                    unpenalized=args.unpenalized)
    fit = fit_profiling(data, cfg)
    fit.save(args.out)
    if not fit.converged:
        logger.error("profiling did not converge (delta=%.3g)", fit.final_delta)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_test(args):
    data = _load_data(args)
    fit = _load_fit(args.fit, data)
    ens = _ensemble(args, data, fit, neighbor_order(data.shape))
    result = global_test(fit, ens, args.alpha)
    doc = result.to_dict()
    doc.update({"N": ens.N, "seed": ens.seed, "bootstrap_failures": ens.failures})
    _write_json(doc, args.out)
    return EXIT_OK


def cmd_detect(args):
    data = _load_data(args)
    fit = _load_fit(args.fit, data)
    order = neighbor_order(data.shape)
    default = str(Path(args.out).with_suffix("")) + ".ensemble.bin"
    ens = _ensemble(args, data, fit, order, default_path=default)
    detect = birs_detect if args.method == "birs" else stepdown_detect
    U = np.sqrt(fit.n) * np.abs(fit.S_flat)
    result = detect(U, ens, args.alpha, data.shape, order=order)
    doc = result.to_dict(order)
    doc.update({"N": ens.N, "seed": ens.seed})
    if args.compare:
        other = DetectionResult.from_dict(_read_json(args.compare))
        mine, theirs = set(result.rejected.tolist()), set(other.rejected.tolist())
        doc["comparison"] = {
            "other_method": other.method, "size": len(mine), "other_size": len(theirs),
            "subset_of_other": mine <= theirs, "superset_of_other": mine >= theirs,
            "jaccard": jaccard(mine, theirs),
        }
    _write_json(doc, args.out)
    return EXIT_OK


def cmd_ate(args):
    data = _load_data(args)
    order = neighbor_order(data.shape)
    if args.mean_field:
        est, kind = mean_field_ate(data, order), "mean_field"
    else:
        if not args.detected:
            raise InvalidInput("ate needs --detected unless --mean-field is given")
        det = DetectionResult.from_dict(_read_json(args.detected))
        est, kind = post_detection_ate(data, det, order), "post_detection"
    _write_json({"schema_version": SCHEMA_VERSION, "kind": "ate", "estimator": kind, "ate": est.value,
                 "per_unit": est.per_unit_contributions.tolist(),
                 "detected_sizes": est.detected_sizes.tolist()}, args.out)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="spatial-interference", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_default=0):
        sp.add_argument("--threads", type=_threads, default=1, help="worker count or 'auto'")
        sp.add_argument("--seed", type=int, default=seed_default)

    s = sub.add_parser("simulate", help="Monte-Carlo metrics table")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--replications", type=int)
    common(s, seed_default=None)
    s.set_defaults(func=cmd_simulate)

    def data_args(sp):
        sp.add_argument("--data", required=True, help="panel CSV")
        sp.add_argument("--meta", help="JSON sidecar (default: CSV path with .json suffix)")
        sp.add_argument("--out", required=True)

    f = sub.add_parser("fit", help="profiling fit")
    data_args(f)
    f.add_argument("--lambda", dest="lam", type=_lambda, default="cv")
    f.add_argument("--A", type=float, default=DEFAULT_A)
    f.add_argument("--tau", type=float, default=1e-4)
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--unpenalized", action="store_true", help="drop both penalties (debugging)")
    common(f)
    f.set_defaults(func=cmd_fit)

    for name, func, helptext in (("test", cmd_test, "global bootstrap test"),
                                 ("detect", cmd_detect, "locate interference neighbours")):
        t = sub.add_parser(name, help=helptext)
        data_args(t)
        t.add_argument("--fit", required=True)
        t.add_argument("--alpha", type=float, default=0.05)
        t.add_argument("--boot", type=int, default=500)
        t.add_argument("--ensemble", help="bootstrap ensemble file, read if present and written otherwise")
        if name == "detect":
            t.add_argument("--method", choices=("birs", "stepdown"), default="birs")
            t.add_argument("--compare", help="earlier detection JSON to compare against")
        common(t)
        t.set_defaults(func=func)

    a = sub.add_parser("ate", help="average treatment effect")
    data_args(a)
    a.add_argument("--detected")
    a.add_argument("--mean-field", action="store_true")
    a.set_defaults(func=cmd_ate)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidInput, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalFailure, NonConvergence) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
