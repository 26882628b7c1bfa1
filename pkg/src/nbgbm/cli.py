"""Command line surface: fit, infer, simulate, evaluate, score.

Every command writes a manifest.json recording the configuration, seed,
input digests, and software version, so seeded runs are reproducible.
Exit codes: 0 success (including non-converged fits, which are flagged in
the manifest), 2 usage errors, 3 input/parse errors, 4 numeric failures.

Heavy numeric modules are imported lazily so --threads can pin the BLAS
thread count before numpy loads; --threads 1 gives bit-exact determinism.
"""

from __future__ import annotations

import argparse
import os
import sys
import time

__version__ = "0.1.0"

EXIT_USAGE = 2
EXIT_INPUT = 3
EXIT_NUMERIC = 4


def _set_threads(n):
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nbgbm",
        description="Negative-binomial generalized bilinear models: "
                    "fitting, standard errors, simulation, and evaluation.",
    )
    default_threads = os.environ.get("NBGBM_THREADS")
    parser.add_argument("--threads", type=int,
                        default=int(default_threads) if default_threads else None,
                        help="cap BLAS/OpenMP threads (1 = deterministic; "
                             "default from NBGBM_THREADS)")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit the model to a count matrix")
    p_fit.add_argument("--counts", required=True, help="count matrix file (I x J)")
    p_fit.add_argument("--row-covariates", help="row covariate file (I x K); intercept-only if omitted")
    p_fit.add_argument("--col-covariates", help="column covariate file (J x L); intercept-only if omitted")
    p_fit.add_argument("--latent", type=int, default=0, help="number of latent factors M")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.add_argument("--max-iter", type=int, default=50)
    p_fit.add_argument("--tol", type=float, default=1e-6)
    p_fit.add_argument("--rho", type=float, default=5.0)
    p_fit.add_argument("--epsilon", type=float, default=0.125)
    p_fit.add_argument("--seed", type=int, default=0)
    p_fit.add_argument("--no-standardize", action="store_true",
                       help="keep covariates on their original scale")
    for name in ("a", "b", "c", "d", "u", "v", "s", "t"):
        p_fit.add_argument(f"--lambda-{name}", type=float, default=1.0)
    p_fit.add_argument("--m-s", type=float, default=0.0)
    p_fit.add_argument("--m-t", type=float, default=0.0)
    p_fit.add_argument("--s-floor", type=float, default=-4.0)
    p_fit.add_argument("--t-floor", type=float, default=-4.0)

    p_inf = sub.add_parser("infer", help="standard errors and Wald tests for a fit")
    p_inf.add_argument("--counts", required=True)
    p_inf.add_argument("--fit-dir", required=True, help="directory written by `fit`")
    p_inf.add_argument("--out", required=True)
    p_inf.add_argument("--test", action="append", default=[],
                       help="BLOCK:COLUMN (1-based), e.g. B:4, to emit Wald tests")
    p_inf.add_argument("--level", type=float, default=0.95)
    p_inf.add_argument("--oracle-full-fisher", action="store_true",
                       help="also run the dense bordered-Fisher oracle (small problems only)")
    for name in ("a", "b", "c", "d", "u", "v", "s", "t"):
        p_inf.add_argument(f"--lambda-{name}", type=float, default=1.0)
    p_inf.add_argument("--m-s", type=float, default=0.0)
    p_inf.add_argument("--m-t", type=float, default=0.0)

    p_sim = sub.add_parser("simulate", help="draw a synthetic dataset with known truth")
    p_sim.add_argument("--scheme", default="NB/Normal/Normal",
                       help="outcome/covariates/parameters, e.g. NB/Normal/Normal")
    p_sim.add_argument("--dims", required=True, help="IxJxKxLxM, e.g. 1000x100x4x2x3")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--replicate", type=int, default=0)
    p_sim.add_argument("--out", required=True)

    p_eval = sub.add_parser("evaluate", help="relative MSE and coverage against a truth")
    p_eval.add_argument("--fit-dir", required=True)
    p_eval.add_argument("--truth-dir", required=True)
    p_eval.add_argument("--se-dir", help="directory written by `infer` (enables coverage)")
    p_eval.add_argument("--out", required=True, help="report file (JSON)")

    p_score = sub.add_parser("score", help="LRSE and WMAD for weighted series")
    p_score.add_argument("--series", required=True, help="n x c matrix; one series per column")
    p_score.add_argument("--weights", required=True, help="matching precision matrix")
    p_score.add_argument("--bandwidth", type=int, default=100)
    p_score.add_argument("--out", required=True, help="report file (JSON)")
    return parser


def _intercept_only(n):
    import numpy as np

    return np.ones((n, 1))


def cmd_fit(args) -> int:
    import numpy as np

    from . import estimation, io
    from .model import DataMatrix, FitConfig, PriorConfig

    t0 = time.time()
    counts = io.read_matrix(args.counts)
    Y = DataMatrix(counts)
    X = io.read_matrix(args.row_covariates) if args.row_covariates else _intercept_only(Y.I)
    Z = io.read_matrix(args.col_covariates) if args.col_covariates else _intercept_only(Y.J)
    if X.shape[0] != Y.I:
        raise _input_err(f"row covariates {args.row_covariates} have {X.shape[0]} rows, "
                         f"counts {args.counts} have {Y.I}")
    if Z.shape[0] != Y.J:
        raise _input_err(f"column covariates {args.col_covariates} have {Z.shape[0]} rows, "
                         f"counts {args.counts} have {Y.J} columns")
    prior = PriorConfig(
        lambda_a=args.lambda_a, lambda_b=args.lambda_b, lambda_c=args.lambda_c,
        lambda_d=args.lambda_d, lambda_u=args.lambda_u, lambda_v=args.lambda_v,
        lambda_s=args.lambda_s, lambda_t=args.lambda_t, m_s=args.m_s, m_t=args.m_t,
    )
    config = FitConfig(rho=args.rho, tol=args.tol, max_iter=args.max_iter,
                       epsilon=args.epsilon, s_floor=args.s_floor, t_floor=args.t_floor,
                       standardize=not args.no_standardize, seed=args.seed)
    cov = estimation.prepare_covariates(X, Z, standardize=config.standardize)
    result = estimation.fit(Y, cov, args.latent, prior, config)
    os.makedirs(args.out, exist_ok=True)
    io.write_params(args.out, result.params)
    io.write_matrix(os.path.join(args.out, "X.csv"), cov.X)
    io.write_matrix(os.path.join(args.out, "Z.csv"), cov.Z)
    io.write_vector(os.path.join(args.out, "trace.csv"), np.asarray(result.trace))
    manifest = io.build_manifest(
        command="fit",
        config={**vars(config), **{f"lambda_{n}": getattr(prior, f"lambda_{n}")
                                   for n in "abcduvst"},
                "m_s": prior.m_s, "m_t": prior.m_t, "latent": args.latent},
        seed=args.seed,
        inputs={"counts": args.counts, "row_covariates": args.row_covariates,
                "col_covariates": args.col_covariates},
        wall_time=time.time() - t0,
        convergence={"converged": result.converged, "iterations": result.iterations,
                     "final_log_posterior": result.trace[-1],
                     "clamp_events": result.clamp_events},
        version=__version__,
    )
    io.write_json(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from . import inference, io
    from .model import CovariateSet, DataMatrix, PriorConfig

    t0 = time.time()
    counts = io.read_matrix(args.counts)
    Y = DataMatrix(counts)
    params = io.read_params(args.fit_dir)
    X = io.read_matrix(os.path.join(args.fit_dir, "X.csv"))
    Z = io.read_matrix(os.path.join(args.fit_dir, "Z.csv"))
    cov = CovariateSet(X, Z)
    prior = PriorConfig(
        lambda_a=args.lambda_a, lambda_b=args.lambda_b, lambda_c=args.lambda_c,
        lambda_d=args.lambda_d, lambda_u=args.lambda_u, lambda_v=args.lambda_v,
        lambda_s=args.lambda_s, lambda_t=args.lambda_t, m_s=args.m_s, m_t=args.m_t,
    )
    result = inference.standard_errors(Y, params, cov, prior)
    os.makedirs(args.out, exist_ok=True)
    for name, block in result.blocks().items():
        io.write_matrix(os.path.join(args.out, f"se_{name}.csv"), block)
    estimates = params.blocks()
    for spec_str in args.test:
        block_name, _, column = spec_str.partition(":")
        if block_name not in ("A", "B", "U", "V") or not column.isdigit():
            raise _input_err(f"--test expects BLOCK:COLUMN with BLOCK in A,B,U,V; got {spec_str!r}")
        col = int(column) - 1
        est_block = estimates[block_name]
        se_block = result.blocks()[block_name]
        if not 0 <= col < est_block.shape[1]:
            raise _input_err(f"--test {spec_str!r}: column out of range 1..{est_block.shape[1]}")
        tests = inference.wald_tests(est_block[:, col], se_block[:, col], level=args.level)
        rows = [est_block[:, col], se_block[:, col], tests["p_values"],
                tests["ci_lower"], tests["ci_upper"]]
        io.write_matrix(os.path.join(args.out, f"wald_{block_name}_{col + 1}.csv"),
                        np.column_stack(rows),
                        header=["estimate", "se", "p_value", "ci_lower", "ci_upper"])
    if args.oracle_full_fisher:
        oracle = inference.full_fisher_variances(Y, params, cov, prior)
        for name, block in oracle.items():
            io.write_matrix(os.path.join(args.out, f"oracle_var_{name}.csv"), np.sqrt(block))
    manifest = io.build_manifest(
        command="infer",
        config={"level": args.level, "tests": args.test,
                **{f"lambda_{n}": getattr(prior, f"lambda_{n}") for n in "abcduvst"}},
        seed=None,
        inputs={"counts": args.counts,
                "params": os.path.join(args.fit_dir, "params.json")},
        wall_time=time.time() - t0,
        version=__version__,
    )
    io.write_json(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def cmd_simulate(args) -> int:
    from . import io
    from .simulate import SimScheme, simulate_dataset

    t0 = time.time()
    try:
        dims = tuple(int(tok) for tok in args.dims.lower().split("x"))
    except ValueError:
        raise _input_err(f"--dims must look like 1000x100x4x2x3, got {args.dims!r}")
    if len(dims) != 5:
        raise _input_err(f"--dims needs five fields IxJxKxLxM, got {args.dims!r}")
    scheme = SimScheme.parse(args.scheme, dims, seed=args.seed)
    Y, truth = simulate_dataset(scheme, replicate=args.replicate)
    os.makedirs(args.out, exist_ok=True)
    io.write_matrix(os.path.join(args.out, "Y.csv"), Y.values)
    io.write_matrix(os.path.join(args.out, "X.csv"), truth.cov.X)
    io.write_matrix(os.path.join(args.out, "Z.csv"), truth.cov.Z)
    truth_dir = os.path.join(args.out, "truth")
    io.write_params(truth_dir, truth.params0)
    io.write_matrix(os.path.join(truth_dir, "X.csv"), truth.cov.X)
    io.write_matrix(os.path.join(truth_dir, "Z.csv"), truth.cov.Z)
    manifest = io.build_manifest(
        command="simulate",
        config={"scheme": args.scheme, "dims": list(dims), "replicate": args.replicate,
                "covariate_clamp_events": truth.clamp_events},
        seed=args.seed,
        inputs={},
        wall_time=time.time() - t0,
        version=__version__,
    )
    io.write_json(os.path.join(args.out, "manifest.json"), manifest)
    return 0


def cmd_evaluate(args) -> int:
    import numpy as np

    from . import io
    from .simulate import align_latent_factors, coverage_curve, relative_mse

    t0 = time.time()
    est = io.read_params(args.fit_dir)
    truth = io.read_params(args.truth_dir)
    for name in ("A", "B", "C", "S", "T"):
        if est.blocks()[name].shape != truth.blocks()[name].shape:
            raise _input_err(f"block {name}: estimate shape {est.blocks()[name].shape} "
                             f"differs from truth {truth.blocks()[name].shape}")
    if est.M != truth.M:
        raise _input_err(f"latent dimension differs: estimate {est.M}, truth {truth.M}")
    est = align_latent_factors(est, truth)
    report = {"relative_mse": {}}
    for name in ("A", "B", "C", "D", "U", "V", "S", "omega"):
        block_est, block_truth = est.blocks()[name], truth.blocks()[name]
        if block_truth.size == 0:
            continue
        report["relative_mse"][name] = relative_mse(block_est, block_truth)
    # T is evaluated in the dispersion parametrization
    report["relative_mse"]["T"] = relative_mse(np.exp(est.T), np.exp(truth.T))
    if args.se_dir:
        report["coverage"] = {}
        # c_11, D, and omega are excluded from coverage
        for name in ("A", "B", "C", "U", "V", "S", "T"):
            se = io.read_matrix(os.path.join(args.se_dir, f"se_{name}.csv"),
                                allow_empty=name in ("U", "V"))
            block_est = est.blocks()[name]
            block_truth = truth.blocks()[name]
            if block_est.size == 0:
                continue
            mask = np.ones(block_est.shape, dtype=bool)
            if name == "C":
                mask[0, 0] = False
            targets, actual = coverage_curve(
                np.atleast_2d(block_est)[np.atleast_2d(mask)],
                np.atleast_2d(se.reshape(block_est.shape))[np.atleast_2d(mask)],
                np.atleast_2d(block_truth)[np.atleast_2d(mask)])
            report["coverage"][name] = {"target": targets, "actual": actual}
    report["wall_time_seconds"] = time.time() - t0
    io.write_json(args.out, report)
    return 0


def cmd_score(args) -> int:
    import numpy as np

    from . import io
    from .metrics import WeightedSeries, lrse, wmad

    series = np.atleast_2d(io.read_matrix(args.series))
    weights = np.atleast_2d(io.read_matrix(args.weights))
    if series.shape != weights.shape:
        raise _input_err(f"series {series.shape} and weights {weights.shape} differ")
    if np.any(weights <= 0):
        raise _input_err("weights must be positive")
    report = {"bandwidth": args.bandwidth, "columns": []}
    for c in range(series.shape[1]):
        ws = WeightedSeries(series[:, c], weights[:, c], k=args.bandwidth)
        report["columns"].append({"column": c + 1, "lrse": lrse(ws), "wmad": wmad(ws)})
    io.write_json(args.out, report)
    return 0


def _input_err(msg):
    from .exceptions import InputError

    return InputError(msg)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads is not None:
        _set_threads(args.threads)
    from .exceptions import InputError, NbgbmError, NumericError

    handlers = {
        "fit": cmd_fit, "infer": cmd_infer, "simulate": cmd_simulate,
        "evaluate": cmd_evaluate, "score": cmd_score,
    }
    try:
        return handlers[args.command](args)
    except (InputError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except NbgbmError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
