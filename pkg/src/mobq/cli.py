"""Command-line front end.

    mobq integrate     --config step.json    [--out DIR] [--seed S] [--threads N]
    mobq converge      --config sphere.json
    mobq multifidelity --config mf_step.json
    mobq illumination  --config illumination.json
    mobq selftest

Exit status: 0 on success, 1 for bad flags or configs, 2 for numerical failures.
Set ``MOBQ_LOG`` to ``error``, ``info`` or ``debug`` for log output on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from importlib import resources

import jsonschema
import numpy as np

from mobq import hyper, posterior, selftest, studies
from mobq.core import Dataset, Design, measure_from_dict
from mobq.errors import (
    AccuracyNotMetError, ConfigError, ConsistencyError, DegenerateDesignError, DomainError, InvalidArgumentError,
    MobqError, NotPositiveDefiniteError, OptimizationFailedError, SolverFailedError, UnsupportedIdentityError,
)
from mobq.kernels import kernel_from_dict, pack_hypers

log = logging.getLogger("mobq")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 1, 2
NUMERICAL_ERRORS = (NotPositiveDefiniteError, SolverFailedError, AccuracyNotMetError, OptimizationFailedError,
                    ConsistencyError, DegenerateDesignError, np.linalg.LinAlgError, FloatingPointError)
CONFIG_ERRORS = (ConfigError, InvalidArgumentError, DomainError, UnsupportedIdentityError, KeyError, TypeError)
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mobq", description="Multi-output Bayesian quadrature experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in (("integrate", "integrate the configured integrands once"),
                       ("converge", "WCE and error rates over an N schedule"),
                       ("multifidelity", "uni- vs multi-output BQ on a multi-fidelity problem"),
                       ("illumination", "illumination integrals against Monte Carlo")):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, metavar="PATH")
        p.add_argument("--out", default="results", metavar="DIR")
        p.add_argument("--seed", type=int, default=None, metavar="U64")
        p.add_argument("--threads", type=int, default=1, metavar="N")
        p.add_argument("--timing", action="store_true", help="fill the wall_ms column (breaks byte-identity)")
    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    p.add_argument("--seed", type=int, default=0, metavar="U64")
    p.add_argument("--threads", type=int, default=1, metavar="N")
    return parser


def _schema():
    text = resources.files("mobq").joinpath("config_schema.json").read_text()
    return json.loads(text)


def load_config(path: str, study: str) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    doc = _schema()
    schema = dict(doc["studies"][study])
    schema["$defs"] = doc["$defs"]
    try:
        jsonschema.validate(cfg, schema)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {where}: {exc.message}") from exc
    return cfg


def _shift_seeds(seeds, seed):
    return list(seeds) if seed is None else [seed + i for i in range(len(seeds))]


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def _integrate_design(spec, measure, D, seed):
    kind = spec["kind"]
    if kind == "points":
        pts = spec.get("points")
        if not pts or len(pts) != D:
            raise ConfigError(f"design.points needs one point list per output ({D})")
        return Design([np.asarray(p, dtype=float).reshape(len(p), -1) for p in pts])
    if "N" not in spec:
        raise ConfigError("design.N is required for grid and iid designs")
    return studies.make_design(kind, measure, int(spec["N"]), D, seed)


def cmd_integrate(cfg, args):
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    kernel = kernel_from_dict(cfg["kernel"])
    measure = measure_from_dict(cfg["measure"])
    D = kernel.n_outputs
    if len(cfg["integrands"]) != D:
        raise ConfigError(f"kernel has {D} outputs but {len(cfg['integrands'])} integrands are configured")
    integrands = [studies.integrand_from_dict(s, measure) for s in cfg["integrands"]]
    design = _integrate_design(cfg["design"], measure, D, seed)
    data = Dataset.evaluate(design, integrands)
    report = studies.StudyReport("integrate", seed, cfg)
    if "optimizer" in cfg:
        opt = hyper.OptimizerConfig.from_dict({**cfg["optimizer"], "threads": args.threads})
        res = hyper.optimize(pack_hypers(kernel), data, measure, opt)
        kernel = res.kernel
        report.provenance["lml"] = res.lml
    model = posterior.fit(kernel, measure, design, method=cfg.get("kernel_method", "auto"))
    post = posterior.integral_posterior(model, data)
    report.provenance["kernel"] = kernel.to_dict()
    lines = []
    for d, f in enumerate(integrands):
        var = float(post.cov[d, d])
        wce = posterior.worst_case_error(post, d)
        ref = f.reference()
        err = abs(float(post.mean[d]) - ref.value)
        report.records.append(studies.Record("integrate", "BQ", D, d, "", design.sizes[d], seed, err, var, wce,
                                             model.jitter))
        lines.append(f"output {d} ({f.name}): {studies.fmt(post.mean[d])} +/- {studies.fmt(2 * wce)}"
                     f"  (reference {studies.fmt(ref.value)})")
    report.summary = {"means": post.mean.tolist(), "cov": post.cov.tolist(), "jitter": model.jitter}
    return report, lines


def cmd_converge(cfg, args):
    kernel = kernel_from_dict(cfg["kernel"])
    measure = measure_from_dict(cfg["measure"])
    seeds = _shift_seeds(cfg.get("seeds", [cfg.get("seed", 0)]), args.seed)
    integrands = refs = None
    if "integrands" in cfg:
        integrands = [studies.integrand_from_dict(s, measure) for s in cfg["integrands"]]
        refs = [f.reference() for f in integrands]
    report = studies.convergence_study(kernel, measure, design=cfg["design"], schedule=cfg["schedule"], seeds=seeds,
                                       integrands=integrands, references=refs, kernel_method=cfg.get("kernel_method", "auto"),
                                       config=cfg)
    wce = [v.slope for k, v in report.slopes.items() if k.startswith("wce")]
    report.summary["slope"] = float(np.median(wce))
    report.summary["wce_slopes"] = wce
    lines = [f"{k}: slope {studies.fmt(v.slope)} +/- {studies.fmt(v.half_width)}" for k, v in sorted(report.slopes.items())]
    return report, lines


def cmd_multifidelity(cfg, args):
    body = {k: v for k, v in cfg.items() if k != "schema_version"}
    mf = studies.MultiFidelityConfig.from_dict(body)
    mf = replace(mf, seeds=tuple(_shift_seeds(mf.seeds, args.seed)),
                 optimizer=replace(mf.optimizer, threads=args.threads))
    report = studies.multifidelity_study(mf)
    lines = []
    for seed, row in report.summary["per_seed"].items():
        errs = ", ".join(f"{m} {studies.fmt(e)}" for m, e in row["high_abs_error"].items())
        lines.append(f"seed {seed}: high-fidelity |error|: {errs}")
    return report, lines


def cmd_illumination(cfg, args):
    body = {k: v for k, v in cfg.items() if k != "schema_version"}
    ill = studies.IlluminationConfig.from_dict(body)
    ill = replace(ill, seeds=tuple(_shift_seeds(ill.seeds, args.seed)))
    report = studies.illumination_study(ill)
    s = report.summary
    lines = [f"WCE slopes in [{studies.fmt(s['bq_wce_slope_range'][0])}, {studies.fmt(s['bq_wce_slope_range'][1])}]",
             f"WCE decreases with outputs: {s['wce_decreases_with_outputs']}",
             "beats Monte Carlo at N >= 64: " + ", ".join(f"{m} {ok}" for m, ok in s["beats_mc_at_64_plus"].items())]
    return report, lines


COMMANDS = {"integrate": cmd_integrate, "converge": cmd_converge, "multifidelity": cmd_multifidelity,
            "illumination": cmd_illumination}


def _configure_logging():
    level = os.environ.get("MOBQ_LOG", "error").lower()
    if level not in LOG_LEVELS:
        raise ConfigError(f"MOBQ_LOG must be one of {sorted(LOG_LEVELS)}, got {level!r}")
    logging.basicConfig(level=LOG_LEVELS[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def run(argv=None) -> int:
    try:
        _configure_logging()
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise ConfigError("--seed must fit in 64 unsigned bits")
        if args.command == "selftest":
            results = selftest.run(args.seed)
            for name, ok, val, tol in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}: {val:.3g} (tol {tol:g})")
            return EXIT_OK if all(r[1] for r in results) else EXIT_NUMERICAL
        cfg = load_config(args.config, args.command)
        report, lines = COMMANDS[args.command](cfg, args)
        csv_path, json_path = report.write(args.out, timing=args.timing)
        for line in lines:
            print(line)
        print(f"{report.study}: wrote {csv_path} and {json_path}")
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except CONFIG_ERRORS as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MobqError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
