"""Command-line entry point.

Subcommands
-----------
slp       train kernel-correction models on synthetic scalar data
da        run the 2D data-assimilation experiment
gmm-fit   fit a 1D Gaussian mixture to samples
report    tabulate finished ``da`` runs found under a directory

Every option may also come from a JSON file given with ``--config``; keys are
the option names with dashes replaced by underscores. Flags given on the
command line override the file. The seed falls back to ``$ENSDA_SEED`` and
then to 0.

Exit status is 0 on success, 1 when a run fails its invariant audits or the
report finds no runs, and 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import jsonschema
import numpy as np

from ensda.smoother import GAMMA0_RULES, GAMMA_MODES, IesConfig
from ensda.utils import InvalidArgumentError

logger = logging.getLogger("ensda")

EXIT_OK = 0
EXIT_AUDIT = 1
EXIT_USAGE = 2

_INT = {"type": "integer"}
_POS_INT = {"type": "integer", "minimum": 1}
_NUM = {"type": "number"}

IES_SCHEMA = {
    "max_outer": _POS_INT,
    "max_inner": {"type": "integer", "minimum": 0},
    "gamma_grow": {"type": "number", "exclusiveMinimum": 0},
    "gamma_shrink": {"type": "number", "exclusiveMinimum": 0},
    "rel_change_stop": {"type": "number", "minimum": 0},
    "target_factor": {"type": "number", "minimum": 0},
    "svd_energy": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    "gamma0_rule": {"enum": list(GAMMA0_RULES)},
    "gamma0": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "gamma_mode": {"enum": list(GAMMA_MODES)},
}

COMMON_SCHEMA = {"seed": _INT, "out": {"type": "string"}, "threads": _POS_INT}

SCHEMAS = {
    "slp": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **COMMON_SCHEMA,
            **IES_SCHEMA,
            "modes": {"type": "string"},
            "n_cl": _POS_INT,
            "n_e": {"type": "integer", "minimum": 2},
            "n_cp": _POS_INT,
            "center_low": _NUM,
            "center_high": _NUM,
            "train_frac": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        },
    },
    "da": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **COMMON_SCHEMA,
            **IES_SCHEMA,
            "scenario": {"enum": ["perfect", "imperfect"]},
            "mec": {"enum": ["none", "kernel", "bias"]},
            "n_cl": _POS_INT,
            "nx": _POS_INT,
            "ny": _POS_INT,
            "n_e": {"type": "integer", "minimum": 2},
            "n_cp": _POS_INT,
            "n_neighbors": _POS_INT,
        },
    },
    "gmm-fit": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            **COMMON_SCHEMA,
            "input": {"type": "string"},
            "modes": {"type": "string"},
            "n_cl": _POS_INT,
            "max_iter": _POS_INT,
        },
    },
    "report": {
        "type": "object",
        "additionalProperties": False,
        "properties": {"runs": {"type": "string"}, "out": {"type": "string"}},
    },
}

DEFAULTS = {
    "slp": {"modes": "-5,1,10000", "n_cl": 1, "n_e": 100, "n_cp": 200, "center_low": -6.0,
            "center_high": 6.0, "train_frac": 0.8, "out": "slp_out", "threads": 1},
    "da": {"scenario": "perfect", "mec": "none", "n_cl": 1, "nx": 100, "ny": 120, "n_e": 100, "n_cp": 200,
           "n_neighbors": 20, "out": "da_out", "threads": 1},
    "gmm-fit": {"modes": "-5,1,8000;0,1,8000;5,1,8000", "n_cl": 3, "max_iter": 500, "out": "gmm.json",
                "threads": 1},
    "report": {"runs": ".", "out": "report.csv"},
}


class UsageError(Exception):
    pass


def _add_ies_options(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("smoother")
    g.add_argument("--max-outer", type=int)
    g.add_argument("--max-inner", type=int)
    g.add_argument("--gamma-grow", type=float)
    g.add_argument("--gamma-shrink", type=float)
    g.add_argument("--rel-change-stop", type=float)
    g.add_argument("--target-factor", type=float)
    g.add_argument("--svd-energy", type=float)
    g.add_argument("--gamma0-rule", choices=GAMMA0_RULES)
    g.add_argument("--gamma0", type=float, help="fixed initial gamma, overrides the rule")
    g.add_argument("--gamma-mode", choices=GAMMA_MODES)


def _add_common(p: argparse.ArgumentParser, seeded: bool = True) -> None:
    p.add_argument("--config", help="JSON file of option values")
    p.add_argument("--out", help="output directory (file for gmm-fit and report)")
    if seeded:
        p.add_argument("--seed", type=int, help="master seed (default: $ENSDA_SEED or 0)")
        p.add_argument("--threads", type=int, help="cap on worker threads for forward runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ensda", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("slp", help="supervised residual learning on scalar data")
    _add_common(p)
    p.add_argument("--modes", help='input modes "mean,std,count;..."')
    p.add_argument("--n-cl", type=int, help="mixture components (1 = single ensemble)")
    p.add_argument("--n-e", type=int, help="ensemble size")
    p.add_argument("--n-cp", type=int, help="number of kernel centers")
    p.add_argument("--center-low", type=float)
    p.add_argument("--center-high", type=float)
    p.add_argument("--train-frac", type=float)
    _add_ies_options(p)

    p = sub.add_parser("da", help="2D data assimilation")
    _add_common(p)
    p.add_argument("--scenario", choices=("perfect", "imperfect"))
    p.add_argument("--mec", choices=("none", "kernel", "bias"), help="model-error correction")
    p.add_argument("--n-cl", type=int)
    p.add_argument("--nx", type=int)
    p.add_argument("--ny", type=int)
    p.add_argument("--n-e", type=int)
    p.add_argument("--n-cp", type=int)
    p.add_argument("--n-neighbors", type=int)
    _add_ies_options(p)

    p = sub.add_parser("gmm-fit", help="fit a 1D Gaussian mixture")
    _add_common(p)
    p.add_argument("--input", help="text/CSV file with one sample per line (default: generate from --modes)")
    p.add_argument("--modes")
    p.add_argument("--n-cl", type=int)
    p.add_argument("--max-iter", type=int)

    p = sub.add_parser("report", help="summary table of da runs")
    _add_common(p, seeded=False)
    p.add_argument("runs", nargs="?", help="directory searched recursively for da_summary.json")
    return parser


def resolve_options(command: str, args: argparse.Namespace) -> Dict:
    """Merge defaults, the config file, the environment seed and the flags, then validate."""
    opts = dict(DEFAULTS[command])
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        opts.update(loaded)
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("command", "config", "verbose")}
    opts.update(flags)
    if command != "report" and "seed" not in opts:
        env = os.environ.get("ENSDA_SEED")
        try:
            opts["seed"] = int(env) if env is not None else 0
        except ValueError as exc:
            raise UsageError(f"ENSDA_SEED must be an integer, got {env!r}") from exc
    try:
        jsonschema.validate(opts, SCHEMAS[command])
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UsageError(f"invalid option {path}: {exc.message}") from exc
    return opts


def _ies_config(opts: Dict, base: Optional[IesConfig] = None) -> IesConfig:
    cfg = (base or IesConfig()).to_dict()
    for key in IES_SCHEMA:
        if key in opts:
            cfg[key] = opts[key]
    cfg["seed"] = opts["seed"]
    cfg["n_jobs"] = opts.get("threads", 1)
    try:
        return IesConfig(**cfg)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc


def cmd_slp(opts: Dict) -> int:
    from ensda.slp import audit_run, parse_modes, run_slp_experiment, write_slp_outputs

    try:
        modes = parse_modes(opts["modes"])
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    if opts["center_low"] >= opts["center_high"]:
        raise UsageError("center_low must be below center_high")
    cfg = _ies_config(opts)
    t0 = time.perf_counter()
    exp = run_slp_experiment(modes, opts["n_cl"], opts["seed"], opts["n_e"], opts["n_cp"],
                             (opts["center_low"], opts["center_high"]), opts["train_frac"], cfg)
    elapsed = time.perf_counter() - t0
    summary = write_slp_outputs(exp, opts["out"], {"config": opts, "smoother": cfg.to_dict()})
    logger.info("slp finished in %.1f s, grid MAE %.4f (baseline %.4f)", elapsed,
                summary["grid_mae_final"], summary["grid_mae_baseline"])
    return _report_audit(audit_run(exp.run))


def cmd_da(opts: Dict) -> int:
    from ensda.da import (audit_results, default_da_config, gen_da_problem, gen_initial_ensemble, run_da,
                          write_da_outputs)

    cfg = _ies_config(opts, default_da_config())
    if opts["n_e"] < 2:
        raise UsageError("n_e must be at least 2")
    t0 = time.perf_counter()
    problem = gen_da_problem(opts["nx"], opts["ny"], scenario=opts["scenario"], seed=opts["seed"])
    init = gen_initial_ensemble(opts["nx"], opts["ny"], opts["n_e"], seed=opts["seed"])
    res = run_da(problem, init, opts["mec"], opts["n_cl"], cfg, seed=opts["seed"], n_cp=opts["n_cp"],
                 n_neighbors=opts["n_neighbors"])
    elapsed = time.perf_counter() - t0
    summary = write_da_outputs(res, opts["out"], {"config": opts, "smoother": cfg.to_dict(),
                                                  "state_size": int(res.layout.size)})
    logger.info("da finished in %.1f s after %d steps (%s), RMSE %.4f", elapsed, summary["n_outer"],
                summary["stop_reason"], summary["rmse_mean"])
    return _report_audit(audit_results(res))


def cmd_gmm_fit(opts: Dict) -> int:
    from ensda.gmm import fit_gmm
    from ensda.slp import gen_slp_data, parse_modes
    from ensda.utils import derive_seed

    if "input" in opts:
        try:
            x = np.loadtxt(opts["input"], delimiter=",", ndmin=1)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read samples from {opts['input']}: {exc}") from exc
        x = x.ravel()
    else:
        try:
            modes = parse_modes(opts["modes"])
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from exc
        x = gen_slp_data(modes, derive_seed(opts["seed"], 10)).x
    try:
        model = fit_gmm(x, opts["n_cl"], max_iter=opts["max_iter"], seed=opts["seed"])
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    model.to_json(out)
    for w, m, v in zip(model.weights, model.means, model.variances):
        logger.info("component: weight %.4f mean %.4f variance %.4f", w, m, v)
    return EXIT_OK


REPORT_FIELDS = ("run", "scenario", "mec", "n_cl", "mismatch_mean", "mismatch_std", "rmse_mean", "rmse_std")


def collect_runs(root: Path) -> List[Dict]:
    """Rows of every readable ``da_summary.json`` under ``root``; malformed files are skipped."""
    rows = []
    for path in sorted(root.rglob("da_summary.json")):
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
            row = {"run": str(path.parent.relative_to(root)) or "."}
            for key in REPORT_FIELDS[1:]:
                row[key] = data[key]
            for key in REPORT_FIELDS[4:]:
                row[key] = float(row[key])
        except (OSError, ValueError, KeyError, TypeError) as exc:
            logger.warning("skipping %s: %s", path, exc)
            continue
        rows.append(row)
    rows.sort(key=lambda r: r["rmse_mean"])
    return rows


def cmd_report(opts: Dict) -> int:
    root = Path(opts["runs"])
    rows = collect_runs(root) if root.is_dir() else []
    if not rows:
        logger.error("no da runs found under %s", root)
        return EXIT_AUDIT
    out = Path(opts["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        logger.info("%-30s %-9s %-6s Xi %.4g +- %.3g  RMSE %.4f +- %.4f", r["run"], r["scenario"], r["mec"],
                    r["mismatch_mean"], r["mismatch_std"], r["rmse_mean"], r["rmse_std"])
    return EXIT_OK


def _report_audit(problems: List[str]) -> int:
    for p in problems:
        logger.error("audit failed: %s", p)
    return EXIT_AUDIT if problems else EXIT_OK


COMMANDS = {"slp": cmd_slp, "da": cmd_da, "gmm-fit": cmd_gmm_fit, "report": cmd_report}


def _attach_mode_values(argv: List[str]) -> List[str]:
    # "--modes -5,1,100" would otherwise read the value as an option
    out = []
    i = 0
    while i < len(argv):
        if argv[i] == "--modes" and i + 1 < len(argv):
            out.append(f"--modes={argv[i + 1]}")
            i += 2
            continue
        out.append(argv[i])
        i += 1
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(_attach_mode_values(list(sys.argv[1:] if argv is None else argv)))
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        opts = resolve_options(args.command, args)
        return COMMANDS[args.command](opts)
    except UsageError as exc:
        parser.error(f"{args.command}: {exc}")
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
