"""Command-line interface.

Four subcommands: `fit` runs the three-stage estimator on a CSV
cohort, `simulate` runs a replication study on a synthetic setting,
`validate` compares two fitted parameter bundles on evaluation data,
and `roc` re-exports the ROC curve stored in a bundle.

One JSON config document configures everything; command-line flags
override individual fields. Artifacts are deterministic: keys sorted,
no timestamps, floats at full precision.

Exit codes: 0 success, 1 configuration/data/runtime error,
2 finished with convergence warnings (artifacts still written).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .data import load_csv
from .errors import TubeError
from .pipeline import RunConfig, bundle_from_result, bundle_to_json, final_beta, fit_with_uncertainty
from .simlab import SimSetting, evaluate_against_reference, run_replications, write_report_csv
from .stage2 import StepSurvival
from .stage3 import roc_curve


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this interface reserves 2 for
    convergence warnings, so usage errors map to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="tube", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--threads", type=int, help="worker cap (overrides config)")
        p.add_argument("--bootstrap", type=int, help="bootstrap replicate count (0 disables)")
        p.add_argument(
            "--print-config",
            action="store_true",
            help="print the fully resolved config and exit",
        )

    p_fit = sub.add_parser("fit", help="run the three-stage estimator on a CSV cohort")
    common(p_fit)
    p_fit.add_argument("--data", help="input CSV (y_star, x1.., g1.. columns)")

    p_sim = sub.add_parser("simulate", help="replication study on a synthetic setting")
    common(p_sim)
    p_sim.add_argument("--setting", help="generator name: a, b, or c")
    p_sim.add_argument("--reps", type=int, help="replication count")
    p_sim.add_argument("--n-labeled", type=int, dest="n_labeled", help="labeled rows per cohort")
    p_sim.add_argument("--n-records", type=int, dest="n_records", help="cohort size")

    p_val = sub.add_parser("validate", help="compare two parameter bundles on eval data")
    common(p_val)
    p_val.add_argument("bundle", help="fitted parameter bundle JSON")
    p_val.add_argument("reference", help="reference parameter bundle JSON")
    p_val.add_argument("--data", help="evaluation CSV with g columns (optional y column)")

    p_roc = sub.add_parser("roc", help="export the ROC curve from a bundle")
    common(p_roc)
    p_roc.add_argument("bundle", help="fitted parameter bundle JSON")
    return parser


def _load_config_doc(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise TubeError("config document must be a JSON object")
    return doc


def _resolve_run_config(args) -> tuple:
    doc = _load_config_doc(args.config)
    sim_block = doc.pop("simulate", {})
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.threads is not None:
        doc["threads"] = args.threads
    if args.bootstrap is not None:
        doc["bootstrap_replicates"] = args.bootstrap
    doc.setdefault("seed", 0)
    return RunConfig.from_dict(doc), sim_block


def _out_dir(args) -> Path:
    out = Path(args.out if args.out else ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write(path: Path, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def _print_config(config: RunConfig, extra: dict | None = None) -> int:
    doc = config.to_dict()
    if extra:
        doc["simulate"] = dict(sorted(extra.items()))
    print(json.dumps(doc, sort_keys=True, indent=2))
    return 0


def _write_roc_csv(path: Path, fpr, tpr) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fpr", "tpr"])
        for f, t in zip(fpr, tpr):
            writer.writerow([repr(float(f)), repr(float(t))])


def cmd_fit(args) -> int:
    config, _ = _resolve_run_config(args)
    if args.print_config:
        return _print_config(config)
    if not args.data:
        print("tube fit: --data is required", file=sys.stderr)
        return 1
    data = load_csv(args.data)
    result = fit_with_uncertainty(data, config)
    bundle = bundle_from_result(result)
    out = _out_dir(args)
    _write(out / "bundle.json", bundle_to_json(bundle))

    report = {
        "auc": bundle["roc"]["auc"],
        "beta_final": bundle["risk"]["beta_final"],
        "prevalence": bundle["stage1"]["prevalence"],
        "label_probs_stage1": bundle["stage1"]["label_probs"],
        "label_probs_stage2": bundle["stage2"]["label_probs"],
        "sign_flipped": bundle["risk"]["sign_flipped"],
        "converged": {
            "stage1": bundle["stage1"]["converged"],
            "stage2": bundle["stage2"]["converged"],
        },
    }
    for key in ("omega", "se_combined", "se0", "se1"):
        if key in bundle["risk"]:
            report[key] = bundle["risk"][key]
    _write(out / "report.json", json.dumps(report, sort_keys=True, indent=2) + "\n")
    _write_roc_csv(out / "roc.csv", bundle["roc"]["fpr"], bundle["roc"]["tpr"])

    fit = result.fit
    clean = (
        fit.stage1_trace.converged
        and fit.stage2_trace.converged
        and fit.beta0_fit.converged
        and fit.beta1_fit.converged
    )
    if not clean:
        print("tube fit: finished with convergence warnings", file=sys.stderr)
        return 2
    return 0


def cmd_simulate(args) -> int:
    config, sim_block = _resolve_run_config(args)
    name = args.setting or sim_block.get("setting")
    seed = config.seed_key[0]
    setting = SimSetting(
        name=name if name is not None else "",
        num_records=args.n_records or sim_block.get("num_records", 10000),
        num_labeled=args.n_labeled or sim_block.get("num_labeled", 500),
        seed=seed,
        replications=args.reps if args.reps is not None else sim_block.get("replications", 100),
    )
    methods = tuple(sim_block.get("methods", ("tube",)))
    if args.print_config:
        block = {
            "setting": setting.name,
            "num_records": setting.num_records,
            "num_labeled": setting.num_labeled,
            "replications": setting.replications,
            "methods": list(methods),
        }
        return _print_config(config, block)
    setting.validate()
    report = run_replications(
        setting,
        methods=methods,
        config=config,
        oracle_draws=int(sim_block.get("oracle_draws", 1_000_000)),
    )
    out = _out_dir(args)
    _write(out / "sim_report.json", report.to_json())
    write_report_csv(report, out / "sim_report.csv")

    print(f"setting {setting.name}: {setting.replications} replications, "
          f"n={setting.num_labeled}, N={setting.num_records}")
    for method in report.methods:
        table = report.tables[method]
        print(f"  {method}: failures={table.failures}")
        for i, param in enumerate(table.parameters):
            if np.isnan(table.bias[i]):
                continue
            cp = "" if np.isnan(table.coverage[i]) else f"  cp={table.coverage[i]:.3f}"
            print(
                f"    {param:>6}: bias={table.bias[i]:+.4f}  mse={table.mse[i]:.5f}"
                f"  pct_bias={table.percent_bias[i]:.3f}{cp}"
            )
    return 0


def _load_bundle(path) -> dict:
    with open(path) as fh:
        bundle = json.load(fh)
    if not isinstance(bundle, dict) or "risk" not in bundle:
        raise TubeError(f"not a parameter bundle: {path}")
    return bundle


def _load_eval_csv(path):
    """Evaluation table: g1..gq columns plus optional y in [0, 1]."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise TubeError(f"empty evaluation file: {path}") from None
        cols = [c.strip() for c in header]
        g_names = sorted(
            (c for c in cols if c.startswith("g") and c[1:].isdigit()),
            key=lambda c: int(c[1:]),
        )
        if not g_names:
            raise TubeError("evaluation file needs g1..gq columns")
        g_idx = [cols.index(c) for c in g_names]
        y_idx = cols.index("y") if "y" in cols else None
        g_rows = []
        y_rows = []
        for row in reader:
            g_rows.append([float(row[i]) for i in g_idx])
            if y_idx is not None:
                y_rows.append(float(row[y_idx]))
    labels = np.array(y_rows) if y_rows else None
    if labels is not None and (np.any(labels < 0) or np.any(labels > 1)):
        raise TubeError("evaluation labels must lie in [0, 1]")
    return np.array(g_rows), labels


def cmd_validate(args) -> int:
    config, _ = _resolve_run_config(args)
    if args.print_config:
        return _print_config(config)
    if not args.data:
        print("tube validate: --data is required", file=sys.stderr)
        return 1
    bundle = _load_bundle(args.bundle)
    reference = _load_bundle(args.reference)
    beta_hat = final_beta(bundle)
    beta_ref = final_beta(reference)
    if beta_hat.shape != beta_ref.shape:
        print("tube validate: bundles disagree on coefficient length", file=sys.stderr)
        return 1
    eval_g, labels = _load_eval_csv(args.data)
    metrics = evaluate_against_reference(beta_hat, beta_ref, eval_g, labels)
    out = _out_dir(args)
    _write(out / "validation.json", json.dumps(metrics, sort_keys=True, indent=2) + "\n")
    print(json.dumps(metrics, sort_keys=True))
    return 0


def cmd_roc(args) -> int:
    config, _ = _resolve_run_config(args)
    if args.print_config:
        return _print_config(config)
    bundle = _load_bundle(args.bundle)
    try:
        s0 = bundle["stage2"]["s0"]
        s1 = bundle["stage2"]["s1"]
        step0 = StepSurvival(np.array(s0["points"]), np.array(s0["sizes"]))
        step1 = StepSurvival(np.array(s1["points"]), np.array(s1["sizes"]))
    except KeyError as exc:
        raise TubeError(f"parameter bundle missing field: {exc}") from exc
    roc = roc_curve(step0, step1)
    out = _out_dir(args)
    _write_roc_csv(out / "roc.csv", roc.fpr, roc.tpr)
    print(f"auc={roc.auc!r}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, stream=sys.stderr)
    parser = _build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "fit": cmd_fit,
        "simulate": cmd_simulate,
        "validate": cmd_validate,
        "roc": cmd_roc,
    }
    try:
        return handlers[args.command](args)
    except (TubeError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"tube {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
