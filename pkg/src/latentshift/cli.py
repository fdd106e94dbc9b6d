"""Command line driver: generate, train, evaluate, reproduce, verify.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training error,
4 verification failure.
"""

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

from latentshift import __version__
from latentshift.bench import (
    evaluate_model,
    format_reproduce_table,
    generate_task_splits,
    reproduce_synthetic,
    train_pipeline,
)
from latentshift.config import ExperimentConfig, load_config
from latentshift.data import (
    default_feature_names,
    load_csv,
    split_train_val,
    standardize_columns,
    write_csv,
)
from latentshift.errors import (
    DataError,
    LatentShiftError,
    TrainingError,
    UsageError,
    VerificationFailure,
)
from latentshift.oracles import run_verification_suite
from latentshift.report import build_report, save_report
from latentshift.serialize import load_model, save_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAINING = 3
EXIT_VERIFY = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_config(args):
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "task", None):
        overrides["task"] = args.task
    return replace(cfg, **overrides) if overrides else cfg


def _feature_names(config, n_features):
    if config.feature_columns:
        return list(config.feature_columns)
    return default_feature_names(n_features)


def _train_schema(config):
    """Columns the training phase is allowed to read (no latent truth)."""
    if config.task == "csv":
        return config.csv_schema()
    schema = {"features": default_feature_names(3), "label": "y"}
    if config.task == "proxy":
        schema["proxy"] = "s"
    else:
        schema["source"] = "u"
    return schema


def cmd_generate(config, out_dir):
    """Write train/val/test CSVs and a manifest for a synthetic task."""
    if config.task == "csv":
        raise UsageError("generate applies to the synthetic tasks only")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    full_train, test = generate_task_splits(config.task, config.seed,
                                            config.n_samples)
    train, val = split_train_val(full_train, config.val_fraction, config.seed)
    names = _feature_names(config, train.n_features)
    paths = {}
    for tag, ds in (("train", train), ("val", val), ("test", test)):
        path = out / f"{tag}.csv"
        write_csv(ds, path, feature_names=names)
        paths[tag] = str(path)
    manifest = {
        "task": config.task,
        "seed": config.seed,
        "n_samples": config.n_samples,
        "val_fraction": config.val_fraction,
        "feature_columns": names,
        "files": {k: Path(v).name for k, v in paths.items()},
        "version": __version__,
    }
    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["manifest"] = str(manifest_path)
    return paths


def cmd_train(config, data_dir, out_dir):
    """Two-phase training from CSVs; writes the model document and the
    latent fit report."""
    data = Path(data_dir)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = _train_schema(config)
    train = load_csv(data / "train.csv", schema)
    val_path = data / "val.csv"
    if val_path.exists():
        val = load_csv(val_path, schema)
    else:
        train, val = split_train_val(train, config.val_fraction, config.seed)

    standardizer = None
    if config.standardize:
        (train, val), mean, std = standardize_columns(train, val)
        standardizer = (mean, std)

    pipeline = train_pipeline(train, val, config)

    model_path = out / "model.txt"
    save_model(
        model_path,
        pipeline.model,
        chosen_nz=pipeline.latent_report.chosen_nz,
        chosen_lambda=pipeline.latent_report.chosen_lambda,
        standardizer=standardizer,
    )
    rep = pipeline.latent_report
    report_doc = {
        "chosen_nz": rep.chosen_nz,
        "chosen_lambda": rep.chosen_lambda,
        "val_reconstruction_loss_by_nz": {
            str(k): v for k, v in sorted(rep.val_reconstruction_loss_by_nz.items())
        },
        "val_loss_by_lambda": {
            repr(k): v for k, v in sorted(rep.val_loss_by_lambda.items())
        },
        "final_val_loss": rep.final_val_loss,
        "epochs_run": rep.epochs_run,
        "no_elbow": rep.no_elbow,
        "warnings": rep.warnings,
    }
    report_path = out / "train_report.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        json.dump(report_doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {"model": str(model_path), "report": str(report_path)}


def cmd_evaluate(model_paths, test_path, out_path, config=None):
    """Adapted evaluation of one or more trained models on a test CSV."""
    started = time.perf_counter()
    cfg = config or ExperimentConfig()
    entries = []
    chosen_nz = chosen_lambda = None
    for i, model_path in enumerate(model_paths):
        model, meta = load_model(model_path)
        schema = {
            "features": _feature_names(cfg, model.feature_dim),
            "label": cfg.label_column or "y",
        }
        test = load_csv(test_path, schema)
        if test.n_features != model.feature_dim:
            raise DataError(
                f"model expects {model.feature_dim} features, "
                f"test data has {test.n_features}"
            )
        if meta["standardizer"] is not None:
            mean, std = meta["standardizer"]
            test.features = (test.features - mean) / std
        entries.append(evaluate_model(model, test, seed=i))
        if i == 0:
            chosen_nz = meta["chosen_nz"]
            chosen_lambda = meta["chosen_lambda"]
    doc = build_report(
        entries,
        wall_time_seconds=time.perf_counter() - started,
        chosen_nz=chosen_nz,
        chosen_lambda=chosen_lambda,
    )
    if out_path:
        save_report(out_path, doc)
    return doc


def cmd_reproduce(out_dir=None, seeds=5, n_samples=10000, tasks=None):
    """Rerun the synthetic benchmark and print it next to the
    published reference numbers."""
    tasks = tasks or ("proxy", "multisource")
    table = reproduce_synthetic(seeds=range(seeds), n_samples=n_samples,
                                tasks=tasks)
    text = format_reproduce_table(table)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "reproduce_table.txt").write_text(text + "\n", encoding="utf-8")
        slim = {
            task: {
                method: table[task][method]
                for method in ("erm", "ours_lam0", "ours")
            }
            for task in table
        }
        with open(out / "reproduce_results.json", "w", encoding="utf-8") as fh:
            json.dump(slim, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return table, text


def cmd_verify():
    """Run the brute-force verification suite; returns its rows."""
    return run_verification_suite()


def _format_verify_rows(rows):
    width = max(len(r["check"]) for r in rows)
    lines = []
    for r in rows:
        status = "PASS" if r["passed"] else "FAIL"
        lines.append(f"{status}  {r['check']:<{width}}  {r['detail']}")
    return "\n".join(lines)


def build_parser():
    parser = _Parser(prog="latentshift",
                     description="Prediction under latent-class marginal shift")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    common = {"--config": dict(help="experiment config file (key = value lines)"),
              "--seed": dict(type=int, help="override the config seed"),
              "--task": dict(help="override the config task")}

    p = sub.add_parser("generate", help="write synthetic train/val/test CSVs")
    for flag, kw in common.items():
        p.add_argument(flag, **kw)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train from CSVs, write the model document")
    for flag, kw in common.items():
        p.add_argument(flag, **kw)
    p.add_argument("--data", required=True, help="directory with train.csv (and val.csv)")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="evaluate model documents on a test CSV")
    p.add_argument("--config", help="config naming csv feature columns")
    p.add_argument("--model", action="append", required=True,
                   help="model document path (repeat for per-seed models)")
    p.add_argument("--test", required=True, help="test CSV path")
    p.add_argument("--out", help="report JSON output path")

    p = sub.add_parser("reproduce", help="rerun the synthetic benchmark table")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--n-samples", type=int, default=10000)
    p.add_argument("--task", choices=["proxy", "multisource"],
                   help="restrict to one task")

    sub.add_parser("verify", help="run the brute-force verification suite")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "generate":
            paths = cmd_generate(_resolve_config(args), args.out)
            print("\n".join(f"{k}: {v}" for k, v in sorted(paths.items())))
        elif args.command == "train":
            paths = cmd_train(_resolve_config(args), args.data, args.out)
            print("\n".join(f"{k}: {v}" for k, v in sorted(paths.items())))
        elif args.command == "evaluate":
            cfg = load_config(args.config) if args.config else None
            doc = cmd_evaluate(args.model, args.test, args.out, cfg)
            print(json.dumps(
                {k: doc[k] for k in ("accuracy", "auc", "fallback_flag")},
                indent=2, sort_keys=True,
            ))
        elif args.command == "reproduce":
            tasks = (args.task,) if args.task else None
            _, text = cmd_reproduce(args.out, args.seeds, args.n_samples, tasks)
            print(text)
        elif args.command == "verify":
            rows = cmd_verify()
            print(_format_verify_rows(rows))
            if not all(r["passed"] for r in rows):
                raise VerificationFailure("one or more checks failed")
        return EXIT_OK
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailure as exc:
        print(f"verification failure: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (DataError, LatentShiftError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
