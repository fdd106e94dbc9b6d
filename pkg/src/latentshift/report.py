"""Evaluation report documents: JSON with a published schema."""

import json
from importlib import resources

import jsonschema
import numpy as np

from latentshift.errors import DataError


def _schema():
    text = resources.files("latentshift").joinpath("report_schema.json").read_text()
    return json.loads(text)


def validate_report(doc):
    try:
        jsonschema.validate(doc, _schema())
    except jsonschema.ValidationError as exc:
        raise DataError(f"report document violates the schema: {exc.message}") from None


def build_report(per_seed, wall_time_seconds, chosen_nz=None, chosen_lambda=None):
    """Aggregate per-seed entries into a schema-valid report document.

    per_seed entries need accuracy/auc/fallback and may carry seed and
    shift fields. The standard deviation is reported only with two or
    more seeds; the headline shift weights come from the first entry.
    """
    if not per_seed:
        raise DataError("at least one per-seed result is required")
    accs = np.array([e["accuracy"] for e in per_seed], dtype=np.float64)
    aucs = np.array([e["auc"] for e in per_seed], dtype=np.float64)
    many = len(per_seed) >= 2
    first = per_seed[0]
    shift = first.get("shift_weights")
    doc = {
        "format_version": 1,
        "accuracy": float(accs.mean()),
        "auc": float(aucs.mean()),
        "std_accuracy": float(accs.std(ddof=1)) if many else None,
        "std_auc": float(aucs.std(ddof=1)) if many else None,
        "per_seed_results": [
            {
                "seed": e.get("seed"),
                "accuracy": float(e["accuracy"]),
                "auc": float(e["auc"]),
                "fallback": bool(e["fallback"]),
                **(
                    {"shift_ratios": [float(v) for v in e["shift_ratios"]],
                     "test_marginal_implied": [float(v) for v in e["test_marginal_implied"]]}
                    if "shift_ratios" in e else {}
                ),
            }
            for e in per_seed
        ],
        "shift_weights": shift,
        "fallback_flag": bool(any(e["fallback"] for e in per_seed)),
        "chosen_nz": chosen_nz,
        "chosen_lambda": chosen_lambda,
        "wall_time_seconds": float(wall_time_seconds),
    }
    validate_report(doc)
    return doc


def shift_weights_dict(weights):
    return {
        "ratios": [float(v) for v in weights.ratios],
        "train_marginal": [float(v) for v in weights.train_marginal],
        "test_marginal_implied": [float(v) for v in weights.test_marginal_implied],
    }


def save_report(path, doc):
    validate_report(doc)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_report(path):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    validate_report(doc)
    return doc
