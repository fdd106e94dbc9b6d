"""Experiment configuration: the flat key=value file format and defaults."""

from dataclasses import dataclass, fields

from latentshift.errors import UsageError

DEFAULT_LAMBDA_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)

TASKS = ("proxy", "multisource", "csv")


@dataclass
class TrainConfig:
    """Budget for one fit; epochs/patience differ per training stage.

    restarts applies to the factorization fit only: that loss surface
    has class-merging local optima, so each fit runs this many
    independently seeded inits and keeps the best held-out loss.
    """

    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    patience: int = 10
    seed: int = 0
    restarts: int = 3


@dataclass
class ExperimentConfig:
    task: str = "proxy"
    seed: int = 0
    n_samples: int = 10000
    lambda_grid: tuple = DEFAULT_LAMBDA_GRID
    nz_max: int = 6
    epochs_latent: int = 100
    epochs_moe: int = 25
    learning_rate: float = 1e-3
    batch_size: int = 64
    val_fraction: float = 0.2
    standardize: bool = False
    feature_columns: tuple = ()
    label_column: str = ""
    proxy_column: str = ""
    source_column: str = ""

    def __post_init__(self):
        if self.task not in TASKS:
            raise UsageError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task == "csv" and not self.feature_columns:
            raise UsageError("csv task requires feature_columns")

    def latent_train_config(self):
        return TrainConfig(
            epochs=self.epochs_latent,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            val_fraction=self.val_fraction,
            patience=10,
            seed=self.seed,
        )

    def moe_train_config(self):
        return TrainConfig(
            epochs=self.epochs_moe,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            val_fraction=self.val_fraction,
            patience=5,
            seed=self.seed,
        )

    def csv_schema(self):
        schema = {"features": list(self.feature_columns)}
        if self.label_column:
            schema["label"] = self.label_column
        if self.proxy_column:
            schema["proxy"] = self.proxy_column
        if self.source_column:
            schema["source"] = self.source_column
        return schema


_PARSERS = {
    "task": str,
    "seed": int,
    "n_samples": int,
    "lambda_grid": lambda s: tuple(float(v) for v in s.split(",") if v.strip()),
    "nz_max": int,
    "epochs_latent": int,
    "epochs_moe": int,
    "learning_rate": float,
    "batch_size": int,
    "val_fraction": float,
    "standardize": lambda s: {"true": True, "false": False, "1": True, "0": False}[s.lower()],
    "feature_columns": lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
    "label_column": str,
    "proxy_column": str,
    "source_column": str,
}


def parse_config_text(text):
    """Parse `key = value` lines; '#' starts a comment. Unknown keys fail."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {line_no}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _PARSERS:
            known = ", ".join(sorted(_PARSERS))
            raise UsageError(f"config line {line_no}: unknown key {key!r} (known: {known})")
        if key in values:
            raise UsageError(f"config line {line_no}: duplicate key {key!r}")
        try:
            values[key] = _PARSERS[key](value)
        except (ValueError, KeyError):
            raise UsageError(
                f"config line {line_no}: bad value {value!r} for key {key!r}"
            ) from None
    return ExperimentConfig(**values)


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def config_to_text(cfg):
    """Inverse of parse_config_text for manifest writing."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
