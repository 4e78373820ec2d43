"""CSV metrics: fixed column order, 12-significant-digit floats, flushed per row."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import numpy as np

FLOAT_FORMAT = "%.12g"

# per-component reward columns ("reward_<name>") are inserted after reward_std
ALIGN_HEAD = ("step", "mean_reward", "reward_std")
ALIGN_TAIL = (
    "loss", "policy_loss", "kl_penalty", "grad_norm", "lambda_kl",
    "anchor_kl", "stepwise_kl", "stepwise_kl_logprob", "init_kl",
    "rollout_std", "anchor_refreshed",
)
PRETRAIN_COLUMNS = ("step", "loss")
STD_COLUMNS = ("regime", "strategy", "step", "sigma_t", "sigma_next", "std")
GRADNORM_COLUMNS = (
    "step", "sigma_t", "sigma_next", "variance", "observed_norm", "predicted_norm",
    "ratio", "contribution_norm", "equalizer_weight", "equalized_norm",
)
VERIFY_COLUMNS = ("check", "measured", "tolerance", "passed")


def align_columns(component_names):
    return ALIGN_HEAD + tuple(f"reward_{n}" for n in component_names) + ALIGN_TAIL


def format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return FLOAT_FORMAT % value
    text = str(value)
    if any(c in text for c in ',"\n'):
        text = '"' + text.replace('"', '""') + '"'
    return text


class MetricsWriter:
    """Single-writer CSV sink. Rows are dicts keyed by the frozen columns."""

    def __init__(self, path, columns):
        self.path = Path(path)
        self.columns = tuple(columns)
        self.rows = 0
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "w", newline="", encoding="utf-8")
        self._emit(self.columns)

    def _emit(self, fields):
        self._fh.write(",".join(fields) + "\n")
        self._fh.flush()

    def write(self, row):
        missing = [c for c in self.columns if c not in row]
        extra = sorted(set(row) - set(self.columns))
        if missing or extra:
            raise KeyError(f"metrics row mismatch: missing {missing}, unexpected {extra}")
        self._emit(format_value(row[c]) for c in self.columns)
        self.rows += 1

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    """Parse a metrics CSV back into a header tuple and a dict of float columns."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        rows = list(reader)
    columns = {}
    for i, name in enumerate(header):
        values = [r[i] for r in rows]
        try:
            columns[name] = np.array([float(v) for v in values])
        except ValueError:
            columns[name] = values
    return header, columns
