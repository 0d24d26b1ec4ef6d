"""CSV and JSON writers.  Floats are written as their shortest round-trip repr."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np


def fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def write_samples(path, chains):
    """``chains`` is a list of ``(samples (T, D), log_p (T,))``; steps are 1-based."""
    dim = chains[0][0].shape[1]
    header = ["chain", "step", *[f"x_{d + 1}" for d in range(dim)], "log_p"]
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for c, (samples, log_p) in enumerate(chains):
            lines = []
            for t, (x, lp) in enumerate(zip(samples.tolist(), log_p.tolist())):
                lines.append(",".join([str(c), str(t + 1), *map(repr, x), repr(lp)]))
            fh.write("\n".join(lines) + "\n")


def read_samples(path):
    """Inverse of :func:`write_samples`; returns ``{chain: (samples, log_p)}``."""
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {}
    for c in np.unique(data[:, 0]).astype(int):
        rows = data[data[:, 0] == c]
        out[int(c)] = (rows[:, 2:-1], rows[:, -1])
    return out


class _Encoder(json.JSONEncoder):
    def default(self, o):
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, tuple):
            return list(o)
        return super().default(o)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, cls=_Encoder, allow_nan=True) + "\n")


def target_dataset(target) -> dict:
    """JSON-ready copy of a target's synthetic data (observations, layouts)."""
    out = {}
    for k, v in target.data.items():
        out[k] = np.asarray(v).tolist() if isinstance(v, (np.ndarray, list, tuple)) else v
    return {"name": target.name, "spec": target.spec, "data": out}
