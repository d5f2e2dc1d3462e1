"""CSV tables and run manifests."""

from __future__ import annotations

import csv
import json
import os
import platform

import numpy as np

from .. import __version__


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return int(v)
    return v


def write_csv(path, rows, fields=None):
    """Write dict rows; ``fields`` fixes the column order (default: first row's keys)."""
    rows = list(rows)
    if fields is None:
        fields = list(rows[0]) if rows else []
        for r in rows[1:]:
            fields += [k for k in r if k not in fields]
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(v) for k, v in r.items()})
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_manifest(out_dir, command, cfg, outputs, extra=None):
    """Record everything needed to regenerate the tables in ``out_dir``."""
    manifest = {
        "command": command,
        "code_version": __version__,
        "config_hash": cfg.hash() if cfg is not None else None,
        "config": cfg.to_dict() if cfg is not None else None,
        "seeds": list(range(cfg.seed, cfg.seed + cfg.replicas)) if cfg is not None else [],
        "numpy": np.__version__,
        "python": platform.python_version(),
        "outputs": sorted(outputs),
    }
    if extra:
        manifest.update(extra)
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_json_default)
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serialisable: {type(o)}")
