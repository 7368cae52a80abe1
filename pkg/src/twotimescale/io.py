"""CSV emission, run manifests, flat config files and policy files."""

import configparser
import datetime
import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .game import JointPolicy

__all__ = [
    "ConfigError",
    "SCHEMAS",
    "OUTPUT_ROOT_ENV",
    "emit_csv",
    "config_hash",
    "RunManifest",
    "read_config",
    "save_policy",
    "load_policy",
    "resolve_output_dir",
]

OUTPUT_ROOT_ENV = "TWOTIMESCALE_OUTPUT_ROOT"

SCHEMAS = {
    "diagnostics": ("t", "k", "L_v", "L_sum", "L_theta", "L_w", "nash_gap",
                    "td_norm_1", "td_norm_2"),
    "drift": ("k", "V_k", "V_k1", "bound", "slack", "noise_x_norm", "noise_y_norm"),
    "drift_summary": ("trial", "n_actions_1", "n_actions_2", "steps", "satisfied",
                      "min_slack", "L_b"),
    "vstar": ("state", "v1", "v2"),
    "vi_log": ("player", "iteration", "sup_change"),
    "gap": ("rho0", "nash_gap"),
    "diagnose": ("quantity", "player", "value", "note"),
}


class ConfigError(ValueError):
    """Invalid user configuration; the CLI maps it to exit code 2."""


def _fmt(value):
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        return "%.17g" % value
    return str(value)


def emit_csv(records, schema, path):
    """Write ``records`` (mappings) with exactly the columns of ``schema``.

    Parameters
    ----------
    records : iterable of mapping
    schema : str or sequence of str
        A key of :data:`SCHEMAS` or an explicit column tuple.
    path : path-like

    Raises
    ------
    ConfigError
        If a record's keys differ from the schema.
    """
    cols = SCHEMAS[schema] if isinstance(schema, str) else tuple(schema)
    lines = [",".join(cols)]
    for i, rec in enumerate(records):
        if set(rec) != set(cols):
            raise ConfigError(
                f"record {i} has columns {sorted(rec)}, schema expects {list(cols)}")
        lines.append(",".join(_fmt(rec[c]) for c in cols))
    Path(path).write_text("\n".join(lines) + "\n")
    return Path(path)


def config_hash(config):
    """SHA-256 of the config serialized with sorted keys."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _versions():
    import numba
    import scipy

    from . import __version__
    return {"twotimescale": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__}


class RunManifest:
    """Tracks every file a command writes and records provenance.

    Timestamps live only in ``manifest.json``; every other output is a pure
    function of config and seed.
    """

    def __init__(self, out_dir, command, config, seed=None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        self.config = config
        self.seed = seed
        self.files = []
        self.started = datetime.datetime.now(datetime.timezone.utc).isoformat()

    def path(self, name):
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.files.append(str(Path(name)))
        return p

    def write(self):
        doc = {
            "command": self.command,
            "config": self.config,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "versions": _versions(),
            "started": self.started,
            "finished": datetime.datetime.now(datetime.timezone.utc).isoformat(),
            "files": sorted(self.files),
        }
        out = self.out_dir / "manifest.json"
        out.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
        return out


def resolve_output_dir(path):
    """Relative output paths are placed under ``$TWOTIMESCALE_OUTPUT_ROOT`` if set."""
    root = os.environ.get(OUTPUT_ROOT_ENV)
    p = Path(path)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _coerce(text):
    low = text.strip().lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip()


def read_config(path, section="run"):
    """Read a flat ``key = value`` file; values become bool, int, float or str.

    Keys may sit under a single ``[run]`` header or at top level.
    """
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {path} does not exist")
    text = p.read_text()
    parser = configparser.ConfigParser()
    parser.optionxform = str
    try:
        if not text.lstrip().startswith("["):
            text = f"[{section}]\n" + text
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if not parser.has_section(section):
        raise ConfigError(f"{path}: missing [{section}] section")
    return {k: _coerce(v) for k, v in parser.items(section)}


def save_policy(policy, path):
    doc = {"pi1": np.asarray(policy.pi1).tolist(), "pi2": np.asarray(policy.pi2).tolist()}
    Path(path).write_text(json.dumps(doc) + "\n")


def load_policy(path):
    try:
        doc = json.loads(Path(path).read_text())
        return JointPolicy(np.array(doc["pi1"], dtype=float), np.array(doc["pi2"], dtype=float))
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read policy {path}: {exc}") from None
