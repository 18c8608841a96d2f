"""Flat ``key = value`` experiment configuration.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key is typed by :data:`SCHEMA`; unknown keys, bad values and missing
required keys raise :class:`ConfigError` naming the line or field.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .model import make_model

__all__ = ["SCHEMA", "EXPERIMENTS", "ExperimentConfig", "parse_config", "load_config", "schema_text"]

EXPERIMENTS = (
    "fixedpoint-decay",
    "monotonicity-audit",
    "nash-solve",
    "sde-norms",
    "master-residual",
    "convergence",
    "mfg-picard",
)

AUDIT_KINDS = ("discrete_M", "disp_L", "disp_G", "ll_L", "ll_G", "C_disp")


def _int_list(text):
    return [int(v) for v in text.replace(",", " ").split()]


def _str_list(text):
    return [v for v in text.replace(",", " ").split()]


def _float_list(text):
    return [float(v) for v in text.replace(",", " ").split()]


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key: (parser, default, description); default None marks a required key
SCHEMA = {
    "experiment": (str, "", "one of " + ", ".join(EXPERIMENTS) + " (optional when given on the command line)"),
    "model": (str, None, "model family: lq or lq-tanh"),
    "seed": (int, None, "64-bit unsigned seed for all randomness"),
    "N_list": (_int_list, None, "ascending player counts, comma separated"),
    "lambda": (float, 0.0, "action-mean coupling"),
    "c_x": (float, 0.0, "running state cost weight"),
    "q_x": (float, 0.0, "running state mean-attraction factor"),
    "c_g": (float, 0.0, "terminal cost weight"),
    "q_g": (float, 0.0, "terminal mean-attraction factor"),
    "eps": (float, 0.0, "tanh perturbation size (lq-tanh only)"),
    "sigma0": (float, 0.0, "common-noise intensity"),
    "horizon": (float, 1.0, "time horizon T"),
    "dim": (int, 1, "state dimension d"),
    "tol": (float, 1e-12, "fixed-point tolerance"),
    "samples": (int, 100, "random samples per audit or probe set"),
    "cloud_size": (int, 16, "particles per random cloud in audits"),
    "scale": (float, 1.0, "scale of random states and actions"),
    "audits": (_str_list, list(AUDIT_KINDS), "audits to run: " + ", ".join(AUDIT_KINDS)),
    "decay_orders": (_int_list, [1, 2], "derivative orders for fixedpoint-decay (1, 2, 3)"),
    "grid_radius": (float, 4.0, "half-width R of the per-player grid"),
    "grid_points": (int, 25, "odd number of nodes per axis"),
    "grid_dt": (float, 0.0, "time step; 0 picks the largest stable step"),
    "source": (str, "auto", "value source for sde-norms / master-residual: grid, riccati or auto"),
    "n_paths": (int, 2000, "SDE paths per initial condition"),
    "n_steps": (int, 50, "SDE time steps"),
    "x0_scales": (_float_list, [0.5, 1.0, 1.5], "initial-condition scales for sde-norms"),
    "particles": (int, 64, "quantile particles for mfg-picard"),
    "picard_tol": (float, 1e-5, "stopping tolerance for mfg-picard"),
    "damping": (float, 0.5, "damping for mfg-picard"),
    "m0_mean": (float, 1.0, "initial density mean for mfg-picard"),
    "m0_std": (float, 0.5, "initial density std for mfg-picard"),
    "starts": (int, 3, "number of initial guesses in mfg-picard (1 to 3)"),
    "band_tol": (float, 5e-3, "error band for nash-solve versus the Riccati oracle"),
    "moment_tol": (float, 1e-3, "moment band for mfg-picard"),
    "plots": (_bool, False, "also write SVG plots"),
    "output_dir": (str, "out", "directory for reports"),
}

POSITIVE = ("tol", "picard_tol", "band_tol", "moment_tol", "horizon", "grid_radius")


@dataclass
class ExperimentConfig:
    """Validated configuration; ``values`` holds every schema key."""

    values: dict
    source: str = "<string>"
    explicit: set = field(default_factory=set)

    def __getitem__(self, key):
        return self.values[key]

    @property
    def experiment(self):
        return self.values["experiment"]

    @property
    def seed(self):
        return self.values["seed"]

    def build_model(self):
        v = self.values
        return make_model(
            v["model"], sigma0=v["sigma0"], horizon=v["horizon"], eps=v["eps"],
            lam=v["lambda"], c_x=v["c_x"], q_x=v["q_x"], c_g=v["c_g"], q_g=v["q_g"], dim=v["dim"],
        )


def _validate(values, source):
    def fail(key, msg):
        raise ConfigError(f"{source}: field {key!r}: {msg}")

    if values["model"] not in ("lq", "lq-tanh"):
        fail("model", f"unknown family {values['model']!r}")
    if values["experiment"] and values["experiment"] not in EXPERIMENTS:
        fail("experiment", f"unknown experiment {values['experiment']!r}")
    if not 0 <= values["seed"] < 2**64:
        fail("seed", "must be an unsigned 64-bit integer")
    nl = values["N_list"]
    if not nl:
        fail("N_list", "must be nonempty")
    if any(n < 2 for n in nl):
        fail("N_list", "player counts must be at least 2")
    if any(b <= a for a, b in zip(nl, nl[1:])):
        fail("N_list", "must be strictly ascending")
    for key in POSITIVE:
        if not values[key] > 0:
            fail(key, "must be positive")
    if values["grid_dt"] < 0:
        fail("grid_dt", "must be nonnegative")
    if values["sigma0"] < 0:
        fail("sigma0", "must be nonnegative")
    bad = [a for a in values["audits"] if a not in AUDIT_KINDS]
    if bad:
        fail("audits", f"unknown audit kinds {bad}")
    if any(o not in (1, 2, 3) for o in values["decay_orders"]):
        fail("decay_orders", "orders must be 1, 2 or 3")
    if values["source"] not in ("auto", "grid", "riccati"):
        fail("source", "must be grid, riccati or auto")
    if not 1 <= values["starts"] <= 3:
        fail("starts", "must be between 1 and 3")
    for key in ("samples", "cloud_size", "n_paths", "n_steps", "particles", "dim"):
        if values[key] < 1:
            fail(key, "must be at least 1")


def parse_config(text, source="<string>"):
    """Parse configuration text into an :class:`ExperimentConfig`."""
    values = {}
    explicit = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in explicit:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        parser = SCHEMA[key][0]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        explicit.add(key)
    for key, (_, default, _) in SCHEMA.items():
        if key not in values:
            if default is None:
                raise ConfigError(f"{source}: missing required field {key!r}")
            values[key] = list(default) if isinstance(default, list) else default
    _validate(values, source)
    return ExperimentConfig(values, source, explicit)


def load_config(path):
    """Read and parse a configuration file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def schema_text():
    """Human-readable schema listing (key, default, description)."""
    lines = []
    for key, (_, default, desc) in SCHEMA.items():
        shown = "required" if default is None else f"default {default!r}"
        lines.append(f"{key:14s} {shown:32s} {desc}")
    return "\n".join(lines)
