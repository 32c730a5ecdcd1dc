"""Experiment configuration for the command-line front end.

The on-disk format is line-oriented sectioned ``key = value`` text:

* a line of the form ``[section]`` opens a section;
* ``key = value`` assigns inside the current section;
* blank lines are skipped; ``#`` starts a comment (full-line or trailing);
* keys may not repeat within a section, assignments may not precede the
  first section header, and every section/key pair must appear in the
  schema below; anything else raises ConfigError.

Values are typed by the schema: ``int`` (no decimal point), ``float``,
``bool`` (``true``/``false``), ``pair`` (two comma-separated floats, or
``auto`` for a context-dependent default), and ``str``. The parsed result
always carries every known key, with schema defaults filling whatever the
file does not set.

Sections and keys
-----------------
grid
    kind (uniform | layer), n, r_max, stretch. A layer grid refines the
    inner region where excited profiles oscillate; its node count is set
    by the layer spacings, so ``n`` and ``stretch`` apply to the uniform
    kind only.
profile
    n_index, bracket (center-value search interval, ``auto`` picks a
    built-in one for n_index 0 or 1), tol (bisection width on the center
    value).
spectrum
    k (number of eigenpairs, >= 1), refine (Richardson extrapolation on a
    half-spacing grid), r_max_double_check (re-solve on this larger
    radius and report the eigenvalue shift; 0 disables).
flow
    n_index, s0, ds, mu, s_end; the initial perturbation
    (perturbation = none | bump | mode | noise, with
    perturbation_amplitude, perturbation_width, perturbation_center,
    perturbation_mode); the monitor thresholds K, K_prime,
    K_double_prime, delta; tube_radius. The evolve and shoot commands
    build their profile/spectrum for flow.n_index (overriding
    profile.n_index, which only cmd_profile reads directly).
shoot
    bracket (endpoint amplitudes of the unstable mode), bisect_tol,
    max_runs.
io
    out_dir, cache_dir, overwrite, require_cache (skip all computation
    and fail with a missing-artifact error when a needed payload is not
    cached).
"""

import re

from .errors import ConfigError

__all__ = ["ExperimentConfig", "parse_config", "load_config",
           "format_config", "AUTO_BRACKETS", "SCHEMA"]


# center-value search intervals per profile index when profile.bracket=auto
AUTO_BRACKETS = {0: (0.5, 5.0), 1: (150.0, 450.0)}

# section -> key -> (type name, default); the single source of truth for
# what a config file may contain
SCHEMA = {
    "grid": {
        "kind": ("str", "uniform"),
        "n": ("int", 4001),
        "r_max": ("float", 30.0),
        "stretch": ("float", 1.0),
    },
    "profile": {
        "n_index": ("int", 0),
        "bracket": ("pair", None),
        "tol": ("float", 1e-12),
    },
    "spectrum": {
        "k": ("int", 6),
        "refine": ("bool", True),
        "r_max_double_check": ("float", 0.0),
    },
    "flow": {
        "n_index": ("int", 0),
        "s0": ("float", 6.0),
        "ds": ("float", 1e-3),
        "mu": ("float", 0.05),
        "s_end": ("float", 20.0),
        "perturbation": ("str", "bump"),
        "perturbation_amplitude": ("float", 1e-2),
        "perturbation_width": ("float", 1.0),
        "perturbation_center": ("float", 0.0),
        "perturbation_mode": ("int", 2),
        "K": ("float", 100.0),
        "K_prime": ("float", 100.0),
        "K_double_prime": ("float", 100.0),
        "delta": ("float", 0.1),
        "tube_radius": ("float", 0.5),
    },
    "shoot": {
        "bracket": ("pair", (-1e-3, 1e-3)),
        "bisect_tol": ("float", 1e-8),
        "max_runs": ("int", 80),
    },
    "io": {
        "out_dir": ("str", "out"),
        "cache_dir": ("str", ".kslab-cache"),
        "overwrite": ("bool", True),
        "require_cache": ("bool", False),
    },
}

_SECTION_RE = re.compile(r"^\[([A-Za-z_][A-Za-z0-9_]*)\]$")


def _parse_value(kind, raw, where):
    raw = raw.strip()
    if kind == "int":
        try:
            return int(raw, 10)
        except ValueError:
            raise ConfigError("%s expects an integer, got %r" % (where, raw))
    if kind == "float":
        try:
            return float(raw)
        except ValueError:
            raise ConfigError("%s expects a number, got %r" % (where, raw))
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        raise ConfigError("%s expects true or false, got %r" % (where, raw))
    if kind == "pair":
        if raw.lower() == "auto":
            return None
        parts = raw.split(",")
        if len(parts) != 2:
            raise ConfigError("%s expects two comma-separated numbers "
                              "or auto, got %r" % (where, raw))
        try:
            return (float(parts[0]), float(parts[1]))
        except ValueError:
            raise ConfigError("%s expects two comma-separated numbers, "
                              "got %r" % (where, raw))
    return raw


class ExperimentConfig:
    """Typed view of one configuration: six dicts, one per section."""

    def __init__(self, sections):
        for name in SCHEMA:
            setattr(self, name, dict(sections[name]))

    @classmethod
    def defaults(cls):
        return cls({name: {key: spec[1] for key, spec in keys.items()}
                    for name, keys in SCHEMA.items()})

    def subset(self, *names):
        """Plain-dict snapshot of the named sections (cache-key material)."""
        return {name: dict(getattr(self, name)) for name in names}

    def validate(self):
        g, p, sp, fl, sh = (self.grid, self.profile, self.spectrum,
                            self.flow, self.shoot)
        if g["kind"] not in ("uniform", "layer"):
            raise ConfigError("grid.kind must be uniform or layer")
        if g["n"] < 16:
            raise ConfigError("grid.n must be at least 16")
        if g["r_max"] <= 0 or g["stretch"] <= 0:
            raise ConfigError("grid.r_max and grid.stretch must be positive")
        if p["n_index"] < 0 or fl["n_index"] < 0:
            raise ConfigError("profile indices must be nonnegative")
        if p["tol"] <= 0:
            raise ConfigError("profile.tol must be positive")
        if p["bracket"] is not None:
            lo, hi = p["bracket"]
            if not (0 < lo < hi):
                raise ConfigError("profile.bracket must satisfy 0 < lo < hi")
        if sp["k"] < 1:
            raise ConfigError("spectrum.k must be at least 1")
        if sp["r_max_double_check"] < 0:
            raise ConfigError("spectrum.r_max_double_check must be "
                              "nonnegative")
        if fl["ds"] <= 0:
            raise ConfigError("flow.ds must be positive")
        if fl["s_end"] <= fl["s0"]:
            raise ConfigError("flow.s_end must exceed flow.s0")
        if fl["mu"] <= 0:
            raise ConfigError("flow.mu must be positive")
        if fl["perturbation"] not in ("none", "bump", "mode", "noise"):
            raise ConfigError("flow.perturbation must be one of "
                              "none, bump, mode, noise")
        if fl["perturbation_amplitude"] < 0:
            raise ConfigError("flow.perturbation_amplitude must be "
                              "nonnegative")
        if fl["perturbation_width"] <= 0:
            raise ConfigError("flow.perturbation_width must be positive")
        if fl["perturbation_center"] < 0:
            raise ConfigError("flow.perturbation_center must be nonnegative")
        if fl["perturbation"] == "mode" and fl["perturbation_mode"] < 2:
            raise ConfigError("flow.perturbation_mode must be at least 2 "
                              "(mode 1 is the scaling direction)")
        for name in ("K", "K_prime", "K_double_prime", "delta",
                     "tube_radius"):
            if fl[name] <= 0:
                raise ConfigError("flow.%s must be positive" % name)
        lo, hi = sh["bracket"]
        if not (lo < hi):
            raise ConfigError("shoot.bracket must satisfy lo < hi")
        if sh["bisect_tol"] <= 0:
            raise ConfigError("shoot.bisect_tol must be positive")
        if sh["max_runs"] < 4:
            raise ConfigError("shoot.max_runs must be at least 4")
        return self


def parse_config(text):
    """Parse configuration text on top of the schema defaults."""
    cfg = ExperimentConfig.defaults()
    section = None
    seen = set()
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        m = _SECTION_RE.match(line)
        if m:
            section = m.group(1)
            if section not in SCHEMA:
                raise ConfigError("line %d: unknown section [%s]"
                                  % (lineno, section))
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key = value, got %r"
                              % (lineno, line))
        if section is None:
            raise ConfigError("line %d: assignment before any [section] "
                              "header" % lineno)
        key, raw = line.split("=", 1)
        key = key.strip()
        if key not in SCHEMA[section]:
            raise ConfigError("line %d: unknown key %s in [%s]"
                              % (lineno, key, section))
        if (section, key) in seen:
            raise ConfigError("line %d: duplicate key %s in [%s]"
                              % (lineno, key, section))
        seen.add((section, key))
        kind = SCHEMA[section][key][0]
        where = "%s.%s (line %d)" % (section, key, lineno)
        getattr(cfg, section)[key] = _parse_value(kind, raw, where)
    return cfg.validate()


def load_config(path):
    """Read and parse a configuration file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("cannot read config file %s: %s" % (path, exc))
    return parse_config(text)


def _format_value(kind, value):
    if value is None:
        return "auto"
    if kind == "bool":
        return "true" if value else "false"
    if kind == "pair":
        return "%.17g, %.17g" % (value[0], value[1])
    if kind == "float":
        return "%.17g" % value
    return str(value)


def format_config(cfg):
    """Render a config back to the on-disk grammar (schema order)."""
    lines = []
    for name, keys in SCHEMA.items():
        lines.append("[%s]" % name)
        section = getattr(cfg, name)
        for key, (kind, _) in keys.items():
            lines.append("%s = %s" % (key, _format_value(kind,
                                                         section[key])))
        lines.append("")
    return "\n".join(lines)
