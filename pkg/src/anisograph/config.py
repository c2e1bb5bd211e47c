"""Flat ``key = value`` configuration with dotted keys.

Lines are ``section.name = value``; ``#`` starts a comment. Values are Python
literals (numbers, strings, lists, ``True``/``None``); anything that does not
parse as a literal is kept as a bare string.
"""
from __future__ import annotations

import ast
import copy
from pathlib import Path

from .errors import ConfigError
from .integrand import area_exponents

DEFAULTS: dict = {
    "mode": "area",                      # "area" or "anisotropic"
    "k": 3,                              # rotational multiplicity (area mode)
    "mu": 0.25,                          # decay exponent (anisotropic mode)
    "beta": None,                        # perturbation exponent; None picks the default
    "seed": 0,
    "integrand.kind": "series",          # anisotropic family: "series" or "bump"
    "integrand.width_scan": [0.2, 0.3, 0.4, 0.6],
    "integrand.degree_scan": [4, 6, 8, 10, 12, 16],
    "ellipticity.n_samples": 10_000,
    "foliation.tau_max": 1e4,
    "foliation.tol_ode": 1e-8,
    "perturb.n_scan": 20,
    "barrier.identity_samples": 1000,
    "barrier.n_samples": 10_000,
    "barrier.n_check": 10_000,
    "barrier.fd_order": "auto",            # True, False or "auto" (anisotropic only)
    "pde.R": [25.0, 50.0, 100.0],
    "pde.n_rho": 64,
    "pde.n_theta": 64,
    "pde.omega": 0.8,
    "pde.tol": 1e-8,
    "pde.max_iters": 500,
    "output.dir": "anisograph_out",
    "output.plots": False,
}

MODES = ("area", "anisotropic")


def parse_value(text: str):
    text = text.strip()
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def parse_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value", line=raw)
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the file at ``path``, then ``overrides``; validated."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        cfg.update(parse_text(Path(path).read_text()))
    if overrides:
        cfg.update(overrides)
    validate(cfg)
    return cfg


def dumps(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]!r}\n" for k in sorted(cfg))


def validate(cfg: dict) -> None:
    unknown = sorted(set(cfg) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown keys: {', '.join(unknown)}", keys=unknown)
    mode = cfg["mode"]
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if mode == "area":
        k = cfg["k"]
        if not isinstance(k, int) or k < 1:
            raise ConfigError(f"k must be a positive integer, got {k!r}")
        area_exponents(k)                # InvalidMu when the exponent is complex
        if k < 3:
            raise ConfigError(f"area mode needs k >= 3, got {k}")
    else:
        mu = cfg["mu"]
        if not isinstance(mu, (int, float)) or not 0 < mu < 0.5:
            raise ConfigError(f"mu must lie in (0, 1/2), got {mu!r}")
        if cfg["integrand.kind"] not in ("series", "bump"):
            raise ConfigError("integrand.kind must be 'series' or 'bump'")
    checks = [
        ("foliation.tol_ode", 1e-12, 1e-6),
        ("foliation.tau_max", 1e3, 1e8),
        ("pde.omega", 1e-3, 1.0),
        ("pde.tol", 1e-14, 1e-4),
    ]
    for key, lo, hi in checks:
        v = cfg[key]
        if not isinstance(v, (int, float)) or not lo <= v <= hi:
            raise ConfigError(f"{key} must lie in [{lo}, {hi}], got {v!r}")
    for key in ("pde.n_rho", "pde.n_theta"):
        if not isinstance(cfg[key], int) or cfg[key] < 64:
            raise ConfigError(f"{key} must be an integer >= 64")
    if cfg["barrier.fd_order"] not in (True, False, "auto"):
        raise ConfigError("barrier.fd_order must be True, False or 'auto'")
    R = cfg["pde.R"]
    if not isinstance(R, (list, tuple)) or not R or any(r <= 0 for r in R):
        raise ConfigError("pde.R must be a non-empty list of positive radii")
    for key in ("ellipticity.n_samples", "barrier.n_samples", "barrier.n_check"):
        if not isinstance(cfg[key], int) or cfg[key] < 1000:
            raise ConfigError(f"{key} must be an integer >= 1000")


def section(cfg: dict, *prefixes: str) -> dict:
    """Entries whose key is one of ``prefixes`` or starts with ``prefix.``."""
    return {k: cfg[k] for k in sorted(cfg)
            if any(k == p or k.startswith(p + ".") for p in prefixes)}
