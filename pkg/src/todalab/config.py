"""Experiment configuration: YAML schema, defaults and validation.

A config is a YAML mapping.  Recognised top-level keys::

    experiment:   soliton | backlund | linear-decay | resolution | modulate
    soliton:      {kappas: [...], gammas: [...]}      # gammas optional
    grid:         {n_min: int, n_max: int}            # optional, derived if absent
    integrator:   {dt: float, t_span: [t0, t1], method: str, record_dt: float}
    frame:        {a: float, c: float, T: float}
    perturbation: {shape: str, amplitude: float | [floats], location: float | null,
                   width: float, project: bool}
    time:         float            # snapshot time (soliton, backlund)
    times:        [floats]         # sample times (resolution)
    fit_time:     float            # phase-fit time (resolution)
    collision_time: float          # modulate, used when gammas are omitted
    control:      bool             # linear-decay: also run without projection
    fit_window:   [t_a, t_b]       # linear-decay: decay-rate fit window
    seed:         int

Missing sections fall back to the defaults of :func:`default_config`.
"""

from __future__ import annotations

import copy
import math

import yaml

from .dynamics import MAX_DT
from .lattice_core import MIN_SITES

KINDS = ("soliton", "backlund", "linear-decay", "resolution", "modulate")
SHAPES = ("delta-spike", "gaussian-bump", "projected-random")
METHODS = {
    "linear-decay": ("midpoint", "leapfrog", "yoshida4"),
    "modulate": ("leapfrog", "yoshida4"),
}

_DEFAULTS = {
    "soliton": {
        "soliton": {"kappas": [0.5, 1.0], "gammas": [0.3, -0.2]},
        "time": 0.0,
    },
    "backlund": {
        "soliton": {"kappas": [0.5, 1.0], "gammas": [0.3, -0.2]},
        "time": 0.0,
    },
    "linear-decay": {
        "soliton": {"kappas": [0.5, 1.0], "gammas": [0.0, 0.3]},
        "integrator": {"dt": 0.01, "t_span": [0.0, 12.0], "method": "midpoint", "record_dt": 0.1},
        "frame": {"a": 0.5, "c": 1.5, "T": 0.0},
        "perturbation": {"width": 4.0, "project": True},
        "control": True,
        "fit_window": [2.0, 12.0],
        "seed": 0,
    },
    "resolution": {
        "soliton": {"kappas": [0.5, 1.0], "gammas": [0.0, 0.0]},
        "times": [10.0, 20.0, 30.0, 40.0],
        "fit_time": 200.0,
    },
    "modulate": {
        "soliton": {"kappas": [0.5, 1.0]},
        "collision_time": 30.0,
        "integrator": {"dt": 0.005, "t_span": [0.0, 60.0], "method": "yoshida4", "record_dt": 0.05},
        "frame": {"a": 0.4, "c": 1.5, "T": 0.0},
        "perturbation": {
            "shape": "gaussian-bump",
            "amplitude": 1e-3,
            "location": None,
            "width": 3.0,
            "project": True,
        },
        "seed": 0,
    },
}

_ALLOWED = {
    "experiment": None,
    "soliton": {"kappas", "gammas"},
    "grid": {"n_min", "n_max"},
    "integrator": {"dt", "t_span", "method", "record_dt"},
    "frame": {"a", "c", "T"},
    "perturbation": {"shape", "amplitude", "location", "width", "project"},
    "time": None,
    "times": None,
    "fit_time": None,
    "collision_time": None,
    "control": None,
    "fit_window": None,
    "seed": None,
}


class ConfigParseError(ValueError):
    pass


def default_config(kind: str) -> dict:
    if kind not in KINDS:
        raise ValueError(f"unknown experiment kind {kind!r}")
    cfg = copy.deepcopy(_DEFAULTS[kind])
    cfg["experiment"] = kind
    return cfg


def load_config_text(text: str) -> dict:
    """Parse YAML text into a mapping; empty or non-mapping documents are errors."""
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigParseError(f"malformed YAML: {exc}") from None
    if data is None:
        raise ConfigParseError("config is empty")
    if not isinstance(data, dict):
        raise ConfigParseError("config must be a mapping at the top level")
    return data


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"cannot read config: {exc}") from None
    return load_config_text(text)


def merged(raw: dict, kind: str) -> dict:
    """Defaults for ``kind`` overlaid with the sections present in ``raw``."""
    out = default_config(kind)
    for key, val in raw.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            sec = dict(out[key])
            sec.update(val)
            out[key] = sec
        else:
            out[key] = copy.deepcopy(val)
    if kind == "modulate" and "gammas" in raw.get("soliton", {}):
        out["soliton"]["gammas"] = raw["soliton"]["gammas"]
    return out


def _num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def _int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool)


def validate(raw: dict, kind: str | None = None) -> list[str]:
    """Every violation as ``'<field>: <constraint>'``; empty iff the config is runnable."""
    if not isinstance(raw, dict):
        return ["config: must be a mapping"]
    out = []
    declared = raw.get("experiment")
    if declared is not None and declared not in KINDS:
        out.append(f"experiment: must be one of {', '.join(KINDS)}")
    if kind is None:
        kind = declared
    if kind not in KINDS:
        out.append("experiment: kind is required (soliton, backlund, linear-decay, resolution, modulate)")
        return out
    if declared is not None and declared != kind:
        out.append(f"experiment: config declares {declared!r} but {kind!r} was requested")
    for key, val in raw.items():
        if key not in _ALLOWED:
            out.append(f"{key}: unknown key")
        elif _ALLOWED[key] is not None:
            if not isinstance(val, dict):
                out.append(f"{key}: must be a mapping")
                continue
            for sub in val:
                if sub not in _ALLOWED[key]:
                    out.append(f"{key}.{sub}: unknown key")
    if out:
        return out
    cfg = merged(raw, kind)

    sol = cfg["soliton"]
    kappas = sol.get("kappas")
    if not isinstance(kappas, list) or not kappas or not all(_num(k) for k in kappas):
        out.append("soliton.kappas: must be a non-empty list of finite numbers")
        kappas = None
    elif any(k <= 0 for k in kappas):
        out.append("soliton.kappas: kappa must be positive")
        kappas = None
    elif len(set(kappas)) != len(kappas):
        out.append("soliton.kappas: wavenumbers must be distinct")
    gammas = sol.get("gammas")
    if gammas is not None:
        if not isinstance(gammas, list) or not all(_num(g) for g in gammas):
            out.append("soliton.gammas: must be a list of finite numbers")
        elif kappas is not None and len(gammas) != len(kappas):
            out.append("soliton.gammas: must have one entry per kappa")
    elif kind != "modulate":
        out.append("soliton.gammas: required")

    if "grid" in cfg:
        g = cfg["grid"]
        lo, hi = g.get("n_min"), g.get("n_max")
        if not (_int(lo) and _int(hi)):
            out.append("grid: n_min and n_max must be integers")
        elif hi - lo + 1 < MIN_SITES:
            out.append(f"grid: needs at least {MIN_SITES} sites")

    if kind in ("soliton", "backlund") and not _num(cfg.get("time")):
        out.append("time: must be a finite number")
    if kind == "resolution":
        times = cfg.get("times")
        if not isinstance(times, list) or len(times) < 2 or not all(_num(t) for t in times):
            out.append("times: must list at least two finite times")
        if not _num(cfg.get("fit_time")) or cfg["fit_time"] == 0:
            out.append("fit_time: must be a finite nonzero number")

    if kind in ("linear-decay", "modulate"):
        integ = cfg["integrator"]
        dt = integ.get("dt")
        if not _num(dt) or dt <= 0:
            out.append("integrator.dt: must be positive")
        elif dt > MAX_DT:
            out.append(f"integrator.dt: must not exceed {MAX_DT}")
        span = integ.get("t_span")
        if not (isinstance(span, list) and len(span) == 2 and all(_num(x) for x in span) and span[1] > span[0]):
            out.append("integrator.t_span: must be [t0, t1] with t1 > t0")
        rd = integ.get("record_dt")
        if not _num(rd) or rd <= 0:
            out.append("integrator.record_dt: must be positive")
        elif _num(dt) and dt > 0 and rd < dt:
            out.append("integrator.record_dt: must be at least dt")
        if integ.get("method") not in METHODS[kind]:
            out.append(f"integrator.method: must be one of {', '.join(METHODS[kind])}")
        fr = cfg["frame"]
        a, c = fr.get("a"), fr.get("c")
        if not _num(c) or c <= 1:
            out.append("frame.c: c must exceed 1 (faster than every dispersive wave)")
        if not _num(a):
            out.append("frame.a: must be a finite number")
        elif kappas is not None:
            kmin = min(kappas)
            if not 0 < a < 2 * kmin:
                out.append(f"frame.a: a must lie in the window a∈(0,2κ_min) = (0, {2 * kmin:g})")
        if not _num(fr.get("T", 0.0)):
            out.append("frame.T: must be a finite number")
        pert = cfg["perturbation"]
        if not _num(pert.get("width")) or pert["width"] <= 0:
            out.append("perturbation.width: must be positive")
        if not isinstance(pert.get("project"), bool):
            out.append("perturbation.project: must be true or false")
        seed = cfg.get("seed")
        if not _int(seed) or seed < 0:
            out.append("seed: must be a non-negative integer")
    if kind == "linear-decay":
        if not isinstance(cfg.get("control"), bool):
            out.append("control: must be true or false")
        win = cfg.get("fit_window")
        if not (isinstance(win, list) and len(win) == 2 and all(_num(x) for x in win) and win[1] > win[0]):
            out.append("fit_window: must be [t_a, t_b] with t_b > t_a")
    if kind == "modulate":
        pert = cfg["perturbation"]
        if pert.get("shape") not in SHAPES:
            out.append(f"perturbation.shape: must be one of {', '.join(SHAPES)}")
        amp = pert.get("amplitude")
        amps = amp if isinstance(amp, list) else [amp]
        if not amps or not all(_num(x) and x > 0 for x in amps):
            out.append("perturbation.amplitude: must be a positive number or a list of them")
        loc = pert.get("location")
        if loc is not None and not _num(loc):
            out.append("perturbation.location: must be a number or null")
        if sol.get("gammas") is None and (not _num(cfg.get("collision_time"))):
            out.append("collision_time: must be a finite number when gammas are omitted")
    return out
