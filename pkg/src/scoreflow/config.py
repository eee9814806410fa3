"""Experiment configuration: a JSON file with nested blocks.

Every field has a default; unknown keys anywhere are a hard error (with a
nearest-match suggestion), so typos cannot silently fall back to defaults.
Semantic problems are collected into one report rather than fail-fast.
The fully resolved config is echoed into every run manifest.
"""

from __future__ import annotations

import copy
import difflib
import json

from .manifold import build_curve, quadrature_nodes
from .schedule_score import DriftModel, NoiseSchedule

DEFAULT_CONFIG = {
    "target": {
        "kind": "two_moons",
        "params": {},
        "ambient_dim": 2,
        "density": "uniform",
        "quad_per_arc": 256,
    },
    "schedule": {
        "delta": 0.008,
        "T": 0.9,
        # null means T / n_steps (the default grid gives T/4000)
        "Delta": None,
        "n_steps": 4000,
    },
    "model": {
        "kind": "sgm_reverse",
        "sigma_min": 0.1,
        "cfm_early_stop": 2.5e-4,
    },
    "perturbation": {
        "kind": "random_fourier_field",
        "direction": [1.0, 0.0],
        "n_features": 64,
        "length_scale": 1.0,
        "field_seed": 0,
        "sup_norm": 1.0,
        "epsilons": [0.0, 0.5],
        "time_window": None,
    },
    "run": {
        "n_paths": 1000,
        "seed": 0,
        "frame_k": None,       # null -> intrinsic dimension of the target
        "integrator": None,    # null -> sde for sgm_reverse, ode otherwise
    },
    "observable": {
        "kind": "coordinate_mean",
        "index": 0,
        "center": [0.5, 1.6],
        "radius": 0.15,
        "width": 0.05,
    },
    "kde": {
        "xlim": [-1.6, 2.6],
        "ylim": [-1.3, 1.8],
        "nx": 128,
        "ny": 128,
        "bandwidth": "scott",
    },
    "output": {
        "dir": None,           # null -> $SCOREFLOW_OUT or ./out
        "trajectories": False,
    },
}

_CURVE_KINDS = ("circle", "two_moons", "segment", "s_curve", "point")
_MODEL_KINDS = ("sgm_reverse", "prob_flow_reverse", "cfm")
_PERT_KINDS = ("constant_vector", "random_fourier_field")
_OBS_KINDS = ("coordinate_mean", "disk_mass")


class ConfigError(ValueError):
    """Unknown keys or semantic violations; carries the full report."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _check_keys(given, known, path, problems):
    for key in given:
        if key not in known:
            hint = difflib.get_close_matches(key, known, n=1)
            msg = f"unknown key {path}{key!r}"
            if hint:
                msg += f" (did you mean {hint[0]!r}?)"
            problems.append(msg)


def merge_config(user: dict) -> tuple[dict, list]:
    """Overlay a user config onto the defaults.

    Returns (resolved config, problem list); unknown keys are reported,
    known blocks are deep-merged.
    """
    problems = []
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if not isinstance(user, dict):
        return cfg, ["config root must be a JSON object"]
    _check_keys(user, DEFAULT_CONFIG.keys(), "", problems)
    for block, values in user.items():
        if block not in cfg:
            continue
        if not isinstance(values, dict):
            problems.append(f"block {block!r} must be an object")
            continue
        # target.params and target.density pass through as-is
        free = {"params", "density"} if block == "target" else set()
        _check_keys(set(values) - free, cfg[block].keys(), f"{block}.",
                    problems)
        for key, val in values.items():
            if key in cfg[block] or key in free:
                cfg[block][key] = val
    return cfg, problems


def apply_overrides(cfg: dict, overrides) -> list:
    """Apply `--set dotted.path=value` overrides in place.

    Values parse as JSON where possible, else as strings.
    """
    problems = []
    for item in overrides:
        if "=" not in item:
            problems.append(f"override {item!r} is not of the form key=value")
            continue
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = path.split(".")
        node = cfg
        ok = True
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                problems.append(f"override path {path!r} does not exist")
                ok = False
                break
            node = node[p]
        if not ok:
            continue
        leaf = parts[-1]
        if not isinstance(node, dict) or (
                leaf not in node and not (len(parts) >= 2 and
                                          parts[-2] == "params")):
            problems.append(f"override path {path!r} does not exist")
            continue
        node[leaf] = value
    return problems


def validate(cfg: dict) -> list:
    """Semantic checks; returns the aggregated problem list (no raising)."""
    problems = []
    tgt, sch, mdl = cfg["target"], cfg["schedule"], cfg["model"]
    run, pert = cfg["run"], cfg["perturbation"]
    if tgt["kind"] not in _CURVE_KINDS:
        problems.append(
            f"target.kind must be one of {_CURVE_KINDS}, got {tgt['kind']!r}")
    if tgt["ambient_dim"] < 2:
        problems.append("target.ambient_dim must be >= 2")
    if tgt["quad_per_arc"] < 2:
        problems.append("target.quad_per_arc must be >= 2")
    if mdl["kind"] not in _MODEL_KINDS:
        problems.append(
            f"model.kind must be one of {_MODEL_KINDS}, got {mdl['kind']!r}")
    if sch["n_steps"] < 1:
        problems.append("schedule.n_steps must be >= 1")
    if sch["T"] <= 0 or sch["T"] >= 1:
        problems.append("schedule.T must lie in (0, 1) for the cosine schedule")
    delta_stop = sch["Delta"]
    if delta_stop is not None and not (0 < delta_stop < sch["T"]):
        problems.append("schedule.Delta must satisfy 0 < Delta < T")
    if run["n_paths"] < 1:
        problems.append("run.n_paths must be >= 1")
    k = run["frame_k"]
    if k is not None and not 1 <= k <= tgt["ambient_dim"]:
        problems.append("run.frame_k must satisfy 1 <= k <= ambient_dim")
    integ = run["integrator"]
    if integ not in (None, "sde", "ode"):
        problems.append("run.integrator must be null, 'sde' or 'ode'")
    if integ == "sde" and mdl["kind"] != "sgm_reverse":
        problems.append("integrator 'sde' requires model.kind sgm_reverse")
    if pert["kind"] not in _PERT_KINDS:
        problems.append(
            f"perturbation.kind must be one of {_PERT_KINDS}")
    if pert["sup_norm"] < 0:
        problems.append("perturbation.sup_norm must be >= 0")
    if any(e < 0 for e in pert["epsilons"]):
        problems.append("perturbation.epsilons must be nonnegative")
    tw = pert["time_window"]
    if tw is not None and (len(tw) != 2 or not tw[0] < tw[1]):
        problems.append("perturbation.time_window must be [t_a, t_b], t_a < t_b")
    obs = cfg["observable"]
    if obs["kind"] not in _OBS_KINDS:
        problems.append(f"observable.kind must be one of {_OBS_KINDS}")
    kde = cfg["kde"]
    if kde["nx"] < 2 or kde["ny"] < 2:
        problems.append("kde.nx and kde.ny must be >= 2")
    if not (isinstance(kde["bandwidth"], (int, float))
            and kde["bandwidth"] > 0) and kde["bandwidth"] != "scott":
        problems.append("kde.bandwidth must be 'scott' or a positive number")
    return problems


def load_config(path, overrides=()) -> dict:
    """Read, merge, override and validate; raises ConfigError on problems."""
    if path is None:
        user = {}
    else:
        with open(path) as fh:
            user = json.load(fh)
    cfg, problems = merge_config(user)
    problems += apply_overrides(cfg, overrides)
    problems += validate(cfg)
    if problems:
        raise ConfigError(problems)
    return cfg


def build_from_config(cfg: dict):
    """Instantiate (manifold, quadrature, schedule, model, perturbation)."""
    from .dynamics import PerturbationSpec

    tgt = cfg["target"]
    manifold = build_curve(tgt["kind"], tgt["params"],
                           ambient_dim=tgt["ambient_dim"],
                           density=tgt["density"])
    floor = 2 if manifold.degenerate else min(64, tgt["quad_per_arc"])
    quad = quadrature_nodes(
        manifold, 2 if manifold.degenerate else tgt["quad_per_arc"],
        floor=floor)
    sch = cfg["schedule"]
    early = sch["Delta"] if sch["Delta"] is not None else sch["T"] / sch["n_steps"]
    schedule = NoiseSchedule(delta=sch["delta"], horizon=sch["T"],
                             early_stop=early, n_steps=sch["n_steps"])
    pert_cfg = cfg["perturbation"]
    if pert_cfg["sup_norm"] > 0 and pert_cfg["epsilons"]:
        if pert_cfg["kind"] == "constant_vector":
            pert = PerturbationSpec.constant(
                pert_cfg["direction"], sup_norm=pert_cfg["sup_norm"],
                time_window=pert_cfg["time_window"])
        else:
            pert = PerturbationSpec.random_fourier(
                tgt["ambient_dim"], n_features=pert_cfg["n_features"],
                length_scale=pert_cfg["length_scale"],
                seed=pert_cfg["field_seed"], sup_norm=pert_cfg["sup_norm"],
                lift=manifold._lift, time_window=pert_cfg["time_window"])
    else:
        pert = None
    model = DriftModel(cfg["model"]["kind"], manifold, quad, schedule,
                       sigma_min=cfg["model"]["sigma_min"],
                       cfm_early_stop=cfg["model"]["cfm_early_stop"])
    return manifold, quad, schedule, model, pert


def make_observable(cfg: dict):
    from .analysis import CoordinateMean, SmoothedDiskMass

    obs = cfg["observable"]
    if obs["kind"] == "coordinate_mean":
        return CoordinateMean(obs["index"])
    return SmoothedDiskMass(center=obs["center"], radius=obs["radius"],
                            width=obs["width"])
