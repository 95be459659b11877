"""Scenario runner: ``pcaf-lab <kind> run <config.json> [--set k=v] [--out prefix]``.

A scenario is a JSON document ``{"kind", "seeds", "parameters", "output"}``.
Missing fields are filled from per-kind defaults, and the fully materialized
config is written next to the results, so every output is determined by
the echoed file. All tabular output goes through the 17-digit writers in
:mod:`pcaf_lab._io`, so reruns of a config are byte-identical, including
across different ``PCAF_LAB_THREADS`` values.

Exit codes: 0 all assertions pass, 1 an assertion failed, 2 invalid
config, 3 runtime error.
"""

import argparse
import copy
import json
import math
import os
import sys
from dataclasses import dataclass, field

import jsonschema
import numpy as np

from . import _io
from . import conditions as cnd
from . import continuum as ct
from . import discrete as dsc
from . import simulate as sim
from .errors import ConfigInvalid, PcafLabError, UnsupportedFormat

EXIT_PASS, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3

SUBCOMMANDS = {
    "oracle": "oracle-suite",
    "metric": "metric",
    "classify": "classify",
    "mc": "mc-convergence",
    "conditions": "conditions",
    "martingale": "martingale",
}
FORMATS = ("csv", "json", "plotdata")

SEED_SCHEME = {
    "name": "seedsequence-spawn-philox",
    "description": (
        "path i under master seed s is driven by Philox(k) with "
        "k = SeedSequence(s, spawn_key=(i,)).generate_state(1, uint64)[0]; "
        "independent of batch size and thread count"
    ),
}

ORACLE_SUITES = ("metric", "potential", "approximation", "revuz", "kernels", "chain")

DEFAULT_PARAMETERS = {
    "oracle-suite": {
        "suites": list(ORACLE_SUITES),
        "forms": 100,
        "max_vertices": 50,
        "alphas": [0.1, 0.5, 2.0, 10.0],
        "identity_forms": 20,
        "killing": 0.1,
        "approx_vertices": 20,
        "approx_n": 1000,
        "revuz_vertices": 20,
        "revuz_times": [0.1, 0.01, 0.001],
        "kernel_pairs": 100,
        "chain_cells": 2000,
        "chain_half_width": 5.0,
        "chain_points": [[0.0, 1.0]],
    },
    "metric": {
        "space": "BM1D",
        "alpha": 1.0,
        "measures": [{"atoms": [[0.0, 1.0]]}, {"atoms": [[1.0, 1.0]]}],
        "form": None,
        "resolution": None,
    },
    "classify": {
        "model": "BM1D",
        "alpha": 1.0,
        "measures": [{"atoms": [[0.0, 1.0]]}],
        "probe_grid": {"lo": -2.0, "hi": 2.0, "points": 41},
        "resolution": None,
    },
    "mc-convergence": {
        "mode": "density",
        "model": "BM1D",
        "T": 1.0,
        "dt": 1e-4,
        "paths": 10000,
        "indices": [2, 8, 32, 128],
        "reference": {"expr": "pow", "beta": 0.25, "r_max": 1.0},
        "family": {"type": "cap"},
        "bins": 0.02,
        "f_cap": 1e6,
        "batch": 256,
        "energy_check": True,
        "local_time_tolerance": 0.05,
    },
    "conditions": {
        "family": {"corpus": "power_beta", "params": {"d": 2, "beta": 1.0}},
        "indices": list(cnd.DEFAULT_INDICES),
        "tail": cnd.DEFAULT_TAIL,
        "conditions": ["membership"],
        "probe": None,
        "expect": {},
    },
    "martingale": {
        "model": "BM1D",
        "f": {"expr": "hat", "center": 0.0, "width": 1.0},
        "T": 1.0,
        "dt": 1e-3,
        "paths": 10000,
        "f_cap": 1e6,
        "batch": 256,
    },
}

# measure mode pairs shrinking uniform laws with the point mass at 0
MEASURE_MODE_DEFAULTS = {
    "reference": {"atoms": [[0.0, 1.0]]},
    "family": {"type": "uniform-shrinking", "mass": 1.0},
    "energy_check": False,
}

DEFAULT_SEEDS = [20240611]

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_POSINT = {"type": "integer", "minimum": 1}
_MEASURE = {"type": "object"}
_OPT_RES = {"type": ["integer", "null"], "minimum": 1}

PARAMETER_SCHEMAS = {
    "oracle-suite": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "suites": {"type": "array", "items": {"enum": list(ORACLE_SUITES)}, "uniqueItems": True},
            "forms": _POSINT,
            "max_vertices": {"type": "integer", "minimum": 2},
            "alphas": {"type": "array", "items": _POS, "minItems": 1},
            "identity_forms": _POSINT,
            "killing": {"type": "number", "minimum": 0},
            "approx_vertices": {"type": "integer", "minimum": 2},
            "approx_n": _POSINT,
            "revuz_vertices": {"type": "integer", "minimum": 2},
            "revuz_times": {"type": "array", "items": _POS, "minItems": 2},
            "kernel_pairs": _POSINT,
            "chain_cells": {"type": "integer", "minimum": 10},
            "chain_half_width": _POS,
            "chain_points": {"type": "array", "items": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}},
        },
    },
    "metric": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "space": {"enum": ["BM1D", "BM3D", "discrete"]},
            "alpha": _POS,
            "measures": {"type": "array", "minItems": 1},
            "form": {"type": ["object", "null"]},
            "resolution": _OPT_RES,
        },
    },
    "classify": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "model": {"enum": ["BM1D", "BM3D"]},
            "alpha": _POS,
            "measures": {"type": "array", "items": _MEASURE},
            "probe_grid": {
                "type": "object",
                "required": ["lo", "hi", "points"],
                "properties": {"lo": _NUM, "hi": _NUM, "points": _POSINT},
            },
            "resolution": _OPT_RES,
        },
    },
    "mc-convergence": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "mode": {"enum": ["density", "measure", "local-time"]},
            "model": {"enum": ["BM1D", "BM3D"]},
            "T": _POS,
            "dt": _POS,
            "paths": {"type": "integer", "minimum": 2},
            "indices": {"type": "array", "items": _POSINT, "minItems": 2},
            "reference": {"type": "object"},
            "family": {"type": "object", "properties": {"type": {"enum": ["cap", "uniform-shrinking"]}}},
            "bins": _POS,
            "f_cap": _POS,
            "batch": _POSINT,
            "energy_check": {"type": "boolean"},
            "local_time_tolerance": _POS,
        },
    },
    "conditions": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "family": {"type": "object"},
            "indices": {"type": "array", "items": _POSINT, "minItems": 1},
            "tail": _POSINT,
            "conditions": {"type": "array", "items": {"enum": ["membership", *cnd.CONDITIONS]}, "minItems": 1},
            "probe": {"type": ["object", "null"]},
            "expect": {"type": "object"},
        },
    },
    "martingale": {
        "type": "object",
        "additionalProperties": False,
        "properties": {
            "model": {"enum": ["BM1D"]},
            "f": {"type": "object"},
            "T": _POS,
            "dt": _POS,
            "paths": {"type": "integer", "minimum": 2},
            "f_cap": _POS,
            "batch": _POSINT,
        },
    },
}


def config_schema(kind):
    return {
        "type": "object",
        "additionalProperties": False,
        "required": ["kind", "seeds", "parameters", "output"],
        "properties": {
            "kind": {"const": kind},
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
            "seed_scheme": {"type": "object", "properties": {"name": {"const": SEED_SCHEME["name"]}}},
            "parameters": PARAMETER_SCHEMAS[kind],
            "output": {
                "type": "object",
                "additionalProperties": False,
                "properties": {
                    "prefix": {"type": "string", "minLength": 1},
                    "formats": {"type": "array", "items": {"type": "string"}, "uniqueItems": True},
                },
            },
        },
    }


# -- config handling ----------------------------------------------------------

def _deep_merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and out[k]:
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def apply_overrides(config, assignments):
    """Apply ``key.sub=value`` overrides; values are parsed as JSON when possible."""
    config = copy.deepcopy(config)
    for item in assignments or ():
        if "=" not in item:
            raise ConfigInvalid(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = [p for p in key.split(".") if p]
        if not parts:
            raise ConfigInvalid(f"override {item!r} has an empty key")
        node = config
        for p in parts[:-1]:
            nxt = node.get(p) if isinstance(node, dict) else None
            if not isinstance(nxt, dict):
                nxt = {}
                node[p] = nxt
            node = nxt
        node[parts[-1]] = value
    return config


def materialize(config, kind=None):
    """Fill defaults, check against the schema and return the full config."""
    if not isinstance(config, dict):
        raise ConfigInvalid("config must be a JSON object")
    kind = kind or config.get("kind")
    if kind in SUBCOMMANDS:
        kind = SUBCOMMANDS[kind]
    if kind not in DEFAULT_PARAMETERS:
        raise ConfigInvalid(f"unknown scenario kind {kind!r}", ("kind",))
    if config.get("kind", kind) != kind:
        raise ConfigInvalid(f"config declares kind {config['kind']!r} but {kind!r} was requested", ("kind",))
    full = {
        "kind": kind,
        "seeds": list(DEFAULT_SEEDS),
        "seed_scheme": dict(SEED_SCHEME),
        "parameters": copy.deepcopy(DEFAULT_PARAMETERS[kind]),
        "output": {"prefix": os.path.join("pcaf-lab-out", kind), "formats": ["csv", "json"]},
    }
    if kind == "mc-convergence" and (config.get("parameters") or {}).get("mode") == "measure":
        full["parameters"].update(MEASURE_MODE_DEFAULTS)
    for key, value in config.items():
        if key in ("parameters", "output") and isinstance(value, dict):
            full[key] = _deep_merge(full[key], value) if key == "output" else {**full[key], **copy.deepcopy(value)}
        else:
            full[key] = copy.deepcopy(value)
    validator = jsonschema.Draft202012Validator(config_schema(kind))
    errors = sorted(validator.iter_errors(full), key=lambda e: list(e.absolute_path))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigInvalid(err.message, tuple(err.absolute_path))
    full["seed_scheme"] = dict(SEED_SCHEME)
    return full


# -- results --------------------------------------------------------------------

@dataclass
class Results:
    kind: str
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    data: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)  # (name, passed, detail)
    curves: list = field(default_factory=list)  # (curve, xs, ys, yerrs)

    def check(self, name, passed, detail=""):
        self.assertions.append((name, bool(passed), detail))

    @property
    def passed(self):
        return all(p for _, p, _ in self.assertions)


class ScenarioError(PcafLabError):
    def __init__(self, step, error):
        self.step, self.error = step, error
        super().__init__(f"step '{step}' failed: {type(error).__name__}: {error}")


class _Step:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        return self

    def __exit__(self, kind, error, tb):
        if error is not None and not isinstance(error, (ScenarioError, ConfigInvalid)):
            raise ScenarioError(self.name, error) from error
        return False


# -- scenario kinds -------------------------------------------------------------

def _random_instance(rng, n_max, killing):
    n = int(rng.integers(2, n_max + 1))
    return dsc.random_form(n, rng, killing=killing)


def _suite_metric(p, rng, res):
    rows, worst_sym, worst_tri, identity_ok, equiv_ok = [], 0.0, math.inf, True, True
    for i in range(p["forms"]):
        form = _random_instance(rng, p["max_vertices"], 0.0)
        mu, nu, xi = rng.random((3, form.vertex_count))
        d_mn = dsc.rho(form, mu, nu)
        sym = abs(d_mn - dsc.rho(form, nu, mu))
        same = dsc.rho(form, mu, mu)
        slack = dsc.rho(form, mu, xi) + dsc.rho(form, xi, nu) - d_mn
        eq = True
        for a in p["alphas"]:
            ra = dsc.rho(form, mu, nu, a)
            eq &= math.sqrt(1 / max(a, 1)) * d_mn <= ra + 1e-10 and ra <= math.sqrt(max(1 / a, 1)) * d_mn + 1e-10
        worst_sym, worst_tri = max(worst_sym, sym), min(worst_tri, slack)
        identity_ok &= same == 0.0 and d_mn > 1e-10
        equiv_ok &= eq
        rows.append((i, form.vertex_count, d_mn, sym, same, slack, int(eq)))
    res.tables["metric"] = (("form", "vertices", "rho", "symmetry_error", "rho_self", "triangle_slack", "equivalence"), rows)
    res.check("metric: symmetry", worst_sym <= 1e-10, f"max |rho(mu,nu) - rho(nu,mu)| = {worst_sym:.3e}")
    res.check("metric: identity", identity_ok, "rho(mu,mu) = 0 and rho(mu,nu) > 0 for mu != nu")
    res.check("metric: triangle", worst_tri >= -1e-10, f"min triangle slack = {worst_tri:.3e}")
    res.check("metric: alpha equivalence", equiv_ok, f"alphas {p['alphas']}")


def _suite_potential(p, rng, res):
    rows, worst = [], [0.0, 0.0, 0.0]
    for i in range(p["identity_forms"]):
        form = _random_instance(rng, p["max_vertices"], p["killing"])
        n = form.vertex_count
        mu, f, v = rng.random(n), rng.random(n), rng.normal(size=n)
        u = dsc.potential(form, dsc.DiscreteMeasure(mu), 1.0).values
        pairing = abs(form.energy(u, v, 1.0) - v @ mu) / (np.linalg.norm(v) * np.linalg.norm(mu))
        duality = abs(mu @ dsc.resolvent_apply(form, f, 1.0) - (form.base_measure * f) @ u)
        g = dsc.green_matrix(form)
        capg = max(abs(dsc.capacity(form, [y]) * g[y, y] - 1.0) for y in range(n))
        worst = [max(worst[0], pairing), max(worst[1], duality), max(worst[2], capg)]
        rows.append((i, n, pairing, duality, capg))
    res.tables["potential"] = (("form", "vertices", "pairing_residual", "duality_error", "cap_green_error"), rows)
    res.check("potential: defining pairing", worst[0] <= 1e-9, f"max residual {worst[0]:.3e}")
    res.check("potential: duality", worst[1] <= 1e-10, f"max error {worst[1]:.3e}")
    res.check("potential: point capacity", worst[2] <= 1e-8, f"max |Cap({{y}}) g(y,y) - 1| = {worst[2]:.3e}")


def _suite_approximation(p, rng, res):
    form = dsc.random_form(p["approx_vertices"], rng)
    f = dsc.potential(form, rng.random(form.vertex_count)).values
    prev, min_inc, rows = None, math.inf, []
    grid = sorted(set(np.unique(np.geomspace(1, p["approx_n"], 25).astype(int)).tolist()) | {p["approx_n"]})
    for n in grid:
        cur = n * dsc.resolvent_apply(form, f, n + 1.0)
        inc = math.nan if prev is None else float(np.min(cur - prev))
        if prev is not None:
            min_inc = min(min_inc, inc)
        diff = dsc.resolvent_apply(form, dsc.approx_g(form, f, n)) - f
        rel = math.sqrt(form.energy(diff, alpha=1.0) / form.energy(f, alpha=1.0))
        rows.append((n, inc, rel))
        prev = cur
    res.tables["approximation"] = (("n", "min_increment", "relative_energy_error"), rows)
    res.check("approximation: monotone", min_inc >= -1e-12, f"min increment {min_inc:.3e}")
    res.check("approximation: convergence", rows[-1][2] <= 1e-2, f"relative error {rows[-1][2]:.3e} at n={rows[-1][0]}")


def _suite_revuz(p, rng, res):
    form = dsc.random_form(p["revuz_vertices"], rng, killing=0.5)
    f, mu = rng.random((2, form.vertex_count))
    # first-order slope of the rate: (1/2) sum_i k_i f_i mu_i / m_i
    slope = 0.5 * float(np.sum(form.killing * f * mu / form.base_measure))
    target = float(f @ mu)
    rows, ok = [], True
    for t in p["revuz_times"]:
        err = target - dsc.revuz_rate(form, f, mu, t)
        ratio = err / (slope * t)
        ok &= abs(ratio - 1) <= 0.2
        rows.append((t, err, err / t, slope, ratio))
    res.tables["revuz"] = (("t", "error", "error_over_t", "slope", "ratio"), rows)
    res.check("revuz: linear rate", ok, "error / (K t) within 20% of 1")


def _suite_kernels(p, rng, res):
    rows, worst = [], 0.0
    for model, d in ((ct.BM1D, 1), (ct.BM3D, 3)):
        for i in range(p["kernel_pairs"]):
            alpha = float(rng.choice([0.1, 0.5, 1.0, 2.0, 10.0]))
            x, y = rng.uniform(-2, 2, (2, d))
            r = float(np.linalg.norm(x - y))
            g = ct.kernel_eval(ct.ResolventKernel(model, alpha), x, y)
            q = ct.heat_kernel_quadrature(r, alpha, d)
            worst = max(worst, abs(g - q))
            rows.append((model, i, alpha, r, g, q, abs(g - q)))
    res.tables["kernels"] = (("model", "pair", "alpha", "distance", "closed_form", "quadrature", "abs_error"), rows)
    res.check("kernels: closed forms", worst <= 1e-6, f"max abs error {worst:.3e}")


def _suite_chain(p, rng, res):
    L, cells = p["chain_half_width"], p["chain_cells"]
    form, nodes = ct.brownian_chain(-L, L, cells)
    kernel = ct.ResolventKernel(ct.BM1D, 1.0)
    rows, ok = [], True
    for x, y in p["chain_points"]:
        mu, nu = ct.MeasureRep.atom(float(x)), ct.MeasureRep.atom(float(y))
        cont = ct.rho_cont(kernel, mu, nu)
        chain = dsc.rho(form, ct.chain_masses(nodes, mu), ct.chain_masses(nodes, nu))
        rel = abs(chain - cont) / cont
        ok &= rel <= 0.02
        rows.append((x, y, cont, chain, rel))
    res.tables["chain"] = (("x", "y", "rho_continuum", "rho_chain", "relative_gap"), rows)
    res.check("chain: continuum match", ok, f"{cells}-cell chain within 2%")


_SUITES = {
    "metric": _suite_metric,
    "potential": _suite_potential,
    "approximation": _suite_approximation,
    "revuz": _suite_revuz,
    "kernels": _suite_kernels,
    "chain": _suite_chain,
}


def _run_oracle(cfg, res):
    p = cfg["parameters"]
    for seed in cfg["seeds"]:
        for name in p["suites"]:
            with _Step(f"oracle suite {name} (seed {seed})"):
                rng = np.random.default_rng([seed, ORACLE_SUITES.index(name)])
                sub = Results(res.kind)
                _SUITES[name](p, rng, sub)
                for tname, (header, rows) in sub.tables.items():
                    header = ("seed",) + tuple(header)
                    old = res.tables.get(tname, (header, []))[1]
                    res.tables[tname] = (header, old + [(seed,) + tuple(r) for r in rows])
                for a, ok, detail in sub.assertions:
                    res.check(f"{a} [seed {seed}]", ok, detail)


def _run_metric(cfg, res):
    p = cfg["parameters"]
    rows = []
    if p["space"] == "discrete":
        with _Step("build form"):
            if p["form"] is None or "random" in p["form"]:
                spec = (p["form"] or {}).get("random", {})
                rng = np.random.default_rng(cfg["seeds"][0])
                form = dsc.random_form(int(spec.get("vertices", 10)), rng, killing=float(spec.get("killing", 0.0)))
            else:
                form = dsc.form_from_dict(p["form"])
            measures = [np.asarray(m, dtype=float) for m in p["measures"]]
        with _Step("evaluate rho"):
            for i, a in enumerate(measures):
                for j, b in enumerate(measures):
                    rows.append((i, j, dsc.rho(form, a, b, p["alpha"])))
    else:
        with _Step("parse measures"):
            kernel = ct.ResolventKernel(p["space"], p["alpha"])
            measures = [ct.MeasureRep.from_dict(m, kernel.dim) for m in p["measures"]]
        with _Step("evaluate rho"):
            for i, a in enumerate(measures):
                for j, b in enumerate(measures):
                    rows.append((i, j, 0.0 if i == j else ct.rho_cont(kernel, a, b, p["resolution"])))
    res.tables["rho"] = (("i", "j", "rho"), rows)
    res.data["rho"] = [{"i": i, "j": j, "rho": r} for i, j, r in rows]
    n = len(p["measures"])
    mat = {(i, j): r for i, j, r in rows}
    sym = all(abs(mat[i, j] - mat[j, i]) <= 1e-10 * max(1.0, mat[i, j]) for i in range(n) for j in range(n))
    tri = all(mat[i, j] <= mat[i, k] + mat[k, j] + 1e-10 for i in range(n) for j in range(n) for k in range(n))
    res.check("rho symmetric", sym)
    res.check("rho triangle inequality", tri)


def _probe_points(spec, dim):
    axis = np.linspace(spec["lo"], spec["hi"], spec["points"])
    if dim == 1:
        return axis
    return np.stack([axis, np.zeros_like(axis), np.zeros_like(axis)], axis=-1)


def _run_classify(cfg, res):
    p = cfg["parameters"]
    kernel = ct.ResolventKernel(p["model"], p["alpha"])
    rows = []
    for i, doc in enumerate(p["measures"]):
        with _Step(f"classify measure {i}"):
            mu = ct.MeasureRep.from_dict(doc, kernel.dim)
            cls = ct.classify_measure(kernel, mu, _probe_points(p["probe_grid"], kernel.dim), p["resolution"])
        rows.append((i, int(cls.in_S), int(cls.in_S0), int(cls.in_S00), cls.energy_integral, cls.potential_sup,
                     cls.total_mass))
        res.data.setdefault("measures", []).append(cls.to_dict())
    res.tables["classes"] = (("measure", "in_S", "in_S0", "in_S00", "energy_integral", "potential_sup", "total_mass"),
                             rows)
    res.check("classified", True, f"{len(rows)} measure(s)")


def _cap_family(ref_doc):
    prof = ct.radial_from_dict(ref_doc)
    if not isinstance(prof, ct.RadialPower):
        raise ConfigInvalid("cap families need a power-law reference", ("parameters", "reference"))
    return prof


def _run_mc(cfg, res):
    p = cfg["parameters"]
    mode = p["mode"]
    trend_rows, energy_rows = [], []
    for seed in cfg["seeds"]:
        if mode == "local-time":
            with _Step(f"local time ensemble (seed {seed})"):
                lt, defect = sim.local_time_at_zero(p["T"], p["dt"], p["paths"], seed, p["bins"], batch=p["batch"])
            mean = float(np.mean(lt))
            se = float(np.std(lt, ddof=1) / math.sqrt(lt.size))
            target = math.sqrt(2 * p["T"] / math.pi)
            rel = abs(mean - target) / target
            trend_rows.append((seed, p["paths"], p["bins"], mean, se, target, rel, float(np.max(defect))))
            res.check(f"local time within {p['local_time_tolerance']:.0%} [seed {seed}]",
                      rel <= p["local_time_tolerance"], f"mean {mean:.6f} vs {target:.6f}")
            res.check(f"binning conservation [seed {seed}]", float(np.max(defect)) <= 1e-12,
                      f"max defect {float(np.max(defect)):.3e}")
            res.curves.append(("local_time_at_zero", [p["bins"]], [mean], [se]))
            continue
        model = sim.as_model(p["model"])
        if mode == "density":
            with _Step("build integrands"):
                prof = _cap_family(p["reference"])
                ref = sim.radial_function(prof, "reference")
                family = lambda n: sim.radial_function(ct.RadialPower(prof.beta, prof.coef, prof.r_lo, prof.r_hi,
                                                                      min(prof.cap, float(n))), f"cap {n}")
            with _Step(f"ensemble (seed {seed})"):
                rep = sim.mc_convergence(model, family, ref, p["indices"], p["T"], p["dt"], p["paths"], seed,
                                         kind="density", f_cap=p["f_cap"], batch=p["batch"])
        else:
            with _Step("build measures"):
                if model.dim != 1:
                    raise ConfigInvalid("measure pairing uses 1D local time", ("parameters", "model"))
                ref = ct.MeasureRep.from_dict(p["reference"], 1)
                mass = float(p["family"].get("mass", 1.0))
                family = lambda n: ct.MeasureRep.uniform([-1.0 / n], [1.0 / n], mass, 1)
            with _Step(f"ensemble (seed {seed})"):
                rep = sim.mc_convergence(model, family, ref, p["indices"], p["T"], p["dt"], p["paths"], seed,
                                         kind="measure", bins=p["bins"], batch=p["batch"])
        trend_rows.extend(rep.rows())
        res.data.setdefault("trends", []).append(rep.to_dict())
        res.check(f"mean sup-distance decreasing [seed {seed}]", rep.decreasing,
                  f"slope {rep.slope:.3f}; means {', '.join(_io.format_real(m) for m in rep.means)}")
        res.curves.append((f"mean seed={seed}", rep.indices, rep.means, rep.stderrs))
        res.curves.append((f"p90 seed={seed}", rep.indices, rep.p90, [0.0] * len(rep.p90)))
    if mode == "local-time":
        res.tables["local_time"] = (("seed", "paths", "bin_width", "mean", "stderr", "target", "relative_error",
                                     "max_conservation_defect"), trend_rows)
        return
    res.tables["trend"] = (sim.TrendReport.HEADER, trend_rows)
    if mode == "density" and p["energy_check"] and model.dim in (1, 3):
        with _Step("energy distances"):
            kernel = ct.ResolventKernel(ct.BM1D if model.dim == 1 else ct.BM3D, 1.0)
            prof = _cap_family(p["reference"])
            ref_m = ct.MeasureRep(model.dim, radial=prof)
            for n in p["indices"]:
                fn = ct.MeasureRep(model.dim, radial=ct.RadialPower(prof.beta, prof.coef, prof.r_lo, prof.r_hi,
                                                                   min(prof.cap, float(n))))
                energy_rows.append((n, ct.rho_cont(kernel, fn, ref_m)))
        res.tables["energy"] = (("n", "rho"), energy_rows)
        vals = [r for _, r in energy_rows]
        res.check("rho(f_n dx, f dx) decreasing", all(b < a for a, b in zip(vals, vals[1:])),
                  ", ".join(_io.format_real(v) for v in vals))
        res.curves.append(("rho", [n for n, _ in energy_rows], vals, [0.0] * len(vals)))


def _run_conditions(cfg, res):
    p = cfg["parameters"]
    with _Step("build family"):
        family = cnd.DensityFamily.from_dict(p["family"])
    probe = None
    if p["probe"] is not None:
        with _Step("parse probe"):
            probe = ct.MeasureRep.from_dict(p["probe"], family.dim)
    value_rows, verdict_rows, reports = [], [], {}
    wanted = p["conditions"]
    if "membership" in wanted:
        with _Step("membership"):
            member = cnd.verify_membership(family, p["indices"], p["tail"])
        reports.update(member.reports)
        res.data["membership"] = member.to_dict()
        res.check("A-membership", member.member,
                  f"verdict {member.verdict}; Ab via {member.ab_branch}, Ac via {member.ac_branch}")
        res.data["summary_line"] = "A: PASS" if member.member else (
            "A: INCONCLUSIVE-NEGATIVE" if member.verdict == "inconclusive-negative" else "A: FAIL")
    for which in wanted:
        if which == "membership" or which in reports:
            continue
        with _Step(f"condition {which}"):
            reports[which] = cnd.check_condition(family, which, p["indices"], probe, p["tail"])
    for which, rep in reports.items():
        per = rep.per_constant or {None: {"values": rep.values}}
        for c, block in per.items():
            for n, v in zip(rep.indices, block["values"]):
                value_rows.append((which, n, "" if c is None else c, v))
        verdict_rows.append((which, rep.verdict, rep.slope))
        res.curves.append((which, rep.indices, rep.values, [0.0] * len(rep.values)))
    res.data["conditions"] = {k: r.to_dict() for k, r in reports.items()}
    res.tables["values"] = (("condition", "n", "C", "value"), value_rows)
    res.tables["verdicts"] = (("condition", "verdict", "loglog_slope"), verdict_rows)
    for which, expected in p["expect"].items():
        got = reports[which].verdict if which in reports else None
        res.check(f"{which} is {expected}", got == expected, f"got {got}")


def _run_martingale(cfg, res):
    p = cfg["parameters"]
    rows = []
    for seed in cfg["seeds"]:
        with _Step(f"martingale ensemble (seed {seed})"):
            f = sim.density_function(p["f"])
            rep = sim.martingale_residual(p["model"], f, p["T"], p["dt"], p["paths"], seed, p["f_cap"], p["batch"])
        rows.extend(rep.rows())
        res.data.setdefault("reports", []).append(rep.to_dict())
        res.check(f"residual within 3 stderr [seed {seed}]", rep.passed,
                  ", ".join(f"t={t:g}: {m:.3e} +- {s:.3e}" for t, m, s in zip(rep.checkpoints, rep.means, rep.stderrs)))
        res.curves.append((f"residual seed={seed}", rep.checkpoints, rep.means, rep.stderrs))
    res.tables["residuals"] = (sim.MartingaleReport.HEADER, rows)


_RUNNERS = {
    "oracle-suite": _run_oracle,
    "metric": _run_metric,
    "classify": _run_classify,
    "mc-convergence": _run_mc,
    "conditions": _run_conditions,
    "martingale": _run_martingale,
}


# -- reporting --------------------------------------------------------------------

def _summary_text(cfg, res):
    lines = [f"pcaf-lab scenario: {cfg['kind']}", f"seeds: {', '.join(map(str, cfg['seeds']))}",
             f"seed scheme: {SEED_SCHEME['name']}", ""]
    if "summary_line" in res.data:
        lines.append(res.data["summary_line"])
    for name, ok, detail in res.assertions:
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))
    lines.append("")
    lines.append(f"overall: {'PASS' if res.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"


def emit_report(results, fmt, prefix):
    """Write one output format; returns the list of files written."""
    if fmt not in FORMATS:
        raise UnsupportedFormat(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    _ensure_dir(prefix)
    written = []
    if fmt == "csv":
        for name, (header, rows) in results.tables.items():
            path = f"{prefix}.{name}.csv"
            _io.write_csv(path, header, rows)
            written.append(path)
        if not results.tables:
            path = f"{prefix}.results.csv"
            _io.write_csv(path, ("empty",), [])
            written.append(path)
    elif fmt == "json":
        doc = {
            "kind": results.kind,
            "passed": results.passed,
            "assertions": [{"name": n, "passed": ok, "detail": d} for n, ok, d in results.assertions],
            "tables": {name: {"header": list(h), "rows": [list(r) for r in rows]}
                       for name, (h, rows) in results.tables.items()},
            "data": results.data,
        }
        path = f"{prefix}.results.json"
        _io.write_json(path, doc)
        written.append(path)
    else:
        rows = [(curve, x, y, e) for curve, xs, ys, es in results.curves for x, y, e in zip(xs, ys, es)]
        path = f"{prefix}.plotdata.csv"
        _io.write_csv(path, ("curve", "x", "y", "yerr"), rows)
        written.append(path)
    return written


def _ensure_dir(prefix):
    parent = os.path.dirname(prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)


def run_scenario(config, kind=None, prefix=None):
    """Materialize, run and report a scenario; returns ``(exit_code, results, files)``."""
    cfg = materialize(config, kind)
    if prefix is not None:
        cfg["output"]["prefix"] = prefix
    for fmt in cfg["output"]["formats"]:
        if fmt not in FORMATS:
            raise UnsupportedFormat(f"unknown report format {fmt!r}; expected one of {FORMATS}")
    prefix = cfg["output"]["prefix"]
    res = Results(cfg["kind"])
    _RUNNERS[cfg["kind"]](cfg, res)
    _ensure_dir(prefix)
    files = [f"{prefix}.config.json"]
    _io.write_json(files[0], cfg)
    for fmt in cfg["output"]["formats"]:
        files.extend(emit_report(res, fmt, prefix))
    summary = f"{prefix}.summary.txt"
    with open(summary, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(_summary_text(cfg, res))
    files.append(summary)
    return (EXIT_PASS if res.passed else EXIT_FAIL), res, files


def _parser():
    ap = argparse.ArgumentParser(prog="pcaf-lab", description="Run reproducible potential-theory and PCAF scenarios.")
    sub = ap.add_subparsers(dest="kind", required=True)
    for name, kind in SUBCOMMANDS.items():
        sp = sub.add_parser(name, help=f"{kind} scenarios")
        actions = sp.add_subparsers(dest="action", required=True)
        run = actions.add_parser("run", help="run a scenario config")
        run.add_argument("config", help="scenario JSON file ('-' for stdin)")
        run.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                         help="override a config entry (dotted key, JSON value)")
        run.add_argument("--out", dest="prefix", default=None, help="output path prefix")
    return ap


def main(argv=None):
    args = _parser().parse_args(argv)
    kind = SUBCOMMANDS[args.kind]
    try:
        if args.config == "-":
            text = sys.stdin.read()
        else:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        try:
            config = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid(f"invalid JSON: {exc}") from exc
        config = apply_overrides(config, args.overrides)
        code, res, files = run_scenario(config, kind, args.prefix)
    except (ConfigInvalid, UnsupportedFormat, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PcafLabError, ArithmeticError, ValueError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for name, ok, detail in res.assertions:
        print(f"[{'PASS' if ok else 'FAIL'}] {name}" + (f" -- {detail}" if detail else ""))
    print(f"wrote {len(files)} file(s) with prefix {files[0][: -len('.config.json')]}")
    return code


if __name__ == "__main__":
    sys.exit(main())
