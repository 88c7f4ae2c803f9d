"""``scalesim`` command line.

Every subcommand resolves its settings in the order: built-in defaults, the
``--config`` JSON file (validated against :data:`CONFIG_SCHEMA`), the
``SCALESIM_SEED`` environment variable, and finally explicit flags. The
resolved settings are written to ``manifest.json`` next to the outputs;
passing that manifest back as ``--config`` reproduces the run.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from pathlib import Path

import jsonschema
import numpy as np
import pandas as pd
import scipy

from . import __version__, _accel, aldex, decisions
from .io import CountTable, CountTableError, load_counts, write_counts, write_metadata
from .mln import MlnFitError, MlnPrior, run_mln_scale_sim
from .numkit import ParameterError, Rng
from .scale_models import ScaleModelError, from_config, sample_log_scale, variant_names
from .studies import antibiotic, bioreactor

log = logging.getLogger("scalesim")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

FLOAT_FORMAT = "%.10g"

COMMANDS = ("simulate", "fit", "sensitivity", "fdr-curve", "bootstrap", "effective-scale")

_int_list = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0},
        "S": {"type": "integer", "minimum": 2},
        "alpha_level": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "mode": {"enum": ["test", "interval"]},
        "pipeline": {"enum": ["aldex", "mln"]},
        "gamma_prior": {"type": "number", "exclusiveMinimum": 0},
        "scale": {
            "type": "object",
            "required": ["kind"],
            "properties": {
                "kind": {"enum": variant_names()},
                "alpha": {"type": "number", "minimum": 0},
                "gamma": {"type": "number", "minimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
                "dbar": {"type": "number"},
                "c": {"type": "number"},
                "z_column": {"type": "string"},
            },
            "additionalProperties": False,
        },
        "counts": {"type": ["string", "null"]},
        "metadata": {"type": ["string", "null"]},
        "condition_column": {"type": "string"},
        "out": {"type": "string"},
        "scenario": {"enum": ["antibiotic", "bioreactor"]},
        "n": {"type": "integer", "minimum": 4},
        "delta": {"type": "number", "minimum": 0},
        "depth": {"type": "integer", "minimum": 1},
        "param": {"enum": ["gamma", "alpha"]},
        "grid": {"type": "string"},
        "base_alpha": {"type": "number", "minimum": 0},
        "base_gamma": {"type": "number", "minimum": 0},
        "n_grid": _int_list,
        "replicates": {"type": "integer", "minimum": 1},
        "estimators": {"type": ["array", "null"], "items": {"type": "string"}, "minItems": 1},
        "vessels": _int_list,
    },
}

DEFAULTS = {
    "seed": 0,
    "S": aldex.DEFAULT_S,
    "alpha_level": decisions.DEFAULT_ALPHA,
    "mode": "test",
    "pipeline": "aldex",
    "gamma_prior": aldex.DEFAULT_GAMMA,
    "scale": {"kind": "clr"},
    "counts": None,
    "metadata": None,
    "condition_column": "condition",
    "out": "scalesim_out",
    "scenario": "antibiotic",
    "n": 100,
    "delta": 0.1,
    "depth": antibiotic.DEFAULT_DEPTH,
    "param": "gamma",
    "grid": "0:1:0.05",
    "base_alpha": 0.6,
    "base_gamma": 0.2,
    "n_grid": [50, 200, 800],
    "replicates": 10,
    "estimators": None,
    "vessels": [1, 6, 12],
}


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _ints(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got '{text}'") from None


def _strs(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def parse_grid(text):
    """``start:stop:step`` (stop included) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid '{text}' must look like start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"grid '{text}' is empty or decreasing")
        k = int(np.floor((stop - start) / step + 1e-9))
        return np.round(start + step * np.arange(k + 1), 12)
    vals = np.array([float(v) for v in text.split(",") if v.strip()])
    if vals.size == 0:
        raise ConfigError("grid is empty")
    return vals


def _common(p, data=True):
    p.add_argument("--config", help="JSON config file (or a previous manifest.json)")
    p.add_argument("--seed", type=int, help="master seed (env SCALESIM_SEED overrides the config)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--counts", help="count table, taxa as rows (.tsv or .csv)")
        p.add_argument("--metadata", help="metadata CSV keyed by a 'sample' column")
        p.add_argument("--condition-column", dest="condition_column")
        p.add_argument("--n", type=int, help="samples to simulate when no --counts is given")
        p.add_argument("--S", type=int, help="Monte Carlo draws")
        p.add_argument("--alpha-level", dest="alpha_level", type=float)
        p.add_argument("--gamma-prior", dest="gamma_prior", type=float, help="Dirichlet pseudo-count")


def _scale_flags(p):
    p.add_argument("--scale", dest="scale_kind", choices=variant_names())
    p.add_argument("--alpha", dest="scale_alpha", type=float, help="within-condition log-scale SD")
    p.add_argument("--gamma", dest="scale_gamma", type=float, help="between-condition log-scale SD")
    p.add_argument("--tau", dest="scale_tau", type=float)
    p.add_argument("--dbar", dest="scale_dbar", type=float)
    p.add_argument("--z-column", dest="scale_z_column", help="metadata column with external log scales")


def build_parser():
    ap = argparse.ArgumentParser(prog="scalesim", description="Scale simulation for compositional surveys")
    ap.add_argument("--version", action="version", version=f"scalesim {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a study and write counts, metadata and truth")
    _common(p, data=False)
    p.add_argument("--scenario", choices=["antibiotic", "bioreactor"])
    p.add_argument("--n", type=int, help="number of samples (antibiotic)")
    p.add_argument("--delta", type=float, help="target discrepancy (antibiotic)")
    p.add_argument("--depth", type=int)

    p = sub.add_parser("fit", help="run one estimator and write a decision table")
    _common(p)
    _scale_flags(p)
    p.add_argument("--pipeline", choices=["aldex", "mln"])
    p.add_argument("--mode", choices=["test", "interval"])

    p = sub.add_parser("sensitivity", help="relaxed-model sweep over gamma or alpha")
    _common(p)
    p.add_argument("--param", choices=["gamma", "alpha"])
    p.add_argument("--grid", help="start:stop:step or comma list")
    p.add_argument("--base-alpha", dest="base_alpha", type=float)
    p.add_argument("--base-gamma", dest="base_gamma", type=float)

    p = sub.add_parser("fdr-curve", help="FDR versus sample size on the antibiotic scenario")
    _common(p, data=False)
    p.add_argument("--n-grid", dest="n_grid", type=_ints)
    p.add_argument("--replicates", type=int)
    p.add_argument("--estimators", type=_strs)
    p.add_argument("--delta", type=float)
    p.add_argument("--S", type=int)

    p = sub.add_parser("bootstrap", help="vessel bootstrap on the bioreactor analogue")
    _common(p, data=False)
    p.add_argument("--vessels", type=_ints)
    p.add_argument("--replicates", type=int)
    p.add_argument("--estimators", type=_strs)
    p.add_argument("--S", type=int)

    p = sub.add_parser("effective-scale", help="scale model implied by median-of-ratios estimates")
    _common(p)
    return ap


# ---------------------------------------------------------------------------
# settings resolution
# ---------------------------------------------------------------------------

def load_config(path):
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if isinstance(data, dict) and "config" in data and "versions" in data:
        data = data["config"]
    validate_config(data)
    return data


def validate_config(cfg):
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config error at {where}: {exc.message}") from exc


def resolve(args):
    cfg = {k: (dict(v) if isinstance(v, dict) else v) for k, v in DEFAULTS.items()}
    if args.config:
        file_cfg = load_config(args.config)
        if "command" in file_cfg and file_cfg["command"] != args.command:
            raise ConfigError(f"config was written by '{file_cfg['command']}', not '{args.command}'")
        for k, v in file_cfg.items():
            cfg[k] = dict(v) if isinstance(v, dict) else v
    env_seed = os.environ.get("SCALESIM_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"SCALESIM_SEED must be an integer, got '{env_seed}'") from None
    ns = vars(args)
    for k in CONFIG_SCHEMA["properties"]:
        if k in ns and ns[k] is not None and k != "scale":
            cfg[k] = ns[k]
    scale_flags = {k[len("scale_"):]: v for k, v in ns.items() if k.startswith("scale_") and v is not None}
    if scale_flags:
        kind = scale_flags.pop("kind", None)
        if kind is not None and kind != cfg["scale"].get("kind"):
            cfg["scale"] = {"kind": kind}
        cfg["scale"].update(scale_flags)
    cfg["command"] = args.command
    validate_config(cfg)
    return cfg


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------

def write_csv(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def versions():
    return {
        "scalesim": __version__,
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "python": platform.python_version(),
        "backend": _accel.backend_name(),
    }


def write_manifest(cfg, out, outputs):
    # the output location is not part of what determines the results
    cfg = {k: v for k, v in cfg.items() if k != "out"}
    manifest = {"config": cfg, "outputs": sorted(outputs), "versions": versions()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _outdir(cfg):
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# data acquisition
# ---------------------------------------------------------------------------

def get_table(cfg, rng: Rng, scenario="antibiotic"):
    """Load ``--counts``, or simulate the named scenario when none is given."""
    if cfg["counts"]:
        table = load_counts(cfg["counts"], cfg["metadata"])
        return table, None
    if scenario == "bioreactor":
        sc = bioreactor.build_bioreactor()
        return bioreactor.simulate_bioreactor(sc, rng.child("data")), sc.truth
    sc = antibiotic.build_scenario(cfg["delta"], depth=cfg["depth"])
    return antibiotic.simulate_counts(sc, rng.child("data"), n=cfg["n"]), sc.truth


def _labels(table: CountTable, cfg):
    return table.covariate(cfg["condition_column"])


def _binary(labels):
    levels = np.unique(labels)
    if levels.size != 2:
        raise ConfigError(f"condition column must have two levels, found {levels.size}")
    return (labels == levels[-1]).astype(float)


def build_scale(cfg, table: CountTable, prior=None):
    spec = dict(cfg["scale"])
    z_col = spec.pop("z_column", "log_scale")
    kind = spec["kind"]
    labels = _labels(table, cfg)
    ctx = {"N": table.shape[1], "design": _binary(labels)}
    if kind == "informed":
        ctx["z"] = table.covariate(z_col).astype(float)
        spec.setdefault("alpha", 0.5)
    if kind == "design":
        ctx["timepoint"] = _binary(labels)
        spec.setdefault("dbar", bioreactor.DESIGN_DBAR)
        spec.setdefault("tau", bioreactor.DESIGN_TAU)
    if kind == "relaxed":
        spec.setdefault("alpha", 0.6)
        spec.setdefault("gamma", 0.2)
    if kind == "lognormal":
        spec.setdefault("alpha", float("inf"))
    if kind == "flow":
        spec["mu"] = table.covariate("flow_mean").astype(float)
        spec["sigma"] = table.covariate("flow_sd").astype(float)
    if kind == "effective":
        theta, se = antibiotic.mor_point_estimates(table, labels=labels)
        spec.update(theta_hat=theta, se=se)
    if kind == "pim":
        if prior is None:
            raise ConfigError("the pim scale model needs the mln pipeline")
        ctx.update(M=prior.M, Gamma=prior.Gamma, nu=prior.nu, Xi=prior.Xi, X=prior.X)
    try:
        return from_config(spec, **ctx)
    except KeyError as exc:
        raise ConfigError(f"scale model '{kind}' needs parameter {exc}") from None


def mln_prior(table: CountTable, cfg):
    labels = _binary(_labels(table, cfg))
    if "vessel" in table.metadata.columns:
        vessel = table.covariate("vessel")
        X = np.vstack([(vessel[None, :] == np.unique(vessel)[:, None]).astype(float), labels[None, :]])
    else:
        X = np.vstack([np.ones_like(labels), labels])
    return MlnPrior.weak_default(table.shape[0], X)


def _summaries(name, index, draws):
    q = np.percentile(draws, [2.5, 50, 97.5], axis=0)
    return pd.DataFrame(
        {
            "quantity": name,
            "id": index,
            "mean": draws.mean(axis=0),
            "sd": draws.std(axis=0, ddof=1),
            "q025": q[0],
            "q50": q[1],
            "q975": q[2],
        }
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg, threads):
    rng = Rng(cfg["seed"])
    out = _outdir(cfg)
    if cfg["scenario"] == "bioreactor":
        sc = bioreactor.build_bioreactor()
        table = bioreactor.simulate_bioreactor(sc, rng.child("data"))
        truth = pd.DataFrame({"taxon": table.taxa, "truth": sc.truth, "lfc": sc.lfc})
    else:
        sc = antibiotic.build_scenario(cfg["delta"], depth=cfg["depth"])
        table = antibiotic.simulate_counts(sc, rng.child("data"), n=cfg["n"])
        truth = sc.describe()
        truth["lfc"] = np.where(sc.truth, sc.true_lfc, 0.0)
    write_counts(table, out / "counts.tsv")
    write_metadata(table, out / "metadata.csv")
    write_csv(truth, out / "truth.csv")
    write_manifest(cfg, out, ["counts.tsv", "metadata.csv", "truth.csv"])


def cmd_fit(cfg, threads):
    rng = Rng(cfg["seed"])
    out = _outdir(cfg)
    table, _ = get_table(cfg, rng)
    labels = _labels(table, cfg)
    if cfg["pipeline"] == "mln":
        prior = mln_prior(table, cfg)
        model = build_scale(cfg, table, prior)
        res = run_mln_scale_sim(table, prior, model, S=cfg["S"], rng=rng.child("fit"), alpha_level=cfg["alpha_level"])
        dt = res.table
        summary = pd.concat(
            [
                _summaries("lfc", table.taxa, res.params.B_draws[:, :, -1]),
                _summaries("log_scale", table.samples, res.logscale),
            ]
        )
    else:
        model = build_scale(cfg, table)
        fit_rng = rng.child("fit")
        comp = aldex.sample_compositions(table, cfg["gamma_prior"], cfg["S"], fit_rng.child("compositions"))
        ls = sample_log_scale(model, cfg["S"], fit_rng.child("scale").generator(), comp_draws=comp, counts=table)
        eta = aldex.compose_eta(comp, ls).values
        dt = decisions.decide(eta, labels, cfg["alpha_level"], cfg["mode"], taxa=table.taxa)
        g = _binary(labels).astype(bool)
        lfc = eta[:, :, g].mean(axis=2) - eta[:, :, ~g].mean(axis=2)
        summary = pd.concat([_summaries("lfc", table.taxa, lfc), _summaries("log_scale", table.samples, ls)])
    write_csv(dt.to_frame(), out / "decisions.csv")
    write_csv(summary, out / "draws_summary.csv")
    write_manifest(cfg, out, ["decisions.csv", "draws_summary.csv"])


def cmd_sensitivity(cfg, threads):
    rng = Rng(cfg["seed"])
    out = _outdir(cfg)
    table, _ = get_table(cfg, rng)
    grid = parse_grid(cfg["grid"])
    sg = antibiotic.sensitivity_sweep(
        table,
        labels=_labels(table, cfg),
        parameter=cfg["param"],
        grid=grid,
        base_gamma=cfg["base_gamma"],
        base_alpha=cfg["base_alpha"],
        S=cfg["S"],
        rng=rng.child("sweep"),
        gamma_prior=cfg["gamma_prior"],
        alpha_level=cfg["alpha_level"],
        threads=threads,
    )
    write_csv(sg.to_frame(), out / "sensitivity.csv")
    write_manifest(cfg, out, ["sensitivity.csv"])


def cmd_fdr_curve(cfg, threads):
    out = _outdir(cfg)
    sc = antibiotic.build_scenario(cfg["delta"], depth=cfg["depth"])
    est = cfg["estimators"] or ["clr", "mor", "relaxed"]
    for e in est:
        if e not in antibiotic.ESTIMATORS:
            raise ConfigError(f"unknown estimator '{e}'; choose from {list(antibiotic.ESTIMATORS)}")
    df = antibiotic.fdr_vs_n(sc, est, cfg["n_grid"], cfg["replicates"], rng=Rng(cfg["seed"]), S=cfg["S"], threads=threads)
    write_csv(df, out / "fdr_curve.csv")
    write_csv(antibiotic.summarize_fdr(df), out / "fdr_summary.csv")
    write_manifest(cfg, out, ["fdr_curve.csv", "fdr_summary.csv"])


def cmd_bootstrap(cfg, threads):
    rng = Rng(cfg["seed"])
    out = _outdir(cfg)
    sc = bioreactor.build_bioreactor()
    table = bioreactor.simulate_bioreactor(sc, rng.child("data"))
    est = cfg["estimators"] or ["clr", "mor", "design"]
    for e in est:
        if e not in bioreactor.BIOREACTOR_ESTIMATORS:
            raise ConfigError(f"unknown estimator '{e}'; choose from {list(bioreactor.BIOREACTOR_ESTIMATORS)}")
    df = bioreactor.vessel_bootstrap(
        table, sc.truth, cfg["vessels"], cfg["replicates"], est, S=cfg["S"], rng=rng.child("bootstrap"), threads=threads
    )
    summary = df.groupby(["estimator", "n_vessels"], sort=True)["fdr"].mean().reset_index(name="mean_fdr")
    write_csv(df, out / "bootstrap.csv")
    write_csv(summary, out / "bootstrap_summary.csv")
    write_manifest(cfg, out, ["bootstrap.csv", "bootstrap_summary.csv"])


def cmd_effective_scale(cfg, threads):
    rng = Rng(cfg["seed"])
    out = _outdir(cfg)
    table, _ = get_table(cfg, rng)
    theta, se = antibiotic.mor_point_estimates(table, labels=_labels(table, cfg))
    rep = antibiotic.effective_scale_report(theta, se, S=max(cfg["S"], 2), rng=rng.child("effective"))
    write_csv(pd.DataFrame({"log_scale_ratio": rep["grid"], "density": rep["density"]}), out / "effective_scale.csv")
    summary = pd.DataFrame([{k: rep[k] for k in ("mean", "sd", "q025", "q975")}])
    write_csv(summary, out / "effective_scale_summary.csv")
    write_manifest(cfg, out, ["effective_scale.csv", "effective_scale_summary.csv"])


HANDLERS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "sensitivity": cmd_sensitivity,
    "fdr-curve": cmd_fdr_curve,
    "bootstrap": cmd_bootstrap,
    "effective-scale": cmd_effective_scale,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("scalesim: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = resolve(args)
        HANDLERS[args.command](cfg, args.threads)
    except (ConfigError, CountTableError, ScaleModelError) as exc:
        print(f"scalesim: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MlnFitError, ParameterError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"scalesim: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
