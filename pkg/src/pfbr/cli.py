"""Command-line interface.

Subcommands::

    pfbr config --dump-defaults
    pfbr generate-tasks --config run.json --out tasks.json
    pfbr train --config run.json --tasks tasks.json --out model.ckpt
    pfbr infer --checkpoint model.ckpt --tasks tasks.json --out ensembles.json
    pfbr eval --ensembles ensembles.json --tasks tasks.json --out metrics.csv
    pfbr baselines --tasks tasks.json --algo smc --out metrics.csv

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Every artifact records the config fingerprint and seed (a leading
``#`` comment in CSV files, a ``header`` object in JSON files).
"""
import argparse
import copy
import csv
import json
import os
import sys
import warnings

import numpy as np

from . import metrics as mt
from .baselines import WeightedEnsemble, sgld_stagewise, smc_filter
from .errors import (BadLabelError, IoError, ConfigError, DegenerateWeightsError,
                     FormatVersionMismatchError, NoOracleError, NonFiniteError, NonSPDError,
                     ParseError, PFBRError, ShapeMismatchError)
from .flownet import FlowDims
from .models import Dataset, GaussianPosterior, LogisticRegressionModel, pca_project
from .particle_flow import draw_noise, initial_ensemble, sequential_inference
from .rng import Rng
from .tasks import FamilyConfig, GaussianPrior, InferenceTask, generate_training_set, make_batches
from .train import (Checkpoint, TrainConfig, config_fingerprint, load_checkpoint, meta_train,
                    save_checkpoint)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

FLOW_KEYS = ("e_x", "e_o", "k", "hidden", "phi_hidden", "g_hidden", "activation")

DEFAULTS = {
    "seed": 0,
    "family": FamilyConfig().to_dict(),
    "flow": {k: getattr(FlowDims(1, 1), k) for k in FLOW_KEYS},
    "train": TrainConfig().to_dict(),
    "validation": {"count": 10},
    "infer": {"n_particles": 128},
    "eval": {"metrics": ["mmd2", "cross_entropy", "integral"], "kernels": ["rbf"],
             "oracle": "auto", "reference_samples": 2000},
    "smc": {"n_particles": 128, "ess_threshold": 0.5},
    "sgld": {"step": 1e-3, "steps": 1000, "n_chains": 128},
    "dataset": {"path": None, "label_column": -1, "pca": None},
}


class DataWarning(UserWarning):
    """Recoverable oddities in input data (e.g. relabelled classes)."""


# ------------------------------------------------------------------ config

def _merge(base, override, where="config"):
    out = copy.deepcopy(base)
    for key, val in override.items():
        if key not in base:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if isinstance(base[key], dict) and key not in ("integrator",) and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}.{key}")
        elif key == "integrator" and isinstance(val, dict):
            out[key] = _merge(base[key], val, f"{where}.{key}")
        else:
            out[key] = val
    return out


def load_config(path=None, overrides=None):
    """Defaults merged with a JSON config file; unknown keys are rejected."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from err
        except json.JSONDecodeError as err:
            raise ConfigError(f"config {path} is not valid JSON: {err}") from err
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    # validate every section eagerly so bad values fail before any work
    family_config(cfg)
    train_config(cfg)
    flow_dims(cfg, 1, 1)
    if cfg["sgld"]["step"] is None or not cfg["sgld"]["step"] > 0:
        raise ConfigError("sgld.step: must be positive")
    if not 0 < cfg["smc"]["ess_threshold"] <= 1:
        raise ConfigError("smc.ess_threshold: must lie in (0, 1]")
    for name in cfg["eval"]["metrics"]:
        if name not in ("mmd2", "cross_entropy", "integral"):
            raise ConfigError(f"eval.metrics: unknown metric {name!r}")
    for kern in cfg["eval"]["kernels"]:
        if kern not in mt.KERNELS:
            raise ConfigError(f"eval.kernels: unknown kernel {kern!r}")
    if cfg["eval"]["oracle"] not in ("auto", "conjugate", "kalman", "reference"):
        raise ConfigError(f"eval.oracle: unknown oracle {cfg['eval']['oracle']!r}")
    return cfg


def family_config(cfg):
    try:
        return FamilyConfig.from_dict(dict(cfg["family"]))
    except ConfigError as err:
        raise ConfigError(f"family.{err}") from None
    except TypeError as err:
        raise ConfigError(f"family: {err}") from None


def train_config(cfg):
    try:
        return TrainConfig.from_dict(cfg["train"])
    except ConfigError as err:
        raise ConfigError(f"train.{err}") from None
    except TypeError as err:
        raise ConfigError(f"train: {err}") from None


def flow_dims(cfg, d, obs_dim):
    try:
        return FlowDims(d=d, obs_dim=obs_dim, **cfg["flow"])
    except (PFBRError, TypeError) as err:
        raise ConfigError(f"flow: {err}") from None


def header(cfg, seed=None):
    return {"fingerprint": config_fingerprint(cfg), "seed": cfg["seed"] if seed is None else seed}


def _comment(cfg):
    h = header(cfg)
    return f"# pfbr config={h['fingerprint']} seed={h['seed']}\n"


# ------------------------------------------------------------------ file IO

def _read_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as err:
        raise IoError(f"cannot read {what} {path}: {err}") from err
    except json.JSONDecodeError as err:
        raise ParseError(f"{what} {path} is not valid JSON: {err.msg}", err.lineno) from err


def _write_text(path, text):
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def _dump_json(obj):
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def save_tasks(path, tasks, cfg):
    doc = {"header": header(cfg), "format": "pfbr-tasks", "version": 1,
           "tasks": [t.to_dict() for t in tasks]}
    _write_text(path, _dump_json(doc))


def load_tasks(path):
    doc = _read_json(path, "task file")
    try:
        return [InferenceTask.from_dict(t) for t in doc["tasks"]]
    except (KeyError, TypeError) as err:
        raise ParseError(f"task file {path} is malformed: missing {err}") from err


def _fmt(x):
    return "" if x is None else format(float(x), ".17g")


def load_csv_dataset(path, label_column=-1, pca=None):
    """Read a numeric CSV with one label column.

    Blank lines and ``#`` comments are skipped, as is a first row that holds
    no numbers (a header). Labels ``{0, 1}`` are mapped to ``{-1, +1}`` with a
    :class:`DataWarning`; any other label set raises :class:`BadLabelError`.
    ``pca=k`` projects the features onto their top-``k`` components.
    """
    rows, width = [], None
    try:
        fh = open(path, newline="")
    except OSError as err:
        raise IoError(f"cannot read dataset {path}: {err}") from err
    with fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or not "".join(rec).strip() or rec[0].lstrip().startswith("#"):
                continue
            try:
                vals = [float(v) for v in rec]
            except ValueError:
                if not rows and width is None:
                    width = len(rec)
                    continue
                raise ParseError("non-numeric field", lineno) from None
            if width is None:
                width = len(vals)
            if len(vals) != width:
                raise ParseError(f"expected {width} fields, found {len(vals)}", lineno)
            if not np.all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            rows.append(vals)
    if not rows:
        raise ParseError("dataset has no rows", 1)
    data = np.array(rows)
    col = label_column % data.shape[1]
    labels = data[:, col]
    feats = np.delete(data, col, axis=1)
    if feats.shape[1] == 0:
        raise ParseError("dataset has no feature columns", 1)
    uniq = set(np.unique(labels).tolist())
    if not uniq <= {-1.0, 1.0}:
        if uniq <= {0.0, 1.0}:
            warnings.warn("labels {0, 1} mapped to {-1, +1}", DataWarning, stacklevel=2)
            labels = 2.0 * labels - 1.0
        else:
            raise BadLabelError(f"labels must be -1/+1 or 0/1, found {sorted(uniq)[:5]}")
    if pca is not None:
        feats = pca_project(feats, int(pca))[0]
    return Dataset(feats, labels)


# ------------------------------------------------------------------ commands

def cmd_config(args):
    if args.dump_defaults:
        sys.stdout.write(_dump_json(DEFAULTS))
        return EXIT_OK
    cfg = load_config(args.config)
    sys.stdout.write(_dump_json(cfg))
    return EXIT_OK


def _dataset_tasks(cfg, rng):
    ds_cfg = cfg["dataset"]
    ds = load_csv_dataset(ds_cfg["path"], ds_cfg["label_column"], ds_cfg["pca"])
    fam = family_config(cfg)
    model = LogisticRegressionModel(ds.features.shape[1])
    rows = ds.observations()
    need = fam.M * fam.L
    if need > rows.shape[0]:
        raise ConfigError(f"family.M: dataset has {rows.shape[0]} rows, tasks need {need}")
    tasks = []
    for _ in range(fam.n_tasks):
        perm = np.argsort(rng.uniform(rows.shape[0]))[:need]
        tasks.append(InferenceTask(GaussianPrior(model.prior), model, make_batches(rows[perm], fam.L)))
    return tasks


def cmd_generate_tasks(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.held_out:
        overrides["family"] = {"history": 0}
    cfg = load_config(args.config, overrides)
    rng = Rng(cfg["seed"])
    if cfg["dataset"]["path"]:
        if cfg["family"]["family"] != "blr":
            raise ConfigError("dataset.path: only the blr family reads a dataset")
        tasks = _dataset_tasks(cfg, rng)
    else:
        tasks = generate_training_set(family_config(cfg), rng)
    save_tasks(args.out, tasks, cfg)
    return EXIT_OK


def _split(tasks, count):
    if len(tasks) <= count or count < 1:
        return tasks, tasks
    return tasks[:-count], tasks[-count:]


def cmd_train(args):
    cfg = load_config(args.config)
    tasks = load_tasks(args.tasks)
    if not tasks:
        raise ConfigError("task file holds no tasks")
    tcfg = train_config(cfg)
    train, vali = _split(tasks, cfg["validation"]["count"])
    dims = flow_dims(cfg, tasks[0].model.d, tasks[0].model.obs_dim)
    history_path = args.history or _sibling(args.out, "history.csv")
    fp = config_fingerprint(cfg)
    best, hist = meta_train(train, vali, tcfg, dims=dims, checkpoint_path=args.out + ".diverged")
    ckpt = Checkpoint(best, hist.adam, tcfg.iterations, hist.best_vali, fp, hist.rng_state)
    save_checkpoint(ckpt, args.out)
    lines = [_comment(cfg), "iteration,train_loss,vali_loss\n"]
    for row in hist:
        lines.append(f"{row['iteration']},{_fmt(row['train_loss'])},{_fmt(row['vali_loss'])}\n")
    _write_text(history_path, "".join(lines))
    return EXIT_OK


def _sibling(path, name):
    return os.path.join(os.path.dirname(os.path.abspath(path)), name)


def cmd_infer(args):
    cfg = load_config(args.config)
    tasks = load_tasks(args.tasks)
    if not tasks:
        raise ConfigError("task file holds no tasks")
    n = cfg["infer"]["n_particles"]
    dims = flow_dims(cfg, tasks[0].model.d, tasks[0].model.obs_dim)
    ckpt = load_checkpoint(args.checkpoint, dims=None)
    if (ckpt.params.dims.d, ckpt.params.dims.obs_dim) != (dims.d, dims.obs_dim):
        raise ShapeMismatchError(
            f"checkpoint flow has d={ckpt.params.dims.d}, obs_dim={ckpt.params.dims.obs_dim}; "
            f"tasks need d={dims.d}, obs_dim={dims.obs_dim}")
    integ = train_config(cfg).integrator
    out = []
    for i, task in enumerate(tasks):
        rng = Rng(cfg["seed"]).spawn(i)
        ens = initial_ensemble(task.prior, rng, n)
        noise = draw_noise(task.model, rng, n, task.M)
        stages = sequential_inference(ens, task.model, task.observations, ckpt.params, integ,
                                      noise=noise)
        out.append({"task": i, "ensembles": [e.to_dict() for e in stages]})
    doc = {"header": header(cfg), "format": "pfbr-ensembles", "version": 1,
           "checkpoint": ckpt.fingerprint, "tasks": out}
    _write_text(args.out, _dump_json(doc))
    return EXIT_OK


def _stage_positions(rec, rng):
    x = np.asarray(rec["positions"], dtype=np.float64)
    x = x.reshape(-1, 1) if x.ndim == 1 else x
    if "logw" in rec:
        return WeightedEnsemble(x, rec["logw"]).resample(rng).positions
    return x


def _metric_rows(ens_doc, tasks, cfg, reference=None):
    ecfg = cfg["eval"]
    rows = {}
    for t_rec in ens_doc["tasks"]:
        i = t_rec["task"]
        if i >= len(tasks):
            raise ParseError(f"ensemble file refers to task {i}, task file has {len(tasks)}")
        task = tasks[i]
        truths = None
        if ecfg["oracle"] in ("auto", "conjugate", "kalman"):
            if ecfg["oracle"] == "kalman" and task.model.family != "lds":
                raise NoOracleError(f"no Kalman oracle for the {task.model.family} model")
            if ecfg["oracle"] == "conjugate" and task.model.family != "gaussian":
                raise NoOracleError(f"no conjugate oracle for the {task.model.family} model")
            try:
                truths = task.oracle()
            except NoOracleError:
                if reference is None or ecfg["oracle"] != "auto":
                    raise
        if truths is None and reference is None:
            raise NoOracleError("no exact posterior and no reference samples supplied")
        ref_tasks = {r["task"]: r for r in reference["tasks"]} if reference else {}
        for rec in t_rec["ensembles"]:
            m = rec["stage"]
            rng = Rng(cfg["seed"]).spawn(100_000 * (i + 1) + m)
            X = _stage_positions(rec, rng)
            if truths is not None:
                truth = truths[m - 1]
                ref = truth.sample(rng, ecfg["reference_samples"])
            else:
                if i not in ref_tasks:
                    raise NoOracleError(f"no reference samples for task {i}")
                ref = _stage_positions(ref_tasks[i]["ensembles"][m - 1], rng)
                truth = None
            vals = {}
            if "mmd2" in ecfg["metrics"]:
                for kern in ecfg["kernels"]:
                    vals[("mmd2", kern)] = mt.mmd2(X, ref, mt.KernelSpec(kern))
            if "cross_entropy" in ecfg["metrics"]:
                vals[("cross_entropy", "")] = mt.cross_entropy(ref, X)
            if "integral" in ecfg["metrics"]:
                if truth is None:
                    mu = ref.mean(axis=0)
                    truth = GaussianPosterior(mu, np.atleast_2d(np.cov(ref.T)) + 1e-12 * np.eye(mu.size))
                for name, v in zip(("integral_mean", "integral_quadratic", "integral_bilinear"),
                                   mt.integral_discrepancy(X, truth)):
                    vals[(name, "")] = v
            for key, v in vals.items():
                rows.setdefault((m,) + key, []).append(v)
    return [(m, name, kern, float(np.mean(v))) for (m, name, kern), v in sorted(rows.items())]


def _write_metrics(path, rows, cfg):
    lines = [_comment(cfg), "stage,metric,kernel,value\n"]
    lines += [f"{m},{name},{kern},{_fmt(v)}\n" for m, name, kern, v in rows]
    _write_text(path, "".join(lines))


def cmd_eval(args):
    cfg = load_config(args.config)
    tasks = load_tasks(args.tasks)
    ens_doc = _read_json(args.ensembles, "ensemble file")
    reference = _read_json(args.reference, "reference file") if args.reference else None
    _write_metrics(args.out, _metric_rows(ens_doc, tasks, cfg, reference), cfg)
    return EXIT_OK


def cmd_baselines(args):
    cfg = load_config(args.config)
    tasks = load_tasks(args.tasks)
    out = []
    for i, task in enumerate(tasks):
        rng = Rng(cfg["seed"]).spawn(i)
        if args.algo == "smc":
            c = cfg["smc"]
            stages = smc_filter(task.model, task.observations, rng, c["n_particles"],
                                prior=task.prior, ess_threshold=c["ess_threshold"])
            recs = [{"stage": m + 1, "positions": w.positions.tolist(), "logw": w.logw.tolist()}
                    for m, w in enumerate(stages)]
        else:
            c = cfg["sgld"]
            stages = sgld_stagewise(task, rng, c["n_chains"], c["step"], c["steps"])
            recs = [{"stage": m + 1, "positions": x.tolist()} for m, x in enumerate(stages)]
        out.append({"task": i, "ensembles": recs})
    doc = {"header": header(cfg), "format": "pfbr-ensembles", "version": 1,
           "algorithm": args.algo, "tasks": out}
    if args.ensembles_out:
        _write_text(args.ensembles_out, _dump_json(doc))
    try:
        rows = _metric_rows(doc, tasks, cfg)
    except NoOracleError as err:
        # the saved ensembles can still serve as a reference for eval
        if not args.ensembles_out:
            raise
        warnings.warn(f"{err}; metrics skipped", DataWarning, stacklevel=2)
        rows = []
    _write_metrics(args.out, rows, cfg)
    return EXIT_OK


# ------------------------------------------------------------------ entry point

def build_parser():
    p = argparse.ArgumentParser(prog="pfbr", description="Particle flow Bayes' rule toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("config", help="print the default or effective configuration")
    c.add_argument("--dump-defaults", action="store_true")
    c.add_argument("--config")
    c.set_defaults(func=cmd_config)

    g = sub.add_parser("generate-tasks", help="create a task file")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--held-out", action="store_true",
                   help="start every task from the model prior (exact posteriors available)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_tasks)

    t = sub.add_parser("train", help="meta-train a flow on a task file")
    t.add_argument("--config")
    t.add_argument("--tasks", required=True)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV (default: history.csv next to --out)")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="run a trained flow on every task")
    i.add_argument("--config")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--tasks", required=True)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score ensembles against exact posteriors")
    e.add_argument("--config")
    e.add_argument("--ensembles", required=True)
    e.add_argument("--tasks", required=True)
    e.add_argument("--reference", help="ensemble file used as ground truth when no oracle exists")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baselines", help="run SMC or SGLD and score them")
    b.add_argument("--config")
    b.add_argument("--tasks", required=True)
    b.add_argument("--algo", choices=("smc", "sgld"), required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--ensembles-out")
    b.set_defaults(func=cmd_baselines)
    return p


def exit_code(err):
    if isinstance(err, ConfigError):
        return EXIT_CONFIG
    if isinstance(err, (NonFiniteError, DegenerateWeightsError, NonSPDError)):
        return EXIT_NUMERIC
    return EXIT_DATA


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (PFBRError, FormatVersionMismatchError) as err:
        print(f"pfbr {args.command}: {type(err).__name__}: {err}", file=sys.stderr)
        return exit_code(err)


if __name__ == "__main__":
    sys.exit(main())
