"""bcdm command line: generate toy data, train, and run the diagnostics.

Exit status: 0 on success, 2 for usage, config or data errors, 3 when training
diverges numerically. Diagnostics go to stderr (level from BCDM_LOG=quiet|info|debug);
results go to files, plus a one-line summary on stdout where noted.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import analysis, theory
from .data import LabeledDataset, load_csv, save_csv, toy_domains
from .errors import DataFormatError, InvalidArgument, ModelFormatError, NumericalDivergence
from .trainer import TrainConfig, evaluate, models_from_json, models_to_json, train

log = logging.getLogger("bcdm")

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
GENERATOR_KEYS = {"n_per_class", "rotation", "noise_sd", "seed"}
DEFAULT_BOX = ((-2.0, 3.0), (-2.0, 2.5))


class UsageError(Exception):
    pass


def _setup_logging():
    level = os.environ.get("BCDM_LOG", "info").lower()
    if level not in LOG_LEVELS:
        raise UsageError(f"BCDM_LOG must be one of {', '.join(LOG_LEVELS)}, got {level!r}")
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("bcdm")
    root.handlers[:] = [handler]
    root.setLevel(LOG_LEVELS[level])
    root.propagate = False


def _outdir(path):
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create output directory {p}: {e.strerror}") from None
    return p


def _outfile(path):
    p = Path(path)
    if p.parent != Path(""):
        _outdir(p.parent)
    return p


# -- gen ------------------------------------------------------------------------

def cmd_gen(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if args.noise < 0:
        raise UsageError("--noise must be >= 0")
    src, tgt = toy_domains(args.n, args.rotation, args.noise, args.seed)
    out = _outdir(args.out)
    save_csv(src, out / "source.csv")
    save_csv(tgt.unlabeled(), out / "target.csv")
    save_csv(tgt, out / "target_labels.csv")
    log.info("wrote %d source and %d target rows to %s", len(src), len(tgt), out)


# -- train ----------------------------------------------------------------------

def _parse_generator(spec):
    """'n_per_class=100,rotation=30' -> dict (a bare 'moons' gives the defaults)."""
    out = {}
    scenario, sep, rest = spec.partition(":")
    if scenario.strip() != "moons":
        if sep:
            raise UsageError(f"unknown generator scenario {scenario!r}")
        rest = spec
    for item in rest.split(","):
        item = item.strip()
        if not item or item == "moons":
            continue
        key, sep, value = item.partition("=")
        key = key.strip().replace("-", "_")
        if key == "n":
            key = "n_per_class"
        if not sep or key not in GENERATOR_KEYS:
            raise UsageError(f"bad generator item {item!r}; keys are {', '.join(sorted(GENERATOR_KEYS))}")
        try:
            out[key] = int(value) if key in ("n_per_class", "seed") else float(value)
        except ValueError:
            raise UsageError(f"generator item {item!r} is not numeric") from None
    return out


def _load_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as e:
        raise UsageError(f"cannot read config {path}: {e.strerror}") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as e:
        raise UsageError(f"config {path}: {e.msg} at line {e.lineno} column {e.colno}") from None
    if not isinstance(obj, dict):
        raise UsageError(f"config {path}: top level must be an object")
    return obj


def _train_field_type(f):
    if f.name.endswith("_dims"):
        return lambda s: [int(v) for v in s.split(",")]
    return {"method": str, "hidden_activation": str}.get(f.name, type(f.default))


def _resolve_run(args):
    raw = _load_config(args.config) if args.config else {}
    data = {k: raw.pop(k) for k in ("source", "target", "eval_target", "generator") if k in raw}
    for f in fields(TrainConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            raw[f.name] = v
    for key in ("source", "target", "eval_target"):
        if getattr(args, key) is not None:
            data[key] = getattr(args, key)
    if args.generator is not None:
        data["generator"] = _parse_generator(args.generator)
    try:
        cfg = TrainConfig.from_dict(raw)
        cfg.validate()
    except (InvalidArgument, TypeError) as e:
        raise UsageError(f"config: {e}") from None
    return cfg, data


def _domains(cfg, data):
    has_paths = "source" in data or "target" in data
    gen = data.get("generator")
    if has_paths and gen is not None:
        raise UsageError("give either dataset paths or a generator spec, not both")
    if gen is not None:
        if not isinstance(gen, dict) or set(gen) - GENERATOR_KEYS:
            raise UsageError(f"generator keys are {', '.join(sorted(GENERATOR_KEYS))}")
        if "eval_target" in data:
            raise UsageError("a generated target already carries its evaluation labels")
        spec = {"seed": cfg.seed, **gen}
        src, tgt = toy_domains(spec.get("n_per_class", 100), spec.get("rotation", 30.0),
                               spec.get("noise_sd", 0.05), spec["seed"])
        return src, tgt.unlabeled(), tgt
    if "source" not in data or "target" not in data:
        raise UsageError("need --source and --target paths (or a generator spec)")
    src = load_csv(data["source"])
    if not isinstance(src, LabeledDataset):
        raise UsageError(f"{data['source']}: source data needs a label column")
    tgt = load_csv(data["target"])
    ev = load_csv(data["eval_target"]) if "eval_target" in data else None
    if ev is not None and not isinstance(ev, LabeledDataset):
        raise UsageError(f"{data['eval_target']}: evaluation data needs a label column")
    # target labels, if the file has any, are only used for evaluation
    if isinstance(tgt, LabeledDataset):
        ev = ev if ev is not None else tgt
        tgt = tgt.unlabeled()
    return src, tgt, ev


def cmd_train(args):
    cfg, data = _resolve_run(args)
    src, tgt, ev = _domains(cfg, data)
    out = _outdir(args.out)
    log.info("training %s for %d iterations (seed %d)", cfg.method, cfg.max_iteration, cfg.seed)
    # divergence is detected explicitly; numpy's overflow chatter adds nothing
    with np.errstate(over="ignore", invalid="ignore"):
        models, tlog = train(cfg, src, tgt, ev)
    (out / "model.json").write_text(models_to_json(models), newline="\n")
    tlog.to_csv(out / "trainlog.csv")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", newline="\n")
    if ev is not None:
        print(f"target_accuracy {evaluate(models, ev).accuracy:.4f}")


# -- analyze -----------------------------------------------------------------------

def _load_models(path):
    try:
        with open(path) as fh:
            return models_from_json(fh.read())
    except OSError as e:
        raise UsageError(f"cannot read model {path}: {e.strerror}") from None


def cmd_boundary(args):
    models = _load_models(args.model)
    if args.data:
        grid = analysis.GridSpec.around(load_csv(args.data).features, args.nx, args.ny)
    else:
        grid = analysis.GridSpec(DEFAULT_BOX[0], DEFAULT_BOX[1], args.nx, args.ny)
    raster = analysis.boundary_raster(models, grid)
    out = _outfile(args.out)
    analysis.write_pgm(raster, out)
    analysis.write_raster_csv(raster, out.with_suffix(".csv"))


def cmd_histogram(args):
    models = _load_models(args.model)
    hist = analysis.determinacy_histogram(models, load_csv(args.data), args.bins)
    analysis.write_histogram_csv(hist, _outfile(args.out))


def cmd_agreement(args):
    models = _load_models(args.model)
    mat = analysis.agreement_matrix(models, load_csv(args.data))
    analysis.write_matrix_csv(mat, _outfile(args.out))


def cmd_adistance(args):
    fs, ft = load_csv(args.source).features, load_csv(args.target).features
    if args.model:
        g = _load_models(args.model).G
        fs, ft = g.predict(fs), g.predict(ft)
    d = analysis.proxy_a_distance(fs, ft, seed=args.seed)
    if args.out:
        _outfile(args.out).write_text(f"a_distance\n{d:.17g}\n", newline="\n")
    print(f"a_distance {d:.4f}")


def cmd_svd(args):
    models = _load_models(args.model)
    spectrum = analysis.svd_spectrum(models.G.predict(load_csv(args.data).features))
    analysis.write_spectrum_csv(spectrum, _outfile(args.out))


def cmd_bound(args):
    models = _load_models(args.model)
    src, tgt = load_csv(args.source), load_csv(args.target)
    if not isinstance(src, LabeledDataset) or not isinstance(tgt, LabeledDataset):
        raise UsageError("bound needs labeled source and labeled (evaluation) target files")
    budgets = theory.BoundBudgets(
        ddd_steps=args.ddd_steps,
        ddd_restarts=args.ddd_restarts,
        rademacher_trials=args.rademacher_trials,
        rademacher_steps=args.rademacher_steps,
        joint_iterations=args.joint_iterations,
    )
    report = theory.bound_report(theory.Stack.from_models(models), src, tgt, args.delta, budgets, args.seed)
    report.to_csv(_outfile(args.out))
    print(f"bound {report.bound:.4f} target_error {report.target_error:.4f} {'holds' if report.holds else 'violated'}")


# -- parser ----------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="bcdm", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a toy domain-shift dataset")
    gen.add_argument("scenario", choices=["moons"])
    gen.add_argument("--n", type=int, default=100, help="samples per class")
    gen.add_argument("--rotation", type=float, default=30.0, help="target rotation in degrees")
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train source_only, mcd_l1 or bcdm")
    tr.add_argument("--config", help="JSON file with TrainConfig fields and optional source/target/"
                    "eval_target paths or a generator object")
    tr.add_argument("--out", required=True)
    tr.add_argument("--source")
    tr.add_argument("--target")
    tr.add_argument("--eval-target", dest="eval_target")
    tr.add_argument("--generator", help="e.g. 'moons:n=100,rotation=30,noise_sd=0.05,seed=0'")
    for f in fields(TrainConfig):
        tr.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=_train_field_type(f), default=None)
    tr.set_defaults(func=cmd_train)

    an = sub.add_parser("analyze", help="diagnostics on a trained model")
    asub = an.add_subparsers(dest="analysis", required=True)

    b = asub.add_parser("boundary")
    b.add_argument("--model", required=True)
    b.add_argument("--data", help="CSV whose bounding box (padded 20%%) sets the grid")
    b.add_argument("--nx", type=int, default=200)
    b.add_argument("--ny", type=int, default=200)
    b.add_argument("--out", required=True, help="PGM path; a .csv sidecar is written next to it")
    b.set_defaults(func=cmd_boundary)

    h = asub.add_parser("histogram")
    h.add_argument("--model", required=True)
    h.add_argument("--data", required=True)
    h.add_argument("--bins", type=int, default=10)
    h.add_argument("--out", required=True)
    h.set_defaults(func=cmd_histogram)

    a = asub.add_parser("agreement")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_agreement)

    d = asub.add_parser("a-distance")
    d.add_argument("--source", required=True)
    d.add_argument("--target", required=True)
    d.add_argument("--model", help="measure on generator features instead of raw inputs")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out")
    d.set_defaults(func=cmd_adistance)

    s = asub.add_parser("svd")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_svd)

    bd = asub.add_parser("bound")
    bd.add_argument("--model", required=True)
    bd.add_argument("--source", required=True)
    bd.add_argument("--target", required=True, help="labeled target, used for lambda and the observed error")
    bd.add_argument("--delta", type=float, default=0.1)
    bd.add_argument("--seed", type=int, default=0)
    defaults = theory.BoundBudgets()
    for name in ("ddd_steps", "ddd_restarts", "rademacher_trials", "rademacher_steps", "joint_iterations"):
        bd.add_argument("--" + name.replace("_", "-"), dest=name, type=int, default=getattr(defaults, name))
    bd.add_argument("--out", required=True)
    bd.set_defaults(func=cmd_bound)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        _setup_logging()
        args = parser.parse_args(argv)
        args.func(args)
    except SystemExit as e:
        # argparse reports usage problems with status 2 already
        return e.code if isinstance(e.code, int) else 2
    except NumericalDivergence as e:
        log.error("numerical divergence: %s", e)
        return 3
    except (UsageError, InvalidArgument, DataFormatError, ModelFormatError) as e:
        log.error("%s", e)
        return 2
    except OSError as e:
        log.error("%s", e)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
