"""
Command-line entry point: simulate, extract, train, predict, baseline,
evaluate, report and pipeline.

Every subcommand flag can also be set in a flat ``key = value`` config file
as ``<subcommand>.<flag>`` (dashes become underscores), e.g.
``simulate.counts = 4,4,4,4`` or ``train.dim = 8``. Top-level keys are
``seed``, ``out`` and ``verbosity``. Seeds resolve as command-line flag,
then the GRIDFAULT_SEED environment variable, then the config file.
"""
import argparse
import csv
import hashlib
import io
import json
import logging
import os
import shutil
import sys
import warnings
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__
from .arcsim import CATEGORIES, DOMAINS, ArcSimError, GenerationConfig, _atomic_write, \
    dataset_hash, generate_dataset, write_dataset
from .wavefeat import FEATURE_RATE, FeatureError, extract_dataset, fit_normalizer, read_features, \
    write_features

log = logging.getLogger("gridfault")

SEED_ENV = "GRIDFAULT_SEED"
DEFAULT_SEED = 42
GLOBAL_KEYS = ("seed", "out", "verbosity")
FEATURES_NAME = "features.csv"


class CliError(Exception):
    kind = "Error"
    code = 1


class UsageError(CliError):
    kind = "UsageError"
    code = 2


class UnknownFlagError(CliError):
    kind = "UnknownFlag"
    code = 2


class InvalidValueError(CliError):
    kind = "InvalidValue"
    code = 3


class ConfigError(CliError):
    kind = "ConfigError"
    code = 3


class MissingInputError(CliError):
    kind = "MissingInput"
    code = 4


class StageError(CliError):
    kind = "StageError"
    code = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        if "unrecognized arguments" in message:
            raise UnknownFlagError(message)
        if "invalid" in message and "value" in message:
            raise InvalidValueError(message)
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Value parsers


def _int_list(n: Optional[int] = None):
    def parse(text):
        try:
            vals = [int(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid integer list value: {text!r}") from None
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}: expected {n} integers")
        return tuple(vals)
    return parse


def _float_list(n: Optional[int] = None):
    def parse(text):
        try:
            vals = [float(v) for v in str(text).split(",") if v.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid number list value: {text!r}") from None
        if n is not None and len(vals) != n:
            raise argparse.ArgumentTypeError(f"invalid value {text!r}: expected {n} numbers")
        return tuple(vals)
    return parse


def _models(text):
    from .evalharness import MODELS
    vals = tuple(v.strip() for v in str(text).split(",") if v.strip())
    bad = [v for v in vals if v not in MODELS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"invalid models value {text!r}; choose from {','.join(MODELS)}")
    return vals


def _protocols(text):
    vals = _int_list()(text)
    if not vals or any(v not in (1, 2) for v in vals):
        raise argparse.ArgumentTypeError(f"invalid protocol value {text!r}; use 1, 2 or 1,2")
    return vals


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    p = _Parser(prog="gridfault", description=__doc__.strip().splitlines()[0],
                epilog=f"Config keys: <subcommand>.<flag>; seed precedence: flag > ${SEED_ENV} > config.")
    p.add_argument("--version", action="version", version=f"gridfault {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("-v", "--verbose", action="count", default=None, dest="verbosity",
                        help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic event dataset")
    s.add_argument("--out", help="dataset directory")
    s.add_argument("--seed", type=int, help="dataset seed")
    s.add_argument("--counts", type=_int_list(4), metavar="SIF,MIF,PF,TD",
                   help="records per category for the selected domain(s)")
    s.add_argument("--domain", choices=DOMAINS, help="generate one domain only (default both)")
    s.add_argument("--source-snr", type=float, metavar="DB", help="source-domain SNR (default 45)")
    s.add_argument("--shift-snr", type=_float_list(2), metavar="LO,HI",
                   help="shifted-domain SNR range in dB (default 25,40)")
    s.add_argument("--impedance-jitter", type=float, help="relative impedance spread of the shifted domain")
    s.add_argument("--frequency-range", type=_float_list(2), metavar="LO,HI",
                   help="shifted-domain system frequency range in Hz")
    s.add_argument("--gain-jitter", type=float, help="relative per-channel gain spread of the shifted domain")

    s = sub.add_parser("extract", parents=[common], help="compute feature vectors for a dataset")
    s.add_argument("--in", dest="input", help="dataset directory")
    s.add_argument("--out", help="feature file to write")
    s.add_argument("--resample", type=float, default=None, metavar="HZ",
                   help=f"common feature rate (default {FEATURE_RATE:g}; 0 keeps each record's rate)")

    s = sub.add_parser("train", parents=[common], help="train the association embedding")
    s.add_argument("--source", help="labeled source feature file")
    s.add_argument("--target", help="unlabeled target feature file")
    s.add_argument("--out", help="model file to write")
    s.add_argument("--dim", type=int, help="embedding dimension (default 8)")
    s.add_argument("--lw", type=float, help="walker loss weight (default 1.0)")
    s.add_argument("--lv", type=float, help="visit loss weight (default 0.5)")
    s.add_argument("--lr", type=float, help="learning rate (default 0.01)")
    s.add_argument("--epochs", type=int, help="maximum epochs (default 2000)")
    s.add_argument("--patience", type=int, help="early-stopping patience (default 200)")
    s.add_argument("--seed", type=int, help="initialization seed")

    s = sub.add_parser("predict", parents=[common], help="classify feature vectors with a trained model")
    s.add_argument("--model", help="model file")
    s.add_argument("--features", help="feature file")
    s.add_argument("--out", help="predictions file to write")

    s = sub.add_parser("baseline", parents=[common], help="KNN or SVM predictions")
    s.add_argument("--algo", choices=("knn", "svm"), help="baseline algorithm")
    s.add_argument("--train", help="labeled training feature file")
    s.add_argument("--test", help="feature file to classify")
    s.add_argument("--select-on", choices=("validation", "train-loo"), help="KNN K selection rule")
    s.add_argument("--validation", help="labeled validation feature file (default: a seeded "
                                        "validation split of the test file)")
    s.add_argument("--seed", type=int, help="seed for the validation split")
    s.add_argument("--out", help="predictions file to write")

    s = sub.add_parser("evaluate", parents=[common], help="run the repeated experiment")
    s.add_argument("--protocol", type=_protocols, metavar="1|2",
                   help="1: validation labels for selection; 2: labels withheld (1,2 runs both)")
    s.add_argument("--reps", type=int, help="repetitions (default 10)")
    s.add_argument("--seed", type=int, help="experiment seed")
    s.add_argument("--data", help="dataset directory (generated if absent)")
    s.add_argument("--features", help="precomputed feature file (overrides --data)")
    s.add_argument("--out", help="report directory")
    s.add_argument("--models", type=_models, metavar="apl,knn,svm", help="models to evaluate")
    s.add_argument("--checkpoint-every", type=int, help="epochs between checkpoints (protocol 1)")
    s.add_argument("--lv-grid", type=_float_list(), metavar="A,B", help="visit weights searched in protocol 1")
    s.add_argument("--dim-grid", type=_int_list(), metavar="A,B", help="dimensions searched in protocol 1")

    s = sub.add_parser("report", parents=[common], help="render a report directory")
    s.add_argument("--in", dest="input", help="report directory")
    s.add_argument("--format", choices=("table", "csv", "scatter"), help="rendering (default table)")

    s = sub.add_parser("pipeline", parents=[common], help="simulate, extract and evaluate with stage caching")
    s.add_argument("--out", help="working directory for stage outputs")
    s.add_argument("--seed", type=int, help="global seed")
    return p


def _subparsers(parser) -> Dict[str, argparse.ArgumentParser]:
    for a in parser._actions:
        if isinstance(a, argparse._SubParsersAction):
            return dict(a.choices)
    return {}


def _option_actions(sp) -> Dict[str, argparse.Action]:
    return {a.dest: a for a in sp._actions
            if a.option_strings and a.dest not in ("help", "config", "verbosity")}


# ---------------------------------------------------------------------------
# Config file


def read_config(path: str) -> Dict[str, str]:
    """Parse ``key = value`` lines; blank lines and ``#`` comments are ignored."""
    if not os.path.exists(path):
        raise MissingInputError(f"config file not found: {path}")
    out: Dict[str, str] = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{n}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            if k in out:
                raise ConfigError(f"{path}:{n}: duplicate key {k!r}")
            out[k] = v
    return out


def validate_config(cfg: Dict[str, str], parser=None) -> Dict[str, Dict[str, object]]:
    """Check every key and convert values with the matching flag's parser.

    Returns {section: {dest: value}} with section "" for top-level keys.
    """
    parser = parser or build_parser()
    subs = _subparsers(parser)
    out: Dict[str, Dict[str, object]] = {"": {}}
    for key, raw in cfg.items():
        if key in GLOBAL_KEYS:
            conv = {"seed": int, "verbosity": int, "out": str}[key]
            try:
                out[""][key] = conv(raw)
            except ValueError:
                raise ConfigError(f"invalid value for {key}: {raw!r}") from None
            continue
        section, _, name = key.partition(".")
        if section not in subs or not name:
            raise ConfigError(f"unknown config key {key!r}")
        actions = _option_actions(subs[section])
        dest = name.replace("-", "_")
        if dest not in actions:
            raise ConfigError(f"unknown config key {key!r}")
        act = actions[dest]
        try:
            val = act.type(raw) if act.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise ConfigError(f"invalid value for {key}: {exc}") from None
        if act.choices is not None and val not in act.choices:
            raise ConfigError(f"invalid value for {key}: {raw!r} not in {sorted(act.choices)}")
        out.setdefault(section, {})[dest] = val
    return out


def config_lines(section: str, values: Dict[str, object]) -> List[str]:
    """Inverse of validate_config for one section."""
    lines = []
    for dest, val in values.items():
        if isinstance(val, (tuple, list)):
            text = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in val)
        elif isinstance(val, float):
            text = repr(val)
        else:
            text = str(val)
        lines.append(f"{section}.{dest} = {text}")
    return lines


def _merge(args, section: str, cfg: Dict[str, Dict[str, object]]) -> None:
    """Fill unset flags from the config; the command line wins."""
    for dest, val in cfg.get(section, {}).items():
        if getattr(args, dest, None) is None:
            setattr(args, dest, val)
    glob = cfg.get("", {})
    if getattr(args, "out", None) is None and "out" in glob and section in ("simulate", "evaluate", "pipeline"):
        args.out = glob["out"]
    if getattr(args, "verbosity", None) is None:
        args.verbosity = glob.get("verbosity", 0)


def resolve_seed(flag: Optional[int], section_cfg: Dict[str, object], global_cfg: Dict[str, object]) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError:
            raise InvalidValueError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if "seed" in section_cfg:
        return int(section_cfg["seed"])
    return int(global_cfg.get("seed", DEFAULT_SEED))


def _require(args, *names):
    missing = [n for n in names if getattr(args, n, None) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): "
                         + ", ".join("--" + m.replace("_", "-") for m in missing))


def _require_file(path: str, what: str):
    if not os.path.exists(path):
        raise MissingInputError(f"{what} not found: {path}")


# ---------------------------------------------------------------------------
# Subcommands


def generation_config(args) -> GenerationConfig:
    base = GenerationConfig()
    kw = {}
    domains = (args.domain,) if getattr(args, "domain", None) else DOMAINS
    if getattr(args, "counts", None) is not None:
        for d in domains:
            kw["source_counts" if d == "source" else "shifted_counts"] = args.counts
    if getattr(args, "domain", None):
        kw["domains"] = domains
    for flag, name in (("source_snr", "source_snr_db"), ("shift_snr", "shifted_snr_db"),
                       ("impedance_jitter", "impedance_jitter"), ("frequency_range", "frequency_range"),
                       ("gain_jitter", "gain_jitter")):
        if getattr(args, flag, None) is not None:
            kw[name] = getattr(args, flag)
    try:
        return GenerationConfig(**{**base.__dict__, **kw})
    except (ArcSimError, ValueError) as exc:
        raise InvalidValueError(str(exc)) from None


def cmd_simulate(args, cfg) -> int:
    _require(args, "out")
    seed = resolve_seed(args.seed, cfg.get("simulate", {}), cfg[""])
    gen = generation_config(args)
    manifest = generate_dataset(gen, seed)
    write_dataset(manifest, args.out)
    digest = dataset_hash(args.out)
    print(f"simulate: {len(manifest.records)} records -> {args.out} (sha256 {digest})")
    return 0


def cmd_extract(args, cfg) -> int:
    _require(args, "input", "out")
    _require_file(os.path.join(args.input, "manifest.json"), "dataset manifest")
    rate = FEATURE_RATE if args.resample is None else (args.resample or None)
    vectors = extract_dataset(args.input, rate)
    write_features(args.out, vectors)
    print(f"extract: {len(vectors)} feature vectors -> {args.out}")
    return 0


def _load_features(path: str, what: str):
    _require_file(path, what)
    try:
        return read_features(path)
    except FeatureError as exc:
        raise InvalidValueError(str(exc)) from None


def _pick_domain(vectors, want_source: bool):
    domains = {v.domain for v in vectors}
    if len(domains) <= 1:
        return list(vectors)
    return [v for v in vectors if (v.domain == "source") == want_source]


def cmd_train(args, cfg) -> int:
    from .aplcore import Hyperparams, save_model, train
    _require(args, "source", "target", "out")
    src = _pick_domain(_load_features(args.source, "source features"), True)
    tgt = _pick_domain(_load_features(args.target, "target features"), False)
    if any(v.label not in CATEGORIES for v in src):
        raise InvalidValueError("source features must all be labeled")
    seed = resolve_seed(args.seed, cfg.get("train", {}), cfg[""])
    base = Hyperparams()
    try:
        hyper = Hyperparams(
            d=args.dim if args.dim is not None else base.d,
            lambda_w=args.lw if args.lw is not None else base.lambda_w,
            lambda_v=args.lv if args.lv is not None else base.lambda_v,
            learning_rate=args.lr if args.lr is not None else base.learning_rate,
            max_epochs=args.epochs if args.epochs is not None else base.max_epochs,
            patience=args.patience if args.patience is not None else base.patience,
            seed=seed)
    except ValueError as exc:
        raise InvalidValueError(str(exc)) from None
    norm = fit_normalizer(src + tgt)
    Xs = norm.apply(np.array([v.values for v in src]))
    Xt = norm.apply(np.array([v.values for v in tgt]))
    ys = np.array([CATEGORIES.index(v.label) for v in src])
    try:
        res = train(Xs, ys, Xt, hyper, norm)
    except ValueError as exc:
        raise InvalidValueError(str(exc)) from None
    save_model(res.model, args.out)
    terms = ", ".join(f"{k}={v:.4f}" for k, v in res.final_terms.items())
    print(f"train: {res.epochs_run} epochs, {terms} -> {args.out}")
    return 0


def _write_predictions(path: str, vectors, pred, scores=None, score_names=()):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record_id", "domain", "predicted", "label"] + [f"score_{c}" for c in score_names])
    for k, v in enumerate(vectors):
        row = [v.record_id, v.domain, CATEGORIES[int(pred[k])], v.label or ""]
        if scores is not None:
            row += [f"{s:.6f}" for s in scores[k]]
        w.writerow(row)
    _atomic_write(path, buf.getvalue())


def cmd_predict(args, cfg) -> int:
    from .aplcore import load_model, predict
    _require(args, "model", "features", "out")
    _require_file(args.model, "model file")
    try:
        model = load_model(args.model)
    except (ValueError, KeyError) as exc:
        raise InvalidValueError(f"{args.model}: not a model file ({exc})") from None
    vectors = _load_features(args.features, "features")
    X = np.array([v.values for v in vectors])
    if model.normalizer is not None:
        X = model.normalizer.apply(X)
    pred, scores = predict(model, X)
    _write_predictions(args.out, vectors, pred, scores, CATEGORIES)
    print(f"predict: {len(vectors)} predictions -> {args.out}")
    return 0


def cmd_baseline(args, cfg) -> int:
    from .baselines import knn_fit, knn_predict, knn_select_k, svm_predict, svm_select
    from .evalharness import make_splits
    _require(args, "algo", "train", "test", "out")
    tr = _load_features(args.train, "training features")
    te = _load_features(args.test, "test features")
    if any(v.label not in CATEGORIES for v in tr):
        raise InvalidValueError("training features must all be labeled")
    norm = fit_normalizer(tr + te)
    Xs = norm.apply(np.array([v.values for v in tr]))
    ys = np.array([CATEGORIES.index(v.label) for v in tr])
    Xq = norm.apply(np.array([v.values for v in te]))
    if args.algo == "svm":
        model = svm_select(Xs, ys)
        pred = svm_predict(model, Xq)
        info = f"degree={model.degree}"
    else:
        if (args.select_on or "train-loo") == "train-loo":
            k = knn_select_k(Xs, ys, leave_one_out=True)
        else:
            if args.validation:
                val = _load_features(args.validation, "validation features")
            else:
                seed = resolve_seed(args.seed, cfg.get("baseline", {}), cfg[""])
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    split = make_splits(len(te), 1, seed)
                val = [te[i] for i in split.validation]
            if any(v.label not in CATEGORIES for v in val):
                raise InvalidValueError("validation selection needs labeled validation features")
            k = knn_select_k(Xs, ys, norm.apply(np.array([v.values for v in val])),
                             [CATEGORIES.index(v.label) for v in val])
        pred = knn_predict(knn_fit(Xs, ys, k), Xq)
        info = f"K={k}"
    _write_predictions(args.out, te, pred)
    print(f"baseline: {args.algo} ({info}), {len(te)} predictions -> {args.out}")
    return 0


def _experiment_config(args, protocol: int, seed: int, hyper=None, generation=None):
    from .aplcore import Hyperparams
    from .evalharness import ExperimentConfig
    kw = dict(protocol=protocol, seed=seed)
    if args.reps is not None:
        kw["repetitions"] = args.reps
    if args.models is not None:
        kw["models"] = args.models
    if args.checkpoint_every is not None:
        kw["checkpoint_every"] = args.checkpoint_every
    if args.lv_grid is not None:
        kw["lambda_v_grid"] = args.lv_grid
    if args.dim_grid is not None:
        kw["dim_grid"] = args.dim_grid
    if hyper is not None:
        kw["hyper"] = hyper
    if generation is not None:
        kw["generation"] = generation
    try:
        return ExperimentConfig(**kw)
    except ValueError as exc:
        raise InvalidValueError(str(exc)) from None


def _evaluate(args, features, seed, out_dir, hyper=None, generation=None) -> List[str]:
    from .evalharness import emit_report, run_experiment
    written = []
    protocols = args.protocol or (1,)
    for proto in protocols:
        config = _experiment_config(args, proto, seed, hyper, generation)
        report = run_experiment(config, features)
        target = out_dir if len(protocols) == 1 else os.path.join(out_dir, f"protocol{proto}")
        emit_report(report, target)
        for m in report.models():
            s = report.summary(m)
            print(f"evaluate: protocol {proto} {m} macro-F1 {s['mean']:.4f} "
                  f"[{s['min']:.4f}, {s['max']:.4f}] over {s['n']} reps")
        written.append(target)
    return written


def cmd_evaluate(args, cfg) -> int:
    _require(args, "out")
    seed = resolve_seed(args.seed, cfg.get("evaluate", {}), cfg[""])
    if args.features:
        features = _load_features(args.features, "features")
    elif args.data:
        if not os.path.exists(os.path.join(args.data, "manifest.json")):
            log.info("no dataset at %s; generating one (seed %d)", args.data, seed)
            write_dataset(generate_dataset(GenerationConfig(), seed), args.data)
        cached = os.path.join(args.data, FEATURES_NAME)
        if os.path.exists(cached):
            features = read_features(cached)
        else:
            features = extract_dataset(args.data)
            write_features(cached, features)
    else:
        raise UsageError("evaluate: one of --data or --features is required")
    _evaluate(args, features, seed, args.out)
    return 0


def cmd_report(args, cfg) -> int:
    from .evalharness import RENDERERS, load_report
    _require(args, "input")
    _require_file(os.path.join(args.input, "report.json"), "report")
    report = load_report(args.input)
    fmt = args.format or "table"
    name, render = RENDERERS[fmt]
    text = render(report)
    _atomic_write(os.path.join(args.input, name), text)
    sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# Pipeline


def _stage_hash(name: str, params: dict, upstream: str = "") -> str:
    blob = json.dumps({"stage": name, "params": params, "upstream": upstream, "version": __version__},
                      sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _run_stage(root: str, name: str, digest: str, work) -> str:
    """Run ``work(tmp_dir)`` unless a completed output for ``digest`` exists.

    Output goes to a temporary directory renamed into place on success, so an
    interrupted stage never looks complete.
    """
    final = os.path.join(root, f"{name}-{digest}")
    if os.path.exists(os.path.join(final, ".done")):
        print(f"stage {name}: cached ({digest})")
        return final
    tmp = final + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(tmp)
    try:
        work(tmp)
    except CliError:
        raise
    except Exception as exc:
        raise StageError(f"stage {name} failed: {type(exc).__name__}: {exc}") from exc
    with open(os.path.join(tmp, ".done"), "w") as fh:
        fh.write(digest + "\n")
    shutil.rmtree(final, ignore_errors=True)
    os.replace(tmp, final)
    print(f"stage {name}: ran ({digest})")
    return final


def cmd_pipeline(args, cfg) -> int:
    from .aplcore import Hyperparams
    if not args.config:
        raise UsageError("pipeline: --config is required")
    _require(args, "out")
    parser = build_parser()
    subs = _subparsers(parser)
    sections = {}
    for name in ("simulate", "extract", "train", "evaluate"):
        ns = argparse.Namespace(command=name, **{d: None for d in _option_actions(subs[name])})
        _merge(ns, name, cfg)
        sections[name] = ns
    sim, ext, trn, ev = (sections[k] for k in ("simulate", "extract", "train", "evaluate"))
    for name, ns in (("simulate", sim), ("train", trn), ("evaluate", ev)):
        section = {**cfg.get("pipeline", {}), **cfg.get(name, {})}
        ns.seed = resolve_seed(args.seed, section, cfg[""])
    ev.protocol = ev.protocol or (1, 2)
    gen = generation_config(sim)
    base = Hyperparams()
    hyper = Hyperparams(d=trn.dim or base.d, lambda_w=base.lambda_w if trn.lw is None else trn.lw,
                        lambda_v=base.lambda_v if trn.lv is None else trn.lv,
                        learning_rate=trn.lr or base.learning_rate,
                        max_epochs=base.max_epochs if trn.epochs is None else trn.epochs,
                        patience=trn.patience or base.patience)
    rate = FEATURE_RATE if ext.resample is None else (ext.resample or None)
    os.makedirs(args.out, exist_ok=True)

    h_sim = _stage_hash("simulate", {"gen": gen.to_dict(), "seed": sim.seed})
    data = _run_stage(args.out, "simulate", h_sim,
                      lambda d: write_dataset(generate_dataset(gen, sim.seed), d))
    h_ext = _stage_hash("extract", {"resample": rate}, h_sim)
    feats = _run_stage(args.out, "extract", h_ext,
                       lambda d: write_features(os.path.join(d, FEATURES_NAME),
                                                extract_dataset(data, rate)))
    features = read_features(os.path.join(feats, FEATURES_NAME))
    ev_params = {k: v for k, v in vars(ev).items() if k not in ("command", "config", "verbosity", "out",
                                                                  "data", "features")}
    h_ev = _stage_hash("evaluate", {"evaluate": ev_params, "hyper": vars(hyper)}, h_ext)
    reports = _run_stage(args.out, "evaluate", h_ev,
                         lambda d: _evaluate(ev, features, ev.seed, d, hyper, gen))
    latest = os.path.join(args.out, "latest.json")
    _atomic_write(latest, json.dumps({"simulate": h_sim, "extract": h_ext, "evaluate": h_ev,
                                      "report": os.path.relpath(reports, args.out)}, indent=1,
                                     sort_keys=True) + "\n")
    print(f"pipeline: report in {reports}")
    return 0


COMMANDS = {"simulate": cmd_simulate, "extract": cmd_extract, "train": cmd_train,
            "predict": cmd_predict, "baseline": cmd_baseline, "evaluate": cmd_evaluate,
            "report": cmd_report, "pipeline": cmd_pipeline}


def parse_and_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        raise UsageError("a subcommand is required (see --help)")
    cfg: Dict[str, Dict[str, object]] = {"": {}}
    if args.config:
        cfg = validate_config(read_config(args.config), parser)
    _merge(args, args.command, cfg)
    logging.basicConfig(level=logging.WARNING - 10 * min(int(args.verbosity or 0), 2),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    return COMMANDS[args.command](args, cfg)


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return parse_and_dispatch(argv)
    except CliError as exc:
        msg = " ".join(str(exc).split())
        print(f"gridfault: error[{exc.kind}]: {msg}", file=sys.stderr)
        return exc.code
    except KeyboardInterrupt:
        print("gridfault: error[Interrupted]: interrupted", file=sys.stderr)
        return 130


if __name__ == "__main__":
    sys.exit(main())
