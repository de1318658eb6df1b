"""
Experiment orchestration: splits, model selection under the two label
regimes, repetition, F1 scoring and report files.

Protocol 1 may use validation labels to choose APL hyperparameters,
checkpoints and the KNN neighbourhood size. Protocol 2 never sees target
labels before scoring; selection falls back to training-side signals.
"""
import hashlib
import json
import logging
import math
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import __version__
from .aplcore import Hyperparams, predict, train
from .arcsim import CATEGORIES, GenerationConfig, _atomic_write, generate_dataset
from .baselines import KNN_CANDIDATES, SVM_DEGREES, knn_fit, knn_predict, knn_select_k, \
    svm_predict, svm_select
from .wavefeat import FeatureVector, fit_normalizer, record_features

log = logging.getLogger(__name__)

MODELS = ("apl", "knn", "svm")
REFERENCE_TARGET = 316
REFERENCE_VALIDATION = 160
REPORT_NAME = "report.json"
SUMMARY_NAME = "summary.csv"
TABLE_NAME = "table.txt"
SCATTER_NAME = "scatter.csv"


class LabelAccessError(RuntimeError):
    """Raised when target labels are read while they are sealed."""


class ExperimentError(RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: int = 1
    repetitions: int = 10
    seed: int = 42
    data_dir: Optional[str] = None
    features_path: Optional[str] = None
    models: Tuple[str, ...] = MODELS
    lambda_v_grid: Tuple[float, ...] = (0.2, 0.5)
    dim_grid: Tuple[int, ...] = (6, 8, 12)
    hyper: Hyperparams = Hyperparams()
    checkpoint_every: int = 250
    knn_candidates: Tuple[int, ...] = KNN_CANDIDATES
    svm_degrees: Tuple[int, ...] = SVM_DEGREES
    generation: GenerationConfig = GenerationConfig()

    def __post_init__(self):
        if self.protocol not in (1, 2):
            raise ValueError(f"protocol must be 1 or 2, got {self.protocol}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        unknown = set(self.models) - set(MODELS)
        if unknown or not self.models:
            raise ValueError(f"unknown models {sorted(unknown)}; choose from {MODELS}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")

    def to_dict(self, with_paths: bool = True) -> dict:
        d = asdict(self)
        d["generation"] = self.generation.to_dict()
        d["models"] = list(self.models)
        if not with_paths:
            # locations do not change results
            d.pop("data_dir")
            d.pop("features_path")
        return d


@dataclass(frozen=True)
class SplitSpec:
    training: Tuple[int, ...]
    validation: Tuple[int, ...]
    test: Tuple[int, ...]
    seed: int


@dataclass(frozen=True)
class F1Result:
    per_category: Tuple[float, ...]
    macro: float
    empty: Tuple[str, ...] = ()     # categories neither true nor predicted


@dataclass(frozen=True)
class RepetitionResult:
    repetition: int
    model: str
    f1: Optional[F1Result]
    selected: str = ""
    diagnostic: str = ""

    @property
    def complete(self) -> bool:
        return self.f1 is not None


@dataclass
class ExperimentReport:
    protocol: int
    categories: Tuple[str, ...]
    results: List[RepetitionResult] = field(default_factory=list)
    fingerprint: str = ""
    config: dict = field(default_factory=dict)
    label_reads: List[Tuple[str, int]] = field(default_factory=list)

    def models(self) -> List[str]:
        seen = []
        for r in self.results:
            if r.model not in seen:
                seen.append(r.model)
        return seen

    def macro_scores(self, model: str) -> List[float]:
        return [r.f1.macro for r in self.results if r.model == model and r.complete]

    def summary(self, model: str) -> Dict[str, float]:
        s = self.macro_scores(model)
        if not s:
            return {"mean": math.nan, "min": math.nan, "max": math.nan, "n": 0}
        return {"mean": float(np.mean(s)), "min": min(s), "max": max(s), "n": len(s)}

    def category_means(self, model: str) -> List[float]:
        rows = [r.f1.per_category for r in self.results if r.model == model and r.complete]
        if not rows:
            return [math.nan] * len(self.categories)
        return [float(v) for v in np.mean(np.array(rows), axis=0)]


# ---------------------------------------------------------------------------
# Label access


class LabelGuard:
    """Holds target labels and records every read.

    When sealed, reads raise LabelAccessError until ``unseal`` is called,
    which the harness does only at scoring time.
    """

    def __init__(self, labels, sealed: bool = False):
        self._labels = np.asarray(labels, dtype=int)
        self.sealed = sealed
        self.reads: List[Tuple[str, int]] = []

    def __len__(self):
        return len(self._labels)

    def read(self, indices, purpose: str) -> np.ndarray:
        idx = np.asarray(indices, dtype=int)
        if self.sealed:
            raise LabelAccessError(f"target labels are sealed (attempted read for {purpose!r})")
        self.reads.append((purpose, len(idx)))
        return self._labels[idx].copy()

    def unseal(self) -> None:
        self.sealed = False


# ---------------------------------------------------------------------------
# Splits and scoring


def validation_size(n: int) -> int:
    if n >= REFERENCE_TARGET:
        return REFERENCE_VALIDATION
    return int(round(n * REFERENCE_VALIDATION / REFERENCE_TARGET))


def make_splits(target_manifest, protocol: int, repetition_seed: int,
                n_source: int = 0) -> SplitSpec:
    """Uniform random validation/test partition of the target records.

    ``target_manifest`` is a count or a sequence of target records; indices
    refer to its order. Targets smaller than the reference size keep the
    reference validation fraction.
    """
    n = target_manifest if isinstance(target_manifest, (int, np.integer)) else len(target_manifest)
    if n < 1:
        raise ValueError("target set is empty")
    if protocol not in (1, 2):
        raise ValueError(f"protocol must be 1 or 2, got {protocol}")
    n_val = validation_size(n)
    if n < REFERENCE_TARGET:
        warnings.warn(f"target set has {n} records; validation shrunk to {n_val}", stacklevel=2)
    perm = np.random.default_rng(repetition_seed).permutation(n)
    return SplitSpec(training=tuple(range(n_source)), validation=tuple(sorted(perm[:n_val].tolist())),
                     test=tuple(sorted(perm[n_val:].tolist())), seed=int(repetition_seed))


def f1_scores(predictions, truths, categories: Sequence = CATEGORIES) -> F1Result:
    """Per-category F1 and their unweighted mean.

    Categories with P + R = 0 score 0; those also absent from both inputs are
    listed in ``empty``.
    """
    pred = list(predictions)
    true = list(truths)
    if len(pred) != len(true):
        raise ValueError(f"length mismatch: {len(pred)} predictions, {len(true)} truths")
    known = set(categories)
    bad = [t for t in true if t not in known]
    if bad:
        raise ValueError(f"unknown category {bad[0]!r} in truths")
    scores, empty = [], []
    for c in categories:
        tp = sum(1 for p, t in zip(pred, true) if p == c and t == c)
        fp = sum(1 for p, t in zip(pred, true) if p == c and t != c)
        fn = sum(1 for p, t in zip(pred, true) if p != c and t == c)
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
        if tp + fp + fn == 0:
            empty.append(str(c))
    return F1Result(tuple(scores), sum(scores) / len(scores), tuple(empty))


# ---------------------------------------------------------------------------
# Experiment


def _repetition_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence([seed, 7, rep]).generate_state(1)[0])


def _training_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 11]).generate_state(1)[0])


def load_features(config: ExperimentConfig) -> List[FeatureVector]:
    from .wavefeat import extract_dataset, read_features
    if config.features_path and os.path.exists(config.features_path):
        return read_features(config.features_path)
    if config.data_dir and os.path.exists(os.path.join(config.data_dir, "manifest.json")):
        return extract_dataset(config.data_dir)
    log.info("generating dataset (seed %d)", config.seed)
    manifest = generate_dataset(config.generation, config.seed)
    return [record_features(r) for r in manifest.records]


def _features_hash(vectors: Sequence[FeatureVector]) -> str:
    h = hashlib.sha256()
    for v in vectors:
        h.update(f"{v.record_id}|{v.domain}|{v.label}|".encode())
        h.update(np.ascontiguousarray(v.values, dtype="<f8").tobytes())
    return h.hexdigest()


def config_fingerprint(config: ExperimentConfig, features_hash: str) -> str:
    d = config.to_dict(with_paths=False)
    blob = json.dumps({"config": d, "features": features_hash, "version": __version__,
                       "rep_seeds": [_repetition_seed(config.seed, r) for r in range(config.repetitions)]},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


class _Memo:
    """Results shared across repetitions (the training inputs do not change
    with the split, so neither do the fitted models)."""

    def __init__(self):
        self.store = {}

    def get(self, key, fn):
        if key not in self.store:
            self.store[key] = fn()
        return self.store[key]


_TRAIN_MEMO = _Memo()


def _apl_candidates(config: ExperimentConfig, Xs, ys, Xt, normalizer, train_seed: int, memo: _Memo):
    """[(name, model, final objective)] for the configurations a protocol may choose from."""
    base = config.hyper
    if config.protocol == 1:
        grid = [(lv, d) for lv in config.lambda_v_grid for d in config.dim_grid]
    else:
        grid = [(base.lambda_v, base.d)]
    # checkpoints are always recorded so both protocols can share one training run
    every = config.checkpoint_every
    out = []
    for lv, d in grid:
        hyper = Hyperparams(d=d, lambda_w=base.lambda_w, lambda_v=lv, learning_rate=base.learning_rate,
                            max_epochs=base.max_epochs, patience=base.patience, seed=train_seed,
                            checkpoint_every=every)
        key = ("apl", _array_key(Xs, ys, Xt), asdict(hyper))
        res = memo.get(json.dumps(key, sort_keys=True), lambda: train(Xs, ys, Xt, hyper, normalizer))
        tag = f"lv={lv:g},d={d}"
        out.append((f"{tag},best", res.model, sum(_weights(hyper, res.final_terms))))
        if config.protocol == 1:
            for epoch, m in res.checkpoints:
                out.append((f"{tag},epoch={epoch}", m, math.nan))
    return out


def _weights(hyper: Hyperparams, terms: Dict[str, float]):
    return (terms["L_s"], hyper.lambda_w * terms["L_w"], hyper.lambda_v * terms["L_v"])


def _array_key(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.shape).encode() + a.dtype.str.encode())
        h.update(a.tobytes())
    return h.hexdigest()


def _run_apl(config, Xs, ys, Xt, split, guard, normalizer, train_seed, memo):
    cands = _apl_candidates(config, Xs, ys, Xt, normalizer, train_seed, memo)
    val = np.array(split.validation, dtype=int)
    if config.protocol == 1 and len(val):
        yv = guard.read(val, "apl-selection")
        best_name, best_model, best_f1 = None, None, -1.0
        for name, model, _ in cands:
            pred, _ = predict(model, Xt[val])
            f = f1_scores(pred, yv, range(len(CATEGORIES))).macro
            if f > best_f1:
                best_name, best_model, best_f1 = name, model, f
        return best_name, best_model
    finals = [(obj, i) for i, (_, _, obj) in enumerate(cands) if not math.isnan(obj)]
    _, i = min(finals)
    return cands[i][0], cands[i][1]


def _run_repetition(config, rep, Xs, ys, Xt, guard, normalizer, train_seed, memo):
    split = make_splits(len(Xt), config.protocol, _repetition_seed(config.seed, rep), len(Xs))
    test = np.array(split.test, dtype=int)
    val = np.array(split.validation, dtype=int)
    preds = {}
    for name in config.models:
        try:
            if name == "apl":
                sel, model = _run_apl(config, Xs, ys, Xt, split, guard, normalizer, train_seed, memo)
                preds[name] = (predict(model, Xt[test])[0], sel)
            elif name == "knn":
                if config.protocol == 1 and len(val):
                    k = knn_select_k(Xs, ys, Xt[val], guard.read(val, "knn-selection"),
                                     config.knn_candidates)
                else:
                    k = memo.get(("knn-loo", _array_key(Xs, ys), config.knn_candidates),
                                 lambda: knn_select_k(Xs, ys, candidates=config.knn_candidates,
                                                      leave_one_out=True))
                preds[name] = (knn_predict(knn_fit(Xs, ys, k), Xt[test]), f"K={k}")
            elif name == "svm":
                svm = memo.get(("svm", _array_key(Xs, ys), config.svm_degrees),
                               lambda: svm_select(Xs, ys, config.svm_degrees))
                preds[name] = (svm_predict(svm, Xt[test]), f"degree={svm.degree}")
        except Exception as exc:  # a failed model marks its repetition incomplete
            log.warning("repetition %d, %s failed: %s", rep, name, exc)
            preds[name] = (None, f"{type(exc).__name__}: {exc}")
    sealed = guard.sealed
    guard.unseal()
    truth = guard.read(test, "scoring")
    guard.sealed = sealed
    out = []
    for name in config.models:
        pred, info = preds[name]
        if pred is None:
            out.append(RepetitionResult(rep, name, None, diagnostic=info))
            continue
        f1 = f1_scores([CATEGORIES[i] for i in pred], [CATEGORIES[i] for i in truth], CATEGORIES)
        out.append(RepetitionResult(rep, name, f1, selected=info))
    return out


def run_experiment(config: ExperimentConfig, features: Optional[Sequence[FeatureVector]] = None,
                   memo: Optional[_Memo] = None) -> ExperimentReport:
    if features is None:
        features = load_features(config)
    src = [f for f in features if f.domain == "source"]
    tgt = [f for f in features if f.domain != "source"]
    if not src or not tgt:
        raise ExperimentError("need both source and target feature vectors")
    missing = [f.record_id for f in src + tgt if f.label not in CATEGORIES]
    if missing:
        raise ExperimentError(f"records without a known label: {missing[:3]}")
    normalizer = fit_normalizer(src + tgt)
    Xs = normalizer.apply(np.array([f.values for f in src]))
    Xt = normalizer.apply(np.array([f.values for f in tgt]))
    ys = np.array([CATEGORIES.index(f.label) for f in src])
    guard = LabelGuard([CATEGORIES.index(f.label) for f in tgt], sealed=config.protocol == 2)
    memo = _TRAIN_MEMO if memo is None else memo
    train_seed = _training_seed(config.seed)
    report = ExperimentReport(config.protocol, CATEGORIES,
                              fingerprint=config_fingerprint(config, _features_hash(features)),
                              config=config.to_dict(with_paths=False))
    for rep in range(config.repetitions):
        log.info("protocol %d repetition %d/%d", config.protocol, rep + 1, config.repetitions)
        report.results.extend(_run_repetition(config, rep, Xs, ys, Xt, guard, normalizer,
                                              train_seed, memo))
    report.label_reads = list(guard.reads)
    return report


# ---------------------------------------------------------------------------
# Report files


def _fmt(x: float) -> str:
    return "nan" if x is None or (isinstance(x, float) and math.isnan(x)) else f"{x:.6f}"


def report_to_dict(report: ExperimentReport) -> dict:
    return {
        "protocol": report.protocol,
        "categories": list(report.categories),
        "fingerprint": report.fingerprint,
        "config": report.config,
        "results": [{"repetition": r.repetition, "model": r.model, "selected": r.selected,
                     "diagnostic": r.diagnostic,
                     "f1": None if r.f1 is None else {"per_category": list(r.f1.per_category),
                                                      "macro": r.f1.macro, "empty": list(r.f1.empty)}}
                    for r in report.results],
    }


def report_from_dict(d: dict) -> ExperimentReport:
    results = []
    for r in d.get("results", []):
        f = r.get("f1")
        f1 = None if f is None else F1Result(tuple(f["per_category"]), f["macro"], tuple(f["empty"]))
        results.append(RepetitionResult(r["repetition"], r["model"], f1, r.get("selected", ""),
                                        r.get("diagnostic", "")))
    return ExperimentReport(d["protocol"], tuple(d["categories"]), results, d.get("fingerprint", ""),
                            d.get("config", {}))


def render_summary(report: ExperimentReport) -> str:
    cats = list(report.categories)
    lines = [",".join(["protocol", "model", "n", "macro_mean", "macro_min", "macro_max"]
                      + [f"f1_{c}" for c in cats])]
    for m in report.models():
        s = report.summary(m)
        lines.append(",".join([str(report.protocol), m, str(s["n"]), _fmt(s["mean"]), _fmt(s["min"]),
                               _fmt(s["max"])] + [_fmt(v) for v in report.category_means(m)]))
    return "\n".join(lines) + "\n"


def render_scatter(report: ExperimentReport) -> str:
    cats = list(report.categories)
    lines = [",".join(["protocol", "repetition", "model", "macro"] + [f"f1_{c}" for c in cats]
                      + ["empty", "selected", "status"])]
    for r in report.results:
        if r.f1 is None:
            vals = ["nan"] * (len(cats) + 1)
            empty, status = "", "incomplete"
        else:
            vals = [_fmt(r.f1.macro)] + [_fmt(v) for v in r.f1.per_category]
            empty, status = ";".join(r.f1.empty), "ok"
        sel = r.selected.replace(",", ";")
        lines.append(",".join([str(report.protocol), str(r.repetition), r.model] + vals
                              + [empty, sel, status]))
    return "\n".join(lines) + "\n"


def render_table(report: ExperimentReport) -> str:
    cats = list(report.categories)
    head = ["model"] + cats + ["macro", "min", "max", "reps"]
    rows = []
    for m in report.models():
        s = report.summary(m)
        rows.append([m] + [f"{v:.3f}" for v in report.category_means(m)]
                    + [f"{s['mean']:.3f}", f"{s['min']:.3f}", f"{s['max']:.3f}", str(s["n"])])
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(head)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    out = [f"protocol {report.protocol}  fingerprint {report.fingerprint[:16]}",
           fmt.format(*head).rstrip(), fmt.format(*["-" * w for w in widths])]
    out += [fmt.format(*r).rstrip() for r in rows]
    incomplete = [r for r in report.results if not r.complete]
    if incomplete:
        out.append(f"incomplete repetitions: {len(incomplete)}")
    flagged = sorted({c for r in report.results if r.complete for c in r.f1.empty})
    if flagged:
        out.append("F1 set to 0 for empty categories: " + ", ".join(flagged))
    return "\n".join(out) + "\n"


RENDERERS = {"csv": (SUMMARY_NAME, render_summary), "table": (TABLE_NAME, render_table),
             "scatter": (SCATTER_NAME, render_scatter)}


def emit_report(report: ExperimentReport, out_dir: str, formats: Sequence[str] = ("csv", "table", "scatter")
                ) -> List[str]:
    """Write report.json plus the requested renderings; returns the paths written."""
    os.makedirs(out_dir, exist_ok=True)
    paths = [os.path.join(out_dir, REPORT_NAME)]
    _atomic_write(paths[0], json.dumps(report_to_dict(report), indent=1, sort_keys=True) + "\n")
    for fmt in formats:
        if fmt not in RENDERERS:
            raise ValueError(f"unknown report format {fmt!r}")
        name, render = RENDERERS[fmt]
        path = os.path.join(out_dir, name)
        _atomic_write(path, render(report))
        paths.append(path)
    return paths


def load_report(out_dir: str) -> ExperimentReport:
    with open(os.path.join(out_dir, REPORT_NAME)) as fh:
        return report_from_dict(json.load(fh))
