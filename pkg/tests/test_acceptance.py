"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
that is printed in the terminal summary."""
import json
import math
import os
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from gridfault import evalharness
from gridfault.aplcore import EmbeddingModel, Hyperparams, association, target_distribution, \
    visit_loss, walker_loss
from gridfault.arcsim import CATEGORIES, TAU_RANGE, U_O_RANGE, R_O_RANGE, ArcParams, integrate_arc
from gridfault.cli import main
from gridfault.evalharness import f1_scores, load_report
from gridfault.wavefeat import channel_components, dwt, idwt
from helpers import aligned_embeddings, brute_f1, finite_difference_error


def record(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_criterion_1_arc_fixed_point():
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        p = ArcParams(rng.uniform(*TAU_RANGE), rng.uniform(*U_O_RANGE), rng.uniform(*R_O_RANGE))
        i = rng.uniform(10, 1000)
        target = i / (p.u_o + p.r_o * i)
        _, g = integrate_arc(target * rng.uniform(0.1, 3.0), lambda t: i, p, p.tau / 10, 40 * p.tau)
        worst = max(worst, abs(g[-1] - target) / target)
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-6 and elapsed < 5, f"max rel error {worst:.2e} (< 1e-6), {elapsed:.2f} s (< 5 s)")


def test_criterion_2_arc_decay():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(20):
        p = ArcParams(rng.uniform(*TAU_RANGE), rng.uniform(*U_O_RANGE), rng.uniform(*R_O_RANGE))
        g0 = rng.uniform(0.01, 1.0)
        t, g = integrate_arc(g0, lambda t: 0.0, p, p.tau / 100, 5 * p.tau)
        exact = g0 * np.exp(-t / p.tau)
        worst = max(worst, float(np.max(np.abs(g - exact) / exact)))
    record(2, worst < 1e-6, f"max rel error {worst:.2e} (< 1e-6)")


def test_criterion_3_dwt_roundtrip():
    rng = np.random.default_rng(3)
    rec, energy = 0.0, 0.0
    for _ in range(1000):
        x = rng.normal(size=1024)
        dec = dwt(x, 5)
        rec = max(rec, float(np.max(np.abs(idwt(dec) - x))))
        e = np.sum(dec.approx ** 2) + sum(np.sum(d ** 2) for d in dec.details)
        energy = max(energy, abs(e - np.sum(x ** 2)) / np.sum(x ** 2))
    record(3, rec < 1e-9 and energy < 1e-9,
           f"reconstruction {rec:.2e} (< 1e-9), energy rel {energy:.2e} (< 1e-9)")


def test_criterion_4_gradient_check():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10):
        n_s, n_t, d = int(rng.integers(4, 21)), int(rng.integers(1, 21)), int(rng.integers(1, 9))
        n_feat = 12
        ys = np.concatenate([np.arange(4), rng.integers(0, 4, n_s - 4)])
        Xs, Xt = rng.random((n_s, n_feat)), rng.random((n_t, n_feat))
        m = EmbeddingModel(rng.normal(0, 0.5, (d, n_feat)), rng.normal(0, 0.5, (4, d)),
                           rng.normal(0, 0.5, 4),
                           Hyperparams(d=d, lambda_w=float(rng.uniform(0.1, 2)),
                                       lambda_v=float(rng.uniform(0.1, 2))))
        worst = max(worst, finite_difference_error(m, Xs, ys, Xt, h=1e-5))
    record(4, worst < 1e-4, f"max rel gradient error {worst:.2e} (< 1e-4)")


def test_criterion_5_probability_invariants():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(200):
        n_s, n_t = int(rng.integers(1, 30)), int(rng.integers(1, 30))
        # one-dimensional embeddings give logits a_i * b_j in [-500, 500]
        A = rng.uniform(-1, 1, (n_s, 1)) * math.sqrt(500)
        B = rng.uniform(-1, 1, (n_t, 1)) * math.sqrt(500)
        a = association(A, B)
        for P in (a.Pab, a.Pba, a.Paba):
            worst = max(worst, float(np.max(np.abs(P.sum(axis=1) - 1))))
    record(5, worst < 1e-9, f"max row-sum deviation {worst:.2e} (< 1e-9)")


def test_criterion_6_loss_floors():
    counts = [5, 3, 4, 2]
    E, y = aligned_embeddings(counts, scale=30.0)
    a = association(E, E)
    T = target_distribution(y)
    ent = float(np.mean([-sum(p * math.log(p) for p in row if p > 0) for row in T]))
    lw, lv = walker_loss(a.Paba, y), visit_loss(a.Pab)
    dw, dv = abs(lw - ent), abs(lv - math.log(len(y)))
    record(6, dw < 1e-3 and dv < 1e-3, f"|L_w - H(T)| {dw:.2e}, |L_v - ln n_t| {dv:.2e} (< 1e-3)")


def test_criterion_7_f1_oracle():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(1, 50))
        true = [CATEGORIES[i] for i in rng.integers(0, 4, n)]
        pred = [CATEGORIES[i] for i in rng.integers(0, 4, n)]
        per, macro = brute_f1(pred, true, CATEGORIES)
        r = f1_scores(pred, true)
        mismatches += list(r.per_category) != per or r.macro != macro
    record(7, mismatches == 0, f"{mismatches} mismatches in 1000 cases")


def test_criterion_9_feature_sanity():
    t = np.arange(1280) / 4000.0
    c = channel_components(np.sin(2 * np.pi * 50 * t), 4000.0)
    ok = abs(c.A_o - 1) <= 0.02 and abs(c.f_o - 50) <= 0.5 and c.w_d < 0.05
    record(9, ok, f"A_o {c.A_o:.4f}, f_o {c.f_o:.3f} Hz, w_d {c.w_d:.4f}")


# --- end-to-end ---------------------------------------------------------------

def pipeline_run(root):
    """Default pipeline config with seed 42; returns (report dir, seconds)."""
    os.makedirs(root, exist_ok=True)
    cfg = os.path.join(root, "default.cfg")
    with open(cfg, "w") as fh:
        fh.write("seed = 42\n")
    evalharness._TRAIN_MEMO.store.clear()
    start = time.perf_counter()
    assert main(["pipeline", "--config", cfg, "--out", os.path.join(root, "run")]) == 0
    elapsed = time.perf_counter() - start
    with open(os.path.join(root, "run", "latest.json")) as fh:
        return os.path.join(root, "run", json.load(fh)["report"]), elapsed


@pytest.fixture(scope="module")
def default_run(tmp_path_factory, monkeypatch_module):
    return pipeline_run(str(tmp_path_factory.mktemp("first")))


@pytest.fixture(scope="module")
def monkeypatch_module():
    mp = pytest.MonkeyPatch()
    mp.delenv("GRIDFAULT_SEED", raising=False)
    yield mp
    mp.undo()


def test_criterion_8_end_to_end_ordering(default_run):
    report_dir, elapsed = default_run
    means = {}
    for p in (1, 2):
        rep = load_report(os.path.join(report_dir, f"protocol{p}"))
        for m in ("apl", "knn", "svm"):
            s = rep.summary(m)
            assert s["n"] == 10
            means[p, m] = s["mean"]
    margins = [means[p, "apl"] - means[p, b] for p in (1, 2) for b in ("knn", "svm")]
    ok = min(margins) >= 0.05 and means[1, "apl"] >= means[2, "apl"] and elapsed < 600
    detail = ", ".join(f"P{p} {m} {means[p, m]:.4f}" for p in (1, 2) for m in ("apl", "knn", "svm"))
    record(8, ok, f"{detail}; min APL margin {min(margins):+.4f} (>= 0.05); "
                  f"APL P1 >= P2 {means[1, 'apl'] >= means[2, 'apl']}; {elapsed:.0f} s (< 600 s)")


def test_criterion_10_determinism(default_run, tmp_path_factory):
    first, _ = default_run
    second, _ = pipeline_run(str(tmp_path_factory.mktemp("second")))
    diffs = []
    for sub in ("protocol1", "protocol2"):
        for name in sorted(os.listdir(os.path.join(first, sub))):
            with open(os.path.join(first, sub, name), "rb") as a, \
                    open(os.path.join(second, sub, name), "rb") as b:
                if a.read() != b.read():
                    diffs.append(f"{sub}/{name}")
    record(10, not diffs, "report files identical" if not diffs else f"differing: {diffs}")
