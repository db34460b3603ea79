"""Acceptance suite: one PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the summary lines.
Thresholds and tolerances are fixed here and are not tuned to the results.
"""

from __future__ import annotations

import time
from functools import lru_cache

import numpy as np

from bicmix import network as net
from bicmix.cli import main as cli_main
from bicmix.metrics import recovery_relevance
from bicmix.model import classify_component, extract_biclusters
from bicmix.simulate import preset, simulate
from bicmix.vem import FitConfig, fit

from oracles import partial_corr_dense, recovery_relevance_brute
from test_gig import GRID, N as GIG_N
from test_mcmc import CONDITIONALS, conditional_gof_pvalue
from test_network import exact_wilcoxon_mismatches
from update_checks import run_update_checks

SEEDS = range(5)


def report(number, passed, detail):
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}"
    print("\n" + line)
    return passed


# ---------------------------------------------------------------------------
# 1. closed-form updates against oracles


def test_criterion_1_updates_match_oracles():
    t0 = time.perf_counter()
    worst = run_update_checks(n=100, seed=0)
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if not v <= 1e-6}
    detail = f"{len(worst)} updates x 100 instances, worst rel err {max(worst.values()):.2e}, {elapsed:.1f}s"
    if bad:
        detail += f", failing {bad}"
    assert report(1, not bad and elapsed < 60, detail)


# ---------------------------------------------------------------------------
# 2. Gibbs conditionals and GIG moments


def test_criterion_2_sampler_distributions():
    from oracles import gig_quadrature
    from bicmix.gig import sample_gig

    t0 = time.perf_counter()
    pvals = {(name, k): conditional_gof_pvalue(name, k) for name in CONDITIONALS for k in range(5)}
    gof_bad = [key for key, p in pvals.items() if not p > 0.01]
    mom_bad = []
    for p, a, b in GRID:
        x = sample_gig(p, a, b, np.random.default_rng(12345), size=GIG_N)
        _, m1, m2, _ = gig_quadrature(p, a, b)
        ok1 = abs(x.mean() - m1) <= 3 * x.std(ddof=1) / np.sqrt(GIG_N)
        ok2 = abs((x**2).mean() - m2) <= 3 * (x**2).std(ddof=1) / np.sqrt(GIG_N)
        if not (ok1 and ok2):
            mom_bad.append((p, a, b))
    elapsed = time.perf_counter() - t0
    detail = (
        f"{len(pvals)} chi-square tests (min p {min(pvals.values()):.3f}), "
        f"{len(GRID)} GIG moment checks incl. b=0 and p=-1/2, {elapsed:.1f}s"
    )
    if gof_bad or mom_bad:
        detail += f", failing gof {gof_bad} moments {mom_bad}"
    assert report(2, not gof_bad and not mom_bad and elapsed < 300, detail)


# ---------------------------------------------------------------------------
# desk-scale simulation runs shared by criteria 3 to 5


@lru_cache(maxsize=None)
def desk_runs(name):
    """Fit each of five seeded datasets of preset ``name``; returns (truth, state, seconds) tuples."""
    out = []
    for s in SEEDS:
        data, truth = simulate(preset(name, seed=s))
        t0 = time.perf_counter()
        res = fit(data, config=FitConfig(K_init=20, max_iterations=1000, warm_start_iterations=100, seed=s))
        out.append((truth, res.state, time.perf_counter() - t0))
    return tuple(out)


def desk_scores(name):
    scores = [recovery_relevance(truth.biclusters, extract_biclusters(state), "cells") for truth, state, _ in desk_runs(name)]
    rec = np.array([s.recovery for s in scores])
    rel = np.array([s.relevance for s in scores])
    return rec, rel, sum(t for *_, t in desk_runs(name))


def test_criterion_3_desk_sim1_recovery():
    rec, rel, secs = desk_scores("desk1-ln")
    med_rec, med_rel = float(np.median(rec)), float(np.median(rel))
    detail = f"median recovery {med_rec:.3f} (>= 0.6), median relevance {med_rel:.3f} (>= 0.7), per-seed rec {np.round(rec, 3).tolist()} rel {np.round(rel, 3).tolist()}, {secs:.0f}s"
    assert report(3, med_rec >= 0.6 and med_rel >= 0.7 and secs < 600, detail)


def _abs_corr(a, b):
    a, b = a - a.mean(), b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return abs(a @ b) / den if den > 0 else 0.0


def classification_correct(truth, state, threshold=0.9, match=0.5):
    """True dense vectors recovered and called dense; recovered true sparse vectors called sparse.

    Each true loading column (factor row) is matched to the recovered one
    with the largest absolute correlation; a match below ``match`` counts
    as not recovered.
    """
    problems = []
    sides = (
        ("loading", truth.lambda_true.T, truth.loading_sparse, state.loading.lam.T, "z"),
        ("factor", truth.x_true, truth.factor_sparse, state.factor.x_mean, "o"),
    )
    for side, true_vecs, flags, est_vecs, which in sides:
        for j, (v, sparse) in enumerate(zip(true_vecs, flags)):
            corr = [_abs_corr(v, e) for e in est_vecs]
            if not corr or max(corr) < match:
                if not sparse:
                    problems.append(f"{side} dense {j} not recovered")
                continue
            k = int(np.argmax(corr))
            cls = classify_component(state.loading.z[k], state.factor.o[k], threshold)
            called_sparse = (cls.label.value[0] if which == "z" else cls.label.value[1]) == "S"
            if called_sparse != bool(sparse):
                problems.append(f"{side} {'sparse' if sparse else 'dense'} {j} called {'sparse' if called_sparse else 'dense'}")
    return not problems, problems


def test_criterion_4_desk_sim2_classification():
    results = [classification_correct(truth, state) for truth, state, _ in desk_runs("desk2-ln")]
    good = sum(ok for ok, _ in results)
    secs = sum(t for *_, t in desk_runs("desk2-ln"))
    first = next((p for ok, p in results if not ok), [])
    detail = f"{good}/5 seeds fully correct (need >= 4), {secs:.0f}s" + (f", e.g. {first[:3]}" if first else "")
    assert report(4, good >= 4 and secs < 600, detail)


def test_criterion_5_noise_robustness():
    _, rel1, _ = desk_scores("desk1-ln")
    rec2, rel2, _ = desk_scores("desk1-hn")
    drop = float(np.median(rel1) - np.median(rel2))
    detail = f"median relevance nu=1 {np.median(rel1):.3f}, nu=2 {np.median(rel2):.3f}, drop {drop:.3f} (<= 0.15); median recovery nu=2 {np.median(rec2):.3f}"
    assert report(5, drop <= 0.15, detail)


# ---------------------------------------------------------------------------
# 6. network calibration


def planted_network_data(seed=0, n=200):
    """Ten genes, two components on disjoint three-gene blocks, unit noise."""
    rng = np.random.default_rng(seed)
    L = np.zeros((10, 2))
    L[[0, 1, 2], 0] = rng.uniform(2, 3, 3) * rng.choice([-1, 1], 3)
    L[[5, 6, 7], 1] = rng.uniform(2, 3, 3) * rng.choice([-1, 1], 3)
    Y = L @ rng.normal(size=(2, n)) + rng.normal(size=(10, n))
    pc = partial_corr_dense(L @ L.T + np.eye(10))
    planted = {(f"g{i}", f"g{j}") for i, j in zip(*np.triu_indices(10, 1)) if abs(pc[i, j]) >= 0.4}
    return Y, planted


def pipeline_edges(Y, seed, iterations=1000):
    """Fit, keep components stable over the second half of the run, and score all gene pairs they imply."""
    res = fit(Y, config=FitConfig(K_init=10, max_iterations=iterations, warm_start_iterations=100, seed=seed))
    window = net.StabilityWindow(iterations // 2, iterations, 50)
    stable = net.stability_filter(res.trace, window)
    comps = [k for k in range(res.state.K) if int(res.state.component_ids[k]) in stable]
    if not comps:
        return []
    return net.run_network(res.state, [f"g{i}" for i in range(Y.shape[0])], comps)


def test_criterion_6_network_calibration():
    t0 = time.perf_counter()
    spec = net.NetworkSpec(edge_prob_threshold=0.8, replication_threshold=2)

    # null, through the whole pipeline: identity gene covariance
    rng = np.random.default_rng(600)
    null_runs = [pipeline_edges(rng.normal(size=(60, 200)), s) for s in SEEDS]
    tested = sum(len(r) for r in null_runs)
    called = sum(e.probability > 0.8 for r in null_runs for e in r)
    # null at the edge-test stage: sample partial correlations of identity-covariance data
    Z = rng.normal(size=(200, 60))
    pc = partial_corr_dense(np.cov(Z.T))
    r = pc[np.triu_indices(60, 1)]
    null_frac = float(np.mean(net.edge_probabilities(r) > 0.8))
    pipe_frac = called / tested if tested else 0.0

    # planted design, five seeded runs on the same data
    Y, planted = planted_network_data()
    runs = [pipeline_edges(Y, s) for s in SEEDS]
    kept = {e.key for e in net.ensemble_edges(runs, spec)}
    recovered = len(planted & kept) / len(planted)
    elapsed = time.perf_counter() - t0

    passed = pipe_frac <= 0.01 and null_frac <= 0.01 and recovered >= 0.8 and elapsed < 600
    detail = (
        f"null pipeline {called}/{tested} edges > 0.8; null sample pcors {null_frac:.4f} of {r.size} > 0.8; "
        f"planted {len(planted & kept)}/{len(planted)} edges recovered with replication >= 2 "
        f"({len(kept - planted)} extra); {elapsed:.0f}s"
    )
    assert report(6, passed, detail)


# ---------------------------------------------------------------------------
# 7. exact statistics


def test_criterion_7_exact_statistics():
    w = exact_wilcoxon_mismatches(10)

    from bicmix.model import Bicluster

    rng = np.random.default_rng(7)
    rr = 0.0
    for _ in range(100):
        p, n = int(rng.integers(1, 9)), int(rng.integers(1, 7))

        def draw():
            return [
                Bicluster(
                    frozenset(rng.choice(p, int(rng.integers(1, p + 1)), replace=False).tolist()),
                    frozenset(rng.choice(n, int(rng.integers(1, n + 1)), replace=False).tolist()),
                )
                for _ in range(int(rng.integers(1, 5)))
            ]

        truth, found = draw(), draw()
        for mode in ("cells", "genes"):
            got = recovery_relevance(truth, found, mode)
            want = recovery_relevance_brute(truth, found, mode)
            rr = max(rr, abs(got.recovery - want[0]), abs(got.relevance - want[1]))

    pcd = 0.0
    for _ in range(20):
        A = rng.normal(size=(5, 8))
        om = A @ A.T + 0.1 * np.eye(5)
        pcd = max(pcd, float(np.max(np.abs(net.partial_correlations(om) - partial_corr_dense(om)))))

    passed = w <= 1e-12 and rr <= 1e-12 and pcd <= 1e-10
    detail = f"Wilcoxon max |diff| {w:.1e} over every split with |x|+|y| <= 10; R&R max |diff| {rr:.1e} on 100 instances; pcor max |diff| {pcd:.1e}"
    assert report(7, passed, detail)


# ---------------------------------------------------------------------------
# 8. reproducibility


def test_criterion_8_replay_and_resume(tmp_path):
    def run(*argv):
        return cli_main([str(a) for a in argv])

    assert run("simulate", "--preset", "desk1-ln", "--seed", 3, "--out", tmp_path / "sim") == 0
    common = ["fit", "--data", tmp_path / "sim" / "Y.tsv", "--k", 20, "--iterations", 200, "--warm-start", 100, "--seed", 3]
    assert run(*common, "--out", tmp_path / "straight") == 0
    assert run("--from-manifest", tmp_path / "straight" / "manifest.json", "--out", tmp_path / "replay") == 0
    assert run(*common, "--out", tmp_path / "half", "--stop-at", 100) == 0
    assert run(*common, "--out", tmp_path / "resumed", "--resume", tmp_path / "half" / "checkpoint.npz") == 0
    files = ("lambda.tsv", "x.tsv", "psi.tsv", "components.tsv", "trace.tsv")
    replay_same = all((tmp_path / "replay" / f).read_bytes() == (tmp_path / "straight" / f).read_bytes() for f in files)
    resume_same = all((tmp_path / "resumed" / f).read_bytes() == (tmp_path / "straight" / f).read_bytes() for f in files)
    detail = f"manifest replay {'identical' if replay_same else 'DIFFERS'}; resume at 100 of 200 {'identical' if resume_same else 'DIFFERS'} ({', '.join(files)})"
    assert report(8, replay_same and resume_same, detail)

