"""Acceptance suite: one test per criterion, each printing a single PASS/FAIL line."""

import math
import time

import numpy as np
import pytest
from scipy.special import expit

from primalfix import catalog
from primalfix.data import Dataset
from primalfix.estimators import eif, estimate, one_step, plug_in, tmle
from primalfix.graph import latent_project, partition_mlx, topological_order
from primalfix.nuisance import NuisanceConfig, evaluate_nuisances, exact_config
from primalfix.oracle import brute_force_psi, law_dataset, random_fixable_admg, random_markov_law
from primalfix.simulation import (
    DgpSpec,
    EstimatorSpec,
    ExperimentConfig,
    eif_variance,
    generate,
    get_dgp,
    run_experiment,
    true_psi,
)

pytestmark = pytest.mark.acceptance

STRATEGIES = ("dnorm", "densratio", "bayes")


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        return ok

    return emit


def _partition(g, a="A", y="Y"):
    return partition_mlx(g, topological_order(g, a, y), a, y)


def _sets(p):
    return set(p.district_post) | {p.treatment}, set(p.outside_post)


def test_criterion_01_graph_oracles(report):
    start = time.perf_counter()
    cases = {
        "2a": (catalog.mediators_treatment_outcome_confounded(), {"A", "Y"}, {"M", "L"}),
        "2b": (catalog.mediators_chain_confounded(), {"A", "L", "Y"}, {"M"}),
        "2c": (catalog.mediators_outcome_outside(), {"A", "L"}, {"M", "Y"}),
    }
    got = {k: _sets(_partition(g)) for k, (g, _, _) in cases.items()}
    partitions_ok = all(got[k] == (lset, mset) for k, (_, lset, mset) in cases.items())
    projection_ok = latent_project(catalog.front_door_hidden()) == catalog.front_door()
    elapsed = time.perf_counter() - start
    ok = partitions_ok and projection_ok and elapsed < 1.0
    report(1, ok, f"partitions={partitions_ok} projection={projection_ok} runtime={elapsed:.3f}s")
    assert ok


def test_criterion_02_identification_oracle(report):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(200):
        g, a, y = random_fixable_admg(rng)
        table = random_markov_law(g, rng)
        p = _partition(g, a, y)
        ds = law_dataset(table)
        a0 = i % 2
        q = evaluate_nuisances(ds, p, exact_config(), "dnorm", a0)
        worst = max(worst, abs(plug_in(ds, p, q, a0).psi - brute_force_psi(table, p, a0)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10 and elapsed < 60
    report(2, ok, f"200 laws, max |plug-in - brute force| = {worst:.2e}, runtime={elapsed:.1f}s")
    assert ok


def test_criterion_03_eif_mean_zero(report):
    start = time.perf_counter()
    rng = np.random.default_rng(33)
    worst = {s: 0.0 for s in STRATEGIES}
    for i in range(40):
        g, a, y = random_fixable_admg(rng)
        table = random_markov_law(g, rng)
        p = _partition(g, a, y)
        ds = law_dataset(table)
        a0 = i % 2
        psi = brute_force_psi(table, p, a0)
        for s in STRATEGIES:
            # the dataset reproduces the law exactly, so the row mean is the expectation
            q = evaluate_nuisances(ds, p, exact_config(), s, a0)
            worst[s] = max(worst[s], abs(eif(ds, p, q, a0, psi).total.mean()))
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-12 for v in worst.values()) and elapsed < 60
    detail = ", ".join(f"{s}={v:.1e}" for s, v in worst.items())
    report(3, ok, f"max |P Phi| over 40 laws: {detail}; runtime={elapsed:.1f}s")
    assert ok


def test_criterion_04_tmle_solves_scores(report):
    rng = np.random.default_rng(44)
    names = ("yinL", "ynotL", "binary_yinL", "weak_overlap_yinL", "weak_overlap_binary_yinL", "interactions_ynotL")
    fits = converged = 0
    bad = []
    for i in range(120):
        name = names[i % len(names)]
        strategy = STRATEGIES[(i // len(names)) % 3]
        n = int(rng.integers(300, 1500))
        a0 = int(rng.integers(0, 2))
        ds = generate(DgpSpec(name, n, int(rng.integers(1 << 30))))
        p = get_dgp(name).partition()
        q = evaluate_nuisances(ds, p, NuisanceConfig(), strategy, a0)
        r = tmle(ds, p, q, a0)
        fits += 1
        if not r.converged:
            continue
        converged += 1
        blocks = eif(ds, p, r.nuisance, a0, r.psi)
        total = blocks.total
        c_n = total.std() / (math.sqrt(n) * math.log(n))
        scores = [blocks.a.mean(), blocks.y.mean(), *(z.mean() for z in blocks.z)]
        if max(abs(s) for s in scores) >= 1e-8 or abs(total.mean()) >= c_n:
            bad.append((name, strategy, n, a0))
    ok = fits >= 100 and converged > 0 and not bad
    report(4, ok, f"{fits} fits, {converged} converged, {len(bad)} converged fits with an unsolved score")
    assert ok


def _correct_arms():
    return tuple(EstimatorSpec(e, s) for s in STRATEGIES for e in ("onestep", "tmle"))


def test_criterion_05_root_n_consistency(report):
    start = time.perf_counter()
    lines, ok = [], True
    for dgp in ("yinL", "ynotL"):
        truth, _ = true_psi(dgp, 1)
        var_phi = eif_variance(dgp, 1, psi=truth)
        res = run_experiment(ExperimentConfig(dgp, (500, 2000, 8000), 300, _correct_arms(), truth=truth, seed=5))
        for spec in _correct_arms():
            row = res.row(spec.name, 8000)
            scaled_bias = math.sqrt(8000) * abs(row.bias)
            ratio = row.n_variance / var_phi
            mc_se = math.sqrt(row.n_variance / row.replications)
            arm_ok = scaled_bias < 0.15 and 0.8 <= ratio <= 1.2
            ok &= arm_ok
            lines.append(f"{dgp}:{spec.name} sqrt(n)|bias|={scaled_bias:.3f} (MC SE {mc_se:.3f}) nvar/VarPhi={ratio:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 15 * 60
    report(5, ok, f"runtime={elapsed:.0f}s; " + "; ".join(lines))
    assert ok


def test_criterion_06_coverage(report):
    start = time.perf_counter()
    lines, ok = [], True
    for dgp in ("yinL", "ynotL"):
        truth, _ = true_psi(dgp, 1)
        res = run_experiment(ExperimentConfig(dgp, (2000,), 500, _correct_arms(), truth=truth, seed=6))
        for row in res.rows:
            ok &= 0.92 <= row.coverage <= 0.98
            lines.append(f"{dgp}:{row.label}={row.coverage:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 10 * 60
    report(6, ok, f"runtime={elapsed:.0f}s; coverage " + " ".join(lines))
    assert ok


def test_criterion_07_weak_overlap(report):
    start = time.perf_counter()
    truth, _ = true_psi("weak_overlap_yinL", 1)
    res = run_experiment(ExperimentConfig("weak_overlap_yinL", (500,), 300, _correct_arms(), truth=truth, seed=7))
    mse_ok = all(res.row(f"tmle/{s}").mse < res.row(f"onestep/{s}").mse for s in STRATEGIES)
    sd_tmle = res.row("tmle/dnorm").sd
    sd_os = res.row("onestep/dnorm").sd
    elapsed = time.perf_counter() - start
    ok = mse_ok and sd_tmle < 1.5 and sd_os > 2 and elapsed <= 10 * 60
    table = " ".join(f"{r.label}:sd={r.sd:.3f},mse={r.mse:.3f}" for r in res.rows)
    report(7, ok, f"TMLE MSE below one-step for all={mse_ok}; {table}; runtime={elapsed:.0f}s")
    assert ok


def test_criterion_08_double_robustness(report):
    start = time.perf_counter()
    ratio_bad = dict(omit_ratio=("X", "M"))
    reg_bad = dict(omit_regression=("X", "M", "L"))
    arms = []
    for s in STRATEGIES:
        for e in ("onestep", "tmle"):
            arms += [EstimatorSpec(e, s, **ratio_bad), EstimatorSpec(e, s, **reg_bad),
                     EstimatorSpec(e, s, **ratio_bad, **reg_bad)]
    truth, _ = true_psi("yinL", 1)
    res = run_experiment(ExperimentConfig("yinL", (8000,), 200, tuple(arms), truth=truth, seed=8))
    ok, lines = True, []
    for spec in arms:
        bias = abs(res.row(spec.name).bias)
        control = bool(spec.omit_ratio and spec.omit_regression)
        ok &= bias > 0.3 if control else bias < 0.1
        lines.append(f"{spec.name}={bias:.3f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed <= 15 * 60
    report(8, ok, f"runtime={elapsed:.0f}s; |bias| " + " ".join(lines))
    assert ok


def test_criterion_09_bounded_tmle(report):
    arms = tuple(EstimatorSpec(e, s) for s in STRATEGIES for e in ("onestep", "tmle"))
    tmle_psi, os_psi, failures = [], [], 0
    for dgp, seed in (("binary_yinL", 91), ("weak_overlap_binary_yinL", 92)):
        res = run_experiment(ExperimentConfig(dgp, (300,), 167, arms, truth=0.5, seed=seed))
        for rec in res.records:
            if rec.psi is None:
                failures += 1
            elif rec.label.startswith("tmle"):
                tmle_psi.append(rec.psi)
            else:
                os_psi.append(rec.psi)
    tmle_psi, os_psi = np.array(tmle_psi), np.array(os_psi)
    outside = int(np.sum((tmle_psi < 0) | (tmle_psi > 1)))
    os_outside = int(np.sum((os_psi < 0) | (os_psi > 1)))
    ok = len(tmle_psi) >= 1000 and outside == 0
    report(9, ok, f"{len(tmle_psi)} TMLE fits, {outside} outside [0,1]; "
                  f"one-step outside [0,1]: {os_outside} of {len(os_psi)}; failed fits: {failures}")
    assert ok


def _aipw(pi_a0, mu, a, y, a0):
    rows = a == a0
    return float(np.mean(mu + rows / pi_a0 * (y - mu)))


def _logistic(design, target):
    beta = np.zeros(design.shape[1])
    for _ in range(100):
        p = expit(design @ beta)
        beta = beta + np.linalg.solve(design.T @ (design * (p * (1 - p))[:, None]), design.T @ (target - p))
    return expit(design @ beta)


def _front_door_enumeration(table, a0):
    # sum_x P(x) sum_m P(m | a0, x) sum_a P(a | x) E[Y | m, a, x]
    total = 0.0
    for x in (0, 1):
        px = table.marginal({"X": x})
        for m in (0, 1):
            pm = table.conditional({"M": m}, {"A": a0, "X": x})
            for a in (0, 1):
                total += px * pm * table.conditional({"A": a}, {"X": x}) * table.conditional(
                    {"Y": 1}, {"M": m, "A": a, "X": x}
                )
    return total


def test_criterion_10_back_door_and_front_door(report):
    rng = np.random.default_rng(10)
    n = 3000
    x = rng.normal(size=n)
    a = rng.binomial(1, expit(0.5 * x)).astype(float)
    y = 1 + 2 * a + x + rng.normal(size=n)
    ds = Dataset.from_vertices({"X": x, "A": a, "Y": y}, binary=["A"])
    g = catalog.back_door()
    cfg = NuisanceConfig(subset_sequential=True)
    design = np.column_stack([np.ones(n), x])
    e = _logistic(design, a)
    gaps = []
    for a0 in (0, 1):
        rows = a == a0
        coef, *_ = np.linalg.lstsq(design[rows], y[rows], rcond=None)
        mu = design @ coef
        pi_a0 = e if a0 == 1 else 1 - e
        os_ = estimate(ds, g, "A", "Y", a0=a0, estimator="onestep", config=cfg)
        gaps.append(abs(os_.psi - _aipw(pi_a0, mu, a, y, a0)))
        tm = estimate(ds, g, "A", "Y", a0=a0, estimator="tmle", config=cfg)
        q = tm.nuisance
        # at the targeted nuisances the AIPW correction vanishes, so both agree
        gaps.append(abs(tm.psi - _aipw(_level(q.p_treat, a0), q.mu, a, y, a0)))
    back_ok = max(gaps) < 1e-8

    law_rng = np.random.default_rng(11)
    fd = catalog.front_door()
    table = random_markov_law(fd, law_rng)
    cells = np.array(list(np.ndindex(table.probs.shape)))
    draws = cells[law_rng.choice(len(cells), size=20_000, p=table.probs.ravel())].astype(float)
    sample = Dataset.from_vertices({v: draws[:, i] for i, v in enumerate(table.names)}, binary=table.names)
    p = _partition(fd)
    z_scores = []
    for a0 in (0, 1):
        want = _front_door_enumeration(table, a0)
        q = evaluate_nuisances(sample, p, exact_config(), "bayes", a0)
        for r in (one_step(sample, p, q, a0), tmle(sample, p, q, a0)):
            z_scores.append(abs(r.psi - want) / r.se)
    front_ok = max(z_scores) < 4
    ok = back_ok and front_ok
    report(10, ok, f"back-door max gap to AIPW = {max(gaps):.1e}; front-door max |z| = {max(z_scores):.2f}")
    assert ok


def _level(p_one, level):
    return p_one if level == 1 else 1 - p_one


def test_criterion_11_cross_fitting(report):
    arms = tuple(EstimatorSpec("onestep", "dnorm", learner="trees", crossfit=k) for k in (None, 5))
    truth, _ = true_psi("crossfit_yinL", 1)
    res = run_experiment(ExperimentConfig("crossfit_yinL", (2000,), 300, arms, truth=truth, seed=11))
    plain = res.row("onestep/dnorm/trees")
    cf = res.row("onestep/dnorm/trees/cf5")
    ok = abs(cf.bias) < abs(plain.bias) and cf.coverage - plain.coverage >= 0.03
    report(11, ok, f"one-step |bias| {abs(plain.bias):.3f} -> {abs(cf.bias):.3f}, "
                   f"coverage {plain.coverage:.3f} -> {cf.coverage:.3f}")
    assert ok


def test_criterion_12_pruning_equivalence(report):
    arms = []
    for s in STRATEGIES:
        arms += [EstimatorSpec("tmle", s), EstimatorSpec("tmle", s, merge=("M", "L"))]
    truth, _ = true_psi("yinL", 1)
    res = run_experiment(ExperimentConfig("yinL", (8000,), 300, tuple(arms), truth=truth, seed=12))
    ok, lines = True, []
    for s in STRATEGIES:
        diff = np.nanmean(np.abs(res.estimates(f"tmle/{s}") - res.estimates(f"tmle/{s}/merged")))
        ok &= diff < 0.05
        lines.append(f"{s}={diff:.4f}")
    report(12, ok, "mean |separate - combined| " + " ".join(lines))
    assert ok
