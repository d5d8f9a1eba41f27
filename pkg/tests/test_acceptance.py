"""Acceptance criteria, one test (or one test per clause) each.

Every test records a single PASS/FAIL line, printed in the terminal summary.
The experiment-scale tests share one sweep run.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ocformer.cli import main
from ocformer.core import ParticleState, SystemConfig, WeightAction, forward_sequence, particle_loss, particle_trajectory
from ocformer.dp import backward_induction, exhaustive_search, expand_reachable, extract_open_loop, quantized_rollout
from ocformer.experiments import (
    Dataset,
    DatasetSpec,
    generate_dataset,
    mean_gap_by_size,
    quadratic_fit,
    robustness_study,
    run_training_sweep,
    target_map,
)
from ocformer.lifting import EnsembleState, push_forward, rollout, terminal_cost
from ocformer.quantization import (
    build_action_net,
    build_state_grid,
    quantize_measure,
    quantize_measure_states,
    quantize_samples,
    quantized_cost_matrix,
    quantized_ensemble_cost,
    quantizer_error_bound,
)
from ocformer.transport import DiscreteMeasure, wasserstein2_sq, wasserstein_bruteforce

CFG = SystemConfig()  # N=4, d=2, T=2, beta=0.5, relu, lam=32
N_GRID, ELL = 10, 20
LEVELS = list(range(10, 101, 10))


def verdict(label, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_criterion_1_transport_matches_bruteforce():
    start = time.perf_counter()
    worst, count = 0.0, 0
    for N in (2, 3, 4, 5):
        rng = np.random.default_rng(1000 + N)
        for _ in range(50):
            P = DiscreteMeasure.empirical(rng.uniform(-1, 1, (N, 2)))
            Q = DiscreteMeasure.empirical(rng.uniform(-1, 1, (N, 2)))
            worst = max(worst, abs(wasserstein2_sq(P, Q, CFG.lam)[0] - wasserstein_bruteforce(P, Q, CFG.lam)))
            count += 1
    elapsed = time.perf_counter() - start
    verdict(
        "1 transport oracle",
        count == 200 and worst <= 1e-9 and elapsed < 10,
        f"{count} pairs, max |diff| {worst:.2e} (tol 1e-9), {elapsed:.2f}s (< 10s)",
    )


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DatasetSpec(), CFG.state_box)


def test_criterion_2_lifted_cost_equals_particle_loss(dataset):
    x, y = Dataset.arrays(dataset.train)
    E0, targets = EnsembleState.from_features(x), EnsembleState.from_features(y)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(50):
        seq = [WeightAction.random(CFG, rng) for _ in range(CFG.T)]
        out = [particle_trajectory(xi, seq, CFG)[-1] for xi in x]
        lifted = terminal_cost(rollout(E0, seq, CFG), targets, CFG.lam)
        worst = max(worst, abs(lifted - particle_loss(out, y)))
    verdict("2 lift equivalence", worst <= 1e-9, f"50 sequences at lam={CFG.lam}, max |diff| {worst:.2e} (tol 1e-9)")


def test_criterion_3_particles_commute_with_push_forward():
    bad = 0
    for seed in range(50):
        rng = np.random.default_rng(3000 + seed)
        x = rng.uniform(-1, 1, (CFG.N, CFG.d))
        seq = [WeightAction.random(CFG, rng) for _ in range(3)]
        mu = DiscreteMeasure.empirical(x)
        for t in range(len(seq)):
            mu = push_forward(mu, seq[t], CFG)
            particles = forward_sequence(x, seq[: t + 1], CFG)
            if DiscreteMeasure.from_atoms(particles, [Fraction(1, CFG.N)] * CFG.N) != mu:
                bad += 1
    verdict("3 particle/measure commutation", bad == 0, f"50 instances x 3 layers, {bad} mismatches (exact atom equality)")


def test_criterion_4_dp_matches_exhaustive_search():
    grid = build_state_grid(CFG.state_box, 5, CFG.N)
    cost = quantized_cost_matrix(grid, CFG.lam)
    worst, rollout_exact, cases = 0.0, True, 0
    for M in (1, 2, 3, 4):
        for T in (1, 2, 3):
            cfg = SystemConfig(T=T)
            rng = np.random.default_rng(40 + 10 * M + T)
            x = rng.uniform(-1, 1, (4, 4, 2))
            init = quantize_samples(x, grid, 8)
            targets = quantize_samples([target_map(s) for s in x], grid, 8)
            net = build_action_net(cfg, "sample", size=M, seed=M * 7 + T)
            reach = expand_reachable(init, net, grid, cfg)
            policy = backward_induction(reach, targets, cost)
            best, _ = exhaustive_search(init, net, targets, grid, cfg, cost)
            worst = max(worst, abs(policy.value(reach.initial) - best))
            ol = extract_open_loop(policy, reach)
            final = quantized_rollout(init, ol.actions, grid, cfg)
            rollout_exact &= quantized_ensemble_cost(final, targets, cost) == ol.value
            cases += 1
    verdict(
        "4 DP exactness",
        worst <= 1e-12 and rollout_exact,
        f"{cases} fixtures (M<=4, T<=3), max |DP - exhaustive| {worst:.1e} (tol 1e-12), open-loop rollout bit-exact: {rollout_exact}",
    )


def test_criterion_5_quantizer_bounds():
    worst_ratio = 0.0
    for n in (5, 10, 20):
        grid = build_state_grid(CFG.state_box, n, CFG.N)
        rng = np.random.default_rng(500 + n)
        for _ in range(100):
            k = int(rng.integers(1, 9))
            feats = rng.uniform(-1, 1, (k, 2))
            pes = rng.integers(1, CFG.N + 1, k)
            atoms = [ParticleState(Fraction(int(p), CFG.N), f) for p, f in zip(pes, feats)]
            counts = rng.multinomial(1000, rng.dirichlet(np.ones(k)))
            mu = DiscreteMeasure.from_atoms(atoms, [Fraction(int(c), 1000) for c in counts])
            w = np.sqrt(wasserstein2_sq(mu, quantize_measure_states(mu, grid), CFG.lam)[0])
            worst_ratio = max(worst_ratio, w * n)
    rng = np.random.default_rng(55)
    simplex_ok = True
    for _ in range(100):
        m = int(rng.integers(1, 1000))
        ell = int(rng.integers(1, 200))
        p = rng.dirichlet(np.ones(m))
        err = np.linalg.norm(quantize_measure(p, ell).probabilities(m) - p)
        simplex_ok &= bool(err <= quantizer_error_bound(m, ell))
    verdict(
        "5 quantizer bounds",
        worst_ratio <= 1.0 and simplex_ok,
        f"max n*W(mu, Q mu) = {worst_ratio:.4f} (<= 1); simplex error within bound on 100 points: {simplex_ok}",
    )


@pytest.fixture(scope="module")
def sweep(dataset):
    grid = build_state_grid(CFG.state_box, N_GRID, CFG.N)
    start = time.perf_counter()
    rows = run_training_sweep(CFG, dataset, grid, ELL, LEVELS, seed=0)
    return rows, time.perf_counter() - start


@pytest.mark.slow
def test_criterion_6a_train_error_monotone(sweep):
    rows, _ = sweep
    train = [r["train_error"] for r in rows]
    ok = all(b <= a for a, b in zip(train, train[1:]))
    verdict("6a sweep train error non-increasing", ok, "train errors " + ", ".join(f"{v:.5f}" for v in train))


@pytest.mark.slow
def test_criterion_6b_errors_at_level_100(sweep):
    rows, _ = sweep
    last = rows[-1]
    ok = last["train_error"] < 0.016 and last["test_error"] < 0.02
    verdict(
        "6b level-100 errors",
        ok,
        f"train {last['train_error']:.5f} (< 0.016), test {last['test_error']:.5f} (< 0.02)",
    )


@pytest.mark.slow
def test_criterion_6c_sweep_wall_time(sweep):
    _, total = sweep
    verdict("6c sweep wall time", total <= 30 * 60, f"{total:.1f}s for levels 10..100 (<= 1800s)")


@pytest.mark.slow
def test_criterion_7_runtime_is_quadratic(sweep):
    rows, _ = sweep
    coef, r2 = quadratic_fit([r["level"] for r in rows], [r["wall_seconds"] for r in rows])
    verdict("7 runtime quadratic fit", r2 >= 0.98, f"R^2 = {r2:.5f} (>= 0.98), coefficients {np.round(coef, 6).tolist()}")


@pytest.mark.slow
def test_criterion_8_robustness_gap_shrinks():
    grid = build_state_grid(CFG.state_box, N_GRID, CFG.N)
    net = build_action_net(CFG, "sample", size=20, seed=0)
    rows = robustness_study(CFG, DatasetSpec(), CFG.state_box, grid, ELL, net, [5, 15, 35], [0, 1, 2, 3, 4], truth_size=200)
    gaps = mean_gap_by_size(rows)
    ok = all(b <= 1.1 * a for (_, a), (_, b) in zip(gaps, gaps[1:]))
    verdict(
        "8 robustness trend",
        ok,
        "mean gap by K_r " + ", ".join(f"{K}: {g:.5f}" for K, g in gaps) + " (each <= 1.1 x previous)",
    )


def test_criterion_9_train_is_byte_deterministic(tmp_path):
    assert main(["generate-data", "--out-dir", str(tmp_path / "d")]) == 0
    ds = str(tmp_path / "d" / "dataset.json")
    assert main(["train", "--dataset", ds, "--out-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--dataset", ds, "--out-dir", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "policy.json").read_bytes()
    b = (tmp_path / "b" / "policy.json").read_bytes()
    verdict("9 determinism", a == b, f"two train runs, policy files identical: {a == b} ({len(a)} bytes)")
