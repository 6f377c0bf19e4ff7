"""Acceptance suite.  Each test records one PASS/FAIL line, printed in the
"acceptance criteria" section at the end of the pytest run.

Run alone with ``pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import sys
import time

import numpy as np
import pytest

from conftest import BELTWAY_SEED, BELTWAY_STEPS, LAG, record_criterion, stage_seconds, timed_experiment
from slowmode.features import featurize_polar, whiten
from slowmode.lattice_msm import PotentialSpec, beltway_grid, build_transition_model, sample_trajectory
from slowmode.models import (LinearTaeProblem, VdeConfig, autocorrelation, linear_mixed_loss,
                             linear_tae_closed_form, modified_tae_loss, srv_loss, tae_loss, two_component_chain,
                             vde_loss)
from slowmode.neural import MlpSpec, backward, decoder_part, encoder_part, forward, init_params, tae_spec
from slowmode.pipeline import ExperimentConfig, preset, run_experiment
from slowmode.spectral import leading_modes
from slowmode.theory import (conditional_mean_lagged, cross_term, empirical_optimal_decoder_loss,
                             encode_by_quantile, encode_by_r_bin, encode_by_state, encode_by_theta_bin,
                             encode_labels, generalized_autocorrelation, merge_bins, optimal_encoding_loss,
                             tae_loss_bound, variance_explained)

pytestmark = pytest.mark.acceptance


def _within(value, target, rel):
    return abs(value - target) <= rel * target


# 1 -------------------------------------------------------------------------


def test_criterion_1_beltway_spectrum():
    start = time.perf_counter()
    rows = {}
    for convention in (4, 8):
        model = build_transition_model(PotentialSpec(), beltway_grid(20, 200), convention=convention)
        t = leading_modes(model, 4).timescales
        ok = (_within(t[0], 104_565, 0.05) and _within(t[1], 4678, 0.05) and _within(t[2], 4678, 0.05)
              and abs(t[1] - t[2]) / t[1] < 1e-4)
        rows[convention] = (ok, t[:3])
    elapsed = time.perf_counter() - start
    passed = any(ok for ok, _ in rows.values()) and elapsed < 120
    detail = "; ".join(f"{c}-nbr t1={t[0]:.1f} t2={t[1]:.2f} t3={t[2]:.2f} {'ok' if ok else 'off'}"
                       for c, (ok, t) in rows.items())
    record_criterion(1, passed, f"{detail}; {elapsed:.1f}s")
    assert passed


# 2 -------------------------------------------------------------------------


def test_criterion_2_loss_theory_triple():
    start = time.perf_counter()
    model = build_transition_model(PotentialSpec(), beltway_grid(), convention=4)
    traj = sample_trajectory(model, BELTWAY_STEPS, seed=BELTWAY_SEED)
    feats = whiten(featurize_polar(traj, model.grid))
    r_bound = tae_loss_bound(feats, encode_by_r_bin(traj, model.grid), LAG)[0]
    theta = encode_by_theta_bin(traj, model.grid)
    t_bound = tae_loss_bound(feats, theta, LAG)[0]
    opt = optimal_encoding_loss(feats, traj, LAG)
    g = generalized_autocorrelation(feats, theta, LAG)
    elapsed = time.perf_counter() - start
    checks = [abs(r_bound - 2.0) <= 0.01, abs(t_bound - 1.44) <= 0.03, abs(opt - 1.42) <= 0.03,
              abs(g - 0.535) <= 0.02, elapsed < 300]
    passed = all(checks)
    record_criterion(2, passed, f"r-bins {r_bound:.4f}, theta-bins {t_bound:.4f}, optimum {opt:.4f}, "
                                f"G {g:.4f}; {elapsed:.1f}s")
    assert passed


# 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_tae_fails_srv_succeeds(beltway_report):
    rows = {r["name"]: r for r in beltway_report.doc["runs"]}
    tae, srv, mtae = rows["tae"], rows["srv"], rows["mtae"]
    times = {name: stage_seconds.get(f"train-{name}", float("nan")) for name in ("tae", "srv", "mtae")}
    checks = {
        "tae loss": 1.42 <= tae["final_loss"] <= 1.55,
        "tae theta fraction": tae["axis1_fraction"] > 0.8,
        "tae r fraction": tae["axis0_fraction"] < 0.2,
        "srv overlap": srv["overlap"]["1"] > 0.9,
        "srv r fraction": srv["axis0_fraction"] > 0.9,
        "mtae overlap": mtae["overlap"]["1"] > 0.9,
        "mtae r fraction": mtae["axis0_fraction"] > 0.9,
        # nan (cached stage, no timing) fails the comparison on purpose
        "runtime": all(t < 900 for t in times.values()),
    }
    passed = all(checks.values())
    detail = (f"TAE loss {tae['final_loss']:.4f} theta-frac {tae['axis1_fraction']:.3f} "
              f"r-frac {tae['axis0_fraction']:.3f}; SRV overlap {srv['overlap']['1']:.3f} "
              f"r-frac {srv['axis0_fraction']:.3f}; mTAE overlap {mtae['overlap']['1']:.3f} "
              f"r-frac {mtae['axis0_fraction']:.3f}; train s "
              + ", ".join(f"{k} {v:.0f}" for k, v in times.items()))
    failed = [k for k, ok in checks.items() if not ok]
    record_criterion(3, passed, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert passed, failed


# 4 -------------------------------------------------------------------------


def _regression_loss(p, b2):
    # optimal affine decoder for z = b1 x1 + b2 x2 from second moments
    b1 = np.sqrt(1 - b2 ** 2)
    var_z = b1 ** 2 * p.var1 + b2 ** 2 * p.var2
    cov = np.array([b1 * p.var1 * p.A1, b2 * p.var2 * p.A2])
    return p.var1 + p.var2 - np.sum(cov ** 2) / var_z


@pytest.mark.slow
def test_criterion_4_linear_theory(tmp_path):
    p = LinearTaeProblem(1.0, 9.0, 0.9, 0.5)
    grid = np.linspace(0.0, 1.0, 1001)
    brute = np.array([_regression_loss(p, b) for b in grid])
    closed = linear_mixed_loss(p, grid)
    grid_err = float(np.max(np.abs(closed - brute)))
    grid_ok = grid_err < 1e-10 and abs(linear_tae_closed_form(p).min_loss - brute.min()) < 1e-10

    report = run_experiment(preset("linear-synthetic"), tmp_path)
    rows = {r["name"]: r for r in report.doc["runs"]}
    raw, white = rows["linear-tae@raw"], rows["linear-tae@white"]
    checks = [grid_ok, raw["cosine"]["x2"] > 0.999, white["cosine"]["x1"] > 0.999,
              raw["closed_form_gap"] < 1e-3, white["closed_form_gap"] < 1e-3]
    passed = all(checks)
    record_criterion(4, passed, f"grid max err {grid_err:.1e}; raw |cos fast| {raw['cosine']['x2']:.6f} "
                                f"gap {raw['closed_form_gap']:.1e}; whitened |cos slow| "
                                f"{white['cosine']['x1']:.6f} gap {white['closed_form_gap']:.1e}")
    assert passed


# 5 -------------------------------------------------------------------------


def _sticky_walk(seed, n_states=12, n_frames=4000):
    rng = np.random.default_rng(seed)
    table = rng.standard_normal((n_states, 2))
    stay = rng.random(n_frames) < 0.8
    jumps = rng.integers(0, n_states, n_frames)
    states = np.empty(n_frames, dtype=np.int64)
    states[0] = jumps[0]
    for t in range(1, n_frames):
        states[t] = states[t - 1] if stay[t] else jumps[t]
    x = table[states]
    return x - x.mean(axis=0), states


def _second_moment(x, enc, lag):
    table, counts = conditional_mean_lagged(x, enc, lag)
    return np.sum(counts * np.sum(table ** 2, axis=1)) / counts.sum()


def test_criterion_5_identity_suite():
    worst = {"cross": 0.0, "direct": 0.0, "bound": 0.0, "bijection": 0.0, "mtae": 0.0}
    merges_ok = True
    for seed in range(20):
        x, s = _sticky_walk(seed)
        lag = seed % 7
        enc = encode_labels(s % 5)
        decoder = np.random.default_rng(seed).standard_normal((enc.n_bins, 2))
        worst["cross"] = max(worst["cross"], abs(cross_term(x, enc, lag, decoder)))
        direct = np.mean(np.sum(x[lag:] ** 2, axis=1)) - _second_moment(x, enc, lag)
        tabular = empirical_optimal_decoder_loss(x, enc, lag)
        worst["direct"] = max(worst["direct"], abs(tabular - direct))
        worst["bound"] = max(worst["bound"], abs(tabular - tae_loss_bound(x, enc, lag)[0]))

    for seed in range(50):
        x, s = _sticky_walk(1000 + seed)
        enc = encode_by_state(s)
        a, b = np.random.default_rng(seed).choice(enc.n_bins, 2, replace=False)
        merges_ok &= _second_moment(x, merge_bins(enc, a, b), 3) <= _second_moment(x, enc, 3) + 1e-12

    for seed in range(20):
        x, s = _sticky_walk(2000 + seed, n_states=40, n_frames=8000)
        rng = np.random.default_rng(seed)
        latent = rng.standard_normal(40)[s]
        base = encode_by_quantile(latent, 20)
        variants = [encode_labels(rng.permutation(1000)[base.labels]),
                    encode_by_quantile(np.exp(2 * latent) - 3, 20), encode_by_quantile(latent ** 3, 20)]
        ref = (variance_explained(x, base, 4), generalized_autocorrelation(x, base, 4), tae_loss_bound(x, base, 4)[0])
        for v in variants:
            got = (variance_explained(x, v, 4), generalized_autocorrelation(x, v, 4), tae_loss_bound(x, v, 4)[0])
            worst["bijection"] = max(worst["bijection"], max(abs(g - r) for g, r in zip(got, ref)))

    chain = two_component_chain((1.0, 3.0), (0.9, 0.5), 10, 2_000_000, seed=4)
    chain = chain - chain.mean(axis=0)
    g = generalized_autocorrelation(chain, encode_labels(np.sign(chain[:, 0])), 10)
    a = autocorrelation(chain[:-10, 0], chain[10:, 0])

    for seed in range(100):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((300, 2)).cumsum(axis=0) * 0.1
        spec = MlpSpec((2, 6, 1), ("tanh", "linear"))
        params = init_params(spec, rng)
        enc = lambda v: forward(spec, params, v)
        ac = -srv_loss(enc, x[:-5], x[5:])
        worst["mtae"] = max(worst["mtae"], abs(modified_tae_loss(enc, x[:-5], x[5:]) - (2 - 2 * ac)))

    passed = (worst["cross"] < 1e-10 and worst["direct"] < 1e-10 and worst["bound"] < 1e-10 and merges_ok
              and worst["bijection"] < 1e-12 and abs(g - a) < 0.01 and worst["mtae"] < 1e-8)
    record_criterion(5, passed, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
                     + f", merges {'ok' if merges_ok else 'violated'}, |G-A| {abs(g - a):.4f}")
    assert passed


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_torus_surrogate(tmp_path):
    results, times = {}, {}
    for name in ("torus-eq17", "torus-eq18"):
        t0 = time.perf_counter()
        report = timed_experiment(preset(name), tmp_path / name, times={})
        times[name] = time.perf_counter() - t0
        results[name] = {r["name"]: r["group"] for r in report.doc["runs"]}
    slow, fast = "phi", "psi"
    checks = [results["torus-eq17"]["tae"] == fast, results["torus-eq17"]["srv"] == slow,
              results["torus-eq18"]["tae"] == slow, results["torus-eq18"]["srv"] == slow,
              all(t < 900 for t in times.values())]
    passed = all(checks)
    record_criterion(6, passed, "; ".join(f"{n}: TAE {r['tae']}, SRV {r['srv']} ({times[n]:.0f}s)"
                                          for n, r in results.items()))
    assert passed


# 7 -------------------------------------------------------------------------


SMALL = """
[experiment]
name = determinism
schema_version = 1
[potential]
kind = beltway
n_r = 5
n_theta = 20
[trajectory]
n_steps = 40000
seed = 5
[features]
kind = polar
whiten = true
[training]
objectives = tae, srv, vde
lag = 40
stride = 4
batch_size = 1024
max_epochs = 3
seed = 11
hidden = 8
[analysis]
spectrum_k = 4
encodings = by-r-bin, by-theta-bin
lag = 40
"""


def _fd_error(seed):
    rng = np.random.default_rng(seed)
    hidden = tuple(rng.integers(1, 7, rng.integers(0, 4)))
    act = "tanh" if seed % 2 == 0 else "linear"
    spec = MlpSpec((2, *hidden, 2), (act,) * len(hidden) + ("linear",))
    params = init_params(spec, rng)
    x = rng.standard_normal((5, 2))
    w = rng.standard_normal((5, 2))
    _, cache = forward(spec, params, x, keep=True)
    grad = backward(spec, params, cache, w).flat()
    theta = params.flat()
    probe = params.copy()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += 1e-5
        probe.set_flat(t)
        up = np.sum(w * forward(spec, probe, x))
        t[i] -= 2e-5
        probe.set_flat(t)
        fd[i] = (up - np.sum(w * forward(spec, probe, x))) / 2e-5
    return np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12)


def test_criterion_7_engine_checks(tmp_path):
    fd = max(_fd_error(seed) for seed in range(100))

    bitwise = True
    for seed in range(20):
        rng = np.random.default_rng(seed)
        x0, x1 = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
        spec = tae_spec(hidden=5, depth=1)
        params = init_params(spec, seed)
        es, ep = encoder_part(spec, params)
        ds, dp = decoder_part(spec, params)
        e, d = (lambda v: forward(es, ep, v)), (lambda z: forward(ds, dp, z))
        bitwise &= vde_loss(e, d, x0, x1, VdeConfig(1.0)) == tae_loss(e, d, x0, x1)
        bitwise &= vde_loss(e, d, x0, x1, VdeConfig(0.0)) == srv_loss(e, x0, x1)

    cfg = ExperimentConfig.from_text(SMALL)
    first = run_experiment(cfg, tmp_path / "a").to_bytes()
    second = run_experiment(cfg, tmp_path / "b").to_bytes()
    same = first == second

    passed = fd < 1e-5 and bitwise and same
    record_criterion(7, passed, f"max finite-difference rel err {fd:.1e} over 100 nets; VDE endpoints "
                                f"{'bitwise equal' if bitwise else 'differ'}; reports "
                                f"{'identical' if same else 'differ'}")
    assert passed


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
