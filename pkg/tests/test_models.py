import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slowmode.features import FeatureTrajectory, whiten
from slowmode.models import (CollapsedEncoder, LinearTaeProblem, TrainingConfig, TrainingDivergence, VdeConfig,
                             autocorrelation, default_spec, encode, evaluate_objective, flip_probability,
                             linear_mixed_loss, linear_tae_closed_form, modified_tae_loss,
                             objective_loss_and_grad, srv_loss, tae_loss, train, two_component_chain, vde_loss)
from slowmode.neural import MlpSpec, decoder_part, encoder_part, forward, init_params, tae_spec
from slowmode.neural import backward, model_from_dict
from slowmode.theory import conditional_mean_lagged, encode_by_quantile, tae_loss_bound

LAG = 3000


def random_encoder(seed, hidden=6):
    spec = MlpSpec((2, hidden, 1), ("tanh", "linear"))
    params = init_params(spec, seed)
    return lambda x: forward(spec, params, x)


def tae_maps(seed, hidden=5):
    spec = tae_spec(hidden=hidden, depth=1)
    params = init_params(spec, seed)
    es, ep = encoder_part(spec, params)
    ds, dp = decoder_part(spec, params)
    return (lambda x: forward(es, ep, x)), (lambda z: forward(ds, dp, z))


# losses


def test_identity_reconstruction_at_lag_zero(rng):
    x = rng.standard_normal((100, 2))
    assert tae_loss(lambda v: v, lambda z: z, x, x) == 0.0


def test_zero_network_loss_is_total_variance(beltway_features):
    x = beltway_features.frames
    zero = lambda v: np.zeros((len(v), 2))
    assert tae_loss(zero, lambda z: z, x[:-LAG], x[LAG:]) == pytest.approx(2.0, abs=1e-3)


def test_perfect_autocorrelation(rng):
    x = rng.standard_normal((500, 2))
    assert srv_loss(lambda v: v[:, :1], x, x) == -1.0


def test_random_sign_flip_kills_autocorrelation(rng):
    z = rng.standard_normal(200_000)
    flipped = z * rng.choice([-1.0, 1.0], z.size)
    assert abs(autocorrelation(z, flipped)) < 0.01


def test_collapsed_encoder_is_an_error(rng):
    x = rng.standard_normal((100, 2))
    const = lambda v: np.ones((len(v), 1))
    with pytest.raises(CollapsedEncoder):
        srv_loss(const, x, x)
    with pytest.raises(CollapsedEncoder):
        modified_tae_loss(const, x, x)


def test_modified_tae_vanishes_for_stationary_latent(rng):
    x = rng.standard_normal((100, 2))
    assert modified_tae_loss(lambda v: v[:, :1], x, x) == 0.0


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_modified_tae_is_two_minus_two_a(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((300, 2)).cumsum(axis=0) * 0.1
    enc = random_encoder(seed)
    a = -srv_loss(enc, x[:-5], x[5:])
    assert abs(modified_tae_loss(enc, x[:-5], x[5:]) - (2 - 2 * a)) < 1e-8


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_vde_endpoints_are_bitwise(seed):
    rng = np.random.default_rng(seed)
    x0, x1 = rng.standard_normal((50, 2)), rng.standard_normal((50, 2))
    e, d = tae_maps(seed)
    assert vde_loss(e, d, x0, x1, VdeConfig(1.0)) == tae_loss(e, d, x0, x1)
    assert vde_loss(e, d, x0, x1, VdeConfig(0.0)) == srv_loss(e, x0, x1)


def test_vde_config_range():
    with pytest.raises(ValueError):
        VdeConfig(1.5)


def test_batch_autocorrelation_matches_full_set(beltway_features, rng):
    # SRV statistics from shuffled 1024-pair batches agree with the full-set value
    x = beltway_features.frames
    z = x[:, 0] ** 2 + x[:, 1] ** 2
    t = np.arange(0, z.size - LAG, 10)
    full = autocorrelation(z[t], z[t + LAG])
    order = rng.permutation(t)[: 200 * 1024].reshape(200, 1024)
    batches = [autocorrelation(z[b], z[b + LAG]) for b in order]
    assert abs(np.mean(batches) - full) < 0.01


# gradients of the objectives


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["tae", "srv", "mtae", "vde"]), st.floats(0.0, 1.0))
def test_objective_gradients(seed, objective, lam):
    rng = np.random.default_rng(seed)
    spec = tae_spec(hidden=3, depth=1) if objective in ("tae", "vde") else MlpSpec((2, 3, 1), ("tanh", "linear"))
    params = init_params(spec, rng)
    x0 = rng.standard_normal((16, 2))
    x1 = 0.7 * x0 + 0.3 * rng.standard_normal((16, 2))
    _, grad = objective_loss_and_grad(objective, spec, params, x0, x1, lam)
    theta = params.flat()
    probe = params.copy()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        t = theta.copy()
        t[i] += 1e-5
        probe.set_flat(t)
        up = objective_loss_and_grad(objective, spec, probe, x0, x1, lam)[0]
        t[i] -= 2e-5
        probe.set_flat(t)
        fd[i] = (up - objective_loss_and_grad(objective, spec, probe, x0, x1, lam)[0]) / 2e-5
    g = grad.flat()
    assert np.linalg.norm(g - fd) <= 1e-5 * max(np.linalg.norm(fd), 1e-8)


def test_default_specs():
    assert default_spec("vde").widths == (2, 50, 50, 1, 50, 50, 2)
    assert default_spec("mtae").widths == (2, 50, 50, 1)
    with pytest.raises(ValueError):
        default_spec("pca")


# linear theory


def test_closed_form_matches_brute_force_grid():
    for var1, var2, a1, a2 in [(1, 1, 0.9, 0.5), (1, 9, 0.9, 0.5), (2.5, 0.7, 0.3, 0.95)]:
        p = LinearTaeProblem(var1, var2, a1, a2)
        sol = linear_tae_closed_form(p)
        grid = np.linspace(0, 1, 1001)
        brute = np.array([linear_mixed_loss(p, b) for b in grid])
        np.testing.assert_allclose(sol.loss_curve, brute, atol=1e-10)
        assert sol.min_loss == pytest.approx(brute.min(), abs=1e-10)


def _brute_mixed_loss(p, b2):
    """Optimal affine decoder for z = b1 x1 + b2 x2, computed from covariances."""
    b1 = np.sqrt(1 - b2 ** 2)
    var_z = b1 ** 2 * p.var1 + b2 ** 2 * p.var2
    cov = np.array([b1 * p.var1 * p.A1, b2 * p.var2 * p.A2])
    return p.var1 + p.var2 - np.sum(cov ** 2) / var_z


def test_mixed_loss_matches_regression():
    p = LinearTaeProblem(1.0, 9.0, 0.9, 0.5)
    for b2 in np.linspace(0.01, 0.99, 25):
        assert linear_mixed_loss(p, b2) == pytest.approx(_brute_mixed_loss(p, b2), abs=1e-10)


def test_whitened_case_picks_slow_mode():
    sol = linear_tae_closed_form(LinearTaeProblem(1.0, 1.0, 0.9, 0.5))
    assert sol.argmin_b2 == 0.0
    assert sol.min_loss == pytest.approx(1.19, abs=1e-12)


def test_large_fast_variance_picks_fast_mode():
    sol = linear_tae_closed_form(LinearTaeProblem(1.0, 9.0, 0.9, 0.5))
    assert sol.argmin_b2 == 1.0
    assert sol.min_loss == pytest.approx(10 - 2.25, abs=1e-12)


def test_endpoint_branch():
    p = LinearTaeProblem(1.0, 9.0, 0.9, 0.5)
    assert linear_mixed_loss(p, 0.0) == pytest.approx(10 - 0.81, abs=1e-15)


def test_branch_continuity():
    p = LinearTaeProblem(1.0, 9.0, 0.9, 0.5)
    assert linear_mixed_loss(p, 1e-12) == pytest.approx(linear_mixed_loss(p, 0.0), abs=1e-10)
    assert linear_mixed_loss(p, 1 - 1e-13) == pytest.approx(linear_mixed_loss(p, 1.0), abs=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.1, 10), st.floats(0.1, 10), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_mixed_loss_is_monotone(var1, var2, a1, a2):
    p = LinearTaeProblem(var1, var2, a1, a2)
    curve = linear_mixed_loss(p, np.linspace(0, 1, 201))
    d = np.diff(curve)
    assert np.all(d <= 1e-12) or np.all(d >= -1e-12)


def test_tie_is_reported():
    sol = linear_tae_closed_form(LinearTaeProblem(1.0, 4.0, 0.5, 0.25))
    assert sol.tie and sol.argmin_b2 is None


def test_two_component_chain_statistics():
    x = two_component_chain((1.0, 3.0), (0.9, 0.5), 10, 2_000_000, seed=1)
    np.testing.assert_allclose(x.var(axis=0), [1.0, 9.0], rtol=0.02)
    assert autocorrelation(x[:-10, 0], x[10:, 0]) == pytest.approx(0.9, abs=0.01)
    assert autocorrelation(x[:-10, 1], x[10:, 1]) == pytest.approx(0.5, abs=0.01)
    assert flip_probability(0.9, 10) == pytest.approx(0.5 * (1 - 0.9 ** 0.1))


# training


def _toy_features(n=20_000, seed=0):
    x = two_component_chain((1.0, 1.0), (0.9, 0.3), 5, n, seed=seed)
    return FeatureTrajectory(x - x.mean(axis=0))


def test_training_is_deterministic():
    cfg = TrainingConfig(lag=5, stride=1, batch_size=1024, max_epochs=3, seed=3, hidden=4)
    a = train("srv", _toy_features(), cfg)
    b = train("srv", _toy_features(), cfg)
    assert a.train_history == b.train_history and a.validation_history == b.validation_history
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())


def test_small_batches_rejected_for_autocorrelation_objectives():
    with pytest.raises(ValueError):
        train("srv", _toy_features(), TrainingConfig(lag=5, stride=1, batch_size=256))


def test_unknown_objective():
    with pytest.raises(ValueError):
        train("pca", _toy_features(), TrainingConfig(lag=5, stride=1))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_carries_last_finite_state():
    feats = FeatureTrajectory(_toy_features().frames * 1e6)
    cfg = TrainingConfig(lag=5, stride=1, batch_size=1024, max_epochs=50, learning_rate=1e200, seed=0)
    with pytest.raises(TrainingDivergence) as info:
        train("linear-tae", feats, cfg)
    assert info.value.params is not None
    assert np.all(np.isfinite(info.value.params.flat()))


def test_early_stopping_returns_best_parameters():
    cfg = TrainingConfig(lag=5, stride=1, batch_size=1024, max_epochs=40, patience=2, seed=0, hidden=4)
    run = train("srv", _toy_features(), cfg)
    best = evaluate_objective("srv", run.spec, run.params, _toy_features(), 5, index=None)
    assert run.best_validation == min(run.validation_history)
    assert np.isfinite(best)


def test_linear_tae_reaches_closed_form():
    feats = whiten(FeatureTrajectory(two_component_chain((1.0, 3.0), (0.9, 0.5), 10, 1_000_000, seed=2)))
    x = feats.frames
    a = [autocorrelation(x[:-10, i], x[10:, i]) for i in range(2)]
    cf = linear_tae_closed_form(LinearTaeProblem(x[:, 0].var(), x[:, 1].var(), a[0], a[1]))
    run = train("linear-tae", feats, TrainingConfig(lag=10, stride=1, batch_size=4096, max_epochs=100,
                                                      patience=10, learning_rate=1e-2, seed=1))
    loss = evaluate_objective("tae", run.spec, run.params, feats, 10)
    assert loss == pytest.approx(cf.min_loss, abs=1e-3)


# beltway training (uses the shared experiment run)


def _run(report, name):
    return next(r for r in report.doc["runs"] if r["name"] == name)


@pytest.mark.slow
def test_srv_autocorrelation_reaches_oracle(beltway_report, beltway_modes):
    a = -_run(beltway_report, "srv")["final_loss"]
    assert beltway_modes.eigenvalues[1] ** LAG - 0.05 <= a <= 1.0


@pytest.mark.slow
def test_tae_training_loss_in_expected_range(beltway_report):
    assert 1.42 <= _run(beltway_report, "tae")["final_loss"] <= 1.55


@pytest.mark.slow
def test_vde_sits_between_tae_and_srv(beltway_report):
    tae = _run(beltway_report, "tae")["overlap"]["1"]
    srv = _run(beltway_report, "srv")["overlap"]["1"]
    vde = _run(beltway_report, "vde")["overlap"]["1"]
    assert tae < vde < srv


def _fit_decoder(width, z_bins, targets, weights, seed=0):
    """Full-batch L-BFGS fit of a [1-width-2] tanh decoder to the per-bin
    lagged means, weighted by bin occupancy (equivalent to fitting all pairs)."""
    from scipy.optimize import minimize

    spec = MlpSpec((1, width, 2), ("tanh", "linear"))
    params = init_params(spec, seed)
    w = weights[:, None] / weights.sum()

    def fun(theta):
        params.set_flat(theta)
        out, cache = forward(spec, params, z_bins, keep=True)
        r = out - targets
        return float(np.sum(w * r * r)), backward(spec, params, cache, 2 * w * r).flat()

    res = minimize(fun, params.flat(), jac=True, method="L-BFGS-B", options={"maxiter": 5000, "gtol": 1e-12})
    params.set_flat(res.x)
    return spec, params


@pytest.mark.slow
def test_neural_decoder_gap_shrinks_with_width(beltway_report, beltway_run_dir, beltway_features):
    doc = json.loads(next((beltway_run_dir / "artifacts").glob("train-tae-*.json")).read_text())
    spec, params = model_from_dict(doc["model"])
    x = beltway_features.frames
    enc = encode_by_quantile(encode(spec, params, x), 200)
    bound, _, _ = tae_loss_bound(x, enc, LAG)
    z = encode(spec, params, x)
    table, counts = conditional_mean_lagged(x, enc, LAG)
    zb = np.bincount(enc.labels, weights=z, minlength=enc.n_bins) / np.bincount(enc.labels, minlength=enc.n_bins)
    zb = (zb - zb.mean()) / zb.std()
    used = counts > 0
    n = x.shape[0] - LAG
    gaps = []
    for width in (10, 50, 200):
        dspec, dparams = _fit_decoder(width, zb[used, None], table[used], counts[used])
        # only 200 distinct inputs: decode those, then index per frame
        pred = forward(dspec, dparams, zb[:, None])[enc.labels[:n]]
        loss = float(np.mean(np.sum((x[LAG:] - pred) ** 2, axis=1)))
        assert loss >= bound - 1e-6
        gaps.append(loss - bound)
    assert gaps[1] <= gaps[0] + 1e-6 and gaps[2] <= gaps[1] + 1e-6
    assert gaps[2] < gaps[0]
