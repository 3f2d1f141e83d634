"""Latent prior tests: factorized CDF chain and EN-fitted mixtures.

Oracles: the closed-form logistic the CDF chain collapses to at zero
jitter, scipy mixture densities, and plain numpy sample moments.
"""

import math

import numpy as np
import pytest
from scipy import stats

from radogaga.numerics import (
    Layer,
    MlpSpec,
    NumericError,
    ParamStore,
    Tape,
    backward,
    finite_difference_gradient,
    init_mlp_params,
    make_rng,
    mlp_forward,
)
from radogaga.priors import (
    FACTORIZED_WIDTHS,
    GmmValues,
    aggregate_gmm,
    cov_penalty_node,
    en_memberships,
    factorized_cdf,
    factorized_logp,
    factorized_logp_node,
    gmm_energy,
    gmm_energy_node,
    gmm_fit_batch,
    gmm_params_from_values,
    init_factorized,
)


def _factorized_store(n_dims, jitter, seed=0):
    store = ParamStore()
    init_factorized(store, n_dims, make_rng(seed), jitter=jitter)
    return store


# ---- factorized CDF prior ---------------------------------------------------


def test_factorized_param_shapes():
    store = _factorized_store(4, jitter=0.01)
    depth = len(FACTORIZED_WIDTHS) - 1
    for k in range(depth):
        w_in, w_out = FACTORIZED_WIDTHS[k], FACTORIZED_WIDTHS[k + 1]
        assert store[f"prior.h{k}"].shape == (4, w_in, w_out)
        assert store[f"prior.b{k}"].shape == (4, 1, w_out)
        if k < depth - 1:
            assert store[f"prior.a{k}"].shape == (4, 1, w_out)


def test_factorized_zero_jitter_is_logistic():
    # at zero jitter every gate is closed and the chain collapses to
    # sigmoid(z * prod softplus(softplus_inv(1/w))) = logistic with scale 1
    store = _factorized_store(3, jitter=0.0)
    z = np.array([[0.0, 1.0, -2.0]])
    cdf = factorized_cdf(store, z)
    logistic = 1.0 / (1.0 + np.exp(-z))
    assert np.allclose(cdf, logistic, atol=1e-12)

    # central bin mass of the standard logistic: cdf(1/2) - cdf(-1/2)
    mass = math.tanh(0.25)  # = sigmoid(0.5) - sigmoid(-0.5)
    assert abs(mass - 0.2449186624) < 1e-9
    logp = factorized_logp(store, np.zeros((1, 3)))
    assert logp.shape == (1,)
    want = 3 * math.log(mass + 1e-12)
    assert abs(logp[0] - want) < 1e-10
    assert abs(logp[0] / 3 - (-1.4069)) < 1e-4


def test_factorized_cdf_monotone_and_bounded():
    store = _factorized_store(2, jitter=0.01, seed=3)
    grid = np.linspace(-30, 30, 401)
    z = np.stack([grid, -grid], axis=1)
    cdf = factorized_cdf(store, z)
    assert np.all(cdf > 0) and np.all(cdf < 1)
    assert np.all(np.diff(cdf[:, 0]) > 0)
    assert np.all(np.diff(cdf[:, 1]) < 0)

    tails = factorized_cdf(store, np.array([[-1e4, -1e4], [1e4, 1e4]]))
    assert np.all(tails[0] < 1e-6)
    assert np.all(tails[1] > 1 - 1e-6)


def test_factorized_logp_floor_keeps_logs_finite():
    store = _factorized_store(2, jitter=0.01, seed=4)
    logp = factorized_logp(store, np.array([[1e4, -1e4]]))
    assert np.isfinite(logp).all()
    assert logp[0] >= 2 * math.log(1e-12) - 1e-9


def test_factorized_bin_mass_integrates_cdf():
    # bin probability equals cdf(z + 1/2) - cdf(z - 1/2), per dimension
    store = _factorized_store(3, jitter=0.01, seed=5)
    z = make_rng(6).normal(size=(8, 3))
    hi = factorized_cdf(store, z + 0.5)
    lo = factorized_cdf(store, z - 0.5)
    want = np.log(hi - lo + 1e-12).sum(axis=1)
    assert np.allclose(factorized_logp(store, z), want, atol=1e-12)


def test_factorized_logp_gradients():
    store = _factorized_store(2, jitter=0.01, seed=7)
    z = make_rng(8).normal(size=(4, 2))
    tape = Tape()
    node = factorized_logp_node(tape, store, tape.const(z))
    grads = backward(tape, tape.mean(node))
    for name in store.names():
        def f(v, name=name):
            s2 = store.copy()
            s2[name] = v
            return float(factorized_logp(s2, z).mean())

        fd = finite_difference_gradient(f, store[name])
        err = np.abs(grads[name] - fd)
        assert np.all(err <= 1e-4 * np.abs(fd) + 1e-8), name


# ---- estimation network -----------------------------------------------------


def _en_spec(in_dim=3, comps=2):
    return MlpSpec(
        in_dim=in_dim,
        layers=(Layer(10, "tanh", dropout=0.5), Layer(comps, "softmax")),
        prefix="en",
    )


def test_en_memberships_rows_sum_to_one():
    spec = _en_spec()
    store = ParamStore()
    init_mlp_params(store, spec, make_rng(0))
    feat = make_rng(1).normal(size=(20, 3))
    gamma = en_memberships(store, spec, feat)
    assert gamma.value.shape == (20, 2)
    assert np.allclose(gamma.value.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(gamma.value > 0)


def test_en_memberships_requires_softmax_head():
    spec = MlpSpec(in_dim=3, layers=(Layer(2, "tanh"),), prefix="en")
    store = ParamStore()
    init_mlp_params(store, spec, make_rng(0))
    with pytest.raises(ValueError):
        en_memberships(store, spec, np.zeros((1, 3)))


# ---- batch-fitted mixture ---------------------------------------------------


def test_gmm_fit_uniform_memberships_equals_sample_moments():
    rng = make_rng(2)
    feat = rng.normal(size=(64, 3)) * np.array([1.0, 2.0, 0.5]) + 1.0
    tape = Tape()
    gamma = tape.const(np.full((64, 1), 1.0))
    gmm = gmm_fit_batch(tape, tape.const(feat), gamma)
    pi = gmm.pis[0].value
    mu = gmm.mus[0].value
    sigma = gmm.sigmas[0].value
    assert abs(pi - 1.0) < 1e-12
    assert np.allclose(mu, feat.mean(axis=0), atol=1e-12)
    centered = feat - feat.mean(axis=0)
    want = centered.T @ centered / 64 + 1e-6 * np.eye(3)
    assert np.allclose(sigma, want, atol=1e-12)


def test_gmm_fit_collapsed_component_errors():
    tape = Tape()
    feat = tape.const(np.ones((4, 2)))
    gamma = tape.const(np.array([[1.0, 0.0]] * 4))
    with pytest.raises(NumericError, match="1"):
        gmm_fit_batch(tape, feat, gamma)


def test_gmm_energy_peak_values():
    # energy of a standard normal at its mean is (D/2) log 2pi
    one = GmmValues(
        pi=np.array([1.0]), mu=np.zeros((1, 1)), sigma=np.eye(1)[None]
    )
    e1 = gmm_energy(np.zeros((1, 1)), one)
    assert abs(e1[0] - 0.5 * math.log(2 * math.pi)) < 1e-12
    assert abs(e1[0] - 0.91894) < 5e-6

    three = GmmValues(
        pi=np.array([1.0]), mu=np.zeros((1, 3)), sigma=np.eye(3)[None]
    )
    e3 = gmm_energy(np.zeros((1, 3)), three)
    assert abs(e3[0] - 1.5 * math.log(2 * math.pi)) < 1e-12
    assert abs(e3[0] - 2.75682) < 5e-6


def test_gmm_energy_matches_scipy_mixture():
    rng = make_rng(3)
    k, d = 3, 4
    mu = rng.normal(size=(k, d)) * 2
    mats = rng.normal(size=(k, d, d))
    sigma = np.einsum("kij,klj->kil", mats, mats) + 2 * np.eye(d)
    pi = np.array([0.5, 0.3, 0.2])
    vals = GmmValues(pi=pi, mu=mu, sigma=sigma)
    pts = rng.normal(size=(16, d)) * 2
    got = gmm_energy(pts, vals)
    dens = np.zeros(16)
    for j in range(k):
        dens += pi[j] * stats.multivariate_normal.pdf(pts, mu[j], sigma[j])
    assert np.allclose(got, -np.log(dens), rtol=1e-10)


def test_gmm_energy_shift_invariance():
    rng = make_rng(4)
    mu = rng.normal(size=(2, 3))
    mats = rng.normal(size=(2, 3, 3))
    sigma = np.einsum("kij,klj->kil", mats, mats) + np.eye(3)
    vals = GmmValues(pi=np.array([0.6, 0.4]), mu=mu, sigma=sigma)
    pts = rng.normal(size=(8, 3))
    shift = np.array([10.0, -5.0, 2.5])
    shifted = GmmValues(pi=vals.pi, mu=mu + shift, sigma=sigma)
    a = gmm_energy(pts, vals)
    b = gmm_energy(pts + shift, shifted)
    assert np.allclose(a, b, atol=1e-10)


def test_gmm_energy_component_permutation_invariance():
    rng = make_rng(5)
    mu = rng.normal(size=(3, 2))
    sigma = np.stack([np.eye(2) * s for s in (1.0, 2.0, 0.5)])
    pi = np.array([0.2, 0.5, 0.3])
    pts = rng.normal(size=(6, 2))
    perm = [2, 0, 1]
    a = gmm_energy(pts, GmmValues(pi=pi, mu=mu, sigma=sigma))
    b = gmm_energy(
        pts, GmmValues(pi=pi[perm], mu=mu[perm], sigma=sigma[perm])
    )
    assert np.allclose(a, b, atol=1e-12)


def test_gmm_energy_gradients():
    rng = make_rng(6)
    feat = rng.normal(size=(5, 2))
    gamma_logits = rng.normal(size=(5, 2))
    gamma_np = np.exp(gamma_logits)
    gamma_np /= gamma_np.sum(axis=1, keepdims=True)

    def energy_mean(f):
        tape = Tape()
        fv = tape.leaf("feat", f)
        gmm = gmm_fit_batch(tape, fv, tape.const(gamma_np))
        return tape.mean(gmm_energy_node(tape, fv, gmm))

    tape = Tape()
    fv = tape.leaf("feat", feat)
    gmm = gmm_fit_batch(tape, fv, tape.const(gamma_np))
    grads = backward(tape, tape.mean(gmm_energy_node(tape, fv, gmm)))

    def f(x):
        t2 = Tape()
        fv2 = t2.leaf("feat", x)
        g2 = gmm_fit_batch(t2, fv2, t2.const(gamma_np))
        return float(t2.mean(gmm_energy_node(t2, fv2, g2)).value)

    fd = finite_difference_gradient(f, feat)
    err = np.abs(grads["feat"] - fd)
    assert np.all(err <= 1e-4 * np.abs(fd) + 1e-7)


def test_cov_penalty_value():
    tape = Tape()
    vals = GmmValues(
        pi=np.array([0.5, 0.5]),
        mu=np.zeros((2, 2)),
        sigma=np.stack([np.diag([1.0, 0.5]), np.diag([2.0, 4.0])]),
    )
    gmm = gmm_params_from_values(tape, vals)
    pen = cov_penalty_node(tape, gmm)
    assert abs(pen.value - (1 + 2 + 0.5 + 0.25)) < 1e-12


def test_aggregate_gmm_equals_full_batch_fit():
    spec = _en_spec(in_dim=4, comps=3)
    store = ParamStore()
    init_mlp_params(store, spec, make_rng(7))
    feat = make_rng(8).normal(size=(50, 4))
    vals = aggregate_gmm(store, spec, feat)
    assert vals.pi.shape == (3,) and vals.mu.shape == (3, 4)
    assert abs(vals.pi.sum() - 1.0) < 1e-12

    # oracle: recompute moments from eval-mode memberships with numpy
    gamma = mlp_forward(store, spec, feat).value
    for j in range(3):
        w = gamma[:, j]
        assert abs(vals.pi[j] - w.mean()) < 1e-12
        mu = (w[:, None] * feat).sum(0) / w.sum()
        assert np.allclose(vals.mu[j], mu, atol=1e-12)
        c = feat - mu
        cov = (w[:, None, None] * np.einsum("bi,bj->bij", c, c)).sum(0) / w.sum()
        assert np.allclose(vals.sigma[j], cov + 1e-6 * np.eye(4), atol=1e-12)
