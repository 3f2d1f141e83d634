"""Acceptance suite: end-to-end numbers the package is expected to hit.

The trained-model tests pull session-scoped checkpoints from conftest (first
run trains them; later runs reuse the cache).  Benchmark replications need
raw dataset files under $RADOGAGA_DATA_DIR and skip loudly without them.
"""

import math

import numpy as np
import pytest

from radogaga import evaluate, model
from radogaga.cli import build_model_spec, build_train_config
from radogaga.data import ingest_preset
from radogaga.evaluate import (
    isometry_scan,
    jacobian_orthonormality,
    linear1d_numeric,
    linear1d_solution,
    pdf_proportionality,
)
from radogaga.metrics import HKind, MetricSpec, distance, quadratic_form
from radogaga.model import (
    Checkpoint,
    ModelSpec,
    TrainConfig,
    dagmm_loss,
    init_checkpoint,
    radogaga_loss,
)
from radogaga.numerics import (
    ACTIVATIONS,
    MlpSpec,
    Layer,
    ParamStore,
    Tape,
    backward,
    finite_difference_gradient,
    init_mlp_params,
    mlp_forward,
    task_rng,
)
from radogaga.priors import factorized_logp_node, init_factorized

from conftest import run_config, skip_unless_bench

MSE = MetricSpec(kind="mse")


# ---- 1. closed-form optimum vs brute-force minimization ---------------------


def test_linear_closed_form_matches_numeric_minimizer():
    log_h, d_h = HKind(kind="log"), HKind(kind="d")
    for lam2 in (0.5, 2.0):
        a, b, ab = linear1d_solution(10.0, lam2, 1.0, log_h)
        assert ab == pytest.approx(1.0, abs=1e-12)
        _, _, ab_n = linear1d_numeric(10.0, lam2, 1.0, log_h)
        assert abs(ab_n - ab) < 1e-3
    expect = {5.0: 0.8872983346, 10.0: 0.9472135955, 100.0: 0.9949747468}
    for t, want in expect.items():
        a, b, ab = linear1d_solution(t, 1.0, 1.0, d_h)
        assert ab == pytest.approx(want, abs=1e-9)
        _, _, ab_n = linear1d_numeric(t, 1.0, 1.0, d_h)
        assert abs(ab_n - ab) < 1e-3


# ---- 2. density proportionality on the synthetic mixture --------------------


def test_density_proportionality_beats_baseline(toy10k, toy_ckpt_log,
                                                toy_ckpt_d, toy_ckpt_dagmm):
    r_log = pdf_proportionality(toy_ckpt_log[0], toy10k.x, toy10k.density).r
    r_d = pdf_proportionality(toy_ckpt_d[0], toy10k.x, toy10k.density).r
    r_base = pdf_proportionality(toy_ckpt_dagmm[0], toy10k.x, toy10k.density).r
    assert r_log >= 0.98, f"log-distortion model r={r_log:.4f}"
    assert r_d >= 0.98, f"plain-distortion model r={r_d:.4f}"
    assert r_base <= r_log - 0.05, f"baseline r={r_base:.4f} vs {r_log:.4f}"


# ---- 3. isometry of the trained coder pair ----------------------------------


def test_isometry_of_trained_model(toy10k, toy_ckpt_log):
    ckpt, cfg = toy_ckpt_log
    dec = isometry_scan(ckpt, toy10k.x, MSE, pairs=1000, side="decoder",
                        rng=np.random.default_rng(0),
                        lambda2=cfg.lambda2, sigma_sq=cfg.sigma_sq)
    enc = isometry_scan(ckpt, toy10k.x, MSE, pairs=1000, side="encoder",
                        rng=np.random.default_rng(0),
                        lambda2=cfg.lambda2, sigma_sq=cfg.sigma_sq)
    assert dec.r >= 0.95, f"decoder-side r={dec.r:.4f}"
    assert enc.r >= 0.95, f"encoder-side r={enc.r:.4f}"
    assert abs(dec.slope - dec.expected_slope) <= 0.25 * dec.expected_slope, (
        f"slope {dec.slope:.6g} vs expected {dec.expected_slope:.6g}")


# ---- 4. Jacobian orthonormality at sampled latents --------------------------


def test_jacobian_orthonormality_of_trained_model(toy10k, toy_ckpt_log):
    ckpt, cfg = toy_ckpt_log
    idx = np.random.default_rng(1).choice(toy10k.x.shape[0], 100, replace=False)
    pts = model.encode(ckpt, toy10k.x[idx])
    rep = jacobian_orthonormality(ckpt, pts, MSE,
                                  lambda2=cfg.lambda2, sigma_sq=cfg.sigma_sq)
    assert rep.offdiag_mean_ratio < 0.1, f"off-diag ratio {rep.offdiag_mean_ratio:.4f}"
    assert rep.diag_cov < 0.1, f"diagonal CoV {rep.diag_cov:.4f}"
    assert rep.jsv_cov < 0.15, f"volume-factor CoV {rep.jsv_cov:.4f}"


# ---- trained-model invariants tied to the same checkpoints ------------------


def test_latents_stay_within_six_std(toy10k, toy_ckpt_log):
    ckpt, _ = toy_ckpt_log
    z = model.encode(ckpt, toy10k.x)
    spread = np.abs(z - z.mean(axis=0)) / z.std(axis=0)
    assert spread.max() <= 6.0, f"max latent spread {spread.max():.2f} std"


def test_noise_term_matches_jacobian_quadratic(toy10k, toy_ckpt_log):
    # Monte-Carlo second distortion vs sigma^2 * tr(J^T A J) at sampled rows
    ckpt, cfg = toy_ckpt_log
    rows = toy10k.x[np.random.default_rng(2).choice(10000, 64, replace=False)]
    z = model.encode(ckpt, rows)
    base = model.decode(ckpt, z)
    rng = task_rng(12345, 2)
    draws = []
    for _ in range(64):
        eps = model.sample_noise(z.shape[0], z.shape[1], cfg.noise_half_width, rng)
        diff = model.decode(ckpt, z + eps) - base
        draws.append(np.mean(np.sum(diff * diff, axis=1)) / rows.shape[1])
    lhs = float(np.mean(draws))
    traces = []
    for i in range(rows.shape[0]):
        j = evaluate.numeric_jacobian(ckpt, z[i])
        a = quadratic_form(rows[i], MSE)
        traces.append(np.trace(j.T @ a @ j))
    rhs = float(cfg.sigma_sq * np.mean(traces))
    assert abs(lhs - rhs) <= 0.10 * rhs, f"MC {lhs:.6g} vs quadratic {rhs:.6g}"


# ---- 5. anomaly-detection replication (needs raw benchmark files) -----------


def _bench_experiment(preset: str, cfg_name: str, seeds, path):
    raw = run_config(cfg_name)
    ds, _ = ingest_preset(path, preset, seed=0)
    spec = build_model_spec(raw["model"], ds.x.shape[1])
    cfg = build_train_config(raw["train"])
    return evaluate.anomaly_experiment(ds, spec, cfg, seeds)


def test_thyroid_f1_replication():
    path = skip_unless_bench("thyroid")
    summary = _bench_experiment("thyroid", "thyroid_log", range(20), path)
    assert abs(summary.mean_f1 - 0.6702) <= 0.10, f"mean F1 {summary.mean_f1:.4f}"


def test_arrhythmia_f1_replication():
    path = skip_unless_bench("arrhythmia")
    summary = _bench_experiment("arrhythmia", "arrhythmia_log", range(20), path)
    assert abs(summary.mean_f1 - 0.5373) <= 0.10, f"mean F1 {summary.mean_f1:.4f}"


def test_kdd_subsample_beats_baseline():
    path = skip_unless_bench("kddcup99")
    ds, _ = ingest_preset(path, "kddcup99", seed=0)
    keep = np.random.default_rng(0).choice(
        ds.x.shape[0], ds.x.shape[0] // 10, replace=False)
    from radogaga.data import Dataset

    sub = Dataset(name="kdd-smoke", x=ds.x[keep], y=ds.y[keep], norm=ds.norm)
    raw = run_config("kddcup99_log")
    spec = build_model_spec(raw["model"], sub.x.shape[1])
    cfg = build_train_config(raw["train"])
    ours = evaluate.anomaly_run(sub, spec, cfg, seed=0)
    raw_b = run_config("kddcup99_dagmm")
    spec_b = build_model_spec(raw_b["model"], sub.x.shape[1])
    cfg_b = build_train_config(raw_b["train"])
    base = evaluate.anomaly_run(sub, spec_b, cfg_b, seed=0)
    assert ours.f1 > base.f1, f"{ours.f1:.4f} vs baseline {base.f1:.4f}"


# ---- 6. quadratic forms track the metrics -----------------------------------


def test_quadratic_forms_track_metric_increments():
    rng = np.random.default_rng(7)
    for kind in ("mse", "ssim", "bce"):
        spec = MetricSpec(kind=kind)
        rel_errs = []
        for _ in range(1000):
            if kind == "bce":
                x = rng.uniform(0.2, 0.8, size=16)
            else:
                x = rng.uniform(0.05, 1.0, size=16)
            dx = rng.normal(size=16)
            dx *= 1e-3 * np.linalg.norm(x) / np.linalg.norm(dx)
            # increment over the self-distance floor (nonzero for bce)
            d = float(distance(x[None], (x + dx)[None], spec)[0]
                      - distance(x[None], x[None], spec)[0])
            q = float(dx @ quadratic_form(x, spec) @ dx)
            rel_errs.append(abs(d - q) / max(abs(d), 1e-300))
        worst = max(rel_errs)
        assert worst < 0.01, f"{kind}: worst relative error {worst:.4%}"


# ---- 7. gradient suite -------------------------------------------------------


def _grad_close(analytic, fd, rtol=1e-4, atol=1e-8):
    return np.all(np.abs(analytic - fd) <= rtol * np.abs(fd) + atol)


def test_gradients_every_activation():
    rng = np.random.default_rng(0)
    for act in ACTIVATIONS:
        spec = MlpSpec(in_dim=4, layers=(Layer(5, act), Layer(3, "none")),
                       prefix="m")
        store = ParamStore()
        init_mlp_params(store, spec, np.random.default_rng(1))
        x = rng.normal(size=(3, 4))
        arrays = {name: store[name] for name in store.names()}

        def run(values):
            tape = Tape()
            ps = ParamStore()
            for name, v in values.items():
                ps.create(name, v)
            out = mlp_forward(ps, spec, x, tape=tape)
            return tape, tape.sum(tape.square(out))

        tape, loss = run(arrays)
        grads = backward(tape, loss)
        for name, val in arrays.items():
            def f(v, name=name):
                vals = dict(arrays)
                vals[name] = v
                _, l2 = run(vals)
                return float(l2.value)

            fd = finite_difference_gradient(f, val)
            assert _grad_close(grads[name], fd), (act, name)


def _loss_grad_suite(spec, cfg, kind):
    ckpt = init_checkpoint(spec, seed=8)
    x = np.random.default_rng(3).normal(size=(6, spec.input_dim)) * 0.3 + 0.5

    def value(c):
        tape = Tape()
        if kind == "radogaga":
            # fresh generator per call keeps noise and dropout frozen
            loss, _ = radogaga_loss(c, x, cfg, task_rng(11, 2), tape, train=True)
        else:
            loss, _ = dagmm_loss(c, x, cfg, tape, rng=task_rng(11, 2), train=True)
        return tape, loss

    tape, loss = value(ckpt)
    grads = backward(tape, loss)
    for name in ckpt.params.names():
        def f(v, name=name):
            c2 = Checkpoint(spec=ckpt.spec, params=ckpt.params.copy())
            c2.params[name] = v
            _, l2 = value(c2)
            return float(l2.value)

        fd = finite_difference_gradient(f, ckpt.params[name])
        assert _grad_close(grads[name], fd, atol=1e-7), (kind, name)


def test_gradients_rd_loss_frozen_noise_and_dropout():
    spec = ModelSpec(input_dim=5, latent_dim=2, encoder_hidden=(6,),
                     prior="gmm", components=2, en_hidden=(4,), en_sides=True)
    cfg = TrainConfig(loss="radogaga", lambda1=10.0, lambda2=10.0,
                      epochs=0, batch_size=8, seed=0)
    _loss_grad_suite(spec, cfg, "radogaga")


def test_gradients_rd_loss_factorized_prior():
    spec = ModelSpec(input_dim=5, latent_dim=2, encoder_hidden=(6,),
                     prior="factorized")
    cfg = TrainConfig(loss="radogaga", lambda1=10.0, lambda2=10.0,
                      epochs=0, batch_size=8, seed=0)
    _loss_grad_suite(spec, cfg, "radogaga")


def test_gradients_baseline_loss_frozen_dropout():
    spec = ModelSpec(input_dim=5, latent_dim=2, encoder_hidden=(6,),
                     prior="gmm", components=2, en_hidden=(4,), en_sides=True)
    cfg = TrainConfig(loss="dagmm", lambda1=0.1, lambda2=0.005,
                      epochs=0, batch_size=8, seed=0)
    _loss_grad_suite(spec, cfg, "dagmm")


def test_gradients_factorized_logp():
    store = ParamStore()
    init_factorized(store, n_dims=3, rng=np.random.default_rng(2))
    z = np.random.default_rng(4).normal(size=(5, 3))
    arrays = {name: store[name] for name in store.names()}
    arrays["z"] = z

    def run(values):
        tape = Tape()
        ps = ParamStore()
        for k, v in values.items():
            if k != "z":
                ps.create(k, v)
        zv = tape.leaf("z", values["z"])
        lp = factorized_logp_node(tape, ps, zv, prefix="prior")
        return tape, tape.sum(lp)

    tape, loss = run(arrays)
    grads = backward(tape, loss)
    for name, val in arrays.items():
        def f(v, name=name):
            vals = dict(arrays)
            vals[name] = v
            _, l2 = run(vals)
            return float(l2.value)

        fd = finite_difference_gradient(f, val)
        assert _grad_close(grads[name], fd), name


def test_gradients_mixture_energy():
    # energy differentiated through the moment fit, memberships included
    from radogaga.priors import en_memberships, gmm_energy_node, gmm_fit_batch

    rng = np.random.default_rng(5)
    feat = rng.normal(size=(8, 3))
    logits = rng.normal(size=(8, 2))
    arrays = {"feat": feat, "logits": logits}

    def run(values):
        tape = Tape()
        fv = tape.leaf("feat", values["feat"])
        lv = tape.leaf("logits", values["logits"])
        gamma = tape.softmax(lv)
        gmm = gmm_fit_batch(tape, fv, gamma)
        energy = gmm_energy_node(tape, fv, gmm)
        return tape, tape.mean(energy)

    tape, loss = run(arrays)
    grads = backward(tape, loss)
    for name, val in arrays.items():
        def f(v, name=name):
            vals = dict(arrays)
            vals[name] = v
            _, l2 = run(vals)
            return float(l2.value)

        fd = finite_difference_gradient(f, val)
        assert _grad_close(grads[name], fd), name


# ---- 8. variance ordering of a wide latent ----------------------------------


def test_variance_ordering_and_clamping(toy10k, pca_ckpt):
    low_errs, high_errs = [], []
    for seed in range(5):
        ckpt = pca_ckpt(seed)
        z = model.encode(ckpt, toy10k.x)
        var = z.var(axis=0)
        share = np.sort(var)[-3:].sum() / var.sum()
        assert share >= 0.90, f"seed {seed}: top-3 variance share {share:.3f}"
        order = np.argsort(-var)

        def clamp_err(dim):
            zc = z.copy()
            zc[:, dim] = z[:, dim].mean()
            out = model.decode(ckpt, zc)
            return float(np.mean(np.sum((toy10k.x - out) ** 2, axis=1)))

        low_errs.append(clamp_err(order[-1]))
        high_errs.append(clamp_err(order[0]))
    assert np.mean(low_errs) < np.mean(high_errs), (
        f"clamping lowest-variance dim hurt more: {np.mean(low_errs):.6g} "
        f"vs {np.mean(high_errs):.6g}")
