"""Latent density models: a factorized learned-CDF prior and a GMM prior.

Factorized prior.  Each latent dimension gets its own small monotone scalar
map c: R -> (0, 1) built from positive-weight affine layers with gated tanh
residuals and a final sigmoid.  The probability mass of the unit-width bin
centred on z is c(z + 1/2) - c(z - 1/2), matching additive U(-1/2, 1/2)
noise.  All dimensions are evaluated in one shot by stacking their layer
weights into (N, w_in, w_out) tensors and using batched matmuls, so graph
size does not grow with latent width.  At init (before jitter) every map is
exactly the logistic CDF.

GMM prior.  A softmax estimation network produces soft memberships; batch
moments weighted by those memberships give mixture weights, means, and
covariances (plus a ridge).  Sample energy is the negative log density,
computed with Cholesky factors and log-sum-exp so it stays differentiable
and stable.  ``aggregate_gmm`` freezes the mixture using a full data pass
with dropout off, which is what scoring uses at test time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    MlpSpec,
    NumericError,
    ParamStore,
    Tape,
    Var,
    as_tensor,
    mlp_forward,
    softplus_inverse,
)

FACTORIZED_WIDTHS = (1, 3, 3, 3, 1)
BIN_HALF_WIDTH = 0.5
PROB_FLOOR = 1e-12
GMM_RIDGE = 1e-6
WEIGHT_FLOOR = 1e-12


# ---- factorized prior ----------------------------------------------------


def init_factorized(
    params: ParamStore,
    n_dims: int,
    rng: np.random.Generator,
    jitter: float = 0.01,
    prefix: str = "prior",
) -> None:
    """Register stacked CDF parameters for `n_dims` latent dimensions.

    Base point is the exact logistic CDF (softplus of the weights sums to 1
    along each input fan); `jitter` adds seeded Gaussian noise to break the
    symmetry between the three internal channels.
    """
    widths = FACTORIZED_WIDTHS
    n_layers = len(widths) - 1
    for k in range(n_layers):
        w_in, w_out = widths[k], widths[k + 1]
        base = np.full((n_dims, w_in, w_out), softplus_inverse(1.0 / w_in))
        params.create(
            f"{prefix}.h{k}", base + jitter * rng.standard_normal(base.shape)
        )
        params.create(
            f"{prefix}.b{k}", jitter * rng.standard_normal((n_dims, 1, w_out))
        )
        if k < n_layers - 1:
            params.create(
                f"{prefix}.a{k}", jitter * rng.standard_normal((n_dims, 1, w_out))
            )


def _cdf_chain(tape: Tape, leaves: dict[str, Var], u: Var, n_layers: int) -> Var:
    """Monotone map (N, B, 1) -> (N, B, 1); weights positive, gates bounded."""
    for k in range(n_layers):
        w = tape.softplus(leaves[f"h{k}"])
        u = tape.add(tape.bmm(u, w), leaves[f"b{k}"])
        if k < n_layers - 1:
            gate = tape.tanh(leaves[f"a{k}"])
            u = tape.add(u, tape.mul(gate, tape.tanh(u)))
    return tape.sigmoid(u)


def _factorized_leaves(tape: Tape, params: ParamStore, prefix: str) -> tuple[dict, int]:
    n_layers = len(FACTORIZED_WIDTHS) - 1
    leaves = {}
    for k in range(n_layers):
        leaves[f"h{k}"] = tape.leaf(f"{prefix}.h{k}", params[f"{prefix}.h{k}"])
        leaves[f"b{k}"] = tape.leaf(f"{prefix}.b{k}", params[f"{prefix}.b{k}"])
        if k < n_layers - 1:
            leaves[f"a{k}"] = tape.leaf(f"{prefix}.a{k}", params[f"{prefix}.a{k}"])
    return leaves, n_layers


def factorized_cdf(params: ParamStore, z, prefix: str = "prior") -> np.ndarray:
    """Per-dimension CDF values c_i(z_i), shape (B, N)."""
    z = as_tensor(z, "z")
    tape = Tape()
    leaves, n_layers = _factorized_leaves(tape, params, prefix)
    n = params[f"{prefix}.h0"].shape[0]
    if z.ndim != 2 or z.shape[1] != n:
        raise ValueError(f"z must be (B, {n}), got {z.shape}")
    u = tape.reshape(tape.transpose(tape.const(z)), (n, z.shape[0], 1))
    c = _cdf_chain(tape, leaves, u, n_layers)
    return c.value.reshape(n, z.shape[0]).T.copy()


def factorized_logp_node(
    tape: Tape, params: ParamStore, z: Var, prefix: str = "prior"
) -> Var:
    """Per-sample log bin mass, shape (B,): sum_i log(c(z+1/2) - c(z-1/2))."""
    leaves, n_layers = _factorized_leaves(tape, params, prefix)
    n = params[f"{prefix}.h0"].shape[0]
    if z.value.ndim != 2 or z.value.shape[1] != n:
        raise ValueError(f"z must be (B, {n}), got {z.value.shape}")
    b = z.value.shape[0]
    zt = tape.reshape(tape.transpose(z), (n, b, 1))
    c_hi = _cdf_chain(tape, leaves, tape.add(zt, BIN_HALF_WIDTH), n_layers)
    c_lo = _cdf_chain(tape, leaves, tape.sub(zt, BIN_HALF_WIDTH), n_layers)
    p = tape.add(tape.sub(c_hi, c_lo), PROB_FLOOR)
    logp = tape.log(tape.reshape(p, (n, b)))
    return tape.sum(logp, axis=0)


def factorized_logp(params: ParamStore, z, prefix: str = "prior") -> np.ndarray:
    """Array version of :func:`factorized_logp_node`."""
    z = as_tensor(z, "z")
    tape = Tape()
    return factorized_logp_node(tape, params, tape.const(z), prefix).value


# ---- GMM prior fitted from estimation-network memberships ----------------


@dataclass
class GmmParams:
    """Mixture parameters as graph nodes (one entry per component)."""

    pis: list
    mus: list
    sigmas: list

    @property
    def n_components(self) -> int:
        return len(self.pis)

    def values(self) -> "GmmValues":
        return GmmValues(
            pi=np.array([p.value for p in self.pis]),
            mu=np.stack([m.value[0] for m in self.mus]),
            sigma=np.stack([s.value for s in self.sigmas]),
        )


@dataclass
class GmmValues:
    """Frozen mixture parameters: pi (K,), mu (K, D), sigma (K, D, D)."""

    pi: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.pi = as_tensor(self.pi, "pi")
        self.mu = as_tensor(self.mu, "mu")
        self.sigma = as_tensor(self.sigma, "sigma")
        k = self.pi.shape[0]
        if self.mu.shape[0] != k or self.sigma.shape[0] != k:
            raise ValueError("component count mismatch between pi, mu, sigma")
        if self.sigma.shape[1] != self.sigma.shape[2] or self.sigma.shape[1] != self.mu.shape[1]:
            raise ValueError("sigma must be (K, D, D) matching mu (K, D)")


def gmm_params_from_values(tape: Tape, values: GmmValues) -> GmmParams:
    """Wrap frozen mixture values as constant graph nodes for scoring."""
    k = values.pi.shape[0]
    return GmmParams(
        pis=[tape.const(values.pi[j]) for j in range(k)],
        mus=[tape.const(values.mu[j : j + 1]) for j in range(k)],
        sigmas=[tape.const(values.sigma[j]) for j in range(k)],
    )


def en_memberships(
    params: ParamStore,
    spec: MlpSpec,
    feat,
    tape: Tape | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Var:
    """Soft component memberships from the estimation network, shape (B, K).

    The network must end in a softmax layer; this is checked once here so
    mixture fitting can assume rows that sum to one.
    """
    if spec.layers[-1].activation != "softmax":
        raise ValueError("estimation network must end with a softmax layer")
    if tape is None:
        tape = Tape()
    feat = feat if isinstance(feat, Var) else tape.const(as_tensor(feat, "feat"))
    return mlp_forward(params, spec, feat, tape=tape, train=train, rng=rng)


def gmm_fit_batch(
    tape: Tape, feat: Var, gamma: Var, ridge: float = GMM_RIDGE
) -> GmmParams:
    """Membership-weighted mixture moments over one batch.

    pi_k is the mean membership, mu_k / sigma_k the weighted mean and
    covariance; `ridge` * I keeps every covariance invertible.  A component
    whose total membership underflows would make the moments meaningless,
    so that raises instead of silently producing garbage.
    """
    b, k = gamma.value.shape
    if feat.value.shape[0] != b:
        raise ValueError("feat and gamma batch sizes differ")
    d = feat.value.shape[1]
    eye = np.eye(d) * ridge
    pis, mus, sigmas = [], [], []
    for j in range(k):
        g_j = tape.col(gamma, j)
        total = tape.sum(g_j)
        if total.value < WEIGHT_FLOOR:
            raise NumericError(
                f"gmm component {j} collapsed: total membership {total.value:.3e}"
            )
        mu_j = tape.div(tape.matmul(tape.transpose(g_j), feat), total)
        centered = tape.sub(feat, mu_j)
        weighted = tape.mul(centered, g_j)
        sigma_j = tape.add(
            tape.div(tape.matmul(tape.transpose(weighted), centered), total),
            tape.const(eye),
        )
        pis.append(tape.div(total, float(b)))
        mus.append(mu_j)
        sigmas.append(sigma_j)
    return GmmParams(pis=pis, mus=mus, sigmas=sigmas)


def gmm_energy_node(tape: Tape, feat: Var, gmm: GmmParams) -> Var:
    """Per-sample energy -log sum_k pi_k N(feat; mu_k, sigma_k), shape (B,)."""
    b, d = feat.value.shape
    log_terms = []
    log_2pi = d * math.log(2.0 * math.pi)
    for j in range(gmm.n_components):
        chol = tape.cholesky(gmm.sigmas[j])
        centered = tape.sub(feat, gmm.mus[j])
        y = tape.solve_lower(chol, tape.transpose(centered))
        quad = tape.sum(tape.square(y), axis=0)
        logdet = tape.mul(2.0, tape.sum(tape.log(tape.diag(chol))))
        log_pi = tape.log(gmm.pis[j])
        log_n = tape.mul(-0.5, tape.add(tape.add(quad, logdet), log_2pi))
        log_terms.append(tape.reshape(tape.add(log_n, log_pi), (b, 1)))
    stacked = tape.concat(log_terms, axis=1)
    return tape.neg(tape.logsumexp(stacked, axis=1))


def gmm_energy(feat, values: GmmValues) -> np.ndarray:
    """Energy of each row of `feat` under a frozen mixture, shape (B,)."""
    feat = as_tensor(feat, "feat")
    tape = Tape()
    gmm = gmm_params_from_values(tape, values)
    return gmm_energy_node(tape, tape.const(feat), gmm).value


def cov_penalty_node(tape: Tape, gmm: GmmParams) -> Var:
    """Sum over components and dimensions of 1 / sigma_{k, ii}."""
    total = tape.const(0.0)
    for j in range(gmm.n_components):
        inv_diag = tape.pow_const(tape.diag(gmm.sigmas[j]), -1.0)
        total = tape.add(total, tape.sum(inv_diag))
    return total


def aggregate_gmm(params: ParamStore, spec: MlpSpec, feat) -> GmmValues:
    """Fit the mixture over a full feature matrix with dropout off.

    This is the frozen density used for scoring; training batches refit it
    on the fly, but the deployed model carries this aggregate.
    """
    feat = as_tensor(feat, "feat")
    tape = Tape()
    feat_node = tape.const(feat)
    gamma = en_memberships(params, spec, feat_node, tape=tape, train=False)
    return gmm_fit_batch(tape, feat_node, gamma).values()
