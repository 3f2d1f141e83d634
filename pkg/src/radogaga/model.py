"""Autoencoder model: architecture spec, the two losses, training, checkpoints.

The model is a fully-connected encoder/decoder pair plus one of two latent
density models (factorized CDF prior, or a GMM fitted from estimation-network
memberships).  Two training objectives share this structure:

* rate-distortion loss: mean over the batch of
  [-log P(z)] + lambda1 * h(D1(x, dec(z))) + lambda2 * D2(dec(z), dec(z+eps)),
  with eps i.i.d. uniform on [-w, w) drawn fresh per sample and the rate
  evaluated on the clean z;
* baseline loss: mean squared-L2 reconstruction + lambda1 * mean energy
  + lambda2 * covariance-diagonal penalty, no noise injection.

Training is plain minibatch Adam with parameter snapshots every tenth of the
run; the snapshot with the lowest epoch-mean loss wins, and GMM runs finish
by freezing the mixture with a full-data pass (dropout off).

Checkpoints serialize to versioned JSON and round-trip byte-exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import priors
from .data import NormStats
from .metrics import HKind, MetricSpec, distance_node, h_aggregate, h_node
from .numerics import (
    AdamState,
    Layer,
    MlpSpec,
    NumericError,
    ParamStore,
    Tape,
    Var,
    adam_update,
    as_tensor,
    backward,
    init_mlp_params,
    mlp_forward,
    task_rng,
)

CHECKPOINT_VERSION = "rd-ae-ckpt-1"
BCE_CLAMP = 1e-6
FEATURE_TINY = 1e-12
# substream indices off the run seed (index 1 is the data split's)
STREAM_INIT, STREAM_NOISE, STREAM_SHUFFLE = 0, 2, 3

LOSS_KINDS = ("radogaga", "dagmm")
PRIOR_KINDS = ("factorized", "gmm")


@dataclass(frozen=True)
class ModelSpec:
    """Widths, activations, prior choice, and metric configuration."""

    input_dim: int
    latent_dim: int
    encoder_hidden: tuple = (64, 32, 16)
    decoder_hidden: tuple | None = None  # mirror of encoder when None
    activation: str = "tanh"
    decoder_output_activation: str = "none"
    prior: str = "gmm"
    components: int = 3
    en_hidden: tuple = (10,)
    en_dropout: float = 0.5
    en_sides: bool = False
    d1: MetricSpec = field(default_factory=MetricSpec)
    d2: MetricSpec | None = None
    h: HKind = field(default_factory=HKind)

    def __post_init__(self):
        if self.input_dim < 1 or self.latent_dim < 1:
            raise ValueError("input_dim and latent_dim must be positive")
        if self.prior not in PRIOR_KINDS:
            raise ValueError(f"unknown prior {self.prior!r}")
        if self.prior == "gmm" and self.components < 1:
            raise ValueError("gmm prior needs at least one component")

    @property
    def d2_spec(self) -> MetricSpec:
        return self.d2 if self.d2 is not None else self.d1

    @property
    def mirror_decoder_hidden(self) -> tuple:
        if self.decoder_hidden is not None:
            return tuple(self.decoder_hidden)
        return tuple(reversed(self.encoder_hidden))

    @property
    def en_input_dim(self) -> int:
        return self.latent_dim + (2 if self.en_sides else 0)

    def encoder_spec(self) -> MlpSpec:
        layers = [Layer(w, self.activation) for w in self.encoder_hidden]
        layers.append(Layer(self.latent_dim, "none"))
        return MlpSpec(in_dim=self.input_dim, layers=tuple(layers), prefix="enc")

    def decoder_spec(self) -> MlpSpec:
        layers = [Layer(w, self.activation) for w in self.mirror_decoder_hidden]
        layers.append(Layer(self.input_dim, self.decoder_output_activation))
        return MlpSpec(in_dim=self.latent_dim, layers=tuple(layers), prefix="dec")

    def en_spec(self) -> MlpSpec:
        layers = [Layer(w, self.activation, dropout=self.en_dropout) for w in self.en_hidden]
        layers.append(Layer(self.components, "softmax"))
        return MlpSpec(in_dim=self.en_input_dim, layers=tuple(layers), prefix="en")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "latent_dim": self.latent_dim,
            "encoder_hidden": list(self.encoder_hidden),
            "decoder_hidden": None if self.decoder_hidden is None else list(self.decoder_hidden),
            "activation": self.activation,
            "decoder_output_activation": self.decoder_output_activation,
            "prior": self.prior,
            "components": self.components,
            "en_hidden": list(self.en_hidden),
            "en_dropout": self.en_dropout,
            "en_sides": self.en_sides,
            "d1": {"kind": self.d1.kind, "window": self.d1.window,
                   "stabilizer": self.d1.stabilizer, "bce_clamp": self.d1.bce_clamp},
            "d2": None if self.d2 is None else
                  {"kind": self.d2.kind, "window": self.d2.window,
                   "stabilizer": self.d2.stabilizer, "bce_clamp": self.d2.bce_clamp},
            "h": {"kind": self.h.kind, "delta": self.h.delta},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_dim=int(d["input_dim"]),
            latent_dim=int(d["latent_dim"]),
            encoder_hidden=tuple(d["encoder_hidden"]),
            decoder_hidden=None if d["decoder_hidden"] is None else tuple(d["decoder_hidden"]),
            activation=d["activation"],
            decoder_output_activation=d["decoder_output_activation"],
            prior=d["prior"],
            components=int(d["components"]),
            en_hidden=tuple(d["en_hidden"]),
            en_dropout=float(d["en_dropout"]),
            en_sides=bool(d["en_sides"]),
            d1=MetricSpec(**d["d1"]),
            d2=None if d["d2"] is None else MetricSpec(**d["d2"]),
            h=HKind(**d["h"]),
        )


@dataclass
class TrainConfig:
    """Objective weights and optimization knobs for one training run.

    The noise half-width w gives sigma^2 = w^2 / 3 (1/12 at the default).
    lambda2 = 0 is accepted here so the loss reduction special cases stay
    testable; command-line validation requires both lambdas positive.
    """

    lambda1: float
    lambda2: float
    loss: str = "radogaga"
    noise_half_width: float = 0.5
    lr: float = 1e-4
    batch_size: int = 1024
    epochs: int = 100
    seed: int = 0
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be nonnegative")
        if self.noise_half_width <= 0:
            raise ValueError("noise half-width must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    @property
    def sigma_sq(self) -> float:
        return self.noise_half_width**2 / 3.0


@dataclass
class Checkpoint:
    """Everything needed to score and audit a trained model."""

    spec: ModelSpec
    params: ParamStore
    gmm: priors.GmmValues | None = None
    norm: NormStats | None = None
    log: dict = field(default_factory=dict)
    version: str = CHECKPOINT_VERSION


def init_checkpoint(spec: ModelSpec, seed: int, norm: NormStats | None = None) -> Checkpoint:
    """Fresh parameters for every network the spec calls for."""
    rng = task_rng(seed, STREAM_INIT)
    params = ParamStore()
    init_mlp_params(params, spec.encoder_spec(), rng)
    init_mlp_params(params, spec.decoder_spec(), rng)
    if spec.prior == "gmm":
        init_mlp_params(params, spec.en_spec(), rng)
    else:
        priors.init_factorized(params, spec.latent_dim, rng)
    return Checkpoint(spec=spec, params=params, norm=norm)


# ---- forward passes -------------------------------------------------------


def encode_node(tape: Tape, ckpt: Checkpoint, x: Var) -> Var:
    return mlp_forward(ckpt.params, ckpt.spec.encoder_spec(), x, tape=tape)


def decode_node(tape: Tape, ckpt: Checkpoint, z: Var) -> Var:
    out = mlp_forward(ckpt.params, ckpt.spec.decoder_spec(), z, tape=tape)
    if ckpt.spec.d1.kind == "bce" or ckpt.spec.d2_spec.kind == "bce":
        out = tape.clip(out, BCE_CLAMP, 1.0 - BCE_CLAMP)
    return out


def _chunked(fn, x: np.ndarray, chunk: int = 65536) -> np.ndarray:
    outs = [fn(x[i : i + chunk]) for i in range(0, x.shape[0], chunk)]
    return np.concatenate(outs, axis=0)


def encode(ckpt: Checkpoint, x) -> np.ndarray:
    """Latent codes for a batch, shape (B, N)."""
    x = as_tensor(x, "x")
    return _chunked(lambda c: encode_node(Tape(), ckpt, Var(c)).value, x)


def decode(ckpt: Checkpoint, z) -> np.ndarray:
    """Reconstructions for a batch of latents, shape (B, M)."""
    z = as_tensor(z, "z")
    return _chunked(lambda c: decode_node(Tape(), ckpt, Var(c)).value, z)


def sample_noise(n: int, dim: int, w: float, rng: np.random.Generator) -> np.ndarray:
    """i.i.d. uniform on [-w, +w), one fresh draw per sample and dimension."""
    if w <= 0:
        raise ValueError("noise half-width must be positive")
    return rng.uniform(-w, w, size=(n, dim))


def assemble_features_node(tape: Tape, ckpt: Checkpoint, x: Var, z: Var, xr: Var) -> Var:
    """Estimation-network input: z, optionally with reconstruction summaries.

    The two summaries (relative error, cosine) are built from smooth-guarded
    norms so they stay differentiable everywhere, unlike the exact eval-time
    convention which zeroes degenerate cases.
    """
    if not ckpt.spec.en_sides:
        return z
    diff2 = tape.sum(tape.square(tape.sub(x, xr)), axis=1, keepdims=True)
    nx2 = tape.sum(tape.square(x), axis=1, keepdims=True)
    nr2 = tape.sum(tape.square(xr), axis=1, keepdims=True)
    rel = tape.div(tape.sqrt(tape.add(diff2, FEATURE_TINY)),
                   tape.sqrt(tape.add(nx2, FEATURE_TINY)))
    dot = tape.sum(tape.mul(x, xr), axis=1, keepdims=True)
    cos = tape.div(dot, tape.sqrt(tape.mul(tape.add(nx2, FEATURE_TINY),
                                           tape.add(nr2, FEATURE_TINY))))
    return tape.concat([z, rel, cos], axis=1)


def assemble_features(ckpt: Checkpoint, x) -> np.ndarray:
    """Eval-time feature matrix, same smooth computation the loss uses."""
    x = as_tensor(x, "x")

    def f(chunk):
        tape = Tape()
        xv = tape.const(chunk)
        z = encode_node(tape, ckpt, xv)
        xr = decode_node(tape, ckpt, z)
        return assemble_features_node(tape, ckpt, xv, z, xr).value

    return _chunked(f, x)


def _rate_node(
    tape: Tape,
    ckpt: Checkpoint,
    x: Var,
    z: Var,
    xr: Var,
    train: bool,
    rng: np.random.Generator | None,
) -> tuple[Var, priors.GmmParams | None]:
    """Per-sample -log P(z) under the configured prior, shape (B,)."""
    if ckpt.spec.prior == "factorized":
        return tape.neg(priors.factorized_logp_node(tape, ckpt.params, z)), None
    feat = assemble_features_node(tape, ckpt, x, z, xr)
    gamma = priors.en_memberships(
        ckpt.params, ckpt.spec.en_spec(), feat, tape=tape, train=train, rng=rng
    )
    gmm = priors.gmm_fit_batch(tape, feat, gamma)
    return priors.gmm_energy_node(tape, feat, gmm), gmm


def compose_rd_loss(rate: float, d1: float, d2: float,
                    lam1: float, lam2: float, h: HKind) -> float:
    """Scalar composition rate + lambda1*h(d1) + lambda2*d2 (mirrors the graph)."""
    hval = math.log(d1 + h.delta) if h.kind == "log" else d1
    return rate + (lam1 * hval + lam2 * d2)


def compose_baseline_loss(rec: float, rate: float, penalty: float,
                          lam1: float, lam2: float) -> float:
    return rec + (lam1 * rate + lam2 * penalty)


def radogaga_loss(
    ckpt: Checkpoint,
    batch,
    cfg: TrainConfig,
    rng: np.random.Generator,
    tape: Tape,
    train: bool = True,
) -> tuple[Var, dict]:
    """Rate-distortion objective over one batch.

    Returns the scalar loss node and a parts dict {rate, rec, noise_dist}
    whose recomposition rate + lambda1*h(rec) + lambda2*noise_dist equals
    the loss value (rec is the h-consistent batch aggregate, so for h=log
    it is the guarded geometric mean of D1).
    """
    x = batch if isinstance(batch, Var) else tape.const(as_tensor(batch, "batch"))
    b = x.value.shape[0]
    z = encode_node(tape, ckpt, x)
    xr = decode_node(tape, ckpt, z)
    eps = sample_noise(b, ckpt.spec.latent_dim, cfg.noise_half_width, rng)
    xn = decode_node(tape, ckpt, tape.add(z, tape.const(eps)))
    rate, _ = _rate_node(tape, ckpt, x, z, xr, train, rng)
    d1 = distance_node(tape, x, xr, ckpt.spec.d1)
    d2 = distance_node(tape, xr, xn, ckpt.spec.d2_spec)
    rate_mean = tape.mean(rate)
    hrec_mean = tape.mean(h_node(tape, d1, ckpt.spec.h))
    d2_mean = tape.mean(d2)
    loss = tape.add(
        rate_mean,
        tape.add(tape.mul(cfg.lambda1, hrec_mean), tape.mul(cfg.lambda2, d2_mean)),
    )
    parts = {
        "rate": float(rate_mean.value),
        "rec": h_aggregate(d1.value, ckpt.spec.h),
        "noise_dist": float(d2_mean.value),
    }
    return loss, parts


def dagmm_loss(
    ckpt: Checkpoint,
    batch,
    cfg: TrainConfig,
    tape: Tape,
    rng: np.random.Generator | None = None,
    train: bool = True,
) -> tuple[Var, dict]:
    """Baseline objective: squared-L2 reconstruction, energy, diagonal penalty.

    `rng` feeds the estimation network's dropout; passing None freezes
    dropout off, which is what finite-difference gradient checks need.
    """
    if ckpt.spec.prior != "gmm":
        raise ValueError("baseline loss requires the gmm prior")
    x = batch if isinstance(batch, Var) else tape.const(as_tensor(batch, "batch"))
    z = encode_node(tape, ckpt, x)
    xr = decode_node(tape, ckpt, z)
    rec = tape.mean(tape.sum(tape.square(tape.sub(x, xr)), axis=1))
    feat = assemble_features_node(tape, ckpt, x, z, xr)
    gamma = priors.en_memberships(
        ckpt.params, ckpt.spec.en_spec(), feat, tape=tape,
        train=train and rng is not None, rng=rng,
    )
    gmm = priors.gmm_fit_batch(tape, feat, gamma)
    energy_mean = tape.mean(priors.gmm_energy_node(tape, feat, gmm))
    penalty = priors.cov_penalty_node(tape, gmm)
    loss = tape.add(
        rec, tape.add(tape.mul(cfg.lambda1, energy_mean), tape.mul(cfg.lambda2, penalty))
    )
    parts = {
        "rec": float(rec.value),
        "rate": float(energy_mean.value),
        "penalty": float(penalty.value),
    }
    return loss, parts


# ---- training -------------------------------------------------------------


def _loss_for_batch(ckpt, batch, cfg, rng, tape):
    if cfg.loss == "radogaga":
        return radogaga_loss(ckpt, batch, cfg, rng, tape)
    return dagmm_loss(ckpt, batch, cfg, tape, rng=rng)


def aggregate_checkpoint_gmm(ckpt: Checkpoint, x: np.ndarray) -> priors.GmmValues:
    """Freeze the mixture on the full training set with dropout off."""
    tape = Tape()
    xv = tape.const(x)
    z = encode_node(tape, ckpt, xv)
    xr = decode_node(tape, ckpt, z)
    feat = assemble_features_node(tape, ckpt, xv, z, xr)
    return priors.aggregate_gmm(ckpt.params, ckpt.spec.en_spec(), feat.value)


def train(
    x,
    spec: ModelSpec,
    cfg: TrainConfig,
    norm: NormStats | None = None,
) -> Checkpoint:
    """Minibatch Adam; returns the lowest-epoch-loss snapshot, aggregated.

    Snapshots are taken every `checkpoint_every` epochs (default one tenth
    of the run) plus the final epoch.  A non-finite loss aborts with the
    last finite parts in the error message.
    """
    x = as_tensor(x, "train_x")
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"training data must be (n, {spec.input_dim}), got {x.shape}")
    ckpt = init_checkpoint(spec, cfg.seed, norm=norm)
    if cfg.epochs == 0:
        if spec.prior == "gmm":
            ckpt.gmm = aggregate_checkpoint_gmm(ckpt, x)
        ckpt.log = {"epochs": 0, "selected_epoch": None, "snapshots": []}
        return ckpt

    n = x.shape[0]
    cadence = cfg.checkpoint_every or max(1, cfg.epochs // 10)
    shuffle_rng = task_rng(cfg.seed, STREAM_SHUFFLE)
    noise_rng = task_rng(cfg.seed, STREAM_NOISE)
    adam = AdamState(lr=cfg.lr)
    snapshots = []
    last_parts: dict = {}
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = x[order[start : start + cfg.batch_size]]
            tape = Tape()
            loss, parts = _loss_for_batch(ckpt, batch, cfg, noise_rng, tape)
            lval = float(loss.value)
            if not math.isfinite(lval):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}; last finite parts: {last_parts}"
                )
            last_parts = parts
            grads = backward(tape, loss)
            adam_update(adam, ckpt.params, grads)
            losses.append(lval)
        epoch_loss = float(np.mean(losses))
        if (epoch + 1) % cadence == 0 or epoch == cfg.epochs - 1:
            snapshots.append((epoch_loss, epoch, ckpt.params.copy()))

    best_loss, best_epoch, best_params = min(snapshots, key=lambda s: (s[0], s[1]))
    ckpt.params = best_params
    if spec.prior == "gmm":
        ckpt.gmm = aggregate_checkpoint_gmm(ckpt, x)
    ckpt.log = {
        "epochs": cfg.epochs,
        "selected_epoch": best_epoch,
        "selected_loss": best_loss,
        "snapshots": [{"epoch": e, "loss": l} for l, e, _ in snapshots],
        "final_parts": last_parts,
    }
    return ckpt


# ---- checkpoint serialization ----------------------------------------------


def checkpoint_save(ckpt: Checkpoint, path) -> None:
    """Versioned JSON; identical content saves to identical bytes."""
    blob = {
        "version": ckpt.version,
        "spec": ckpt.spec.to_dict(),
        "params": {
            name: {"shape": list(t.shape), "values": t.tolist()}
            for name, t in ckpt.params.items()
        },
        "prior": {
            "kind": ckpt.spec.prior,
            "components": ckpt.spec.components,
            "gmm": None
            if ckpt.gmm is None
            else {
                "pi": ckpt.gmm.pi.tolist(),
                "mu": ckpt.gmm.mu.tolist(),
                "sigma": ckpt.gmm.sigma.tolist(),
            },
        },
        "norm_stats": None if ckpt.norm is None else ckpt.norm.to_dict(),
        "log": ckpt.log,
    }
    Path(path).write_text(json.dumps(blob, indent=1) + "\n")


def checkpoint_load(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        blob = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"corrupt checkpoint {path}: {e}") from e
    if blob.get("version") != CHECKPOINT_VERSION:
        raise ValueError(
            f"checkpoint version mismatch: got {blob.get('version')!r}, "
            f"expected {CHECKPOINT_VERSION!r}"
        )
    if "prior" not in blob or blob["prior"] is None:
        raise ValueError("checkpoint missing prior section")
    spec = ModelSpec.from_dict(blob["spec"])
    params = ParamStore()
    for name, entry in blob["params"].items():
        t = np.asarray(entry["values"], dtype=np.float64)
        declared = tuple(entry["shape"])
        if t.shape != declared:
            raise ValueError(
                f"checkpoint tensor {name!r}: declared shape {declared}, "
                f"stored values have shape {t.shape}"
            )
        params.create(name, t)
    gmm_blob = blob["prior"].get("gmm")
    gmm = None
    if gmm_blob is not None:
        gmm = priors.GmmValues(
            pi=np.asarray(gmm_blob["pi"]),
            mu=np.asarray(gmm_blob["mu"]),
            sigma=np.asarray(gmm_blob["sigma"]),
        )
    norm = None if blob["norm_stats"] is None else NormStats.from_dict(blob["norm_stats"])
    return Checkpoint(spec=spec, params=params, gmm=gmm, norm=norm,
                      log=blob.get("log", {}), version=blob["version"])
