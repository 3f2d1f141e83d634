"""Scikit-learn style facade over the trainer and anomaly scorer.

Thin adapter: hyperparameters live as constructor args, `fit` trains a
checkpoint, `transform`/`inverse_transform` wrap the coder pair, and
`score_samples`/`predict` follow the outlier-detector conventions (higher
score = more normal, predictions in {1, -1} with -1 for anomalies flagged
by the contamination ratio).  The core modules do not depend on this.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import evaluate, model
from .metrics import HKind, MetricSpec


class RadogagaAutoencoder(BaseEstimator):
    """Rate-distortion autoencoder with a GMM latent density.

    Parameters mirror ModelSpec/TrainConfig; `fit` expects rows already
    normalized to the unit interval (use the ingest helpers) and, for the
    anomaly protocol, pre-filtered to normal data.
    """

    def __init__(
        self,
        latent_dim: int = 3,
        encoder_hidden: tuple = (64, 32, 16),
        activation: str = "tanh",
        prior: str = "gmm",
        components: int = 3,
        en_hidden: tuple = (10,),
        en_sides: bool = True,
        metric: str = "mse",
        h: str = "log",
        loss: str = "radogaga",
        lambda1: float = 100.0,
        lambda2: float = 100.0,
        lr: float = 1e-4,
        batch_size: int = 1024,
        epochs: int = 100,
        seed: int = 0,
        contamination: float = 0.1,
    ):
        self.latent_dim = latent_dim
        self.encoder_hidden = encoder_hidden
        self.activation = activation
        self.prior = prior
        self.components = components
        self.en_hidden = en_hidden
        self.en_sides = en_sides
        self.metric = metric
        self.h = h
        self.loss = loss
        self.lambda1 = lambda1
        self.lambda2 = lambda2
        self.lr = lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.seed = seed
        self.contamination = contamination

    def _spec(self, n_features: int) -> model.ModelSpec:
        return model.ModelSpec(
            input_dim=n_features,
            latent_dim=self.latent_dim,
            encoder_hidden=tuple(self.encoder_hidden),
            activation=self.activation,
            prior=self.prior,
            components=self.components,
            en_hidden=tuple(self.en_hidden),
            en_sides=self.en_sides,
            d1=MetricSpec(kind=self.metric),
            h=HKind(kind=self.h),
        )

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        cfg = model.TrainConfig(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            loss=self.loss,
            lr=self.lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
        )
        self.checkpoint_ = model.train(X, self._spec(X.shape[1]), cfg)
        self.n_features_in_ = X.shape[1]
        return self

    def _check_x(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return X

    def transform(self, X) -> np.ndarray:
        X = self._check_x(X)
        return model.encode(self.checkpoint_, X)

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        Z = check_array(Z, dtype=np.float64)
        return model.decode(self.checkpoint_, Z)

    def score_samples(self, X) -> np.ndarray:
        X = self._check_x(X)
        return -evaluate.anomaly_scores(self.checkpoint_, X)

    def predict(self, X) -> np.ndarray:
        X = self._check_x(X)
        scores = evaluate.anomaly_scores(self.checkpoint_, X)
        flags = evaluate.threshold_flags(scores, self.contamination)
        return np.where(flags, -1, 1)
