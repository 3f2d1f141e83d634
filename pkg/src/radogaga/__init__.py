"""Rate-distortion-guided autoencoders with geometric and density audits.

Small fully-connected autoencoders trained so the latent space becomes an
isometric, density-calibrated chart of the data: the training objective
trades the latent code length under a learned prior against a metric
distortion and a decoder-smoothness term.  The package ships the trainer,
two latent priors, distortion metrics with their local quadratic forms,
numerical audits of the resulting geometry, an anomaly-detection harness,
and a CLI that drives all of it.
"""

from .data import (
    Dataset,
    NormStats,
    ToyData,
    csv_ingest,
    en_side_features,
    ingest_preset,
    load_toy,
    save_toy,
    split_train_test,
    toy_generate,
)
from .evaluate import (
    AnomalyReport,
    AnomalySummary,
    IsometryReport,
    LatentStats,
    OrthoReport,
    PdfReport,
    anomaly_experiment,
    anomaly_run,
    anomaly_score,
    anomaly_scores,
    gen_tangent_pair,
    isometry_scan,
    jacobian_orthonormality,
    latent_stats,
    latent_traverse,
    linear1d_numeric,
    linear1d_solution,
    pdf_proportionality,
    pearson_r,
    precision_recall_f1,
    threshold_flags,
)
from .metrics import HKind, MetricSpec, distance, h_apply, quadratic_form
from .model import (
    Checkpoint,
    ModelSpec,
    TrainConfig,
    checkpoint_load,
    checkpoint_save,
    decode,
    encode,
    init_checkpoint,
    sample_noise,
    train,
)
from .numerics import NumericError, ParamStore, Tape, finite_difference_gradient
from .priors import GmmValues, aggregate_gmm, factorized_logp, gmm_energy

__version__ = "0.1.0"

__all__ = [
    "AnomalyReport",
    "AnomalySummary",
    "Checkpoint",
    "Dataset",
    "GmmValues",
    "HKind",
    "IsometryReport",
    "LatentStats",
    "MetricSpec",
    "ModelSpec",
    "NormStats",
    "NumericError",
    "OrthoReport",
    "ParamStore",
    "PdfReport",
    "Tape",
    "ToyData",
    "TrainConfig",
    "aggregate_gmm",
    "anomaly_experiment",
    "anomaly_run",
    "anomaly_score",
    "anomaly_scores",
    "checkpoint_load",
    "checkpoint_save",
    "csv_ingest",
    "decode",
    "distance",
    "en_side_features",
    "encode",
    "factorized_logp",
    "finite_difference_gradient",
    "gen_tangent_pair",
    "gmm_energy",
    "h_apply",
    "ingest_preset",
    "init_checkpoint",
    "isometry_scan",
    "jacobian_orthonormality",
    "latent_stats",
    "latent_traverse",
    "linear1d_numeric",
    "linear1d_solution",
    "load_toy",
    "pdf_proportionality",
    "pearson_r",
    "precision_recall_f1",
    "quadratic_form",
    "sample_noise",
    "save_toy",
    "split_train_test",
    "threshold_flags",
    "toy_generate",
    "train",
]
