"""Datasets: the synthetic mixture benchmark and tabular CSV ingestion.

The toy benchmark draws 3-D points from a fixed three-component Gaussian
mixture, embeds them in 16 dimensions through a random linear map drawn once
per run, and keeps the true density of every point so latent densities can
be audited against ground truth.

Tabular ingestion covers four benchmark layouts (kddcup99, thyroid,
arrhythmia, kddcup99rev) behind one preset table: parse, one-hot encode
categoricals, binarize labels, then min-max normalize each column over the
full file before any split.  Constant columns normalize to zero.  Splits
follow the usual anomaly protocol: half the data (normal rows only) trains,
the other half tests with labels kept.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .numerics import as_tensor, make_rng, task_rng

TOY_WEIGHTS = np.full(3, 1.0 / 3.0)
TOY_MEANS = np.array([[0.0, 0.0, 0.0], [15.0, 0.0, 0.0], [15.0, 15.0, 15.0]])
TOY_VARS = np.array([1.0, 2.0, 3.0])
TOY_SOURCE_DIM = 3
TOY_DATA_DIM = 16


@dataclass
class ToyData:
    """Embedded mixture draw: observed x, source s, true density, mixing map."""

    x: np.ndarray
    s: np.ndarray
    density: np.ndarray
    log_density: np.ndarray
    mix: np.ndarray
    seed: int


def toy_density(s) -> tuple[np.ndarray, np.ndarray]:
    """True (density, log density) of source points under the fixed mixture."""
    s = as_tensor(s, "s")
    log_terms = np.empty((s.shape[0], len(TOY_WEIGHTS)))
    for k in range(len(TOY_WEIGHTS)):
        diff = s - TOY_MEANS[k]
        log_terms[:, k] = (
            np.log(TOY_WEIGHTS[k])
            - 0.5 * np.sum(diff * diff / TOY_VARS, axis=1)
            - 0.5 * np.sum(np.log(2.0 * np.pi * TOY_VARS))
        )
    logp = logsumexp(log_terms, axis=1)
    return np.exp(logp), logp


def toy_generate(n: int, seed: int) -> ToyData:
    """Draw n samples; the 3x16 mixing map is drawn once from U(-1/2, 1/2)."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = make_rng(seed)
    comp = rng.choice(len(TOY_WEIGHTS), size=n, p=TOY_WEIGHTS)
    s = TOY_MEANS[comp] + rng.standard_normal((n, TOY_SOURCE_DIM)) * np.sqrt(TOY_VARS)
    mix = rng.uniform(-0.5, 0.5, size=(TOY_SOURCE_DIM, TOY_DATA_DIM))
    x = s @ mix
    density, log_density = toy_density(s)
    return ToyData(x=x, s=s, density=density, log_density=log_density, mix=mix, seed=seed)


# ---- normalization --------------------------------------------------------


@dataclass
class NormStats:
    """Per-column min/max recorded over the full dataset at ingest."""

    col_min: np.ndarray
    col_max: np.ndarray

    def apply(self, x) -> np.ndarray:
        x = as_tensor(x, "x")
        span = self.col_max - self.col_min
        out = np.zeros_like(x)
        ok = span > 0
        out[:, ok] = (x[:, ok] - self.col_min[ok]) / span[ok]
        return out

    def to_dict(self) -> dict:
        return {"col_min": self.col_min.tolist(), "col_max": self.col_max.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(col_min=np.asarray(d["col_min"], dtype=np.float64),
                   col_max=np.asarray(d["col_max"], dtype=np.float64))


def fit_norm(x) -> NormStats:
    x = as_tensor(x, "x")
    return NormStats(col_min=x.min(axis=0), col_max=x.max(axis=0))


@dataclass
class Dataset:
    """Normalized feature matrix with binary anomaly labels (1 = anomaly)."""

    name: str
    x: np.ndarray
    y: np.ndarray
    norm: NormStats | None = None

    def __post_init__(self):
        self.x = as_tensor(self.x, "x")
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x and y row counts differ")

    @property
    def anomaly_ratio(self) -> float:
        return float(self.y.mean())


# ---- CSV presets ----------------------------------------------------------


@dataclass(frozen=True)
class IngestPreset:
    """How to parse one benchmark file into features and anomaly labels."""

    delimiter: str | None = ","
    label_col: int = -1
    feature_cols: tuple | None = None
    categorical_cols: tuple = ()
    anomaly_labels: tuple = ()
    normal_labels: tuple = ()
    rev_subsample: bool = False
    drop_blank_cols: bool = False


# kddcup99: raw 41-column connection records, label last.  34 columns are
# continuous; 7 are categorical (the three symbolic ones plus the four 0/1
# flags) and get one-hot encoded from the categories present in the file.
# The minority "normal." class plays the anomaly role.  kddcup99rev keeps
# normal rows as inliers and subsamples attack rows to a fifth of the data.
# thyroid: whitespace-separated, 21 attributes + class; the six continuous
# attributes are kept and the hyperfunction class (1) is the anomaly.
# arrhythmia: raw comma-separated records with "?" blanks; columns containing
# blanks are dropped and the eight minority rhythm classes are anomalies.
KDD_CATEGORICAL = (1, 2, 3, 6, 11, 20, 21)
ARRHYTHMIA_ANOMALY_CLASSES = ("3", "4", "5", "7", "8", "9", "14", "15")

PRESETS: dict[str, IngestPreset] = {
    "kddcup99": IngestPreset(
        label_col=41,
        categorical_cols=KDD_CATEGORICAL,
        anomaly_labels=("normal.",),
    ),
    "kddcup99rev": IngestPreset(
        label_col=41,
        categorical_cols=KDD_CATEGORICAL,
        normal_labels=("normal.",),
        rev_subsample=True,
    ),
    "thyroid": IngestPreset(
        delimiter=None,
        label_col=21,
        feature_cols=(0, 16, 17, 18, 19, 20),
        anomaly_labels=("1",),
    ),
    "arrhythmia": IngestPreset(
        label_col=-1,
        anomaly_labels=ARRHYTHMIA_ANOMALY_CLASSES,
        drop_blank_cols=True,
    ),
}


def _one_hot(col: pd.Series) -> np.ndarray:
    cats = sorted(col.astype(str).unique())
    out = np.zeros((len(col), len(cats)))
    index = {c: i for i, c in enumerate(cats)}
    for r, v in enumerate(col.astype(str)):
        out[r, index[v]] = 1.0
    return out


def _label_str(v) -> str:
    if isinstance(v, bytes):
        v = v.decode()
    s = str(v)
    # integer-valued float labels read from numeric columns print as "1.0"
    if s.endswith(".0") and s[:-2].isdigit():
        s = s[:-2]
    return s


def _assemble(frame: pd.DataFrame, p: IngestPreset, name: str, seed: int) -> Dataset:
    label_col = p.label_col if p.label_col >= 0 else frame.shape[1] - 1
    labels = frame.iloc[:, label_col].map(_label_str)
    if p.feature_cols is not None:
        feat_cols = list(p.feature_cols)
    else:
        feat_cols = [c for c in range(frame.shape[1]) if c != label_col]
    if p.drop_blank_cols:
        blank = frame.isin(["?"]).any(axis=0) | frame.isna().any(axis=0)
        feat_cols = [c for c in feat_cols if not blank.iloc[c]]
    blocks = []
    for c in feat_cols:
        if c in p.categorical_cols:
            blocks.append(_one_hot(frame.iloc[:, c]))
        else:
            try:
                col = pd.to_numeric(frame.iloc[:, c]).to_numpy(dtype=np.float64)
            except (ValueError, TypeError) as e:
                probe = pd.to_numeric(frame.iloc[:, c], errors="coerce")
                rows = probe.index[probe.isna()].tolist()[:5]
                raise ValueError(
                    f"unparseable cell at row {rows[0] if rows else '?'}, "
                    f"column {c}: {e}"
                ) from e
            blocks.append(col[:, None])
    x = np.concatenate(blocks, axis=1)

    if p.rev_subsample:
        normal_mask = labels.isin(p.normal_labels).to_numpy()
        y = (~normal_mask).astype(np.int64)
        keep_normal = np.flatnonzero(normal_mask)
        attack_idx = np.flatnonzero(~normal_mask)
        n_attack = len(keep_normal) // 4
        rng = task_rng(seed, 9001)
        picked = rng.choice(attack_idx, size=min(n_attack, len(attack_idx)), replace=False)
        keep = np.sort(np.concatenate([keep_normal, picked]))
        x, y = x[keep], y[keep]
    else:
        y = labels.isin(p.anomaly_labels).to_numpy().astype(np.int64)

    if not np.all(np.isfinite(x)):
        bad = np.argwhere(~np.isfinite(x))[0]
        raise ValueError(f"non-finite cell at row {bad[0]}, feature column {bad[1]}")
    norm = fit_norm(x)
    return Dataset(name=name, x=norm.apply(x), y=y, norm=norm)


def csv_ingest(
    path,
    categorical_cols: tuple = (),
    label_col: int = -1,
    anomaly_labels: tuple = (),
    delimiter: str = ",",
) -> tuple[Dataset, NormStats]:
    """Ingest a generic header-row CSV; columns addressed by position.

    One-hot encodes the listed categorical columns, binarizes labels by
    membership in `anomaly_labels`, and min-max normalizes every feature
    column over the whole file.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    frame = pd.read_csv(path, sep=delimiter, float_precision="round_trip")
    frame.columns = range(frame.shape[1])
    p = IngestPreset(
        label_col=label_col,
        categorical_cols=tuple(categorical_cols),
        anomaly_labels=tuple(str(a) for a in anomaly_labels),
    )
    ds = _assemble(frame, p, path.stem, seed=0)
    return ds, ds.norm


def ingest_preset(path, preset: str, seed: int = 0) -> tuple[Dataset, NormStats]:
    """Parse one benchmark file (headerless) by preset name."""
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[preset]
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    sep = r"\s+" if p.delimiter is None else p.delimiter
    frame = pd.read_csv(path, header=None, sep=sep, float_precision="round_trip")
    ds = _assemble(frame, p, preset, seed)
    return ds, ds.norm


# ---- splitting and side features ------------------------------------------


@dataclass
class Split:
    """Anomaly-protocol split: normal-only training half, mixed test half."""

    train_x: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray


def split_train_test(ds: Dataset, seed: int, train_fraction: float = 0.5) -> Split:
    """Random half split; anomalous rows are dropped from the training half."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must be in (0, 1)")
    n = ds.x.shape[0]
    order = task_rng(seed, 1).permutation(n)
    n_train = int(n * train_fraction)  # floor: train gets floor(n * fraction) rows
    train_idx = order[:n_train]
    test_idx = order[n_train:]
    train_idx = train_idx[ds.y[train_idx] == 0]
    if len(train_idx) == 0:
        raise ValueError("training half contains no normal rows")
    return Split(
        train_x=ds.x[train_idx].copy(),
        test_x=ds.x[test_idx].copy(),
        test_y=ds.y[test_idx].copy(),
    )


def en_side_features(x, xr, tiny: float = 1e-12) -> np.ndarray:
    """Reconstruction summaries fed to the estimation network, shape (B, 2).

    Columns are the relative Euclidean error ||x - xr|| / ||x|| and the
    cosine similarity between x and xr; zero norms make the affected
    feature 0 rather than dividing by zero.
    """
    x = as_tensor(x, "x")
    xr = as_tensor(xr, "xr")
    if x.shape != xr.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {xr.shape}")
    nx = np.linalg.norm(x, axis=1)
    nr = np.linalg.norm(xr, axis=1)
    diff = np.linalg.norm(x - xr, axis=1)
    rel = np.where(nx > tiny, diff / np.maximum(nx, tiny), 0.0)
    denom = nx * nr
    cos = np.where(denom > tiny, np.einsum("ij,ij->i", x, xr) / np.maximum(denom, tiny), 0.0)
    return np.stack([rel, cos], axis=1)


# ---- plain matrix round trips ---------------------------------------------


def write_matrix_csv(path, array, header: list[str] | None = None) -> None:
    """Write a 2-D float matrix as CSV with full float64 round-trip precision."""
    array = as_tensor(array, "array")
    if array.ndim != 2:
        raise ValueError("expected a 2-D matrix")
    cols = header or [f"c{i}" for i in range(array.shape[1])]
    pd.DataFrame(array, columns=cols).to_csv(path, index=False, float_format="%.17g")


def read_matrix_csv(path) -> np.ndarray:
    return pd.read_csv(path, float_precision="round_trip").to_numpy(dtype=np.float64)


def save_toy(data: ToyData, out_dir) -> None:
    """Persist a toy draw: features, sources with densities, and metadata."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(out / "x.csv", data.x)
    truth = np.concatenate(
        [data.s, data.density[:, None], data.log_density[:, None]], axis=1
    )
    write_matrix_csv(out / "truth.csv", truth, header=["s0", "s1", "s2", "density", "log_density"])
    meta = {"seed": data.seed, "mix": data.mix.tolist()}
    (out / "meta.json").write_text(json.dumps(meta, indent=2) + "\n")


def load_toy(out_dir) -> ToyData:
    out = Path(out_dir)
    x = read_matrix_csv(out / "x.csv")
    truth = read_matrix_csv(out / "truth.csv")
    meta = json.loads((out / "meta.json").read_text())
    return ToyData(
        x=x,
        s=truth[:, :3],
        density=truth[:, 3],
        log_density=truth[:, 4],
        mix=np.asarray(meta["mix"], dtype=np.float64),
        seed=int(meta["seed"]),
    )
