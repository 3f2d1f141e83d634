"""Shared fixtures: the 10k synthetic set and fully trained reference models.

Training is deterministic, so finished checkpoints are cached under pytest's
cache directory; delete `.pytest_cache` to force retraining from scratch.
Benchmark-dataset tests look for raw files under $RADOGAGA_DATA_DIR and skip
when they are absent.
"""

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import pytest

from radogaga import model
from radogaga.cli import build_model_spec, build_train_config
from radogaga.data import toy_generate

REPO = Path(__file__).resolve().parent.parent

BENCH_FILES = {
    "thyroid": ("ann-train.data", "thyroid.data"),
    "arrhythmia": ("arrhythmia.data",),
    "kddcup99": ("kddcup.data_10_percent_corrected", "kddcup.data_10_percent"),
}


def bench_path(preset: str) -> Path | None:
    root = os.environ.get("RADOGAGA_DATA_DIR")
    if not root:
        return None
    for name in BENCH_FILES[preset]:
        p = Path(root) / name
        if p.exists():
            return p
    return None


def skip_unless_bench(preset: str) -> Path:
    p = bench_path(preset)
    if p is None:
        pytest.skip(
            f"benchmark file for {preset!r} not found; set RADOGAGA_DATA_DIR "
            f"to a directory containing one of {BENCH_FILES[preset]}"
        )
    return p


@pytest.fixture(scope="session")
def toy10k():
    return toy_generate(10000, 0)


def run_config(name: str) -> dict:
    return json.loads((REPO / "configs" / f"{name}.json").read_text())


def train_cached(request, key: str, x, spec, cfg) -> model.Checkpoint:
    """Train once per settings; reuse the saved checkpoint afterwards."""
    # key in the spec+config so edited settings never reuse a stale model
    blob = json.dumps([dataclasses.asdict(spec), dataclasses.asdict(cfg)],
                      sort_keys=True, default=str)
    digest = hashlib.sha1(blob.encode()).hexdigest()[:10]
    cache = Path(request.config.cache.mkdir("radogaga_models"))
    path = cache / f"{key}-{digest}.ckpt"
    if path.exists():
        try:
            return model.checkpoint_load(path)
        except Exception:
            path.unlink()
    ckpt = model.train(x, spec, cfg)
    model.checkpoint_save(ckpt, path)
    return ckpt


def _toy_fixture(cfg_name: str):
    @pytest.fixture(scope="session")
    def fx(request, toy10k):
        raw = run_config(cfg_name)
        spec = build_model_spec(raw["model"], toy10k.x.shape[1])
        cfg = build_train_config(raw["train"])
        return train_cached(request, cfg_name, toy10k.x, spec, cfg), cfg

    return fx


toy_ckpt_log = _toy_fixture("toy_log")
toy_ckpt_d = _toy_fixture("toy_d")
toy_ckpt_dagmm = _toy_fixture("toy_dagmm")


@pytest.fixture(scope="session")
def pca_ckpt(request, toy10k):
    """Factory for the latent-8 factorized models used by the ordering tests."""

    def get(seed: int) -> model.Checkpoint:
        spec = model.ModelSpec(
            input_dim=toy10k.x.shape[1], latent_dim=8,
            encoder_hidden=(64, 32, 16), activation="tanh", prior="factorized",
        )
        cfg = model.TrainConfig(loss="radogaga", lambda1=1000.0, lambda2=1000.0,
                                epochs=2000, batch_size=1024, lr=1e-4, seed=seed)
        return train_cached(request, f"pca_seed{seed}", toy10k.x, spec, cfg)

    return get
