"""Command-line entry point.

Subcommands: toygen, train, eval-pdf, eval-iso, eval-ortho, anomaly,
traverse, latent-stats, lin1d.  Every command is a pure function of its
config file, input files, and seed; JSON reports are the source of truth
and CSV/SVG outputs are renders of the same numbers.

Exit codes: 0 success, 2 config/usage error, 3 numeric failure,
4 I/O failure.  Files written by a failing command are removed so no
partial artifacts survive.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evaluate, model, report
from .data import PRESETS, ingest_preset, load_toy, save_toy, toy_generate, write_matrix_csv
from .metrics import H_KINDS, METRIC_KINDS, HKind, MetricSpec
from .numerics import NumericError, make_rng

MODEL_KEYS = {
    "input_dim", "latent_dim", "encoder_hidden", "decoder_hidden", "activation",
    "decoder_output_activation", "prior", "components", "en_hidden", "en_dropout",
    "en_sides", "metric", "d2_metric", "h",
}
TRAIN_KEYS = {
    "loss", "lambda1", "lambda2", "noise_half_width", "lr", "batch_size",
    "epochs", "seed", "checkpoint_every",
}
DATA_KEYS = {"preset", "ratio"}
TOP_KEYS = {"model", "train", "data"}


def _check_keys(section: str, d: dict, allowed: set) -> None:
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"unknown keys in config section {section!r}: {unknown}")


def load_run_config(path) -> dict:
    """Parse and validate the config file; unknown keys are errors."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config not found: {p}")
    cfg = json.loads(p.read_text())
    if not isinstance(cfg, dict):
        raise ValueError("config root must be a JSON object")
    _check_keys("<root>", cfg, TOP_KEYS)
    _check_keys("model", cfg.get("model", {}), MODEL_KEYS)
    _check_keys("train", cfg.get("train", {}), TRAIN_KEYS)
    _check_keys("data", cfg.get("data", {}), DATA_KEYS)
    tr = cfg.get("train", {})
    for lam in ("lambda1", "lambda2"):
        if lam in tr and not tr[lam] > 0:
            raise ValueError(f"train.{lam} must be positive")
    return cfg


def build_model_spec(model_cfg: dict, input_dim: int) -> model.ModelSpec:
    d = dict(model_cfg)
    d.setdefault("input_dim", input_dim)
    if d["input_dim"] != input_dim:
        raise ValueError(
            f"config input_dim {d['input_dim']} does not match data width {input_dim}"
        )
    metric = d.pop("metric", "mse")
    d2_metric = d.pop("d2_metric", None)
    h = d.pop("h", "log")
    for key in ("encoder_hidden", "decoder_hidden", "en_hidden"):
        if key in d and d[key] is not None:
            d[key] = tuple(d[key])
    return model.ModelSpec(
        d1=MetricSpec(kind=metric),
        d2=None if d2_metric is None else MetricSpec(kind=d2_metric),
        h=HKind(kind=h),
        **d,
    )


def build_train_config(train_cfg: dict) -> model.TrainConfig:
    d = dict(train_cfg)
    if "lambda1" not in d or "lambda2" not in d:
        raise ValueError("config train section needs lambda1 and lambda2")
    return model.TrainConfig(**d)


def _resolve_features(data_path, data_cfg: dict, seed: int):
    """Returns (x, toy_or_none, dataset_or_none) for a data argument."""
    p = Path(data_path)
    if p.is_dir():
        if not (p / "meta.json").exists():
            raise FileNotFoundError(f"no meta.json in data directory {p}")
        toy = load_toy(p)
        return toy.x, toy, None
    preset = data_cfg.get("preset")
    if preset is None:
        raise ValueError(
            "data file given without data.preset in config; "
            f"known presets: {sorted(PRESETS)}"
        )
    ds, _ = ingest_preset(p, preset, seed=seed)
    return ds.x, None, ds


def _load_spec_overrides(args, spec: model.ModelSpec) -> model.ModelSpec:
    if getattr(args, "metric", None):
        spec = replace(spec, d1=MetricSpec(kind=args.metric))
    if getattr(args, "h", None):
        spec = replace(spec, h=HKind(kind=args.h))
    return spec


# ---- commands --------------------------------------------------------------


def cmd_toygen(args, note) -> int:
    data = toy_generate(args.n, args.seed)
    out = Path(args.out)
    save_toy(data, out)
    for name in ("x.csv", "truth.csv", "meta.json"):
        note(out / name)
    print(f"wrote {args.n} samples to {out}")
    return 0


def cmd_train(args, note) -> int:
    cfg = load_run_config(args.config)
    x, _, ds = _resolve_features(args.data, cfg.get("data", {}),
                                 seed=args.seed if args.seed is not None else 0)
    spec = build_model_spec(cfg.get("model", {}), x.shape[1])
    spec = _load_spec_overrides(args, spec)
    tcfg = build_train_config(cfg.get("train", {}))
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    if args.lambda1 is not None:
        tcfg = replace(tcfg, lambda1=args.lambda1)
    if args.lambda2 is not None:
        tcfg = replace(tcfg, lambda2=args.lambda2)
    ckpt = model.train(x, spec, tcfg, norm=None if ds is None else ds.norm)
    note(args.out)
    model.checkpoint_save(ckpt, args.out)
    print(f"trained {tcfg.epochs} epochs; selected epoch "
          f"{ckpt.log.get('selected_epoch')}; checkpoint at {args.out}")
    return 0


def cmd_eval_pdf(args, note) -> int:
    ckpt = model.checkpoint_load(args.ckpt)
    p = Path(args.data)
    if not (p.is_dir() and (p / "meta.json").exists()):
        raise ValueError("eval-pdf needs a toy data directory with true densities")
    toy = load_toy(p)
    rep = evaluate.pdf_proportionality(ckpt, toy.x, toy.density)
    out = Path(args.out)
    note(out)
    report.write_json(out, rep.to_dict())
    scatter_csv = out.with_suffix(".scatter.csv")
    note(scatter_csv)
    report.write_scatter_csv(scatter_csv, rep.scatter_true, rep.scatter_model,
                             "true_density", "model_density")
    svg = out.with_suffix(".svg")
    note(svg)
    report.write_scatter_svg(svg, rep.scatter_true, rep.scatter_model,
                             "true density", "model density", loglog=True)
    print(f"pdf proportionality r={rep.r:.6f} over {rep.n} samples")
    return 0


def cmd_eval_iso(args, note) -> int:
    ckpt = model.checkpoint_load(args.ckpt)
    x, toy, ds = _resolve_features(args.data, {}, seed=args.seed)
    metric = MetricSpec(kind=args.metric) if args.metric else ckpt.spec.d1
    sigma_sq = args.w**2 / 3.0
    rep = evaluate.isometry_scan(
        ckpt, x, metric, args.pairs, args.side, make_rng(args.seed),
        lambda2=args.lambda2, sigma_sq=sigma_sq,
    )
    out = Path(args.out)
    note(out)
    report.write_json(out, rep.to_dict())
    scatter_csv = out.with_suffix(".scatter.csv")
    note(scatter_csv)
    names = (("latent_product", "metric_product") if args.side == "decoder"
             else ("metric_product", "latent_product"))
    report.write_scatter_csv(scatter_csv, rep.scatter_x, rep.scatter_y, *names)
    svg = out.with_suffix(".svg")
    note(svg)
    report.write_scatter_svg(svg, rep.scatter_x, rep.scatter_y, *names)
    print(f"{args.side}-side isometry over {args.pairs} pairs: "
          f"r={rep.r:.6f} slope={rep.slope:.6g}"
          + (f" expected={rep.expected_slope:.6g}" if rep.expected_slope else ""))
    return 0


def cmd_eval_ortho(args, note) -> int:
    ckpt = model.checkpoint_load(args.ckpt)
    x, _, _ = _resolve_features(args.data, {}, seed=args.seed)
    rng = make_rng(args.seed)
    idx = rng.choice(x.shape[0], size=min(args.pairs, x.shape[0]), replace=False)
    points = model.encode(ckpt, x[idx])
    metric = MetricSpec(kind=args.metric) if args.metric else ckpt.spec.d1
    rep = evaluate.jacobian_orthonormality(
        ckpt, points, metric, lambda2=args.lambda2, sigma_sq=args.w**2 / 3.0
    )
    note(args.out)
    report.write_json(args.out, rep.to_dict())
    print(f"orthonormality at {rep.points} points: diag_cov={rep.diag_cov:.4f} "
          f"offdiag_mean_ratio={rep.offdiag_mean_ratio:.4f} jsv_cov={rep.jsv_cov:.4f}")
    return 0


def cmd_anomaly(args, note) -> int:
    cfg = load_run_config(args.config)
    data_cfg = cfg.get("data", {})
    preset = data_cfg.get("preset")
    if preset is None:
        raise ValueError("anomaly needs data.preset in the config")
    ds, _ = ingest_preset(args.data, preset, seed=args.seed or 0)
    spec = build_model_spec(cfg.get("model", {}), ds.x.shape[1])
    spec = _load_spec_overrides(args, spec)
    tcfg = build_train_config(cfg.get("train", {}))
    if args.lambda1 is not None:
        tcfg = replace(tcfg, lambda1=args.lambda1)
    if args.lambda2 is not None:
        tcfg = replace(tcfg, lambda2=args.lambda2)
    ratio = args.ratio if args.ratio is not None else data_cfg.get("ratio")
    seeds = list(range(args.seeds))
    summary = evaluate.anomaly_experiment(ds, spec, tcfg, seeds, ratio=ratio)
    payload = summary.to_dict()
    payload["table"] = (
        f"P {summary.mean_precision:.4f} ({summary.std_precision:.4f})  "
        f"R {summary.mean_recall:.4f} ({summary.std_recall:.4f})  "
        f"F1 {summary.mean_f1:.4f} ({summary.std_f1:.4f})"
    )
    note(args.out)
    report.write_json(args.out, payload)
    print(f"{preset} over {len(seeds)} seeds: {payload['table']}")
    return 0


def cmd_traverse(args, note) -> int:
    ckpt = model.checkpoint_load(args.ckpt)
    x, _, _ = _resolve_features(args.data, {}, seed=args.seed)
    rows = evaluate.latent_traverse(ckpt, x, args.dim, span=args.span, steps=args.steps)
    note(args.out)
    write_matrix_csv(args.out, rows)
    print(f"traversed latent {args.dim}: {rows.shape[0]} decoded rows -> {args.out}")
    return 0


def cmd_latent_stats(args, note) -> int:
    ckpt = model.checkpoint_load(args.ckpt)
    x, _, _ = _resolve_features(args.data, {}, seed=args.seed)
    stats = evaluate.latent_stats(ckpt, x)
    note(args.out)
    report.write_json(args.out, stats.to_dict())
    print(f"latent variance order: {stats.order.tolist()}")
    return 0


def cmd_lin1d(args, note) -> int:
    h = HKind(kind=args.h)
    a, b, ab = evaluate.linear1d_solution(args.lambda1, args.lambda2, args.sigma_x, h)
    a_n, b_n, ab_n = evaluate.linear1d_numeric(args.lambda1, args.lambda2, args.sigma_x, h)
    print(f"closed form: a={a:.6g} b={b:.6g} ab={ab:.6g}")
    print(f"numeric:     a={a_n:.6g} b={b_n:.6g} ab={ab_n:.6g} "
          f"|dab|={abs(ab - ab_n):.2e}")
    if args.out:
        note(args.out)
        report.write_json(args.out, {
            "h": args.h, "lambda1": args.lambda1, "lambda2": args.lambda2,
            "sigma_x": args.sigma_x, "a": a, "b": b, "ab": ab,
            "numeric_a": a_n, "numeric_b": b_n, "numeric_ab": ab_n,
        })
    return 0


# ---- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="radogaga",
        description="Train and audit rate-distortion-guided autoencoders.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(fn=fn)
        return p

    p = add("toygen", cmd_toygen, "generate the synthetic mixture benchmark")
    p.add_argument("--n", type=int, default=10000, help="sample count")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", default="toy_data", help="output directory")

    p = add("train", cmd_train, "train a model from a config file")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--data", required=True, help="toy directory or dataset file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--metric", choices=METRIC_KINDS, default=None,
                   help="override model.metric")
    p.add_argument("--h", choices=H_KINDS, default=None, help="override model.h")
    p.add_argument("--lambda1", type=float, default=None, help="override train.lambda1")
    p.add_argument("--lambda2", type=float, default=None, help="override train.lambda2")

    p = add("eval-pdf", cmd_eval_pdf, "density proportionality on toy data")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="toy directory")
    p.add_argument("--out", required=True, help="report JSON path")

    p = add("eval-iso", cmd_eval_iso, "tangent-pair isometry scan")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="toy directory or dataset file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pairs", type=int, default=1000, help="tangent pair count")
    p.add_argument("--side", choices=("decoder", "encoder"), default="decoder",
                   help="which map to audit")
    p.add_argument("--seed", type=int, default=0, help="pair sampling seed")
    p.add_argument("--metric", choices=METRIC_KINDS, default=None,
                   help="metric for A(x); default from checkpoint")
    p.add_argument("--lambda2", type=float, default=None,
                   help="training lambda2, for the expected slope")
    p.add_argument("--w", type=float, default=0.5,
                   help="noise half-width used in training")

    p = add("eval-ortho", cmd_eval_ortho, "Jacobian orthonormality audit")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="toy directory or dataset file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--pairs", type=int, default=100, help="latent point count")
    p.add_argument("--seed", type=int, default=0, help="point sampling seed")
    p.add_argument("--metric", choices=METRIC_KINDS, default=None,
                   help="metric for A(x); default from checkpoint")
    p.add_argument("--lambda2", type=float, default=None,
                   help="training lambda2, for the implied scale")
    p.add_argument("--w", type=float, default=0.5,
                   help="noise half-width used in training")

    p = add("anomaly", cmd_anomaly, "train-on-normal scoring protocol")
    p.add_argument("--config", required=True, help="run config JSON with data.preset")
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--out", required=True, help="summary JSON path")
    p.add_argument("--seeds", type=int, default=1, help="number of seeded reruns")
    p.add_argument("--seed", type=int, default=None, help="ingest subsample seed")
    p.add_argument("--ratio", type=float, default=None,
                   help="flag ratio; defaults to the dataset anomaly ratio")
    p.add_argument("--metric", choices=METRIC_KINDS, default=None,
                   help="override model.metric")
    p.add_argument("--h", choices=H_KINDS, default=None, help="override model.h")
    p.add_argument("--lambda1", type=float, default=None, help="override train.lambda1")
    p.add_argument("--lambda2", type=float, default=None, help="override train.lambda2")

    p = add("traverse", cmd_traverse, "decode a sweep of one latent dimension")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="data for latent statistics")
    p.add_argument("--out", required=True, help="decoded rows CSV path")
    p.add_argument("--dim", type=int, required=True, help="latent dimension")
    p.add_argument("--steps", type=int, default=9, help="sweep step count")
    p.add_argument("--span", type=float, default=2.0, help="sweep half-width in stds")
    p.add_argument("--seed", type=int, default=0, help="unused; kept for parity")

    p = add("latent-stats", cmd_latent_stats, "per-dimension latent moments")
    p.add_argument("--ckpt", required=True, help="checkpoint path")
    p.add_argument("--data", required=True, help="toy directory or dataset file")
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--seed", type=int, default=0, help="ingest subsample seed")

    p = add("lin1d", cmd_lin1d, "1-D linear closed form and numeric cross-check")
    p.add_argument("--h", choices=H_KINDS, required=True, help="distortion wrapper")
    p.add_argument("--lambda1", type=float, default=1.0, help="distortion weight")
    p.add_argument("--lambda2", type=float, required=True, help="noise-term weight")
    p.add_argument("--sigma-x", type=float, default=1.0, help="source std dev")
    p.add_argument("--out", default=None, help="optional report JSON path")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    written: list[Path] = []

    def note(p):
        written.append(Path(p))
        return p

    try:
        return args.fn(args, note)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _cleanup(written)
        print(f"i/o error: {e}", file=sys.stderr)
        return 4
    except json.JSONDecodeError as e:
        _cleanup(written)
        print(f"i/o error: malformed JSON: {e}", file=sys.stderr)
        return 4
    except (NumericError, np.linalg.LinAlgError) as e:
        _cleanup(written)
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, TypeError) as e:
        _cleanup(written)
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        _cleanup(written)
        print(f"i/o error: {e}", file=sys.stderr)
        return 4


def _cleanup(written: list[Path]) -> None:
    for p in written:
        try:
            if p.exists() and p.is_file():
                p.unlink()
        except OSError:
            pass


if __name__ == "__main__":
    sys.exit(main())
