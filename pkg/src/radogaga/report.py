"""Report writers: JSON as the source of truth, CSV/SVG as renders.

Outputs are byte-deterministic for identical inputs: JSON key order follows
dict insertion, floats serialize via repr (shortest round-trip), and SVG
rendering pins the hash salt and strips the date metadata.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

import numpy as np  # noqa: E402

SVG_HASHSALT = "rd-ae-reports"


def write_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_json(path) -> dict:
    return json.loads(Path(path).read_text())


def write_scatter_csv(path, x, y, x_name: str, y_name: str) -> None:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("scatter columns must have equal length")
    lines = [f"{x_name},{y_name}"]
    lines += [f"{xv!r},{yv!r}" for xv, yv in zip(x.tolist(), y.tolist())]
    Path(path).write_text("\n".join(lines) + "\n")


def write_scatter_svg(
    path, x, y, x_name: str, y_name: str, title: str = "", loglog: bool = False
) -> None:
    with plt.rc_context({"svg.hashsalt": SVG_HASHSALT}):
        fig, ax = plt.subplots(figsize=(5, 5))
        ax.scatter(np.asarray(x).ravel(), np.asarray(y).ravel(), s=4, alpha=0.5)
        if loglog:
            ax.set_xscale("log")
            ax.set_yscale("log")
        ax.set_xlabel(x_name)
        ax.set_ylabel(y_name)
        if title:
            ax.set_title(title)
        fig.tight_layout()
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
