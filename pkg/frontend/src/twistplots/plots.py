"""Static figures from result frames: method boxplots and sigma trends."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd

from .results import ContractError, load_results

DEFAULT_ORDER = ("bpf", "fa-apf", "iapf", "tppf-re", "tppf-ce", "tppf-rece")


@dataclass
class PlotSpec:
    csv_paths: list
    out_path: str
    method_order: tuple = DEFAULT_ORDER
    reference: float | None = None     # optional exact log Z line
    title: str = ""
    ylabel: str = r"$\log \hat{Z}$"


@dataclass
class BoxplotResult:
    out_path: Path
    labels: list
    group_sizes: dict = field(default_factory=dict)


def _ordered_groups(df: pd.DataFrame, order) -> list[tuple[str, np.ndarray]]:
    present = [m for m in order if m in set(df["method"])]
    present += [m for m in df["method"].unique() if m not in present]
    groups = []
    for m in present:
        vals = df.loc[df["method"] == m, "log_z_hat"].to_numpy(dtype=float)
        if len(vals) < 2:
            raise ContractError(f"method {m!r} has fewer than 2 rows")
        groups.append((m, vals))
    return groups


def make_boxplot(spec: PlotSpec) -> BoxplotResult:
    """One box per method with a mean cross and a dashed median line,
    plus an optional horizontal reference at the exact value."""
    df = load_results(spec.csv_paths)
    groups = _ordered_groups(df, spec.method_order)
    labels = [m for m, _ in groups]
    data = [v for _, v in groups]

    fig, ax = plt.subplots(figsize=(1.2 + 1.1 * len(labels), 4.0))
    ax.boxplot(data, tick_labels=labels, showmeans=True,
               meanprops={"marker": "x", "markeredgecolor": "red"},
               medianprops={"color": "red", "linestyle": "--"})
    if spec.reference is not None:
        ax.axhline(spec.reference, color="0.4", linewidth=0.8,
                   label="exact")
        ax.legend(loc="best", fontsize=8)
    ax.set_ylabel(spec.ylabel)
    if spec.title:
        ax.set_title(spec.title)
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return BoxplotResult(out_path=out, labels=labels,
                         group_sizes={m: len(v) for m, v in groups})


def make_sigma_line(series: list[tuple[float, str]], out_path,
                    xlabel: str = r"$\alpha$",
                    method_order: tuple = DEFAULT_ORDER) -> Path:
    """Sigma of log Z-hat against a swept parameter.

    ``series`` pairs each parameter value with the CSV holding that cell's
    replicates (the CSV contract carries no sweep column, so the mapping
    is explicit).
    """
    if not series:
        raise ContractError("no (value, csv) pairs given")
    rows = []
    for value, path in series:
        df = load_results(path)
        for method, sub in df.groupby("method"):
            rows.append((float(value), method,
                         float(sub["log_z_hat"].std(ddof=0))))
    table = pd.DataFrame(rows, columns=["x", "method", "sigma"])

    fig, ax = plt.subplots(figsize=(5.0, 3.5))
    present = [m for m in method_order if m in set(table["method"])]
    present += [m for m in table["method"].unique() if m not in present]
    for method in present:
        sub = table[table["method"] == method].sort_values("x")
        ax.plot(sub["x"], sub["sigma"], marker="o", label=method)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(r"$\sigma(\log \hat{Z})$")
    ax.legend(fontsize=8)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out)
    plt.close(fig)
    return out
