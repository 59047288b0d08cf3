"""Loading and summarizing result CSVs.

The input contract is the fixed header written by the experiment harness:

    method,model,d,N,seed,replicate,log_z_hat,mean_ess_rel,resample_count,wall_time_s

Everything in this package is a read-only consumer of those columns; no
filter quantity is ever recomputed here.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np
import pandas as pd

REQUIRED_COLUMNS = ("method", "model", "d", "N", "seed", "replicate",
                    "log_z_hat", "mean_ess_rel", "resample_count",
                    "wall_time_s")


class ContractError(ValueError):
    """Input CSV does not match the documented column contract."""


def load_results(paths) -> pd.DataFrame:
    """Read one or more result CSVs into a single frame, validating the
    column contract."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    if not paths:
        raise ContractError("no input CSV given")
    frames = []
    for p in paths:
        df = pd.read_csv(p)
        missing = [c for c in REQUIRED_COLUMNS if c not in df.columns]
        if missing:
            raise ContractError(f"{p}: missing columns {missing}")
        if df.empty:
            raise ContractError(f"{p}: no data rows")
        frames.append(df)
    return pd.concat(frames, ignore_index=True)


def sigma_table(df: pd.DataFrame) -> pd.DataFrame:
    """Empirical standard deviation of log Z-hat, keyed method x d.

    Population form (ddof 0): repeating every row leaves the table
    unchanged, which the harness's sample form would not."""
    g = df.groupby(["method", "d"])["log_z_hat"].std(ddof=0)
    return g.unstack("d").sort_index()


def ess_table(df: pd.DataFrame) -> pd.DataFrame:
    """Mean relative ESS per method x d."""
    g = df.groupby(["method", "d"])["mean_ess_rel"].mean()
    return g.unstack("d").sort_index()


def table_markdown(table: pd.DataFrame, value_name: str,
                   digits: int = 4) -> str:
    cols = list(table.columns)
    lines = [f"| {value_name} | " + " | ".join(f"d={c}" for c in cols) + " |",
             "|" + "---|" * (len(cols) + 1)]
    for method, row in table.iterrows():
        cells = " | ".join("" if np.isnan(v) else f"{v:.{digits}g}"
                           for v in row.to_numpy())
        lines.append(f"| {method} | {cells} |")
    return "\n".join(lines) + "\n"


def make_tables(csv_paths, out_dir) -> dict[str, Path]:
    """Write sigma(log Z-hat) and mean ESS tables as CSV and markdown."""
    df = load_results(csv_paths)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for name, table in (("sigma_logz", sigma_table(df)),
                        ("mean_ess_rel", ess_table(df))):
        csv_path = out_dir / f"{name}.csv"
        table.to_csv(csv_path, float_format="%.17g")
        md_path = out_dir / f"{name}.md"
        md_path.write_text(table_markdown(table, name))
        written[name] = csv_path
    return written
