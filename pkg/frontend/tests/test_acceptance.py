"""End-to-end acceptance for the presentation package.

Runs the experiment harness CLI to produce a real six-method result CSV,
then checks the boxplot and table contracts. Prints one PASS/FAIL line
per criterion.
"""
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from twistplots import PlotSpec, load_results, make_boxplot, make_tables

from conftest import write_csv

METHODS = ["bpf", "fa-apf", "iapf", "tppf-re", "tppf-ce", "tppf-rece"]


def _verdict(name, ok, detail=""):
    tail = f"  ({detail})" if detail else ""
    print(f"{'PASS' if ok else 'FAIL'}  {name}{tail}")
    assert ok, name


@pytest.fixture(scope="module")
def sweep_csv(tmp_path_factory):
    """A genuine LGM d=2 sweep over all six methods at desk scale."""
    out = tmp_path_factory.mktemp("sweep") / "lgm2"
    cmd = [sys.executable, "-m", "twistpf.cli", "sweep", "--model", "lgm",
           "--d-list", "2", "--methods", ",".join(METHODS), "--N", "64",
           "--replicates", "8", "--train-iters", "25", "--out", str(out)]
    res = subprocess.run(cmd, capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    return out.with_suffix(".csv")


def test_boxplot_on_lgm_sweep(sweep_csv, tmp_path):
    out = tmp_path / "lgm2_box.svg"
    res = make_boxplot(PlotSpec(csv_paths=[sweep_csv], out_path=out))
    six = res.labels == METHODS and all(n == 8 for n in res.group_sizes.values())
    svg = out.read_text()
    # mean crosses and median dashes are the only red strokes in the figure
    styled = svg.count("#ff0000") >= 2 * len(METHODS)
    labeled = all(m in svg for m in METHODS)
    _verdict("secondary: six labeled boxes with mean marker and median line",
             six and styled and labeled,
             f"labels={res.labels}, red strokes={svg.count('#ff0000')}")


def test_tables_exact_on_hand_fixture(tmp_path):
    rows = [f"bpf,lgm,2,64,0,{r},{v},0.5,50,0.0"
            for r, v in enumerate([1.0, 2.0, 3.0, 4.0])]
    path = write_csv(tmp_path / "hand.csv", rows)
    out = make_tables(path, tmp_path / "tables")
    got = pd.read_csv(out["sigma_logz"], index_col=0).loc["bpf", "2"]
    _verdict("secondary: sigma table exact on the 4-row fixture",
             got == np.sqrt(1.25), f"sigma={got!r} vs sqrt(1.25)")


def test_tables_on_lgm_sweep(sweep_csv, tmp_path):
    df = load_results(sweep_csv)
    out = make_tables(sweep_csv, tmp_path / "tables")
    table = pd.read_csv(out["sigma_logz"], index_col=0)
    recomputed = df.groupby("method")["log_z_hat"].std(ddof=0)
    ok = all(abs(table.loc[m, "2"] - recomputed[m]) < 1e-12 for m in METHODS)
    _verdict("secondary: sweep sigma table matches recomputation", ok)
