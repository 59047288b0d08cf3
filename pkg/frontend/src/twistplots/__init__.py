"""Presentation artifacts (boxplots, trend lines, summary tables) built
from the experiment harness result CSVs."""
from .plots import BoxplotResult, PlotSpec, make_boxplot, make_sigma_line
from .results import (REQUIRED_COLUMNS, ContractError, ess_table,
                      load_results, make_tables, sigma_table, table_markdown)

__version__ = "0.1.0"

__all__ = [
    "BoxplotResult", "PlotSpec", "make_boxplot", "make_sigma_line",
    "REQUIRED_COLUMNS", "ContractError", "ess_table", "load_results",
    "make_tables", "sigma_table", "table_markdown",
]
