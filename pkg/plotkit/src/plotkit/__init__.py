"""Post-processing toolkit for convergence-run CSVs."""

from .render import FigureSpec, LadderRow, PanelSummary, SchemaError, read_convergence_csv, render_convergence

__version__ = "0.1.0"

__all__ = [
    "FigureSpec",
    "LadderRow",
    "PanelSummary",
    "SchemaError",
    "read_convergence_csv",
    "render_convergence",
]
