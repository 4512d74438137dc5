"""Figure rendering for the branching-diffusion engine's CSV outputs."""

__version__ = "0.1.0"

from .figures import FIGURE_KINDS, FigureSpec, SchemaError, render  # noqa: F401
