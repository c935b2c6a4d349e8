from .figures import FIGURE_KINDS, FigureError, FigureSpec, render, spec_for

__all__ = ["FIGURE_KINDS", "FigureError", "FigureSpec", "render", "spec_for"]
