"""flowfigs: batch renderer for scoreflow CSV/JSON artifacts."""

__version__ = "0.1.0"

from .render import render
from .spec import FigureSpec, MissingColumnError
