"""Static figure generation for solver sweep outputs.

Reads only the documented CSV/JSON files written by the solver CLI; no
solver code is imported.
"""

__version__ = "0.1.0"
