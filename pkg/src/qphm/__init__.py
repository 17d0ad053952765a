"""Hierarchical-matrix solver kit for quasi-periodic coded arrays.

One globally shared system matrix is assembled for the fully populated
periodic array (the union of all unit states); individual configurations
are solved by masking, never by reassembly.  Translation-equivalent matrix
blocks are assembled once and shared through a pattern dictionary.
"""

__version__ = "0.1.0"
