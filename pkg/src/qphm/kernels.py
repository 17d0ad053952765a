"""Translation-invariant interaction kernels and the entry-evaluation counter.

Entries depend only on the displacement between two sites, so blocks
between identically displaced site groups are bitwise equal when the
displacements are computed through the canonical lattice arithmetic in
:mod:`qphm.geometry`.  Every evaluated entry bumps a global counter; the
assembly-once guarantee is checked by watching that counter stay flat
across solves.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import displacement_grid

FOUR_PI = 4.0 * np.pi

_eval_count = 0


def eval_count():
    """Total kernel entries evaluated since the last reset."""
    return _eval_count


def reset_eval_count():
    global _eval_count
    _eval_count = 0


def _count(n):
    global _eval_count
    _eval_count += int(n)


@dataclass(frozen=True)
class KernelSpec:
    kind: str               # "helmholtz" | "laplace"
    kappa: float            # radians per length unit; 0 for laplace
    self_term: complex      # diagonal entry, must be nonzero

    def __post_init__(self):
        if self.kind not in ("helmholtz", "laplace"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kappa < 0:
            raise ValueError("wavenumber must be nonnegative")
        if self.self_term == 0:
            raise ValueError("self_term must be nonzero to keep the diagonal nonsingular")


def default_self_term(template):
    """1 / (4 pi a) with a = half the minimum inter-site spacing.

    Mimics a self-integral scale: the diagonal dominates nearby couplings,
    which keeps iterative solves realistic but tractable.
    """
    pos = template.positions
    d2 = np.sum((pos[:, None, :] - pos[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    a = 0.5 * np.sqrt(d2.min())
    return 1.0 / (FOUR_PI * a)


def eval_displacements(spec, dxyz, self_mask=None):
    """Kernel values for an array of displacement vectors (..., 3).

    Positions flagged in `self_mask` get the self term.  This is the single
    arithmetic path for all entry evaluation, scalar or block, so equal
    displacements always give bitwise-equal entries.
    """
    dxyz = np.asarray(dxyz, dtype=float)
    d = np.sqrt(dxyz[..., 0] * dxyz[..., 0]
                + dxyz[..., 1] * dxyz[..., 1]
                + dxyz[..., 2] * dxyz[..., 2])
    _count(d.size)
    if self_mask is not None and np.any(self_mask):
        d = np.where(self_mask, 1.0, d)   # dodge 0/0; overwritten below
    if spec.kind == "helmholtz":
        vals = np.exp(-1j * spec.kappa * d) / (FOUR_PI * d)
    else:
        vals = (1.0 / (FOUR_PI * d)).astype(complex)
    if self_mask is not None and np.any(self_mask):
        vals = np.where(self_mask, complex(spec.self_term), vals)
    return vals


def eval_entry(spec, r_i, r_j):
    """Single entry from two absolute positions; same site gives the self term."""
    r_i = np.asarray(r_i, dtype=float)
    r_j = np.asarray(r_j, dtype=float)
    if np.array_equal(r_i, r_j):
        _count(1)
        return complex(spec.self_term)
    return complex(eval_displacements(spec, (r_i - r_j)[None, :])[0])


def eval_block(spec, sites, rows, cols):
    """Dense block over global site indices, row-major, canonical arithmetic."""
    dxyz, self_mask = sites.displacements(rows, cols)
    return eval_displacements(spec, dxyz, self_mask)


class DisplacementOracle:
    """Entry oracle for one matrix block described in lattice-relative terms.

    Rows and columns are (cell, local-site) pairs; entries come from the
    canonical displacement arithmetic, so two oracles with equal relative
    geometry produce bitwise-identical blocks.  Used both for pattern
    content (cells relative to the pattern frame) and for classical blocks
    (cells taken from the instantiated lattice).
    """

    def __init__(self, spec, tpl_positions, pitch, row_cells, row_locals,
                 col_cells, col_locals):
        self.spec = spec
        self.tpl_positions = tpl_positions
        self.pitch = pitch
        self.row_cells = np.asarray(row_cells, dtype=np.int64)
        self.row_locals = np.asarray(row_locals, dtype=np.int64)
        self.col_cells = np.asarray(col_cells, dtype=np.int64)
        self.col_locals = np.asarray(col_locals, dtype=np.int64)

    @property
    def shape(self):
        return (len(self.row_locals), len(self.col_locals))

    def _eval(self, r_sel, c_sel):
        dxyz, self_mask = displacement_grid(
            self.tpl_positions, self.pitch,
            self.row_cells[r_sel], self.row_locals[r_sel],
            self.col_cells[c_sel], self.col_locals[c_sel])
        return eval_displacements(self.spec, dxyz, self_mask)

    def block(self):
        return self._eval(slice(None), slice(None))

    def row(self, i):
        return self._eval(slice(i, i + 1), slice(None))[0]

    def col(self, j):
        return self._eval(slice(None), slice(j, j + 1))[:, 0]


def oracle_for_sites(spec, sites, rows, cols):
    """DisplacementOracle over global site indices of an instantiated array."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    S = sites.S
    return DisplacementOracle(
        spec, sites.template.positions, sites.template.pitch,
        sites.cell_of_unit[rows // S], rows % S,
        sites.cell_of_unit[cols // S], cols % S)
