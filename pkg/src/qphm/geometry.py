"""Macro-unit templates, periodic array instantiation and per-codebook masks.

A macro unit is the geometric union of every coding state of one array
cell.  Replacing each cell with the macro unit makes the array rigorously
periodic, so one global interaction matrix covers every configuration;
a configuration (codebook) only selects which sites are active.

Coordinates are dimensionless grid units; the wavelength is chosen
independently by the kernel.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .masking import MaskVector


class InvalidParameterError(ValueError):
    pass


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.x, self.y, self.z)):
            raise InvalidParameterError(f"non-finite point ({self.x}, {self.y}, {self.z})")

    def as_array(self):
        return np.array([self.x, self.y, self.z], dtype=float)


@dataclass
class MacroUnitTemplate:
    """Discretized macro unit: one site set shared by all coding states.

    Each site carries a state mask (bit c set = the site is part of state c)
    and bridge flags.  Bridge sites sit on the -x / -y cell faces and model
    continuity with the neighbouring unit; on the array's -x / -y edge they
    are the extended sites that every mask switches off.

    Site order is canonical (sorted by z, then y, then x, insertion order
    breaking ties) so equal templates are bitwise identical.
    """

    k_bits: int
    pitch: tuple
    positions: np.ndarray        # (S, 3) float64, canonical order
    state_masks: np.ndarray      # (S,) int64 bitmask over 2**k_bits states
    bridge_x: np.ndarray         # (S,) bool, site on the -x face
    bridge_y: np.ndarray         # (S,) bool, site on the -y face

    @classmethod
    def from_sites(cls, k_bits, pitch, sites):
        """Build from (Point3|seq, states-iterable, bridge_x, bridge_y) tuples."""
        if k_bits < 1:
            raise InvalidParameterError("k_bits must be >= 1")
        px, py = float(pitch[0]), float(pitch[1])
        if px <= 0 or py <= 0:
            raise InvalidParameterError("pitch components must be positive")
        pos, masks, bx, by = [], [], [], []
        for entry in sites:
            p, states, is_bx, is_by = entry
            if isinstance(p, Point3):
                p = (p.x, p.y, p.z)
            pos.append([float(p[0]), float(p[1]), float(p[2])])
            mask = 0
            for c in states:
                if not 0 <= c < (1 << k_bits):
                    raise InvalidParameterError(f"state {c} out of range for {k_bits} bits")
                mask |= 1 << c
            masks.append(mask)
            bx.append(bool(is_bx))
            by.append(bool(is_by))
        pos = np.asarray(pos, dtype=float)
        if pos.size == 0:
            raise InvalidParameterError("template needs at least one site")
        order = np.lexsort((np.arange(len(pos)), pos[:, 0], pos[:, 1], pos[:, 2]))
        tpl = cls(
            k_bits=int(k_bits),
            pitch=(px, py),
            positions=pos[order],
            state_masks=np.asarray(masks, dtype=np.int64)[order],
            bridge_x=np.asarray(bx, dtype=bool)[order],
            bridge_y=np.asarray(by, dtype=bool)[order],
        )
        tpl.validate()
        return tpl

    @property
    def site_count(self):
        return len(self.positions)

    def validate(self):
        px, py = self.pitch
        pos = self.positions
        if not np.all(np.isfinite(pos)):
            raise InvalidParameterError("non-finite site position")
        if np.any(pos[:, 0] < 0) or np.any(pos[:, 0] >= px) \
                or np.any(pos[:, 1] < 0) or np.any(pos[:, 1] >= py):
            raise InvalidParameterError("site positions must lie in [0,px) x [0,py)")
        if np.any(pos[self.bridge_x, 0] != 0.0):
            raise InvalidParameterError("bridge-x sites must sit at local x = 0")
        if np.any(pos[self.bridge_y, 1] != 0.0):
            raise InvalidParameterError("bridge-y sites must sit at local y = 0")
        for c in range(1 << self.k_bits):
            if not np.any(self.state_masks & (1 << c)):
                raise InvalidParameterError(f"no site carries state {c}")
        # distinct sites: duplicate positions would make the kernel singular
        if len(np.unique(pos, axis=0)) != len(pos):
            raise InvalidParameterError("duplicate site positions")

    def bbox(self):
        return self.positions.min(axis=0), self.positions.max(axis=0)

    def to_json_dict(self):
        sites = []
        for p, mask, bx, by in zip(self.positions, self.state_masks,
                                   self.bridge_x, self.bridge_y):
            states = [c for c in range(1 << self.k_bits) if mask & (1 << c)]
            sites.append({"pos": [p[0], p[1], p[2]], "states": states,
                          "bridge_x": bool(bx), "bridge_y": bool(by)})
        return {"k_bits": self.k_bits, "pitch": list(self.pitch), "sites": sites}

    @classmethod
    def from_json_dict(cls, doc):
        sites = [((s["pos"][0], s["pos"][1], s["pos"][2]), s["states"],
                  s.get("bridge_x", False), s.get("bridge_y", False))
                 for s in doc["sites"]]
        return cls.from_sites(doc["k_bits"], tuple(doc["pitch"]), sites)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass(frozen=True)
class ArrayLayout:
    m: int   # units along x
    n: int   # units along y

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise InvalidParameterError("layout needs m, n >= 1")

    @property
    def unit_count(self):
        return self.m * self.n


@dataclass
class Codebook:
    """m x n grid of state indices, one per unit; states[i][j] is unit (i, j)."""

    states: np.ndarray

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.int64)
        if self.states.ndim != 2:
            raise InvalidParameterError("codebook must be a 2-d grid")
        if np.any(self.states < 0):
            raise InvalidParameterError("negative state index")

    @property
    def shape(self):
        return self.states.shape

    def check_against(self, template, layout):
        if self.states.shape != (layout.m, layout.n):
            raise InvalidParameterError(
                f"codebook shape {self.states.shape} != layout ({layout.m}, {layout.n})")
        if np.any(self.states >= (1 << template.k_bits)):
            raise InvalidParameterError("codebook state exceeds template k_bits")

    def to_json_dict(self):
        m, n = self.states.shape
        return {"m": m, "n": n, "states": self.states.tolist()}

    @classmethod
    def from_json_dict(cls, doc):
        cb = cls(states=np.asarray(doc["states"], dtype=np.int64))
        if cb.states.shape != (doc["m"], doc["n"]):
            raise InvalidParameterError("codebook states grid does not match m, n")
        return cb

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


def displacement_grid(tpl_positions, pitch, row_cells, row_locals, col_cells, col_locals):
    """Pairwise displacement vectors from lattice-relative coordinates.

    The displacement of row site (cell a, local l) from column site
    (cell b, local k) is computed as (tpl[l] - tpl[k]) + (a - b) * pitch,
    always in this order, so any two pairs with equal relative geometry get
    bit-identical vectors.  That exactness is what lets translated blocks
    share one assembled copy.

    Returns (dxyz, self_mask): dxyz is (R, C, 3); self_mask flags pairs that
    are the same physical site.
    """
    dcell = row_cells[:, None, :] - col_cells[None, :, :]
    dloc = tpl_positions[row_locals][:, None, :] - tpl_positions[col_locals][None, :, :]
    dxyz = dloc.copy()
    dxyz[:, :, 0] += dcell[:, :, 0] * pitch[0]
    dxyz[:, :, 1] += dcell[:, :, 1] * pitch[1]
    self_mask = (dcell[:, :, 0] == 0) & (dcell[:, :, 1] == 0) \
        & (row_locals[:, None] == col_locals[None, :])
    return dxyz, self_mask


@dataclass
class SiteSet:
    """All sites of an instantiated array, unit-major global ordering.

    Global site u * S + l is template site l of unit u, with units numbered
    row-major over (i, j): u = i * n + j.  Absolute positions are template
    positions plus the unit's lattice offset.
    """

    template: MacroUnitTemplate
    layout: ArrayLayout
    positions: np.ndarray = field(init=False)    # (N, 3)
    cell_of_unit: np.ndarray = field(init=False)  # (m*n, 2) int lattice coords

    def __post_init__(self):
        tpl, lay = self.template, self.layout
        S = tpl.site_count
        px, py = tpl.pitch
        ii, jj = np.meshgrid(np.arange(lay.m), np.arange(lay.n), indexing="ij")
        self.cell_of_unit = np.stack([ii.ravel(), jj.ravel()], axis=1).astype(np.int64)
        offsets = np.zeros((lay.unit_count, 3))
        offsets[:, 0] = self.cell_of_unit[:, 0] * px
        offsets[:, 1] = self.cell_of_unit[:, 1] * py
        self.positions = (offsets[:, None, :] + tpl.positions[None, :, :]).reshape(-1, 3)

    @property
    def N(self):
        return len(self.positions)

    @property
    def S(self):
        return self.template.site_count

    def unit_of(self, idx):
        return np.asarray(idx) // self.S

    def local_of(self, idx):
        return np.asarray(idx) % self.S

    def unit_index(self, i, j):
        return i * self.layout.n + j

    def displacements(self, rows, cols):
        """Canonical pairwise displacements for global site indices."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        return displacement_grid(
            self.template.positions, self.template.pitch,
            self.cell_of_unit[rows // self.S], rows % self.S,
            self.cell_of_unit[cols // self.S], cols % self.S)


def build_split_grid_template(g, pitch, height=0.0):
    """Synthetic 1-bit macro unit: g x g grid split into left/right states.

    Grid sites sit at ((i+0.5)px/g, (j+0.5)py/g, height).  Left-half columns
    belong to state 0, right-half to state 1; with g odd the middle column
    serves both.  g bridge-x sites (x=0) and g bridge-y sites (y=0) are
    active in every state.  Total sites: g*g + 2g.
    """
    if g < 2:
        raise InvalidParameterError("split-grid template needs g >= 2")
    px, py = float(pitch[0]), float(pitch[1])
    xs = (np.arange(g) + 0.5) * px / g
    ys = (np.arange(g) + 0.5) * py / g
    sites = []
    for ix in range(g):
        if ix < g // 2:
            states = (0,)
        elif ix >= (g + 1) // 2:
            states = (1,)
        else:
            states = (0, 1)
        for iy in range(g):
            sites.append(((xs[ix], ys[iy], height), states, False, False))
    for iy in range(g):
        sites.append(((0.0, ys[iy], height), (0, 1), True, False))
    for ix in range(g):
        sites.append(((xs[ix], 0.0, height), (0, 1), False, True))
    return MacroUnitTemplate.from_sites(1, (px, py), sites)


def build_depth_coded_template(pitch, state_depths, height=0.0):
    """Macro unit whose states are short vertical stacks of sites.

    `state_depths` gives one depth list per coding state; state c's sites
    sit at x = (c + 0.5) * px / nstates, y = py / 2, z = height + depth.
    Flat grids cannot give a 1-bit codebook real steering authority (the
    two states scatter almost in phase), so beam demos use depth contrast
    instead.  No bridge sites: this unit is for beam experiments, not for
    edge-extension behaviour.
    """
    nstates = len(state_depths)
    if nstates < 2 or nstates & (nstates - 1):
        raise InvalidParameterError("need a power-of-two number of states")
    k_bits = nstates.bit_length() - 1
    px, py = float(pitch[0]), float(pitch[1])
    sites = []
    for c, depths in enumerate(state_depths):
        if len(set(depths)) != len(depths):
            raise InvalidParameterError(f"state {c} repeats a depth")
        x = (c + 0.5) * px / nstates
        for z in depths:
            sites.append(((x, py / 2.0, height + z), (c,), False, False))
    return MacroUnitTemplate.from_sites(k_bits, (px, py), sites)


def instantiate_array(template, layout):
    """Periodic array of macro units; N = m * n * S sites, unit-major order."""
    return SiteSet(template=template, layout=layout)


def build_mask(template, layout, codebook):
    """Per-codebook activity mask over the global site set.

    Site (unit (i, j), local l) is active iff template site l carries the
    unit's coded state, except that bridge-x sites of column i = 0 and
    bridge-y sites of row j = 0 are always off: those are the extended
    boundary sites that keep the mesh periodic but have no physical
    neighbour to bridge to.
    """
    codebook.check_against(template, layout)
    S = template.site_count
    bits = np.zeros((layout.m, layout.n, S), dtype=np.int8)
    for i in range(layout.m):
        for j in range(layout.n):
            state = int(codebook.states[i, j])
            active = (template.state_masks >> state) & 1
            act = active.astype(np.int8)
            if i == 0:
                act[template.bridge_x] = 0
            if j == 0:
                act[template.bridge_y] = 0
            bits[i, j] = act
    return MaskVector(bits=bits.reshape(-1))
