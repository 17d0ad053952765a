"""Pattern-shared assembly of the global hierarchical matrix.

The lattice of units is clustered into an object tree; every block of the
matrix corresponds to a pair of object clusters and is keyed by the tuple
(lattice offset, source shape, observer shape).  Blocks with equal keys are
translation-equivalent and bitwise identical, so each key is assembled once
and every further occurrence is a reference.  The resulting structure is a
matrix whose leaves may point into a shared dictionary instead of owning
data; its matrix-vector product resolves references through index offsets
only.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .aca import DenseBlock, LowRankBlock, aca_approximate, assemble_dense
from .clustering import (HParams, admissible_boxes, build_cluster_tree,
                         build_block_tree, block_leaves, LOWRANK, DENSE)


@dataclass(frozen=True)
class PatternKey:
    """Translation class of a block: observer origin minus source origin,
    plus the two cluster shapes."""
    di: int
    dj: int
    src_shape: tuple
    obs_shape: tuple


@dataclass
class ObjectCluster:
    """Rectangular sub-grid of the unit lattice."""
    i0: int
    j0: int
    mi: int
    nj: int
    slot: int = 0                 # first leaf slot occupied by this cluster
    children: list = field(default_factory=list)
    cells: np.ndarray = None      # (mi*nj, 2) absolute cells in leaf order

    @property
    def shape(self):
        return (self.mi, self.nj)

    @property
    def is_leaf(self):
        return not self.children

    @property
    def cell_count(self):
        return self.mi * self.nj


def build_object_tree(layout):
    """Bisection over the lattice: longer dimension first, x on ties,
    lower half takes the ceiling.  Leaves are single cells; the leaf walk
    assigns slots, so every cluster owns a contiguous slot range."""
    slot_counter = [0]

    def build(i0, j0, mi, nj):
        node = ObjectCluster(i0, j0, mi, nj)
        if mi == 1 and nj == 1:
            node.slot = slot_counter[0]
            slot_counter[0] += 1
            node.cells = np.array([[i0, j0]], dtype=np.int64)
            return node
        if mi >= nj:
            lo = (mi + 1) // 2
            node.children = [build(i0, j0, lo, nj), build(i0 + lo, j0, mi - lo, nj)]
        else:
            lo = (nj + 1) // 2
            node.children = [build(i0, j0, mi, lo), build(i0, j0 + lo, mi, nj - lo)]
        node.slot = node.children[0].slot
        node.cells = np.concatenate([c.cells for c in node.children])
        return node

    return build(0, 0, layout.m, layout.n)


def pattern_key(src, obs):
    return PatternKey(obs.i0 - src.i0, obs.j0 - src.j0, src.shape, obs.shape)


@dataclass
class PatternSplit:
    """Interior pattern node: children are references into the dictionary,
    placed by site-index offsets relative to this pattern's frame."""
    children: list                # (row_off, col_off, PatternKey)
    shape: tuple


@dataclass
class CellPairBlock:
    """Assembled interaction of two single cells: a flat list of dense and
    low-rank leaves in the shared intra-unit index frame."""
    leaves: list
    shape: tuple

    @property
    def dense_scalars(self):
        return sum(b.scalar_count for b in self.leaves if isinstance(b, DenseBlock))

    @property
    def lowrank_scalars(self):
        return sum(b.scalar_count for b in self.leaves if isinstance(b, LowRankBlock))

    @property
    def max_rank(self):
        ranks = [b.rank for b in self.leaves if isinstance(b, LowRankBlock)]
        return max(ranks, default=0)


@dataclass
class LevelStats:
    level: int
    classical_blocks: int = 0
    distinct_patterns: int = 0
    first_walk_reuses: int = 0
    lowrank_scalars: int = 0      # owned by the shared dictionary
    dense_scalars: int = 0
    classical_lowrank_scalars: int = 0   # what separate assembly would store
    classical_dense_scalars: int = 0
    max_rank: int = 0

    @property
    def reuses(self):
        return self.classical_blocks - self.distinct_patterns


@dataclass
class StorageReport:
    N: int
    levels: list
    rank_cap_hits: int = 0

    @property
    def max_rank(self):
        return max((lv.max_rank for lv in self.levels), default=0)

    def totals(self):
        return {
            "N": self.N,
            "classical_blocks": sum(lv.classical_blocks for lv in self.levels),
            "distinct_patterns": sum(lv.distinct_patterns for lv in self.levels),
            "reuses": sum(lv.reuses for lv in self.levels),
            "first_walk_reuses": sum(lv.first_walk_reuses for lv in self.levels),
            "lowrank_scalars": sum(lv.lowrank_scalars for lv in self.levels),
            "dense_scalars": sum(lv.dense_scalars for lv in self.levels),
            "classical_lowrank_scalars": sum(lv.classical_lowrank_scalars
                                             for lv in self.levels),
            "classical_dense_scalars": sum(lv.classical_dense_scalars
                                           for lv in self.levels),
            "max_rank": self.max_rank,
            "rank_cap_hits": self.rank_cap_hits,
        }

    CSV_HEADER = ("level,classical_blocks,distinct_patterns,reuses,"
                  "lowrank_scalars,dense_scalars,max_rank,first_walk_reuses")

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write(self.CSV_HEADER + "\n")
            for lv in self.levels:
                fh.write(f"{lv.level},{lv.classical_blocks},{lv.distinct_patterns},"
                         f"{lv.reuses},{lv.lowrank_scalars},{lv.dense_scalars},"
                         f"{lv.max_rank},{lv.first_walk_reuses}\n")


class _PatternFrame:
    """Geometry helpers shared by pattern assembly: everything is expressed
    relative to the source cluster's origin cell, which makes every
    quantity a function of the pattern key alone."""

    def __init__(self, sites, spec, params, intra):
        self.sites = sites
        self.spec = spec
        self.params = params
        self.intra = intra
        tpl = sites.template
        self.tpl_min, self.tpl_max = tpl.bbox()
        self.pitch = tpl.pitch
        self.S = tpl.site_count
        self.intra_locals = intra.perm     # pattern-local site p -> template site

    def cluster_box(self, key_shape, di, dj):
        """Bounding box of a cluster's sites, source frame at cell (0, 0)."""
        px, py = self.pitch
        off = np.array([di * px, dj * py, 0.0])
        bmin = self.tpl_min + off
        bmax = self.tpl_max + np.array([(key_shape[0] - 1) * px,
                                        (key_shape[1] - 1) * py, 0.0]) + off
        return bmin, bmax

    def admissible_pair(self, key):
        smin, smax = self.cluster_box(key.src_shape, 0, 0)
        omin, omax = self.cluster_box(key.obs_shape, key.di, key.dj)
        return admissible_boxes(omin, omax, smin, smax, self.params.eta)

    def pattern_oracle(self, key, obs_cells_rel, src_cells_rel):
        """Entry oracle for a whole pattern block (observer rows)."""
        tpl = self.sites.template
        row_cells = np.repeat(obs_cells_rel, self.S, axis=0)
        row_cells[:, 0] += key.di
        row_cells[:, 1] += key.dj
        row_locals = np.tile(self.intra_locals, len(obs_cells_rel))
        col_cells = np.repeat(src_cells_rel, self.S, axis=0)
        col_locals = np.tile(self.intra_locals, len(src_cells_rel))
        return kernels.DisplacementOracle(
            self.spec, tpl.positions, tpl.pitch,
            row_cells, row_locals, col_cells, col_locals)

    def cell_pair(self, key):
        """Assemble the interaction of one observer cell with one source
        cell, descending the shared intra-unit cluster tree."""
        tpl = self.sites.template
        px, py = self.pitch
        shift = np.array([key.di * px, key.dj * py, 0.0])
        tree = build_block_tree_shifted(self.intra.root, self.intra.root,
                                        self.params, shift)
        leaves = []
        zero = np.zeros((1, 2), dtype=np.int64)
        obs_cell = np.array([[key.di, key.dj]], dtype=np.int64)
        for node in tree:
            t, s, kind = node
            oracle = kernels.DisplacementOracle(
                self.spec, tpl.positions, tpl.pitch,
                np.repeat(obs_cell, t.size, axis=0), self.intra_locals[t.start:t.stop],
                np.repeat(zero, s.size, axis=0), self.intra_locals[s.start:s.stop])
            rr, cr = (t.start, t.stop), (s.start, s.stop)
            if kind == LOWRANK:
                leaves.append(aca_approximate(oracle, self.params.aca_eps,
                                              self.params.aca_max_rank, rr, cr))
            else:
                leaves.append(assemble_dense(oracle, rr, cr))
        return CellPairBlock(leaves=leaves, shape=(self.S, self.S))


def build_block_tree_shifted(root_t, root_s, params, shift):
    """Leaf pairs of the block recursion where the row cluster's box is
    displaced by `shift`; returns (t, s, kind) in pre-order."""
    out = []

    def descend(t, s):
        if admissible_boxes(t.bbox_min + shift, t.bbox_max + shift,
                            s.bbox_min, s.bbox_max, params.eta):
            out.append((t, s, LOWRANK))
            return
        if t.is_leaf and s.is_leaf:
            out.append((t, s, DENSE))
            return
        for tc in (t.children or [t]):
            for sc in (s.children or [s]):
                descend(tc, sc)

    descend(root_t, root_s)
    return out


class VirtualHMatrix:
    """Globally shared matrix with translation-deduplicated blocks.

    The index space is a permutation of the global site indices: unit slots
    follow the object-tree leaf walk and sites within a unit follow the
    shared intra-unit cluster tree.  `perm[slot] = global index`.
    """

    def __init__(self, sites, spec, params, object_root, intra, pdict,
                 root_key, report):
        self.sites = sites
        self.spec = spec
        self.params = params
        self.object_root = object_root
        self.intra = intra
        self.pdict = pdict
        self.root_key = root_key
        self.report = report
        S = sites.S
        cells = object_root.cells
        unit_ids = cells[:, 0] * sites.layout.n + cells[:, 1]
        self.perm = (unit_ids[:, None] * S + intra.perm[None, :]).reshape(-1)
        self._plan = None

    @property
    def N(self):
        return self.sites.N

    @property
    def shape(self):
        return (self.N, self.N)

    def plan(self):
        """Flat leaf-application list (row_base, col_base, block), pre-order,
        references resolved to the shared arrays (no copies)."""
        if self._plan is None:
            out = []

            def walk(key, row_base, col_base):
                content = self.pdict[key]
                if isinstance(content, PatternSplit):
                    for ro, co, child in content.children:
                        walk(child, row_base + ro, col_base + co)
                elif isinstance(content, CellPairBlock):
                    for leaf in content.leaves:
                        out.append((row_base, col_base, leaf))
                else:
                    out.append((row_base, col_base, content))

            walk(self.root_key, 0, 0)
            self._plan = out
        return self._plan

    def matvec(self, x):
        x = np.asarray(x, dtype=complex)
        if x.shape != (self.N,):
            raise ValueError(f"expected vector of length {self.N}")
        xp = x[self.perm]
        yp = apply_plan(self.plan(), xp)
        y = np.empty_like(yp)
        y[self.perm] = yp
        return y

    def __matmul__(self, x):
        return self.matvec(x)


def apply_plan(plan, xp):
    yp = np.zeros_like(xp)
    for row_base, col_base, block in plan:
        r0, r1 = block.row_range
        c0, c1 = block.col_range
        xs = xp[col_base + c0:col_base + c1]
        if isinstance(block, LowRankBlock):
            yp[row_base + r0:row_base + r1] += block.u @ (block.v @ xs)
        else:
            yp[row_base + r0:row_base + r1] += block.values @ xs
    return yp


def assemble_virtual(sites, spec, params=None):
    """Assemble the shared-pattern matrix for an instantiated array.

    Returns a VirtualHMatrix; its `pdict` holds each distinct pattern once
    and its `report` carries per-level block and storage accounting,
    including what a separate (non-shared) assembly would have cost.
    """
    params = params or HParams()
    intra = build_cluster_tree(sites.template.positions, params.leafsize)
    object_root = build_object_tree(sites.layout)
    frame = _PatternFrame(sites, spec, params, intra)
    S = sites.S
    pdict = {}
    levels = {}
    cap_hits = [0]

    def stats(level):
        if level not in levels:
            levels[level] = LevelStats(level=level)
        return levels[level]

    def descend(obs, src, level):
        key = pattern_key(src, obs)
        st = stats(level)
        if key in pdict:
            st.first_walk_reuses += 1
            return key
        st.distinct_patterns += 1
        if frame.admissible_pair(key):
            oracle = frame.pattern_oracle(key, obs.cells - [obs.i0, obs.j0],
                                          src.cells - [src.i0, src.j0])
            content = aca_approximate(oracle, params.aca_eps, params.aca_max_rank)
            if content.rank_capped:
                cap_hits[0] += 1
            st.lowrank_scalars += content.scalar_count
            st.max_rank = max(st.max_rank, content.rank)
        elif obs.is_leaf and src.is_leaf:
            content = frame.cell_pair(key)
            st.lowrank_scalars += content.lowrank_scalars
            st.dense_scalars += content.dense_scalars
            st.max_rank = max(st.max_rank, content.max_rank)
        else:
            children = []
            for oc in (obs.children or [obs]):
                for sc in (src.children or [src]):
                    child = descend(oc, sc, level + 1)
                    children.append(((oc.slot - obs.slot) * S,
                                     (sc.slot - src.slot) * S, child))
            content = PatternSplit(children=children,
                                   shape=(obs.cell_count * S, src.cell_count * S))
        pdict[key] = content
        return key

    root_key = descend(object_root, object_root, 1)

    # Full-tree recount: how many blocks (and scalars) the same structure
    # costs without sharing.  References expand with multiplicity here.
    def recount(key, level):
        st = stats(level)
        st.classical_blocks += 1
        content = pdict[key]
        if isinstance(content, PatternSplit):
            for _ro, _co, child in content.children:
                recount(child, level + 1)
        elif isinstance(content, CellPairBlock):
            st.classical_lowrank_scalars += content.lowrank_scalars
            st.classical_dense_scalars += content.dense_scalars
        else:
            st.classical_lowrank_scalars += content.scalar_count

    recount(root_key, 1)
    report = StorageReport(
        N=sites.N,
        levels=[levels[k] for k in sorted(levels)],
        rank_cap_hits=cap_hits[0])
    return VirtualHMatrix(sites, spec, params, object_root, intra, pdict,
                          root_key, report)


def rebuild_virtual(sites, spec, params, pdict, root_key):
    """Wire a previously assembled pattern dictionary to fresh structure.

    Rebuilds the object and intra-unit trees (pure geometry, no kernel
    evaluation) and recomputes the storage report by walking the stored
    content.
    """
    params = params or HParams()
    intra = build_cluster_tree(sites.template.positions, params.leafsize)
    object_root = build_object_tree(sites.layout)
    levels = {}

    def stats(level):
        if level not in levels:
            levels[level] = LevelStats(level=level)
        return levels[level]

    seen = set()

    def walk_pruned(key, level):
        st = stats(level)
        if key in seen:
            st.first_walk_reuses += 1
            return
        seen.add(key)
        st.distinct_patterns += 1
        content = pdict[key]
        if isinstance(content, PatternSplit):
            for _ro, _co, child in content.children:
                walk_pruned(child, level + 1)
        elif isinstance(content, CellPairBlock):
            st.lowrank_scalars += content.lowrank_scalars
            st.dense_scalars += content.dense_scalars
            st.max_rank = max(st.max_rank, content.max_rank)
        else:
            st.lowrank_scalars += content.scalar_count
            st.max_rank = max(st.max_rank, content.rank)

    def recount(key, level):
        st = stats(level)
        st.classical_blocks += 1
        content = pdict[key]
        if isinstance(content, PatternSplit):
            for _ro, _co, child in content.children:
                recount(child, level + 1)
        elif isinstance(content, CellPairBlock):
            st.classical_lowrank_scalars += content.lowrank_scalars
            st.classical_dense_scalars += content.dense_scalars
        else:
            st.classical_lowrank_scalars += content.scalar_count

    walk_pruned(root_key, 1)
    recount(root_key, 1)
    report = StorageReport(N=sites.N, levels=[levels[k] for k in sorted(levels)])
    return VirtualHMatrix(sites, spec, params, object_root, intra, pdict,
                          root_key, report)


class ClassicalHMatrix:
    """Plain hierarchical matrix over all sites: same clustering, same
    admissibility, same compression, every block owned."""

    def __init__(self, sites, spec, params, tree, leaves, report):
        self.sites = sites
        self.spec = spec
        self.params = params
        self.tree = tree
        self.leaves = leaves          # blocks with ranges in permuted space
        self.report = report
        self.perm = tree.perm

    @property
    def N(self):
        return self.sites.N

    @property
    def shape(self):
        return (self.N, self.N)

    def plan(self):
        return [(0, 0, b) for b in self.leaves]

    def matvec(self, x):
        x = np.asarray(x, dtype=complex)
        if x.shape != (self.N,):
            raise ValueError(f"expected vector of length {self.N}")
        xp = x[self.perm]
        yp = apply_plan(self.plan(), xp)
        y = np.empty_like(yp)
        y[self.perm] = yp
        return y

    def __matmul__(self, x):
        return self.matvec(x)


def assemble_classical(sites, spec, params=None):
    """Reference assembly without pattern sharing."""
    params = params or HParams()
    tree = build_cluster_tree(sites.positions, params.leafsize)
    root = build_block_tree(tree.root, tree.root, params)
    levels = {}
    cap_hits = 0
    leaves = []
    for node in block_leaves(root):
        t, s = node.row, node.col
        rows = tree.perm[t.start:t.stop]
        cols = tree.perm[s.start:s.stop]
        oracle = kernels.oracle_for_sites(spec, sites, rows, cols)
        rr, cr = (t.start, t.stop), (s.start, s.stop)
        if node.kind == LOWRANK:
            block = aca_approximate(oracle, params.aca_eps, params.aca_max_rank, rr, cr)
            if block.rank_capped:
                cap_hits += 1
        else:
            block = assemble_dense(oracle, rr, cr)
        leaves.append(block)

    def walk(node):
        if node.level not in levels:
            levels[node.level] = LevelStats(level=node.level)
        levels[node.level].classical_blocks += 1
        levels[node.level].distinct_patterns += 1
        for c in node.children:
            walk(c)

    walk(root)
    for node, block in zip(block_leaves(root), leaves):
        st = levels[node.level]
        if isinstance(block, LowRankBlock):
            st.lowrank_scalars += block.scalar_count
            st.classical_lowrank_scalars += block.scalar_count
            st.max_rank = max(st.max_rank, block.rank)
        else:
            st.dense_scalars += block.scalar_count
            st.classical_dense_scalars += block.scalar_count

    report = StorageReport(N=sites.N,
                           levels=[levels[k] for k in sorted(levels)],
                           rank_cap_hits=cap_hits)
    return ClassicalHMatrix(sites, spec, params, tree, leaves, report)
